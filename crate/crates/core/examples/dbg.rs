use nalgebra::DVector;
use safempc_core::dynamics::{ControlVec, ManipulatorModel, StateVec};
use safempc_core::trajopt::{OcpSpec, SolveMode, SqpSolver, Trajectory};

fn main() {
    let model = ManipulatorModel::double_integrator();
    let x0 = StateVec::from_parts(&[-0.5], &[0.0]);
    let xref = StateVec::from_parts(&[0.5], &[0.0]);
    let spec = OcpSpec::tracking(
        &model,
        40,
        DVector::from_vec(vec![500.0, 1e-4]),
        DVector::from_element(1, 1e-4),
        xref,
        x0.clone(),
    );
    let mut solver = SqpSolver::new(model);
    let guess = Trajectory::constant(&x0, &ControlVec::zeros(1), 40);
    let out = solver.solve(None, &spec, &guess, SolveMode::Full).unwrap();
    println!("feasible {} iters {} kkt {:.3e} viol {:.3e} defect {:.3e}",
        out.feasible, out.iterations, out.kkt_residual, out.max_violation, out.defect_norm);
    println!("merit trace: {:?}", &out.merit_trace[..out.merit_trace.len().min(8)]);
    println!("x_N = {:?}", out.trajectory.states[40].0.as_slice());
    println!("u_0 = {:?}", out.trajectory.controls[0].0.as_slice());
    println!("u_max = 1.0");
}
