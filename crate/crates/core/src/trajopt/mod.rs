//! Finite-horizon trajectory optimization by multiple-shooting SQP.
//!
//! Dynamics defects are the only equality constraints of the QP subproblem,
//! which is solved exactly by Riccati recursion ([`riccati`]). Every
//! inequality (state/control boxes, safe-set membership) enters as an exact
//! L1 penalty; "hard" constraints just carry a large weight plus a
//! feasibility verdict. The penalty kinks are handled by a narrow Huber
//! band: violated constraints contribute their subgradient plus a
//! curvature term `w / max(c, band)` that pins the linearized constraint
//! onto its boundary, so active violations collapse geometrically well
//! below the feasibility tolerance. A backtracking line search on the L1
//! merit function globalizes the steps; `Rti` mode performs exactly one
//! SQP iteration for real-time use.

pub mod riccati;

pub use riccati::{riccati_qp, QpSolution, RiccatiError, StageQp, TerminalQp};

use crate::dynamics::{ControlVec, DynamicsError, ManipulatorModel, StateVec};
use crate::safeset::{SafeSetError, SafeSetModel, SafeSetPayload};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("QP failed after {retries} regularization retries: {reason}")]
    QpFailure { retries: usize, reason: String },
    #[error("non-finite iterate")]
    NonFinite,
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    SafeSet(#[from] SafeSetError),
}

/// One penalized set-membership entry of the constraint schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetConstraint {
    /// Stage index in `[1, N]`.
    pub stage: usize,
    pub weight: f64,
    /// Hard entries count toward the feasibility verdict.
    pub hard: bool,
}

/// Transcribed finite-horizon problem.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub horizon: usize,
    /// Running state weight (diagonal), applied as `(x - x_ref)' Q (x - x_ref)`.
    pub q_diag: DVector<f64>,
    pub r_diag: DVector<f64>,
    /// Terminal state weight (defaults to `q_diag`).
    pub qn_diag: DVector<f64>,
    pub x_ref: StateVec,
    pub x_init: StateVec,
    pub box_weight: f64,
    pub set_constraints: Vec<SetConstraint>,
    /// Adds the stop condition `x_N = x_{N-1}` as a weighted 2-norm penalty
    /// plus the tighter feasibility verdict of the stopping problem.
    pub equilibrium_terminal: bool,
    pub eq_weight: f64,
}

pub const BOX_WEIGHT: f64 = 1e6;
pub const HARD_SET_WEIGHT: f64 = 1e4;
pub const SOFT_TERMINAL_WEIGHT: f64 = 1e2;
pub const EQ_TERMINAL_WEIGHT: f64 = 1e6;

impl OcpSpec {
    /// Setpoint-tracking problem with box penalties only.
    pub fn tracking(
        model: &ManipulatorModel,
        horizon: usize,
        q_diag: DVector<f64>,
        r_diag: DVector<f64>,
        x_ref: StateVec,
        x_init: StateVec,
    ) -> Self {
        let qn = q_diag.clone();
        let _ = model;
        OcpSpec {
            horizon,
            q_diag,
            r_diag,
            qn_diag: qn,
            x_ref,
            x_init,
            box_weight: BOX_WEIGHT,
            set_constraints: Vec::new(),
            equilibrium_terminal: false,
            eq_weight: EQ_TERMINAL_WEIGHT,
        }
    }

    /// Stop-at-equilibrium problem over `nbar` steps: velocity-damping cost,
    /// box penalties, and the `x_N = x_{N-1}` terminal equality. The running
    /// cost only helps convergence; feasibility is what matters.
    pub fn abort(model: &ManipulatorModel, x_init: StateVec, nbar: usize) -> Self {
        let n = model.n_joints;
        let mut q = DVector::zeros(2 * n);
        let mut qn = DVector::zeros(2 * n);
        for j in 0..n {
            q[n + j] = 1.0;
            qn[n + j] = 10.0;
        }
        let x_ref = StateVec::from_parts(x_init.q().as_slice(), &vec![0.0; n]);
        OcpSpec {
            horizon: nbar,
            q_diag: q,
            r_diag: DVector::from_element(n, 1e-4),
            qn_diag: qn,
            x_ref,
            x_init,
            box_weight: BOX_WEIGHT,
            set_constraints: Vec::new(),
            equilibrium_terminal: true,
            eq_weight: EQ_TERMINAL_WEIGHT,
        }
    }

    pub fn validate(&self, model: &ManipulatorModel) -> Result<(), SolveError> {
        if self.horizon < 2 {
            return Err(SolveError::InvalidSpec("horizon must be >= 2".into()));
        }
        let nx = model.n_x();
        let nu = model.n_u();
        if self.q_diag.len() != nx || self.qn_diag.len() != nx || self.r_diag.len() != nu {
            return Err(SolveError::InvalidSpec("weight dimensions do not match model".into()));
        }
        if self.x_ref.len() != nx || self.x_init.len() != nx {
            return Err(SolveError::InvalidSpec("reference/initial state dimension mismatch".into()));
        }
        if !self.x_init.is_finite() {
            return Err(SolveError::InvalidSpec("x_init must be finite".into()));
        }
        if self.q_diag.iter().chain(self.r_diag.iter()).chain(self.qn_diag.iter()).any(|w| *w < 0.0)
            || self.box_weight < 0.0
            || self.eq_weight < 0.0
        {
            return Err(SolveError::InvalidSpec("weights must be nonnegative".into()));
        }
        for sc in &self.set_constraints {
            if sc.stage < 1 || sc.stage > self.horizon {
                return Err(SolveError::InvalidSpec(format!(
                    "set-constraint stage {} outside [1, {}]",
                    sc.stage, self.horizon
                )));
            }
            if sc.weight < 0.0 {
                return Err(SolveError::InvalidSpec("set-constraint weight must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// States `0..=N` and controls `0..N` of a shooting iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
}

impl Trajectory {
    pub fn constant(x: &StateVec, u: &ControlVec, horizon: usize) -> Self {
        Trajectory {
            states: vec![x.clone(); horizon + 1],
            controls: vec![u.clone(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.controls.len() + 1
    }

    /// Dynamically consistent stopping guess: clamped PD braking torque
    /// rolled out from `x`.
    pub fn braking(model: &ManipulatorModel, x: &StateVec, horizon: usize) -> Result<Self, DynamicsError> {
        let n = model.n_joints;
        let mut states = Vec::with_capacity(horizon + 1);
        let mut controls = Vec::with_capacity(horizon);
        let mut cur = x.clone();
        states.push(cur.clone());
        for _ in 0..horizon {
            let q = cur.q();
            let dq = cur.dq();
            let grav = model.gravity_torque(&q);
            let mut u = DVector::zeros(n);
            for j in 0..n {
                let kd = 2.0 * (u_over_v(model, j)).max(1.0);
                u[j] = (grav[j] - kd * dq[j]).clamp(-model.u_max[j], model.u_max[j]);
            }
            let u = ControlVec(u);
            cur = model.rk4_step(&cur, &u)?;
            controls.push(u);
            states.push(cur.clone());
        }
        Ok(Trajectory { states, controls })
    }
}

fn u_over_v(model: &ManipulatorModel, j: usize) -> f64 {
    model.u_max[j] / model.v_max[j]
}

/// Warm-start shift: drop stage 0, duplicate the last state and control.
pub fn shift_guess(prev: &Trajectory) -> Trajectory {
    let n = prev.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.extend(prev.states[1..].iter().cloned());
    states.push(prev.states[n].clone());
    controls.extend(prev.controls[1..].iter().cloned());
    controls.push(prev.controls[n - 1].clone());
    Trajectory { states, controls }
}

/// Membership value and violation of one scheduled set constraint.
#[derive(Clone, Copy, Debug)]
pub struct SetResidual {
    pub stage: usize,
    /// Left-hand side of the membership test at the stage state.
    pub value: f64,
    /// `max(0, -value)`.
    pub violation: f64,
    pub hard: bool,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub trajectory: Trajectory,
    /// Worst box / hard-set violation at or below `tol_feas`; the stopping
    /// problem additionally requires its equality residual and final speed.
    pub feasible: bool,
    /// Worst violation over box and hard-flagged set constraints.
    pub max_violation: f64,
    /// First-order residual: the larger of the unscaled QP step and the
    /// worst shooting defect.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Wall-clock seconds (measurement only, never branched on).
    pub solve_time: f64,
    /// Worst shooting defect of the returned iterate.
    pub defect_norm: f64,
    /// Tracking cost of the returned trajectory under the problem weights.
    pub cost: f64,
    pub set_residuals: Vec<SetResidual>,
    /// `||x_N - x_{N-1}||` when the equilibrium terminal is active.
    pub eq_residual: f64,
    /// Merit value of the initial point and of every accepted iterate.
    pub merit_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    /// Iterate to `tol_kkt` or `max_iters`.
    Full,
    /// Exactly one SQP iteration (real-time iteration).
    Rti,
}

#[derive(Clone, Copy, Debug)]
pub struct SqpOptions {
    pub tol_feas: f64,
    pub tol_kkt: f64,
    pub max_iters: usize,
    pub armijo: f64,
    pub backtrack: f64,
    /// Huber band around penalty kinks.
    pub band: f64,
    /// Base Hessian regularization added per retry.
    pub reg_init: f64,
    pub max_reg_retries: usize,
    /// L1 merit weight on the shooting defects.
    pub sigma: f64,
    /// Equality residual bound for the stopping problem's verdict.
    pub tol_eq: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions {
            tol_feas: 1e-4,
            tol_kkt: 1e-6,
            max_iters: 50,
            armijo: 1e-4,
            backtrack: 0.5,
            band: 1e-6,
            reg_init: 1e-6,
            max_reg_retries: 5,
            sigma: 1e6,
            tol_eq: 1e-6,
        }
    }
}

enum HingeBlock {
    State(usize),
    Control(usize),
}

/// One linearized scalar inequality `c + a' dz <= 0` with weight `w`.
struct Hinge {
    block: HingeBlock,
    a: DVector<f64>,
    c: f64,
    w: f64,
}

struct EqPenalty {
    r: DVector<f64>,
    jx: DMatrix<f64>,
    ju: DMatrix<f64>,
    w: f64,
}

struct Linearization {
    stages: Vec<StageQp>,
    terminal: TerminalQp,
    cost_gx: Vec<DVector<f64>>,
    cost_gu: Vec<DVector<f64>>,
    hinges: Vec<Hinge>,
    eq: Option<EqPenalty>,
    defect_inf: f64,
}

/// Multiple-shooting SQP solver bound to one model.
///
/// A solver instance is single-caller; distinct instances over shared
/// immutable models may run fully in parallel.
#[derive(Clone, Debug)]
pub struct SqpSolver {
    pub model: ManipulatorModel,
    pub opts: SqpOptions,
}

impl SqpSolver {
    pub fn new(model: ManipulatorModel) -> Self {
        SqpSolver { model, opts: SqpOptions::default() }
    }

    pub fn with_options(model: ManipulatorModel, opts: SqpOptions) -> Self {
        SqpSolver { model, opts }
    }

    /// Solves the transcribed problem from `guess`, warm-startable.
    pub fn solve(
        &mut self,
        ss: Option<&SafeSetModel>,
        spec: &OcpSpec,
        guess: &Trajectory,
        mode: SolveMode,
    ) -> Result<SolveOutput, SolveError> {
        let start = std::time::Instant::now();
        spec.validate(&self.model)?;
        if !spec.set_constraints.is_empty() && ss.is_none() {
            return Err(SolveError::InvalidSpec(
                "set constraints scheduled but no safe set supplied".into(),
            ));
        }
        let n = spec.horizon;
        if guess.horizon() != n || !guess.is_consistent() {
            return Err(SolveError::InvalidSpec("guess horizon mismatch".into()));
        }

        let mut z = guess.clone();
        z.states[0] = spec.x_init.clone();
        if z.states.iter().any(|s| !s.is_finite()) || z.controls.iter().any(|u| !u.is_finite()) {
            return Err(SolveError::NonFinite);
        }

        let mut merit_trace = Vec::with_capacity(self.opts.max_iters + 1);
        let mut merit_cur = self.merit(ss, spec, &z)?;
        merit_trace.push(merit_cur);

        let mut iterations = 0;
        let mut kkt_residual = f64::INFINITY;
        let max_iters = match mode {
            SolveMode::Full => self.opts.max_iters,
            SolveMode::Rti => 1,
        };

        for _ in 0..max_iters {
            let lin = self.linearize(ss, spec, &z)?;
            let step = self.solve_qp_regularized(&lin)?;
            kkt_residual = step.max_step().max(lin.defect_inf);
            if kkt_residual <= self.opts.tol_kkt {
                break;
            }

            let dird = directional_derivative(&lin, &step, self.opts.sigma);
            if dird >= -1e-14 * (1.0 + merit_cur.abs()) {
                break; // no descent available: return the current iterate
            }

            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1e-12 {
                let trial = apply_step(&z, &step, alpha);
                let m = self.merit(ss, spec, &trial);
                if let Ok(m) = m {
                    if m.is_finite() && m <= merit_cur + self.opts.armijo * alpha * dird {
                        z = trial;
                        merit_cur = m;
                        accepted = true;
                        break;
                    }
                }
                alpha *= self.opts.backtrack;
            }
            if !accepted {
                break; // line-search stall: report the best iterate honestly
            }
            iterations += 1;
            merit_trace.push(merit_cur);
        }

        let mut out = self.evaluate(ss, spec, z)?;
        out.kkt_residual = kkt_residual;
        out.iterations = iterations;
        out.merit_trace = merit_trace;
        out.solve_time = start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Stop-at-equilibrium solve (unit-B problem) over `nbar` steps.
    pub fn solve_abort(&mut self, x_init: &StateVec, nbar: usize) -> Result<SolveOutput, SolveError> {
        let spec = OcpSpec::abort(&self.model, x_init.clone(), nbar);
        let guess = Trajectory::braking(&self.model, x_init, nbar)?;
        self.solve(None, &spec, &guess, SolveMode::Full)
    }

    fn solve_qp_regularized(&self, lin: &Linearization) -> Result<QpSolution, SolveError> {
        let nx = self.model.n_x();
        let dx0 = DVector::zeros(nx);
        let mut reg = 0.0;
        let mut last_err = String::new();
        for retry in 0..=self.opts.max_reg_retries {
            let result = if reg == 0.0 {
                riccati_qp(&lin.stages, &lin.terminal, &dx0)
            } else {
                let stages: Vec<StageQp> = lin
                    .stages
                    .iter()
                    .map(|st| {
                        let mut st = st.clone();
                        for d in 0..st.q.nrows() {
                            st.q[(d, d)] += reg;
                        }
                        for d in 0..st.r.nrows() {
                            st.r[(d, d)] += reg;
                        }
                        st
                    })
                    .collect();
                let mut terminal = lin.terminal.clone();
                for d in 0..terminal.q.nrows() {
                    terminal.q[(d, d)] += reg;
                }
                riccati_qp(&stages, &terminal, &dx0)
            };
            match result {
                Ok(sol) if sol.is_finite() => return Ok(sol),
                Ok(_) => last_err = "non-finite QP step".into(),
                Err(e) => last_err = e.to_string(),
            }
            reg = if reg == 0.0 { self.opts.reg_init } else { reg * 10.0 };
            let _ = retry;
        }
        Err(SolveError::QpFailure { retries: self.opts.max_reg_retries, reason: last_err })
    }

    /// Stage data, cost gradients, and penalty terms at the iterate.
    fn linearize(
        &self,
        ss: Option<&SafeSetModel>,
        spec: &OcpSpec,
        z: &Trajectory,
    ) -> Result<Linearization, SolveError> {
        let n = spec.horizon;
        let nx = self.model.n_x();
        let nu = self.model.n_u();
        let nj = self.model.n_joints;
        let band = self.opts.band;

        let mut stages = Vec::with_capacity(n);
        let mut cost_gx = Vec::with_capacity(n + 1);
        let mut cost_gu = Vec::with_capacity(n);
        let mut hinges = Vec::new();
        let mut defect_inf: f64 = 0.0;

        // Hessian/gradient accumulators per stage; terminal handled after.
        let mut fs = Vec::with_capacity(n);
        for i in 0..n {
            let f = self.model.rk4_step(&z.states[i], &z.controls[i])?;
            defect_inf = defect_inf.max((&f.0 - &z.states[i + 1].0).amax());
            fs.push(f);
        }

        let mut eq = None;

        for i in 0..n {
            let (a, b) = self.model.discrete_jacobians(&z.states[i], &z.controls[i])?;
            let d = &fs[i].0 - &z.states[i + 1].0;

            // Gauss-Newton cost terms.
            let mut q = DMatrix::zeros(nx, nx);
            let mut gx = DVector::zeros(nx);
            let mut r = DMatrix::zeros(nu, nu);
            let mut gu = DVector::zeros(nu);
            let s = DMatrix::zeros(nx, nu);
            let dx_ref = &z.states[i].0 - &spec.x_ref.0;
            for dcol in 0..nx {
                q[(dcol, dcol)] = 2.0 * spec.q_diag[dcol];
                gx[dcol] = 2.0 * spec.q_diag[dcol] * dx_ref[dcol];
            }
            for dcol in 0..nu {
                r[(dcol, dcol)] = 2.0 * spec.r_diag[dcol];
                gu[dcol] = 2.0 * spec.r_diag[dcol] * z.controls[i][dcol];
            }
            cost_gx.push(gx.clone());
            cost_gu.push(gu.clone());

            let mut stage = StageQp { a, b, d, q, r, s, gx, gu };

            // Box penalties: states at stages 1..N-1 handled here on x_i
            // (stage 0 is pinned); controls at 0..N-1.
            if i >= 1 {
                box_hinges_state(&self.model, &z.states[i], i, spec.box_weight, &mut hinges);
            }
            box_hinges_control(&self.model, &z.controls[i], i, spec.box_weight, &mut hinges);

            // Scheduled set constraints at interior stages.
            if let Some(ss) = ss {
                for sc in spec.set_constraints.iter().filter(|sc| sc.stage == i && sc.stage >= 1) {
                    hinges.push(set_hinge(ss, &z.states[i], i, sc.weight)?);
                }
            }

            // Equilibrium terminal attaches to stage N-1 through the
            // residual f(x_{N-1}, u_{N-1}) - x_{N-1}.
            if spec.equilibrium_terminal && i == n - 1 {
                let r_vec = &fs[i].0 - &z.states[i].0;
                let jx = &stage.a - DMatrix::<f64>::identity(nx, nx);
                let ju = stage.b.clone();
                let w = spec.eq_weight;
                let nrm = r_vec.norm();
                let denom = nrm.max(band);
                let rhat = &r_vec / denom;
                stage.gx += w * jx.transpose() * &rhat;
                stage.gu += w * ju.transpose() * &rhat;
                let rho = w / denom;
                stage.q += rho * jx.transpose() * &jx;
                stage.r += rho * ju.transpose() * &ju;
                stage.s += rho * jx.transpose() * &ju;
                eq = Some(EqPenalty { r: r_vec, jx, ju, w });
            }

            stages.push(stage);
        }

        // Terminal block.
        let mut qn = DMatrix::zeros(nx, nx);
        let mut gn = DVector::zeros(nx);
        let dx_ref = &z.states[n].0 - &spec.x_ref.0;
        for dcol in 0..nx {
            qn[(dcol, dcol)] = 2.0 * spec.qn_diag[dcol];
            gn[dcol] = 2.0 * spec.qn_diag[dcol] * dx_ref[dcol];
        }
        cost_gx.push(gn.clone());
        box_hinges_state(&self.model, &z.states[n], n, spec.box_weight, &mut hinges);
        if let Some(ss) = ss {
            for sc in spec.set_constraints.iter().filter(|sc| sc.stage == n) {
                hinges.push(set_hinge(ss, &z.states[n], n, sc.weight)?);
            }
        }
        let mut terminal = TerminalQp { q: qn, gx: gn };

        // Fold hinge contributions into the stage Hessians/gradients.
        for h in &hinges {
            let (grad_scale, curv) = hinge_terms(h.c, h.w, band);
            match h.block {
                HingeBlock::State(i) => {
                    let (qm, gv) = if i == n {
                        (&mut terminal.q, &mut terminal.gx)
                    } else {
                        let st = &mut stages[i];
                        (&mut st.q, &mut st.gx)
                    };
                    if grad_scale != 0.0 {
                        *gv += grad_scale * &h.a;
                    }
                    if curv != 0.0 {
                        *qm += curv * &h.a * h.a.transpose();
                    }
                }
                HingeBlock::Control(i) => {
                    let st = &mut stages[i];
                    if grad_scale != 0.0 {
                        st.gu += grad_scale * &h.a;
                    }
                    if curv != 0.0 {
                        st.r += curv * &h.a * h.a.transpose();
                    }
                }
            }
        }
        let _ = nj;

        Ok(Linearization { stages, terminal, cost_gx, cost_gu, hinges, eq, defect_inf })
    }

    /// L1 merit: cost + weighted violations + sigma * defect L1 norms.
    fn merit(&self, ss: Option<&SafeSetModel>, spec: &OcpSpec, z: &Trajectory) -> Result<f64, SolveError> {
        let n = spec.horizon;
        let mut m = tracking_cost(spec, z);
        for i in 1..=n {
            m += spec.box_weight * box_violation_state(&self.model, &z.states[i]);
        }
        for i in 0..n {
            m += spec.box_weight * box_violation_control(&self.model, &z.controls[i]);
        }
        if let Some(ss) = ss {
            for sc in &spec.set_constraints {
                let value = membership_clamped(ss, &z.states[sc.stage])?;
                m += sc.weight * (-value).max(0.0);
            }
        }
        let mut fs_last: Option<StateVec> = None;
        for i in 0..n {
            let f = self.model.rk4_step(&z.states[i], &z.controls[i])?;
            let d = &f.0 - &z.states[i + 1].0;
            m += self.opts.sigma * d.iter().map(|v| v.abs()).sum::<f64>();
            if i == n - 1 {
                fs_last = Some(f);
            }
        }
        if spec.equilibrium_terminal {
            let f = fs_last.expect("horizon >= 1");
            m += spec.eq_weight * (&f.0 - &z.states[n - 1].0).norm();
        }
        if !m.is_finite() {
            return Err(SolveError::NonFinite);
        }
        Ok(m)
    }

    /// Violation accounting and verdicts for a final iterate.
    fn evaluate(
        &self,
        ss: Option<&SafeSetModel>,
        spec: &OcpSpec,
        z: Trajectory,
    ) -> Result<SolveOutput, SolveError> {
        let n = spec.horizon;
        let mut max_violation: f64 = 0.0;
        for i in 1..=n {
            max_violation = max_violation.max(box_violation_state(&self.model, &z.states[i]));
        }
        for i in 0..n {
            max_violation = max_violation.max(box_violation_control(&self.model, &z.controls[i]));
        }
        let mut set_residuals = Vec::with_capacity(spec.set_constraints.len());
        if let Some(ss) = ss {
            for sc in &spec.set_constraints {
                let value = membership_clamped(ss, &z.states[sc.stage])?;
                let violation = (-value).max(0.0);
                if sc.hard {
                    max_violation = max_violation.max(violation);
                }
                set_residuals.push(SetResidual { stage: sc.stage, value, violation, hard: sc.hard });
            }
        }
        let mut defect_norm: f64 = 0.0;
        for i in 0..n {
            let f = self.model.rk4_step(&z.states[i], &z.controls[i])?;
            defect_norm = defect_norm.max((&f.0 - &z.states[i + 1].0).amax());
        }
        let eq_residual = if spec.equilibrium_terminal {
            (&z.states[n].0 - &z.states[n - 1].0).norm()
        } else {
            0.0
        };
        let mut feasible = max_violation <= self.opts.tol_feas;
        if spec.equilibrium_terminal {
            feasible = feasible
                && eq_residual <= self.opts.tol_eq
                && z.states[n].speed() <= self.opts.tol_feas;
        }
        let cost = tracking_cost(spec, &z);
        Ok(SolveOutput {
            trajectory: z,
            feasible,
            max_violation,
            kkt_residual: 0.0,
            iterations: 0,
            solve_time: 0.0,
            defect_norm,
            cost,
            set_residuals,
            eq_residual,
            merit_trace: Vec::new(),
        })
    }
}

/// Sum of stage and terminal tracking costs over a trajectory.
pub fn tracking_cost(spec: &OcpSpec, z: &Trajectory) -> f64 {
    let n = spec.horizon;
    let mut cost = 0.0;
    for i in 0..n {
        let dx = &z.states[i].0 - &spec.x_ref.0;
        for d in 0..dx.len() {
            cost += spec.q_diag[d] * dx[d] * dx[d];
        }
        for d in 0..z.controls[i].len() {
            cost += spec.r_diag[d] * z.controls[i][d] * z.controls[i][d];
        }
    }
    let dx = &z.states[n].0 - &spec.x_ref.0;
    for d in 0..dx.len() {
        cost += spec.qn_diag[d] * dx[d] * dx[d];
    }
    cost
}

/// Gradient scale and curvature of one hinge under the Huber band.
fn hinge_terms(c: f64, w: f64, band: f64) -> (f64, f64) {
    if c > 0.0 {
        let scale = if c >= band { w } else { w * c / band };
        (scale, w / c.max(band))
    } else if c > -band {
        (0.0, w / band)
    } else {
        (0.0, 0.0)
    }
}

fn box_hinges_state(model: &ManipulatorModel, x: &StateVec, stage: usize, w: f64, out: &mut Vec<Hinge>) {
    let n = model.n_joints;
    let nx = 2 * n;
    for j in 0..n {
        for (c, dim, sign) in [
            (x[j] - model.q_max[j], j, 1.0),
            (model.q_min[j] - x[j], j, -1.0),
            (x[n + j] - model.v_max[j], n + j, 1.0),
            (-model.v_max[j] - x[n + j], n + j, -1.0),
        ] {
            if c > -BOX_ACTIVE_BAND {
                let mut a = DVector::zeros(nx);
                a[dim] = sign;
                out.push(Hinge { block: HingeBlock::State(stage), a, c, w });
            }
        }
    }
}

fn box_hinges_control(model: &ManipulatorModel, u: &ControlVec, stage: usize, w: f64, out: &mut Vec<Hinge>) {
    let n = model.n_u();
    for j in 0..n {
        for (c, sign) in [(u[j] - model.u_max[j], 1.0), (-model.u_max[j] - u[j], -1.0)] {
            if c > -BOX_ACTIVE_BAND {
                let mut a = DVector::zeros(n);
                a[j] = sign;
                out.push(Hinge { block: HingeBlock::Control(stage), a, c, w });
            }
        }
    }
}

/// Hinges further than this inside their bound contribute nothing and are
/// skipped during assembly (pure bookkeeping cutoff; the merit still sees
/// every violation exactly).
const BOX_ACTIVE_BAND: f64 = 1e-6;

fn set_hinge(ss: &SafeSetModel, x: &StateVec, stage: usize, w: f64) -> Result<Hinge, SolveError> {
    let value = membership_clamped(ss, x)?;
    let grad = membership_gradient_clamped(ss, x)?;
    Ok(Hinge { block: HingeBlock::State(stage), a: -grad, c: -value, w })
}

/// Membership value with the position clamped into the grid domain, so the
/// solver can evaluate transient iterates that wander outside the box (the
/// box penalties already charge them).
pub fn membership_clamped(ss: &SafeSetModel, x: &StateVec) -> Result<f64, SafeSetError> {
    let (value, _) = ss.eval_membership(&clamp_state(ss, x))?;
    Ok(value)
}

fn membership_gradient_clamped(ss: &SafeSetModel, x: &StateVec) -> Result<DVector<f64>, SafeSetError> {
    ss.membership_gradient(&clamp_state(ss, x))
}

fn clamp_state(ss: &SafeSetModel, x: &StateVec) -> StateVec {
    match &ss.payload {
        SafeSetPayload::Mlp(_) => x.clone(),
        SafeSetPayload::Grid(g) => {
            let n = x.n_joints();
            let mut v = x.0.clone();
            for (j, axis) in g.axes.iter().enumerate().take(n) {
                v[j] = v[j].clamp(axis[0], *axis.last().unwrap());
            }
            StateVec(v)
        }
    }
}

fn box_violation_state(model: &ManipulatorModel, x: &StateVec) -> f64 {
    model.state_box_violation(x).max(0.0)
}

fn box_violation_control(model: &ManipulatorModel, u: &ControlVec) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..u.len() {
        worst = worst.max(u[j].abs() - model.u_max[j]);
    }
    worst.max(0.0)
}

fn apply_step(z: &Trajectory, step: &QpSolution, alpha: f64) -> Trajectory {
    let mut out = z.clone();
    for (i, dx) in step.dx.iter().enumerate() {
        out.states[i].0 += alpha * dx;
    }
    for (i, du) in step.du.iter().enumerate() {
        out.controls[i].0 += alpha * du;
    }
    out
}

/// Directional derivative of the piecewise-linear merit model along the QP
/// step (cost gradient, hinge kinks at the linearized endpoint, equality
/// 2-norm, and full defect reduction).
fn directional_derivative(lin: &Linearization, step: &QpSolution, sigma: f64) -> f64 {
    let n = lin.stages.len();
    let mut d = 0.0;
    for i in 0..n {
        d += lin.cost_gx[i].dot(&step.dx[i]);
        d += lin.cost_gu[i].dot(&step.du[i]);
    }
    d += lin.cost_gx[n].dot(&step.dx[n]);
    for h in &lin.hinges {
        let adz = match h.block {
            HingeBlock::State(i) => h.a.dot(&step.dx[i]),
            HingeBlock::Control(i) => h.a.dot(&step.du[i]),
        };
        d += h.w * ((h.c + adz).max(0.0) - h.c.max(0.0));
    }
    if let Some(eq) = &lin.eq {
        let lin_r = &eq.r + &eq.jx * &step.dx[n - 1] + &eq.ju * &step.du[n - 1];
        d += eq.w * (lin_r.norm() - eq.r.norm());
    }
    for st in &lin.stages {
        d -= sigma * st.d.iter().map(|v| v.abs()).sum::<f64>();
    }
    d
}

/// Renders a trajectory as CSV with header `t,q1..qn,dq1..dqn,u1..un`.
/// The final row repeats the last control.
pub fn trajectory_csv(traj: &Trajectory, dt: f64) -> String {
    let n_joints = traj.states[0].n_joints();
    let mut out = String::from("t");
    for j in 1..=n_joints {
        out.push_str(&format!(",q{j}"));
    }
    for j in 1..=n_joints {
        out.push_str(&format!(",dq{j}"));
    }
    for j in 1..=n_joints {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for (i, x) in traj.states.iter().enumerate() {
        let u = &traj.controls[i.min(traj.controls.len() - 1)];
        out.push_str(&format!("{:.6}", i as f64 * dt));
        for v in x.0.iter() {
            out.push_str(&format!(",{v:.9}"));
        }
        for v in u.0.iter() {
            out.push_str(&format!(",{v:.9}"));
        }
        out.push('\n');
    }
    out
}
