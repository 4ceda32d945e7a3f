use safempc_core::dynamics::ManipulatorModel;
use safempc_core::safeset::compute_kernel;

fn main() {
    let mut m = ManipulatorModel::double_integrator();
    m.v_max = vec![2.5];
    match compute_kernel(&m, [101, 101], 20_000) {
        Ok(k) => {
            println!("iters {} viable {}/{}", k.iterations, k.viable_count(), k.viable.len());
            // print a few rows
            let rv = k.v_axis.len();
            for iv in [rv/2, rv/2+10, rv/2+20, rv-1] {
                let row: usize = (0..k.q_axis.len()).filter(|&iq| k.node_viable(iq, iv)).count();
                println!("v={:+.3}: viable q nodes {}", k.v_axis[iv], row);
            }
        }
        Err(e) => println!("error: {e}"),
    }
}
