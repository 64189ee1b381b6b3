//! Runs the refinement network on a hand-made attention map: one head
//! sweeps left to right across a 2x4 grid, and the refinement term grows on
//! the cells that were already visited.

use comer::attention::{phi, ArmConfig, ArmParams};
use comer::rng::rng_for;
use comer::tensor::{Graph, ParamStore, Tensor};

fn main() -> comer::Result<()> {
    let (h_o, w_o, steps) = (2, 4, 4);
    let cells = h_o * w_o;
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_for(1, "example");
    let arm = ArmParams::new(&mut store, "arm", ArmConfig { kernel: 3, channels: 4 }, 1, 1, &mut rng)?;
    // A positive projection makes R increase with coverage.
    let proj = store.get_mut(arm.proj);
    proj.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let kernel = store.get_mut(arm.kernel);
    kernel.data_mut().iter_mut().for_each(|v| *v = v.abs());

    // Step t attends to column t of both rows.
    let mut a = vec![0.0; steps * cells];
    for t in 0..steps {
        for x in 0..h_o {
            a[t * cells + x * w_o + t] = 0.5;
        }
    }
    let mut g = Graph::eval();
    let a_in = g.constant(&Tensor::new(vec![1, steps, cells, 1], a)?);
    let trace = phi(&mut g, &store, &arm, a_in, h_o, w_o)?;
    let r = g.value(trace.refinement);
    for t in 0..steps {
        println!("step {t}");
        for x in 0..h_o {
            let row: Vec<String> = (0..w_o).map(|y| format!("{:6.3}", r[t * cells + x * w_o + y])).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
