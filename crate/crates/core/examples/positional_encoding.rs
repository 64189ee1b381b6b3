//! Word and image sinusoidal encodings.

use comer::posenc::{image_pe, word_pe};

fn main() -> comer::Result<()> {
    for p in [0.0, 1.0, 2.5] {
        let v = word_pe(p, 8)?;
        println!("word_pe({p}) = {:?}", v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    }

    // Grid coordinates are normalized, so a 3x12 map and a 6x24 map agree
    // at the same relative position.
    let small = image_pe::<f64>(3, 12, 16)?;
    let large = image_pe::<f64>(6, 24, 16)?;
    let cell = |t: &comer::tensor::Tensor<f64>, w: usize, x: usize, y: usize| t.data()[(x * w + y) * 16..(x * w + y + 1) * 16].to_vec();
    let a = cell(&small, 12, 1, 4);
    let b = cell(&large, 24, 2, 8);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("3x12 cell (1,4) vs 6x24 cell (2,8): max difference {diff:.1e}");
    Ok(())
}
