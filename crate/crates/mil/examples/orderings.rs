//! The three orderings of {project, pool, activate} disagree in general.
//! This prints bag probabilities for each ordering on the same input, then
//! reproduces the average-pooling case where I-1 and I-2 decide differently.

use mil::head::{predict, HeadParams, MilConfig, MilOrdering, Pooling};
use mil::rng::RandomStream;
use mil::tensor::Tensor;

fn main() -> mil::Result<()> {
    let mut rng = RandomStream::new(11);
    let base = MilConfig {
        ordering: MilOrdering::I1,
        pooling: Pooling::Topk,
        k_fraction: 0.25,
        classes: 3,
        embed_dim: 5,
    };
    let z = rng.uniform_tensor(-2.0, 2.0, &[12, 5])?;
    let head = HeadParams::init(&base, &mut rng)?;
    for ordering in [MilOrdering::I1, MilOrdering::I2, MilOrdering::E] {
        let config = MilConfig { ordering, ..base.clone() };
        let p = predict(&z, &head, &config)?;
        println!(
            "{ordering:?}: probs {:?} -> label {} (k = {})",
            p.probs.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            p.label,
            p.k_used
        );
    }

    // One extreme patch, average pooling: averaging probabilities (I-1) and
    // averaging logits (I-2) land on opposite sides of the 0.5 threshold.
    let bag = Tensor::new(vec![4, 1], vec![100.0, -1.0, -1.0, -1.0])?;
    let identity = HeadParams {
        w: Tensor::matrix(&[vec![1.0]])?,
        b: Tensor::vector(vec![0.0]),
    };
    let binary_avg = MilConfig {
        ordering: MilOrdering::I1,
        pooling: Pooling::Average,
        k_fraction: 1.0,
        classes: 1,
        embed_dim: 1,
    };
    let i1 = predict(&bag, &identity, &binary_avg)?;
    let i2 = predict(
        &bag,
        &identity,
        &MilConfig { ordering: MilOrdering::I2, ..binary_avg },
    )?;
    println!("average-pooling counterexample on logits [100, -1, -1, -1]:");
    println!("  I-1 p = {:.5} -> label {}", i1.probs[0], i1.label);
    println!("  I-2 p = {:.5} -> label {}", i2.probs[0], i2.label);
    Ok(())
}
