//! Verify analytic gradients against central finite differences for a
//! full MIL forward + loss composition.

use mil::graph::grad_check;
use mil::head::{forward, HeadParams, MilConfig, MilOrdering, Pooling};
use mil::loss::{weighted_ce, ClassWeights};
use mil::rng::RandomStream;

fn main() -> mil::Result<()> {
    let mut rng = RandomStream::new(7);
    for ordering in [MilOrdering::I1, MilOrdering::I2, MilOrdering::E] {
        for pooling in [Pooling::Max, Pooling::Topk, Pooling::Average] {
            let config = MilConfig {
                ordering,
                pooling,
                k_fraction: 0.4,
                classes: 3,
                embed_dim: 6,
            };
            let z = rng.uniform_tensor(-1.0, 1.0, &[10, 6])?;
            let head = HeadParams::init(&config, &mut rng)?;
            let weights = ClassWeights::uniform(3);
            let cfg = config.clone();
            let err = grad_check(
                move |g, vars| {
                    let (probs, _, _) = forward(g, vars[1], vars[0], vars[2], &cfg)?;
                    weighted_ce(g, probs, 1, &weights, cfg.classes)
                },
                &[head.w, z, head.b],
                1e-5,
            )?;
            println!("{ordering:?} / {pooling:?}: max relative error {err:.3e}");
            assert!(err <= 1e-6);
        }
    }
    Ok(())
}
