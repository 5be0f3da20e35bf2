//! Export per-patch explanation maps for a trained model: the class
//! probability map and the gradient-norm map, as PGM and CSV, with the
//! selected patches against the ground-truth key mask.

use mil::dataio::{generate, split, Mode, SyntheticSpec};
use mil::explain::{export_heatmap, grad_map, prob_map, ExportFormat};
use mil::head::{MilConfig, MilOrdering, Pooling};
use mil::rng::RandomStream;
use mil::train::{fit, predict_bag, TrainConfig, TrainMode};

fn main() -> mil::Result<()> {
    let spec = SyntheticSpec {
        mode: Mode::Embeddings,
        classes: 3,
        dim: Some(16),
        patch: None,
        grid: None,
        bags: 400,
        instances: 49, // 7x7 patch grid
        key_min: 5,
        key_max: 12,
        separation: 10.0,
        noise_sigma: 1.0,
        background_sigma: 1.0,
        seed: 42,
    };
    let dataset = generate(&spec, &mut RandomStream::new(spec.seed))?;
    let (train_set, val_set) = split(&dataset, 0.75, &mut RandomStream::new(1))?;
    let mil = MilConfig {
        ordering: MilOrdering::I2,
        pooling: Pooling::Max,
        k_fraction: 0.25,
        classes: 3,
        embed_dim: 16,
    };
    let tc = TrainConfig {
        learning_rate: 1e-2,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        epochs: 10,
        seed: 99,
        mode: TrainMode::Bags,
    };
    let (model, _) = fit(&train_set, &val_set, &mil, &tc, None)?;

    let bag = &val_set.bags[0];
    let pred = predict_bag(&model, bag)?;
    println!("bag {}: true label {}, predicted {}", bag.id, bag.label, pred.label);
    println!(
        "selected patch for class {}: {:?} (keys at {:?})",
        bag.label,
        pred.selected[bag.label],
        (0..bag.key_mask.len()).filter(|&j| bag.key_mask[j]).collect::<Vec<_>>()
    );

    let out = std::env::temp_dir().join("mil-heatmaps");
    std::fs::create_dir_all(&out)?;
    let prob = prob_map(&model, bag, bag.label)?;
    export_heatmap(&prob, &out.join("prob.pgm"), ExportFormat::Pgm)?;
    export_heatmap(&prob, &out.join("prob.csv"), ExportFormat::Csv)?;
    let grad = grad_map(&model, bag, bag.label)?;
    export_heatmap(&grad, &out.join("grad.pgm"), ExportFormat::Pgm)?;
    export_heatmap(&grad, &out.join("grad.csv"), ExportFormat::Csv)?;
    println!("wrote prob/grad maps (PGM + CSV + JSON sidecars) to {}", out.display());
    Ok(())
}
