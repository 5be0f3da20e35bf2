//! Command-line orchestration: `gen-data`, `train`, `eval`, `explain`, and
//! `selftest` subcommands over a JSON run configuration.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config), 2
//! runtime failure. Diagnostics go to stderr; machine-readable output goes to
//! files or stdout as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::explain::{self, ExportFormat};
use crate::graph::grad_check;
use crate::head::{self, forward, predict, HeadParams, MilConfig, MilOrdering, Pooling};
use crate::loss::{weighted_ce, ClassWeights};
use crate::metrics::metrics_json;
use crate::rng::RandomStream;
use crate::tensor::Tensor;
use crate::train::{self, epoch_log_jsonl, TrainConfig};

const USAGE: &str = "\
usage: mil <subcommand> [flags]

subcommands:
  gen-data --config FILE --out DIR [--seed N]   generate a synthetic dataset
  train    --config FILE --out DIR [--seed N]   train a model end to end
  eval     --checkpoint FILE --data DIR --out FILE
  explain  --checkpoint FILE --data DIR --bag ID --class K --out DIR
  selftest                                      run built-in property checks
";

/// Run configuration. `data` is either an inline synthetic spec or a
/// `{\"path\": ...}` pointer to a saved dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
}

fn default_split_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSection {
    Path { path: PathBuf },
    Spec(SyntheticSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mil: MilConfig,
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
}

pub fn run(argv: &[String]) -> i32 {
    match dispatch(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

struct Flags {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    bag: Option<String>,
    class: Option<usize>,
    seed: Option<u64>,
}

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut flags = Flags {
        config: None,
        out: None,
        checkpoint: None,
        data: None,
        bag: None,
        class: None,
        seed: None,
    };
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("flag {name} needs a value")))
        };
        match flag.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--checkpoint" => flags.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--data" => flags.data = Some(PathBuf::from(value("--data")?)),
            "--bag" => flags.bag = Some(value("--bag")?),
            "--class" => {
                flags.class = Some(value("--class")?.parse().map_err(|_| {
                    Error::InvalidArgument("--class must be a non-negative integer".into())
                })?)
            }
            "--seed" => {
                flags.seed = Some(value("--seed")?.parse().map_err(|_| {
                    Error::InvalidArgument("--seed must be an unsigned integer".into())
                })?)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown flag {other}\n{USAGE}"
                )))
            }
        }
    }
    Ok(flags)
}

fn dispatch(argv: &[String]) -> Result<()> {
    let Some(subcommand) = argv.first() else {
        return Err(Error::InvalidArgument(format!("missing subcommand\n{USAGE}")));
    };
    let flags = parse_flags(&argv[1..])?;
    match subcommand.as_str() {
        "gen-data" => cmd_gen_data(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "explain" => cmd_explain(&flags),
        "selftest" => cmd_selftest(),
        other => Err(Error::InvalidArgument(format!(
            "unknown subcommand {other}\n{USAGE}"
        ))),
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let text = std::fs::read_to_string(path)?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let DataSection::Path { path } = &config.data {
        if !path.join("manifest.json").is_file() {
            return Err(Error::InvalidConfig(format!(
                "dataset path {} has no manifest.json",
                path.display()
            )));
        }
    }
    Ok(config)
}

fn output_dir(flags: &Flags, config: Option<&RunConfig>) -> Result<PathBuf> {
    flags
        .out
        .clone()
        .or_else(|| config.and_then(|c| c.output.clone()))
        .ok_or_else(|| Error::InvalidArgument("--out (or config.output) is required".into()))
}

/// Obtain the dataset named by the config's data section, applying any seed
/// override to inline generation.
fn resolve_dataset(config: &RunConfig, seed_override: Option<u64>) -> Result<Dataset> {
    match &config.data {
        DataSection::Path { path } => dataio::load_dataset(path),
        DataSection::Spec(spec) => {
            let mut spec = spec.clone();
            if let Some(seed) = seed_override {
                spec.seed = seed;
            }
            spec.validate()?;
            dataio::generate(&spec, &mut RandomStream::new(spec.seed))
        }
    }
}

fn write_run_metadata(dir: &Path, seed_override: Option<u64>) -> Result<()> {
    let meta = match seed_override {
        Some(seed) => format!("{{\"seed_override\": {seed}}}\n"),
        None => "{\"seed_override\": null}\n".to_string(),
    };
    std::fs::write(dir.join("run.json"), meta)?;
    Ok(())
}

fn cmd_gen_data(flags: &Flags) -> Result<()> {
    let config = load_config(flags)?;
    let out = output_dir(flags, Some(&config))?;
    if matches!(config.data, DataSection::Path { .. }) {
        return Err(Error::InvalidConfig(
            "gen-data needs an inline synthetic spec in the data section".into(),
        ));
    }
    let dataset = resolve_dataset(&config, flags.seed)?;
    dataio::save_dataset(&dataset, &out)?;
    write_run_metadata(&out, flags.seed)?;
    eprintln!(
        "wrote {} bags to {}",
        dataset.bags.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let config = load_config(flags)?;
    let out = output_dir(flags, Some(&config))?;
    let model_section = config
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("train needs a model section".into()))?;
    let mut train_config = config
        .train
        .clone()
        .ok_or_else(|| Error::InvalidConfig("train needs a train section".into()))?;
    if let Some(seed) = flags.seed {
        train_config.seed = seed;
    }
    let dataset = resolve_dataset(&config, flags.seed)?;
    let (train_set, val_set) = dataio::split(
        &dataset,
        config.split_fraction,
        &mut RandomStream::new(train_config.seed),
    )?;
    let (model, log) = train::fit(
        &train_set,
        &val_set,
        &model_section.mil,
        &train_config,
        model_section.encoder_hidden,
    )?;
    std::fs::create_dir_all(&out)?;
    train::save_checkpoint(
        &model,
        train_config.seed,
        log.len().saturating_sub(1),
        &out.join("model.ckpt"),
    )?;
    std::fs::write(out.join("epochs.jsonl"), epoch_log_jsonl(&log))?;
    let cm = train::evaluate(&model, &val_set)?;
    std::fs::write(out.join("metrics.json"), metrics_json(&cm)? + "\n")?;
    write_run_metadata(&out, flags.seed)?;
    let (ba, _) = cm.balanced_accuracy()?;
    eprintln!("trained {} epochs, best validation BA {ba:.4}", log.len() - 1);
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let ckpt = flags
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
    let data = flags
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
    let out = output_dir(flags, None)?;
    let (model, _, _) = train::load_checkpoint(ckpt)?;
    let dataset = dataio::load_dataset(data)?;
    let cm = train::evaluate(&model, &dataset)?;
    let json = metrics_json(&cm)? + "\n";
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, &json)?;
    print!("{json}");
    Ok(())
}

fn cmd_explain(flags: &Flags) -> Result<()> {
    let ckpt = flags
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
    let data = flags
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
    let bag_id = flags
        .bag
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--bag is required".into()))?;
    let class = flags.class.unwrap_or(0);
    let out = output_dir(flags, None)?;

    let (model, _, _) = train::load_checkpoint(ckpt)?;
    let dataset = dataio::load_dataset(data)?;
    let bag = dataset
        .find_bag(bag_id)
        .ok_or_else(|| Error::InvalidArgument(format!("bag {bag_id} not found")))?;
    std::fs::create_dir_all(&out)?;

    if model.mil.ordering == MilOrdering::E {
        if model.mil.pooling != Pooling::Average {
            let sel = explain::selection_map(&model, bag)?;
            explain::export_heatmap(&sel, &out.join("selection.pgm"), ExportFormat::Pgm)?;
            explain::export_heatmap(&sel, &out.join("selection.csv"), ExportFormat::Csv)?;
        }
    } else {
        let prob = explain::prob_map(&model, bag, class)?;
        explain::export_heatmap(&prob, &out.join("prob.pgm"), ExportFormat::Pgm)?;
        explain::export_heatmap(&prob, &out.join("prob.csv"), ExportFormat::Csv)?;
    }
    let grad = explain::grad_map(&model, bag, class)?;
    explain::export_heatmap(&grad, &out.join("grad.pgm"), ExportFormat::Pgm)?;
    explain::export_heatmap(&grad, &out.join("grad.csv"), ExportFormat::Csv)?;
    eprintln!("wrote explanation maps for {bag_id} to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest

struct Check {
    name: &'static str,
    run: fn() -> Result<bool>,
}

const CHECKS: &[Check] = &[
    Check {
        name: "gradient-check",
        run: selftest_gradients,
    },
    Check {
        name: "pooling-identities",
        run: selftest_pooling_identities,
    },
    Check {
        name: "permutation-invariance",
        run: selftest_permutation_invariance,
    },
    Check {
        name: "binary-max-pooling-i1-i2-agreement",
        run: selftest_binary_max_agreement,
    },
    Check {
        name: "i1-i2-average-pooling-counterexample",
        run: selftest_average_counterexample,
    },
];

/// Run every property check, print one pass/fail line each.
pub fn cmd_selftest() -> Result<()> {
    let mut all_ok = true;
    for check in CHECKS {
        let ok = (check.run)()?;
        println!("{}: {}", check.name, if ok { "pass" } else { "fail" });
        all_ok &= ok;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument("selftest failed".into()))
    }
}

fn random_head_setup(
    rng: &mut RandomStream,
    classes: usize,
    m: usize,
    dim: usize,
) -> Result<(MilConfig, Tensor, HeadParams)> {
    let orderings = [MilOrdering::I1, MilOrdering::I2, MilOrdering::E];
    let poolings = [Pooling::Max, Pooling::Topk, Pooling::Average];
    let config = MilConfig {
        ordering: orderings[rng.uniform_int(0, 2)],
        pooling: poolings[rng.uniform_int(0, 2)],
        k_fraction: rng.uniform(0.1, 1.0)?,
        classes,
        embed_dim: dim,
    };
    let z = rng.uniform_tensor(-1.0, 1.0, &[m, dim])?;
    let head = HeadParams::init(&config, rng)?;
    Ok((config, z, head))
}

fn selftest_gradients() -> Result<bool> {
    let mut rng = RandomStream::new(2024);
    for i in 0..30 {
        let classes = if i % 2 == 0 { 1 } else { 3 };
        let m = rng.uniform_int(2, 12);
        let dim = rng.uniform_int(2, 8);
        let (config, z, head) = random_head_setup(&mut rng, classes, m, dim)?;
        let weights = ClassWeights::uniform(config.label_count());
        let label = rng.uniform_int(0, if classes == 1 { 1 } else { classes - 1 });
        let cfg = config.clone();
        let err = grad_check(
            move |g, vars| {
                let (probs, _, _) = forward(g, vars[1], vars[0], vars[2], &cfg)?;
                weighted_ce(g, probs, label, &weights, cfg.classes)
            },
            &[head.w.clone(), z, head.b.clone()],
            1e-5,
        )?;
        if err > 1e-6 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn selftest_pooling_identities() -> Result<bool> {
    let mut rng = RandomStream::new(2025);
    for _ in 0..50 {
        let m = rng.uniform_int(1, 12);
        let cols = rng.uniform_int(1, 4);
        let t = rng.uniform_tensor(-1.0, 1.0, &[m, cols])?;
        let mut g = crate::graph::Graph::new();
        let v = g.leaf(t.clone());
        let max_pooled = g.topk_mean_columns(v, 1)?;
        let mean_pooled = g.topk_mean_columns(v, m)?;
        for c in 0..cols {
            let col_max = (0..m).map(|r| t.at2(r, c)).fold(f64::NEG_INFINITY, f64::max);
            if g.value(max_pooled).data()[c] != col_max {
                return Ok(false);
            }
            let col_mean = (0..m).map(|r| t.at2(r, c)).sum::<f64>() / m as f64;
            if (g.value(mean_pooled).data()[c] - col_mean).abs() > 1e-12 {
                return Ok(false);
            }
        }
    }
    Ok(head::resolve_k(Pooling::Topk, 0.125, 196) == 25
        && head::resolve_k(Pooling::Topk, 0.25, 196) == 49
        && head::resolve_k(Pooling::Topk, 0.5, 196) == 98)
}

fn selftest_permutation_invariance() -> Result<bool> {
    let mut rng = RandomStream::new(2026);
    for i in 0..200 {
        let classes = if i % 2 == 0 { 1 } else { 3 };
        let m = rng.uniform_int(2, 10);
        let dim = rng.uniform_int(2, 6);
        let (config, z, head) = random_head_setup(&mut rng, classes, m, dim)?;
        let base = predict(&z, &head, &config)?;

        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let mut data = Vec::with_capacity(m * dim);
        for &j in &order {
            data.extend_from_slice(&z.data()[j * dim..(j + 1) * dim]);
        }
        let permuted = Tensor::new(vec![m, dim], data)?;
        let p = predict(&permuted, &head, &config)?;
        for c in 0..base.probs.len() {
            if (base.probs[c] - p.probs[c]).abs() > 1e-12 {
                return Ok(false);
            }
        }
        if base.label != p.label {
            return Ok(false);
        }
    }
    Ok(true)
}

fn selftest_binary_max_agreement() -> Result<bool> {
    let mut rng = RandomStream::new(2027);
    for _ in 0..1000 {
        let m = rng.uniform_int(1, 12);
        let dim = rng.uniform_int(1, 6);
        let z = rng.uniform_tensor(-2.0, 2.0, &[m, dim])?;
        let base = MilConfig {
            ordering: MilOrdering::I1,
            pooling: Pooling::Max,
            k_fraction: 1.0,
            classes: 1,
            embed_dim: dim,
        };
        let head = HeadParams::init(&base, &mut rng)?;
        let p1 = predict(&z, &head, &base)?;
        let p2 = predict(
            &z,
            &head,
            &MilConfig {
                ordering: MilOrdering::I2,
                ..base
            },
        )?;
        if p1.label != p2.label {
            return Ok(false);
        }
    }
    Ok(true)
}

fn selftest_average_counterexample() -> Result<bool> {
    let z = Tensor::new(vec![4, 1], vec![100.0, -1.0, -1.0, -1.0])?;
    let head = HeadParams {
        w: Tensor::matrix(&[vec![1.0]])?,
        b: Tensor::vector(vec![0.0]),
    };
    let base = MilConfig {
        ordering: MilOrdering::I1,
        pooling: Pooling::Average,
        k_fraction: 1.0,
        classes: 1,
        embed_dim: 1,
    };
    let p1 = predict(&z, &head, &base)?;
    let p2 = predict(
        &z,
        &head,
        &MilConfig {
            ordering: MilOrdering::I2,
            ..base
        },
    )?;
    Ok(p1.label == 0 && p2.label == 1)
}

/// Sanity oracle for the embedding-mode generator: classify each bag by the
/// nearest prototype over its closest instance.
pub fn nearest_prototype_accuracy(dataset: &Dataset, spec: &SyntheticSpec) -> Result<f64> {
    let dim = spec
        .dim
        .ok_or_else(|| Error::InvalidArgument("embeddings spec required".into()))?;
    let protos = dataio::prototypes(spec.classes, dim, spec.separation);
    let mut correct = 0usize;
    for bag in &dataset.bags {
        let z = match &bag.payload {
            dataio::Payload::Embeddings(z) => z,
            _ => return Err(Error::InvalidArgument("embeddings dataset required".into())),
        };
        let mut best = (f64::INFINITY, 0usize);
        for (c, mu) in protos.iter().enumerate() {
            for j in 0..z.rows() {
                let d2: f64 = (0..dim).map(|d| (z.at2(j, d) - mu[d]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
        }
        if best.1 == bag.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.bags.len() as f64)
}
