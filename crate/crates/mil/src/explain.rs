//! Per-patch explanation artifacts: class-probability heatmaps, gradient
//! heatmaps, and selection-frequency maps for the embedding-level head, with
//! PGM/CSV export and a JSON sidecar.
//!
//! The gradient score target differs by ordering: the pooled probability for
//! I-1 (its natural output) and the pre-activation pooled logit for I-2 and
//! E, so maps are comparable within an ordering only. The selection map for
//! the embedding-level head is an extension beyond instance-level
//! visualizations: it counts, per patch, the fraction of feature dimensions
//! whose column-wise top-k set contains the patch.

use std::path::Path;

use crate::dataio::BagRecord;
use crate::encoder::ImageGrid;
use crate::error::{Error, Result};
use crate::graph::{topk_column_indices, Graph};
use crate::head::{resolve_k, MilOrdering, Pooling};
use crate::metrics::format_f64;
use crate::tensor::Tensor;
use crate::train::{bag_embeddings, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapKind {
    Probability,
    Gradient,
    Selection,
}

impl HeatmapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeatmapKind::Probability => "probability",
            HeatmapKind::Gradient => "gradient",
            HeatmapKind::Selection => "selection",
        }
    }
}

/// N x N map of per-patch explanation scores in [0, 1], row-major over the
/// patch grid, plus the pooling selection it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    pub values: Vec<f64>,
    pub kind: HeatmapKind,
    pub class_index: usize,
    pub k_used: usize,
    pub selected: Vec<usize>,
}

fn grid_side(instances: usize) -> Result<usize> {
    let n = (instances as f64).sqrt().round() as usize;
    if n * n != instances {
        return Err(Error::InvalidArgument(format!(
            "bag with {instances} instances is not a square patch grid"
        )));
    }
    Ok(n)
}

/// Per-patch class probability map for an instance-level model. The patches
/// the pooling step selected for `class_index` are returned in `selected`.
pub fn prob_map(model: &Model, bag: &BagRecord, class_index: usize) -> Result<Heatmap> {
    if model.mil.ordering == MilOrdering::E {
        return Err(Error::InvalidArgument(
            "prob_map is for instance-level models; use selection_map for E".into(),
        ));
    }
    if class_index >= model.mil.classes {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range"
        )));
    }
    let z = bag_embeddings(bag, model)?;
    let n = grid_side(z.rows())?;
    let k = resolve_k(model.mil.pooling, model.mil.k_fraction, z.rows());

    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let wv = g.leaf(model.head.w.clone());
    let bv = g.leaf(model.head.b.clone());
    let logits = g.matmul_bias(wv, zv, bv)?;
    let per_patch = if model.mil.classes == 1 {
        g.sigmoid(logits)
    } else {
        g.softmax_rows(logits)?
    };
    let probs = g.value(per_patch).clone();
    let values: Vec<f64> = (0..z.rows()).map(|j| probs.at2(j, class_index)).collect();

    // selection happens on probabilities for I-1 and on raw logits for I-2
    let selected = match model.mil.ordering {
        MilOrdering::I1 => topk_column_indices(&probs, k)?[class_index].clone(),
        MilOrdering::I2 => topk_column_indices(g.value(logits), k)?[class_index].clone(),
        MilOrdering::E => unreachable!(),
    };
    Ok(Heatmap {
        n,
        values,
        kind: HeatmapKind::Probability,
        class_index,
        k_used: k,
        selected,
    })
}

/// L2 norm of the class-score gradient with respect to each patch
/// representation, normalized by the map maximum (an all-zero map stays
/// all-zero).
pub fn grad_map(model: &Model, bag: &BagRecord, class_index: usize) -> Result<Heatmap> {
    if class_index >= model.mil.classes {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range"
        )));
    }
    let z = bag_embeddings(bag, model)?;
    let n = grid_side(z.rows())?;
    let m = z.rows();
    let k = resolve_k(model.mil.pooling, model.mil.k_fraction, m);
    let dim = model.mil.embed_dim;

    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let wv = g.leaf(model.head.w.clone());
    let bv = g.leaf(model.head.b.clone());

    let (score, selected) = match model.mil.ordering {
        MilOrdering::I1 => {
            let logits = g.matmul_bias(wv, zv, bv)?;
            let act = if model.mil.classes == 1 {
                g.sigmoid(logits)
            } else {
                g.softmax_rows(logits)?
            };
            let pooled = g.topk_mean_columns(act, k)?;
            let sel = g.topk_selected(pooled).unwrap()[class_index].clone();
            (pick_entry(&mut g, pooled, class_index, model.mil.classes)?, sel)
        }
        MilOrdering::I2 => {
            let logits = g.matmul_bias(wv, zv, bv)?;
            let pooled = g.topk_mean_columns(logits, k)?;
            let sel = g.topk_selected(pooled).unwrap()[class_index].clone();
            (pick_entry(&mut g, pooled, class_index, model.mil.classes)?, sel)
        }
        MilOrdering::E => {
            let pooled = g.topk_mean_columns(zv, k)?;
            let sel: Vec<usize> = {
                let mut all: Vec<usize> = g
                    .topk_selected(pooled)
                    .unwrap()
                    .iter()
                    .flatten()
                    .copied()
                    .collect();
                all.sort_unstable();
                all.dedup();
                all
            };
            let row = g.reshape(pooled, vec![1, dim])?;
            let logits = g.matmul_bias(wv, row, bv)?;
            let flat = g.reshape(logits, vec![model.mil.classes])?;
            (pick_entry(&mut g, flat, class_index, model.mil.classes)?, sel)
        }
    };
    let grads = g.backward(score)?;
    let gz = &grads[zv.id()];
    gz.check_finite("grad_map gradient")?;
    let mut values: Vec<f64> = (0..m)
        .map(|j| {
            (0..dim)
                .map(|d| gz.at2(j, d).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(Heatmap {
        n,
        values,
        kind: HeatmapKind::Gradient,
        class_index,
        k_used: k,
        selected,
    })
}

fn pick_entry(
    g: &mut Graph,
    vector: crate::graph::Var,
    index: usize,
    len: usize,
) -> Result<crate::graph::Var> {
    let mut one_hot = vec![0.0; len];
    one_hot[index] = 1.0;
    let mask = g.leaf(Tensor::vector(one_hot));
    let picked = g.mul(vector, mask)?;
    Ok(g.sum(picked))
}

/// Selection-frequency map for the embedding-level head: the fraction of
/// feature dimensions whose column-wise top-k set contains each patch.
pub fn selection_map(model: &Model, bag: &BagRecord) -> Result<Heatmap> {
    if model.mil.ordering != MilOrdering::E {
        return Err(Error::InvalidArgument(
            "selection_map requires an embedding-level model".into(),
        ));
    }
    if model.mil.pooling == Pooling::Average {
        return Err(Error::InvalidArgument(
            "selection_map is undefined for average pooling (every patch participates)".into(),
        ));
    }
    let z = bag_embeddings(bag, model)?;
    let n = grid_side(z.rows())?;
    let k = resolve_k(model.mil.pooling, model.mil.k_fraction, z.rows());
    let selected = topk_column_indices(&z, k)?;
    let dim = z.cols();
    let mut counts = vec![0usize; z.rows()];
    for column in &selected {
        for &j in column {
            counts[j] += 1;
        }
    }
    let values: Vec<f64> = counts.iter().map(|&c| c as f64 / dim as f64).collect();
    let mut union: Vec<usize> = selected.into_iter().flatten().collect();
    union.sort_unstable();
    union.dedup();
    Ok(Heatmap {
        n,
        values,
        kind: HeatmapKind::Selection,
        class_index: 0,
        k_used: k,
        selected: union,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

/// Write the map (PGM pixel = round(255 * value), or CSV with 17 significant
/// digits) and a JSON sidecar at `<path>.json` describing it.
pub fn export_heatmap(map: &Heatmap, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Pgm => {
            let img = ImageGrid::new(map.n, map.n, map.values.clone())?;
            img.write_pgm(path)?;
        }
        ExportFormat::Csv => {
            let mut out = String::new();
            for r in 0..map.n {
                let row: Vec<String> = (0..map.n)
                    .map(|c| format_f64(map.values[r * map.n + c]))
                    .collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            std::fs::write(path, out)?;
        }
    }
    let selected: Vec<String> = map.selected.iter().map(|s| s.to_string()).collect();
    let sidecar = format!(
        "{{\"kind\": \"{}\", \"class_index\": {}, \"N\": {}, \"k_used\": {}, \"selected_indices\": [{}]}}\n",
        map.kind.as_str(),
        map.class_index,
        map.n,
        map.k_used,
        selected.join(", ")
    );
    let mut sidecar_path = path.as_os_str().to_owned();
    sidecar_path.push(".json");
    std::fs::write(Path::new(&sidecar_path), sidecar)?;
    Ok(())
}

/// Re-parse a CSV heatmap export.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',') {
            values.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad heatmap cell {cell:?}")))?,
            );
        }
    }
    Ok(values)
}
