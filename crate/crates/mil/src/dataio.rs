//! Synthetic bag datasets with ground-truth key instances, a plain-text
//! on-disk format (manifest.json plus one CSV or PGM payload per bag), and
//! deterministic stratified splits.
//!
//! Generation draw order is fixed so a (spec, seed) pair reproduces the same
//! dataset byte-for-byte: per bag, first the key-instance count, then the key
//! positions (Fisher-Yates over instance indices), then the instances in row
//! order with dimensions (or pixels) in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ImageGrid;
use crate::error::{Error, Result};
use crate::metrics::format_f64;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Embeddings,
    Images,
}

/// Generator specification. `dim` applies to embeddings mode; `patch` and
/// `grid` to images mode (instances per bag is grid^2 either way via
/// `instances`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub mode: Mode,
    pub classes: usize,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub grid: Option<usize>,
    pub bags: usize,
    pub instances: usize,
    pub key_min: usize,
    pub key_max: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub background_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.bags == 0 || self.instances == 0 {
            return Err(Error::InvalidConfig(
                "classes, bags and instances must be positive".into(),
            ));
        }
        if !(1 <= self.key_min && self.key_min <= self.key_max && self.key_max <= self.instances) {
            return Err(Error::InvalidConfig(format!(
                "key range [{}, {}] invalid for {} instances",
                self.key_min, self.key_max, self.instances
            )));
        }
        if !(self.separation > 0.0) || !(self.noise_sigma >= 0.0) || !(self.background_sigma >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "separation must be positive and sigmas non-negative".into(),
            ));
        }
        match self.mode {
            Mode::Embeddings => {
                let dim = self
                    .dim
                    .ok_or_else(|| Error::InvalidConfig("embeddings mode needs dim".into()))?;
                if self.classes > dim {
                    return Err(Error::InvalidConfig(format!(
                        "cannot place {} equidistant prototypes in {} dimensions",
                        self.classes, dim
                    )));
                }
            }
            Mode::Images => {
                let patch = self
                    .patch
                    .ok_or_else(|| Error::InvalidConfig("images mode needs patch".into()))?;
                let grid = self
                    .grid
                    .ok_or_else(|| Error::InvalidConfig("images mode needs grid".into()))?;
                if patch == 0 || grid == 0 {
                    return Err(Error::InvalidConfig("patch and grid must be positive".into()));
                }
                if self.instances != grid * grid {
                    return Err(Error::InvalidConfig(format!(
                        "instances {} must equal grid^2 = {}",
                        self.instances,
                        grid * grid
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Embeddings(Tensor),
    Image(ImageGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub id: String,
    pub label: usize,
    pub payload: Payload,
    pub key_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetShape {
    Embeddings { dim: usize },
    Images { patch: usize, grid: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: DatasetShape,
    pub classes: usize,
    pub bags: Vec<BagRecord>,
}

impl Dataset {
    pub fn mode(&self) -> Mode {
        match self.shape {
            DatasetShape::Embeddings { .. } => Mode::Embeddings,
            DatasetShape::Images { .. } => Mode::Images,
        }
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for bag in &self.bags {
            counts[bag.label] += 1;
        }
        counts
    }

    pub fn find_bag(&self, id: &str) -> Option<&BagRecord> {
        self.bags.iter().find(|b| b.id == id)
    }
}

/// Mutually equidistant class prototypes: scaled one-hot corners in R^dim,
/// pairwise distance exactly `separation`.
pub fn prototypes(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    (0..classes)
        .map(|c| {
            let mut mu = vec![0.0; dim];
            mu[c] = scale;
            mu
        })
        .collect()
}

fn draw_key_mask(spec: &SyntheticSpec, stream: &mut RandomStream) -> Vec<bool> {
    let m = spec.instances;
    let count = stream.uniform_int(spec.key_min, spec.key_max);
    let mut order: Vec<usize> = (0..m).collect();
    stream.shuffle(&mut order);
    let mut mask = vec![false; m];
    for &j in order.iter().take(count) {
        mask[j] = true;
    }
    mask
}

/// Gaussian bags around equidistant class prototypes; bag labels cycle
/// through the classes so every class gets bags/classes (+/- 1) bags.
pub fn gen_embedding_bags(spec: &SyntheticSpec, stream: &mut RandomStream) -> Result<Dataset> {
    spec.validate()?;
    if spec.mode != Mode::Embeddings {
        return Err(Error::InvalidConfig("spec mode is not embeddings".into()));
    }
    let dim = spec.dim.unwrap();
    let protos = prototypes(spec.classes, dim, spec.separation);
    let mut bags = Vec::with_capacity(spec.bags);
    for i in 0..spec.bags {
        let label = i % spec.classes;
        let key_mask = draw_key_mask(spec, stream);
        let mut data = Vec::with_capacity(spec.instances * dim);
        for j in 0..spec.instances {
            for d in 0..dim {
                let v = if key_mask[j] {
                    stream.normal_scaled(protos[label][d], spec.noise_sigma)
                } else {
                    stream.normal_scaled(0.0, spec.background_sigma)
                };
                data.push(v);
            }
        }
        bags.push(BagRecord {
            id: format!("bag-{i:05}"),
            label,
            payload: Payload::Embeddings(Tensor::new(vec![spec.instances, dim], data)?),
            key_mask,
        });
    }
    Ok(Dataset {
        shape: DatasetShape::Embeddings { dim },
        classes: spec.classes,
        bags,
    })
}

/// Deterministic class template for a key patch: an intensity ramp along a
/// class-specific orientation, values inside [0.15, 0.85].
pub fn class_template(class: usize, classes: usize, patch: usize) -> Vec<f64> {
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let span = (patch.max(2) - 1) as f64;
    let mut values = Vec::with_capacity(patch * patch);
    for r in 0..patch {
        for c in 0..patch {
            // projection onto the ramp direction, normalized to [0, 1]
            let t = ((c as f64 * dx + r as f64 * dy) / (span * (dx.abs() + dy.abs()).max(1e-12))
                + 1.0)
                / 2.0;
            values.push(0.15 + 0.7 * t.clamp(0.0, 1.0));
        }
    }
    values
}

fn quantize(v: f64) -> f64 {
    (255.0 * v.clamp(0.0, 1.0)).round() / 255.0
}

/// Images whose key patches carry a class template plus pixel noise and whose
/// background patches are noise around 0.5. Pixels are snapped to the 255
/// PGM levels at generation time so the on-disk format is lossless.
pub fn gen_image_bags(spec: &SyntheticSpec, stream: &mut RandomStream) -> Result<Dataset> {
    spec.validate()?;
    if spec.mode != Mode::Images {
        return Err(Error::InvalidConfig("spec mode is not images".into()));
    }
    let (patch, grid) = (spec.patch.unwrap(), spec.grid.unwrap());
    let side = patch * grid;
    let mut bags = Vec::with_capacity(spec.bags);
    for i in 0..spec.bags {
        let label = i % spec.classes;
        let key_mask = draw_key_mask(spec, stream);
        let template = class_template(label, spec.classes, patch);
        let mut pixels = vec![0.0; side * side];
        for pr in 0..grid {
            for pc in 0..grid {
                let j = pr * grid + pc;
                for r in 0..patch {
                    for c in 0..patch {
                        let base = if key_mask[j] {
                            template[r * patch + c]
                        } else {
                            0.5
                        };
                        let v = quantize(base + stream.normal_scaled(0.0, spec.noise_sigma));
                        pixels[(pr * patch + r) * side + pc * patch + c] = v;
                    }
                }
            }
        }
        bags.push(BagRecord {
            id: format!("bag-{i:05}"),
            label,
            payload: Payload::Image(ImageGrid::new(side, side, pixels)?),
            key_mask,
        });
    }
    Ok(Dataset {
        shape: DatasetShape::Images { patch, grid },
        classes: spec.classes,
        bags,
    })
}

pub fn generate(spec: &SyntheticSpec, stream: &mut RandomStream) -> Result<Dataset> {
    match spec.mode {
        Mode::Embeddings => gen_embedding_bags(spec, stream),
        Mode::Images => gen_image_bags(spec, stream),
    }
}

// ---------------------------------------------------------------------------
// on-disk format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBag {
    id: String,
    label: usize,
    file: String,
    key_mask: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    mode: Mode,
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    bags: Vec<ManifestBag>,
}

fn tensor_to_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = (0..t.cols()).map(|c| format_f64(t.at2(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn csv_to_tensor(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad CSV cell {cell:?}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Tensor::matrix(&rows)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        mode: dataset.mode(),
        classes: dataset.classes,
        dim: None,
        patch: None,
        grid: None,
        bags: Vec::with_capacity(dataset.bags.len()),
    };
    match dataset.shape {
        DatasetShape::Embeddings { dim } => manifest.dim = Some(dim),
        DatasetShape::Images { patch, grid } => {
            manifest.patch = Some(patch);
            manifest.grid = Some(grid);
        }
    }
    for bag in &dataset.bags {
        let file = match &bag.payload {
            Payload::Embeddings(z) => {
                let name = format!("{}.csv", bag.id);
                std::fs::write(dir.join(&name), tensor_to_csv(z))?;
                name
            }
            Payload::Image(img) => {
                let name = format!("{}.pgm", bag.id);
                img.write_pgm(&dir.join(&name))?;
                name
            }
        };
        manifest.bags.push(ManifestBag {
            id: bag.id.clone(),
            label: bag.label,
            file,
            key_mask: bag.key_mask.iter().map(|&b| u8::from(b)).collect(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let shape = match manifest.mode {
        Mode::Embeddings => DatasetShape::Embeddings {
            dim: manifest
                .dim
                .ok_or_else(|| Error::Format("embeddings manifest missing dim".into()))?,
        },
        Mode::Images => DatasetShape::Images {
            patch: manifest
                .patch
                .ok_or_else(|| Error::Format("images manifest missing patch".into()))?,
            grid: manifest
                .grid
                .ok_or_else(|| Error::Format("images manifest missing grid".into()))?,
        },
    };
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        if entry.label >= manifest.classes {
            return Err(Error::Format(format!(
                "bag {} label {} out of range",
                entry.id, entry.label
            )));
        }
        let path = dir.join(&entry.file);
        let payload = match shape {
            DatasetShape::Embeddings { dim } => {
                let z = csv_to_tensor(&std::fs::read_to_string(&path)?)?;
                if z.cols() != dim || z.rows() != entry.key_mask.len() {
                    return Err(Error::Format(format!(
                        "bag {} payload {}x{} does not match manifest",
                        entry.id,
                        z.rows(),
                        z.cols()
                    )));
                }
                Payload::Embeddings(z)
            }
            DatasetShape::Images { patch, grid } => {
                let img = ImageGrid::read_pgm(&path)?;
                let side = patch * grid;
                if img.height != side || img.width != side {
                    return Err(Error::Format(format!(
                        "bag {} image {}x{} does not match manifest",
                        entry.id, img.height, img.width
                    )));
                }
                if entry.key_mask.len() != grid * grid {
                    return Err(Error::Format(format!(
                        "bag {} key mask length {} does not match grid",
                        entry.id,
                        entry.key_mask.len()
                    )));
                }
                Payload::Image(img)
            }
        };
        bags.push(BagRecord {
            id: entry.id.clone(),
            label: entry.label,
            payload,
            key_mask: entry.key_mask.iter().map(|&b| b != 0).collect(),
        });
    }
    Ok(Dataset {
        shape,
        classes: manifest.classes,
        bags,
    })
}

/// Stratified split: per class (ascending), shuffle that class's bags and
/// send floor(train_fraction * n_c) to train, the rest to validation.
pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    stream: &mut RandomStream,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..dataset.classes {
        let mut idx: Vec<usize> = dataset
            .bags
            .iter()
            .enumerate()
            .filter(|(_, b)| b.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} bags; need at least 2 to split",
                idx.len()
            )));
        }
        stream.shuffle(&mut idx);
        let n_train = (train_fraction * idx.len() as f64).floor() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            if pos < n_train {
                train.push(i);
            } else {
                val.push(i);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    let pick = |ids: &[usize]| Dataset {
        shape: dataset.shape,
        classes: dataset.classes,
        bags: ids.iter().map(|&i| dataset.bags[i].clone()).collect(),
    };
    Ok((pick(&train), pick(&val)))
}
