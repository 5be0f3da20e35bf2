//! Deterministic training of encoder + MIL head with Adam, plus evaluation
//! and a bit-exact checkpoint format.
//!
//! Training runs one optimizer step per bag in a seed-determined shuffled
//! order, so a (datasets, configs, seed) triple reproduces the run
//! bit-for-bit on one platform.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{BagRecord, Dataset, DatasetShape, Payload};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{self, HeadParams, MilConfig, Prediction};
use crate::loss::{weighted_ce, ClassWeights};
use crate::metrics::{format_f64, ConfusionMatrix};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Bags,
    Images,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate and epochs must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Trained (or initialized) model: MIL head plus the optional patch encoder
/// for image-mode datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mil: MilConfig,
    pub encoder: Option<EncoderParams>,
    pub head: HeadParams,
}

impl Model {
    /// Named parameter tensors in checkpoint order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(enc) = &self.encoder {
            out.push(("encoder.w1".to_string(), enc.w1.clone()));
            out.push(("encoder.b1".to_string(), enc.b1.clone()));
            out.push(("encoder.w2".to_string(), enc.w2.clone()));
            out.push(("encoder.b2".to_string(), enc.b2.clone()));
        }
        out.push(("head.w".to_string(), self.head.w.clone()));
        out.push(("head.b".to_string(), self.head.b.clone()));
        out
    }

    fn set_params(&mut self, tensors: &[Tensor]) {
        let mut it = tensors.iter();
        if let Some(enc) = &mut self.encoder {
            enc.w1 = it.next().unwrap().clone();
            enc.b1 = it.next().unwrap().clone();
            enc.w2 = it.next().unwrap().clone();
            enc.b2 = it.next().unwrap().clone();
        }
        self.head.w = it.next().unwrap().clone();
        self.head.b = it.next().unwrap().clone();
    }
}

/// Instance matrix of a bag under this model: embeddings pass through,
/// images go through patchify + encoder.
pub fn bag_embeddings(bag: &BagRecord, model: &Model) -> Result<Tensor> {
    match &bag.payload {
        Payload::Embeddings(z) => Ok(z.clone()),
        Payload::Image(img) => {
            let enc = model.encoder.as_ref().ok_or_else(|| {
                Error::InvalidConfig("image bag requires a model with an encoder".into())
            })?;
            let patches = encoder::patchify(img, enc.patch)?;
            encoder::encode_tensor(&patches, enc)
        }
    }
}

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[&str],
    grads: &[Tensor],
    state: &mut AdamState,
    tc: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                names.get(i).copied().unwrap_or("?")
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((pe, ge), (me, ve)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *me = tc.beta1 * *me + (1.0 - tc.beta1) * ge;
            *ve = tc.beta2 * *ve + (1.0 - tc.beta2) * ge * ge;
            let m_hat = *me / bc1;
            let v_hat = *ve / bc2;
            *pe -= tc.learning_rate * m_hat / (v_hat.sqrt() + tc.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ba: f64,
}

/// Epoch log serialized as JSON lines, one object per epoch.
pub fn epoch_log_jsonl(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for entry in log {
        out.push_str(&format!(
            "{{\"epoch\": {}, \"train_loss\": {}, \"val_ba\": {}}}\n",
            entry.epoch,
            format_f64(entry.train_loss),
            format_f64(entry.val_ba)
        ));
    }
    out
}

fn check_dataset_compat(dataset: &Dataset, mil: &MilConfig, mode: TrainMode) -> Result<()> {
    match (dataset.shape, mode) {
        (DatasetShape::Embeddings { dim }, TrainMode::Bags) => {
            if dim != mil.embed_dim {
                return Err(Error::ShapeMismatch(format!(
                    "dataset dim {dim} != head embed_dim {}",
                    mil.embed_dim
                )));
            }
        }
        (DatasetShape::Images { .. }, TrainMode::Images) => {}
        _ => {
            return Err(Error::InvalidConfig(
                "train mode does not match dataset mode".into(),
            ))
        }
    }
    if dataset.classes != mil.label_count() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, head distinguishes {}",
            dataset.classes,
            mil.label_count()
        )));
    }
    Ok(())
}

/// Loss of one bag on a fresh graph, with gradients for every parameter.
/// Parameter order matches `Model::params`.
fn bag_loss(
    model: &Model,
    bag: &BagRecord,
    weights: &ClassWeights,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let named = model.params();
    let vars: Vec<_> = named.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let n_enc = if model.encoder.is_some() { 4 } else { 0 };
    let z = match &bag.payload {
        Payload::Embeddings(zt) => g.leaf(zt.clone()),
        Payload::Image(img) => {
            let enc = model.encoder.as_ref().ok_or_else(|| {
                Error::InvalidConfig("image bag requires a model with an encoder".into())
            })?;
            let patches = g.leaf(encoder::patchify(img, enc.patch)?);
            encoder::encode(&mut g, patches, vars[0], vars[1], vars[2], vars[3])?
        }
    };
    let (probs, _, _) = head::forward(&mut g, z, vars[n_enc], vars[n_enc + 1], &model.mil)?;
    let loss = weighted_ce(&mut g, probs, bag.label, weights, model.mil.classes)?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss on bag {}", bag.id)));
    }
    if !want_grads {
        return Ok((loss_value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((
        loss_value,
        vars.iter().map(|v| grads[v.id()].clone()).collect(),
    ))
}

/// Binary heads (classes == 1) consume the label directly; class weights for
/// them are indexed by the binary label, so they always have two entries.
fn training_weights(train_set: &Dataset) -> Result<ClassWeights> {
    let counts = train_set.class_counts();
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidConfig(
            "every class needs at least one training bag".into(),
        ));
    }
    ClassWeights::from_counts(&counts)
}

fn mean_loss(model: &Model, dataset: &Dataset, weights: &ClassWeights) -> Result<f64> {
    let mut total = 0.0;
    for bag in &dataset.bags {
        total += bag_loss(model, bag, weights, false)?.0;
    }
    Ok(total / dataset.bags.len() as f64)
}

/// Train on `train_set`, track validation balanced accuracy per epoch, and
/// return the parameters of the best-validation-BA epoch (ties keep the
/// earlier epoch). The log starts with an epoch-0 entry evaluated before any
/// optimizer step.
pub fn fit(
    train_set: &Dataset,
    val_set: &Dataset,
    mil: &MilConfig,
    tc: &TrainConfig,
    encoder_hidden: Option<usize>,
) -> Result<(Model, Vec<EpochLog>)> {
    mil.validate()?;
    tc.validate()?;
    if train_set.bags.is_empty() || val_set.bags.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    check_dataset_compat(train_set, mil, tc.mode)?;
    check_dataset_compat(val_set, mil, tc.mode)?;

    let mut stream = RandomStream::new(tc.seed);
    let enc = match train_set.shape {
        DatasetShape::Images { patch, .. } => {
            let hidden = encoder_hidden.unwrap_or(32);
            Some(encoder::init_encoder(patch, hidden, mil.embed_dim, &mut stream)?)
        }
        DatasetShape::Embeddings { .. } => None,
    };
    // Zero head: every bag starts at exactly uniform probabilities, so the
    // epoch-0 log entry sits at chance level. Gradients still differ across
    // classes because the pooled embeddings do.
    let head_params = HeadParams::zeros(mil);
    let mut model = Model {
        mil: mil.clone(),
        encoder: enc,
        head: head_params,
    };
    let weights = training_weights(train_set)?;

    let named = model.params();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(&tensors);

    let mut log = Vec::with_capacity(tc.epochs + 1);
    let cm0 = evaluate(&model, val_set)?;
    log.push(EpochLog {
        epoch: 0,
        train_loss: mean_loss(&model, train_set, &weights)?,
        val_ba: cm0.balanced_accuracy()?.0,
    });
    let mut best = (log[0].val_ba, 0usize, model.clone());

    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_set.bags.len()).collect();
        stream.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (loss, grads) = bag_loss(&model, &train_set.bags[i], &weights, true)?;
            loss_sum += loss;
            adam_step(&mut tensors, &name_refs, &grads, &mut adam, tc)?;
            model.set_params(&tensors);
        }
        let val_ba = evaluate(&model, val_set)?.balanced_accuracy()?.0;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.bags.len() as f64,
            val_ba,
        });
        if val_ba > best.0 {
            best = (val_ba, epoch, model.clone());
        }
    }
    Ok((best.2, log))
}

/// Run the model over every bag and accumulate a confusion matrix. Pure:
/// no parameter mutation, identical reports on repeated calls.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<ConfusionMatrix> {
    if dataset.classes != model.mil.label_count() {
        return Err(Error::ShapeMismatch(format!(
            "dataset classes {} != model label count {}",
            dataset.classes,
            model.mil.label_count()
        )));
    }
    let mut cm = ConfusionMatrix::new(dataset.classes);
    for bag in &dataset.bags {
        let pred = predict_bag(model, bag)?;
        cm.update(bag.label, pred.label)?;
    }
    Ok(cm)
}

pub fn predict_bag(model: &Model, bag: &BagRecord) -> Result<Prediction> {
    let z = bag_embeddings(bag, model)?;
    head::predict(&z, &model.head, &model.mil)
}

// ---------------------------------------------------------------------------
// checkpoint format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    mil: MilConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder: Option<EncoderDims>,
    params: Vec<ParamEntry>,
    seed: u64,
    epoch: usize,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderDims {
    patch: usize,
    hidden: usize,
    dim: usize,
}

/// Write magic, a length-prefixed JSON header, then the little-endian f64
/// payload in manifest order.
pub fn save_checkpoint(model: &Model, seed: u64, epoch: usize, path: &Path) -> Result<()> {
    let named = model.params();
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let header = CheckpointHeader {
        mil: model.mil.clone(),
        encoder: model.encoder.as_ref().map(|e| EncoderDims {
            patch: e.patch,
            hidden: e.hidden,
            dim: e.dim,
        }),
        params: entries,
        seed,
        epoch,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, t) in &named {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Validate magic, header schema, and payload length before accepting.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64, usize)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("checkpoint too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.mil.validate()?;

    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 8)
        .sum();
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint payload length {} does not match manifest total {}",
            payload.len(),
            expected
        )));
    }

    let mut tensors = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if start + numel * 8 > payload.len() {
            return Err(Error::Format(format!(
                "parameter {} extends past payload",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = start + i * 8;
            data.push(f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()));
        }
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }

    let expected_names: Vec<&str> = if header.encoder.is_some() {
        vec![
            "encoder.w1",
            "encoder.b1",
            "encoder.w2",
            "encoder.b2",
            "head.w",
            "head.b",
        ]
    } else {
        vec!["head.w", "head.b"]
    };
    let actual: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
    if actual != expected_names {
        return Err(Error::Format(format!(
            "unexpected parameter manifest {actual:?}"
        )));
    }

    let encoder = match header.encoder {
        Some(dims) => {
            let enc = EncoderParams {
                w1: tensors[0].clone(),
                b1: tensors[1].clone(),
                w2: tensors[2].clone(),
                b2: tensors[3].clone(),
                patch: dims.patch,
                hidden: dims.hidden,
                dim: dims.dim,
            };
            if enc.w1.shape() != [dims.hidden, dims.patch * dims.patch]
                || enc.w2.shape() != [dims.dim, dims.hidden]
            {
                return Err(Error::Format("encoder shapes inconsistent with dims".into()));
            }
            Some(enc)
        }
        None => None,
    };
    let n = tensors.len();
    let head = HeadParams {
        w: tensors[n - 2].clone(),
        b: tensors[n - 1].clone(),
    };
    if head.w.shape() != [header.mil.classes, header.mil.embed_dim] {
        return Err(Error::Format("head shape inconsistent with config".into()));
    }
    Ok((
        Model {
            mil: header.mil,
            encoder,
            head,
        },
        header.seed,
        header.epoch,
    ))
}
