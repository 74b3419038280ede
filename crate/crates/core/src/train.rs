//! Optimizer, mini-batch training loop, evaluation metrics and
//! checkpointing.
//!
//! Training runs DropAttention in training mode and every evaluation in
//! inference mode (mask sampling never happens at eval time). Batch items
//! run forward/backward on their own tapes in parallel; gradients reduce in
//! fixed item order, so a run is a deterministic function of (config, seed).

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderDims, ForwardCtx};
use crate::config::{ExperimentConfig, Task};
use crate::data::{Example, LabelMap, Vocab};
use crate::dropattn::Mode;
use crate::error::{Error, Result};
use crate::heads::{EntailmentModel, Pooling, Tagger, TextClassifier};
use crate::rng;
use crate::tensor::{Gradients, ParamTrace, Tape, Tensor};

// ── Gradient maps ────────────────────────────────────────────────────

/// Named gradients in first-binding order. Parameters bound several times in
/// one forward pass (the siamese encoder) have their contributions summed.
pub struct GradMap {
    names: Vec<String>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl GradMap {
    pub fn from_backward(tape: &Tape, trace: &ParamTrace, gradients: &Gradients) -> GradMap {
        let mut map = GradMap { names: Vec::new(), grads: Vec::new(), index: HashMap::new() };
        for (name, id) in trace.entries() {
            let Some(g) = gradients.wrt(*id) else { continue };
            match map.index.get(name) {
                Some(&i) => {
                    let acc = &mut map.grads[i];
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    map.index.insert(name.clone(), map.grads.len());
                    map.names.push(name.clone());
                    map.grads.push(g.clone());
                }
            }
        }
        let _ = tape;
        map
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.grads[i])
    }

    /// Elementwise sum; both maps must come from the same forward structure.
    pub fn accumulate(&mut self, other: &GradMap) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer. Moments mirror parameter shapes
/// and live beside the step counter.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient in `grads`.
    /// A non-finite gradient aborts, naming the parameter.
    pub fn step(&mut self, model: &mut TaskModel, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bias2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        let (lr, b1, b2, eps) = (self.cfg.lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let moments = &mut self.moments;
        let mut failure: Option<Error> = None;

        model.visit_params_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if !g.all_finite() {
                failure = Some(Error::NanGradient { param: name.to_string() });
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; tensor.numel()], vec![0.0; tensor.numel()]));
            for ((p, &gv), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gv;
                *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                let m_hat = *mi as f64 / bias1;
                let v_hat = *vi as f64 / bias2;
                *p -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

// ── Span F1 ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn extract_spans(tags: &[&str]) -> Vec<(String, usize, usize)> {
    let mut spans = Vec::new();
    let mut current: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (begins, kind) = match tag.split_once('-') {
            Some(("B", kind)) => (true, Some(kind)),
            Some(("I", kind)) => (false, Some(kind)),
            _ => (false, None),
        };
        match kind {
            None => {
                if let Some((k, start)) = current.take() {
                    spans.push((k, start, i - 1));
                }
            }
            Some(kind) => {
                let continues = !begins
                    && current.as_ref().map(|(k, _)| k == kind).unwrap_or(false);
                if !continues {
                    if let Some((k, start)) = current.take() {
                        spans.push((k, start, i - 1));
                    }
                    current = Some((kind.to_string(), i));
                }
            }
        }
    }
    if let Some((k, start)) = current.take() {
        spans.push((k, start, tags.len() - 1));
    }
    spans
}

fn span_counts(pred: &[&str], gold: &[&str]) -> (usize, usize, usize) {
    let pred_spans = extract_spans(pred);
    let gold_spans = extract_spans(gold);
    let matched = pred_spans.iter().filter(|s| gold_spans.contains(s)).count();
    (matched, pred_spans.len(), gold_spans.len())
}

/// Exact-span-match F1 over BIO tags. Undefined precision or recall (no
/// predicted or no gold spans) is reported as 0.
pub fn span_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<SpanScore> {
    if pred.len() != gold.len() {
        return Err(Error::Contract {
            op: "span_f1",
            msg: format!("{} predicted tags vs {} gold tags", pred.len(), gold.len()),
        });
    }
    let pred: Vec<&str> = pred.iter().map(|s| s.as_ref()).collect();
    let gold: Vec<&str> = gold.iter().map(|s| s.as_ref()).collect();
    let (matched, n_pred, n_gold) = span_counts(&pred, &gold);
    Ok(score_from_counts(matched, n_pred, n_gold))
}

fn score_from_counts(matched: usize, n_pred: usize, n_gold: usize) -> SpanScore {
    let precision = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { matched as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScore { precision, recall, f1 }
}

// ── Task models ──────────────────────────────────────────────────────

pub enum Prediction {
    Class(usize),
    Tags(Vec<usize>),
}

/// The model behind one experiment, dispatched on the configured task.
#[derive(Clone, Debug)]
pub enum TaskModel {
    Cls(TextClassifier),
    Tag(Tagger),
    Nli(EntailmentModel),
}

impl TaskModel {
    pub fn init(cfg: &ExperimentConfig, vocab_size: usize, classes: usize) -> Result<TaskModel> {
        let dims = EncoderDims {
            vocab: vocab_size,
            d: cfg.d,
            d_ff: cfg.d_ff,
            heads: cfg.heads,
            layers: cfg.layers,
            max_len: cfg.max_len,
        };
        Ok(match cfg.task {
            Task::Cls => TaskModel::Cls(TextClassifier::init(dims, classes, Pooling::Max, cfg.seed)?),
            Task::Tag => TaskModel::Tag(Tagger::init(dims, classes, cfg.seed)?),
            Task::Nli => TaskModel::Nli(EntailmentModel::init(dims, classes, Pooling::Max, cfg.seed)?),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            TaskModel::Cls(_) => Task::Cls,
            TaskModel::Tag(_) => Task::Tag,
            TaskModel::Nli(_) => Task::Nli,
        }
    }

    pub fn encoder(&self) -> &crate::attention::Encoder {
        match self {
            TaskModel::Cls(m) => &m.encoder,
            TaskModel::Tag(m) => &m.encoder,
            TaskModel::Nli(m) => &m.encoder,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            TaskModel::Cls(m) => m.visit_params(f),
            TaskModel::Tag(m) => m.visit_params(f),
            TaskModel::Nli(m) => m.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            TaskModel::Cls(m) => m.visit_params_mut(f),
            TaskModel::Tag(m) => m.visit_params_mut(f),
            TaskModel::Nli(m) => m.visit_params_mut(f),
        }
    }

    /// Forward + backward for one example on a private tape.
    pub fn item_loss_grads(&self, ex: &Example, ctx: &ForwardCtx<'_>) -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let loss = match (self, ex) {
            (TaskModel::Cls(m), Example::Cls { tokens, label }) => {
                m.loss(&mut tape, &mut trace, tokens, *label, ctx)?.0
            }
            (TaskModel::Tag(m), Example::Tag { tokens, tags }) => {
                m.loss(&mut tape, &mut trace, tokens, tags, ctx)?.0
            }
            (TaskModel::Nli(m), Example::Pair { premise, hypothesis, label }) => {
                m.loss(&mut tape, &mut trace, premise, hypothesis, *label, ctx)?.0
            }
            _ => {
                return Err(Error::Contract {
                    op: "item_loss_grads",
                    msg: "example kind does not match the model task".into(),
                })
            }
        };
        let loss_value = tape.data(loss)[0] as f64;
        let gradients = tape.backward(loss)?;
        Ok((loss_value, GradMap::from_backward(&tape, &trace, &gradients)))
    }

    pub fn predict_example(&self, ex: &Example) -> Result<Prediction> {
        match (self, ex) {
            (TaskModel::Cls(m), Example::Cls { tokens, .. }) => {
                Ok(Prediction::Class(m.predict(tokens)?))
            }
            (TaskModel::Tag(m), Example::Tag { tokens, .. }) => {
                Ok(Prediction::Tags(m.predict(tokens)?))
            }
            (TaskModel::Nli(m), Example::Pair { premise, hypothesis, .. }) => {
                Ok(Prediction::Class(m.predict(premise, hypothesis)?))
            }
            _ => Err(Error::Contract {
                op: "predict_example",
                msg: "example kind does not match the model task".into(),
            }),
        }
    }
}

/// Accuracy for classification/entailment, micro span F1 for tagging.
/// Evaluation never samples masks, so the metric of a fixed model is
/// deterministic.
pub fn evaluate(model: &TaskModel, examples: &[Example], labels: &LabelMap) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let predictions: Vec<Result<Prediction>> =
        examples.par_iter().map(|ex| model.predict_example(ex)).collect();
    match model.task() {
        Task::Cls | Task::Nli => {
            let mut correct = 0usize;
            for (ex, pred) in examples.iter().zip(predictions) {
                let gold = match ex {
                    Example::Cls { label, .. } | Example::Pair { label, .. } => *label,
                    _ => unreachable!("task checked above"),
                };
                if let Prediction::Class(p) = pred? {
                    if p == gold {
                        correct += 1;
                    }
                }
            }
            Ok(correct as f64 / examples.len() as f64)
        }
        Task::Tag => {
            let (mut matched, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
            for (ex, pred) in examples.iter().zip(predictions) {
                let Example::Tag { tags, .. } = ex else { unreachable!("task checked above") };
                let Prediction::Tags(pred) = pred? else { unreachable!("tagger predicts tags") };
                let pred_names: Vec<&str> =
                    pred.iter().map(|&t| labels.name(t).unwrap_or("O")).collect();
                let gold_names: Vec<&str> =
                    tags.iter().map(|&t| labels.name(t).unwrap_or("O")).collect();
                let (m, p, g) = span_counts(&pred_names, &gold_names);
                matched += m;
                n_pred += p;
                n_gold += g;
            }
            Ok(score_from_counts(matched, n_pred, n_gold).f1)
        }
    }
}

// ── Reports ──────────────────────────────────────────────────────────

/// One line of report.jsonl. Wall time is tracked in memory but excluded
/// from serialization so identical (config, seed) runs produce byte-identical
/// reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub dev_metric: f64,
    pub overfit_gap: f64,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub config_echo: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_dev: f64,
}

impl TrainReport {
    /// JSON lines, one per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything `train` needs besides the config.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocab,
    pub labels: LabelMap,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Model state at the best dev epoch.
    pub model: TaskModel,
}

// ── Training loop ────────────────────────────────────────────────────

pub fn train(cfg: &ExperimentConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract { op: "train", msg: "empty training set".into() });
    }
    let mut model = TaskModel::init(cfg, data.vocab.len(), data.labels.len())?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let drop_spec = cfg.drop_spec(Mode::Training);

    let mut report = TrainReport {
        epochs: Vec::new(),
        config_echo: cfg.echo(),
        seed: cfg.seed,
        best_epoch: 0,
        best_dev: f64::NEG_INFINITY,
    };
    let mut best_model: Option<TaskModel> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, rng::derive_seed2(cfg.seed, 0x_E9, epoch as u64));

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            let items: Vec<Result<(f64, GradMap)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let ctx = ForwardCtx {
                        mode: Mode::Training,
                        attn_drop: drop_spec,
                        attn_drop_layers: None,
                        dropout_p: cfg.dropout,
                        item_seed: rng::derive_seed2(cfg.seed, epoch as u64, idx as u64),
                    };
                    model.item_loss_grads(&data.train[idx], &ctx)
                })
                .collect();

            let mut batch_grads: Option<GradMap> = None;
            for item in items {
                let (loss, grads) = item.map_err(|e| diverged(cfg, e))?;
                if !loss.is_finite() {
                    return Err(diverged(cfg, Error::Diverged { msg: format!("loss = {loss}") }));
                }
                loss_sum += loss;
                match &mut batch_grads {
                    Some(acc) => acc.accumulate(&grads),
                    None => batch_grads = Some(grads),
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            grads.scale(1.0 / chunk.len() as f32);
            adam.step(&mut model, &grads)?;
        }

        let train_loss = loss_sum / data.train.len() as f64;
        let train_metric = evaluate(&model, &data.train, &data.labels)?;
        let dev_metric = evaluate(&model, &data.dev, &data.labels)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_metric,
            dev_metric,
            overfit_gap: train_metric - dev_metric,
            seed: cfg.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        if dev_metric > report.best_dev {
            report.best_dev = dev_metric;
            report.best_epoch = epoch;
            best_model = Some(model.clone());
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome { report, model: best_model.expect("at least one epoch ran") })
}

fn diverged(cfg: &ExperimentConfig, cause: Error) -> Error {
    match cause {
        Error::NonFinite { .. } | Error::Diverged { .. } => Error::Diverged {
            msg: format!("{cause}; config:\n{}", cfg.echo()),
        },
        other => other,
    }
}

/// Fisher-Yates with a derived stream.
fn shuffle(order: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut r = rng::stream(seed);
    for i in (1..order.len()).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Number of f32 values.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    blob: String,
    task: String,
    d: usize,
    d_ff: usize,
    heads: usize,
    layers: usize,
    max_len: usize,
    vocab: Vec<String>,
    labels: Vec<String>,
    params: Vec<ManifestParam>,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";

/// Write manifest + little-endian f32 blob into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &TaskModel,
    vocab: &Vocab,
    labels: &LabelMap,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let dims = model.encoder().dims;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, tensor| {
        params.push(ManifestParam {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: tensor.numel() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        format: "dropattn-checkpoint".into(),
        version: 1,
        dtype: "f32".into(),
        endianness: "little".into(),
        blob: CHECKPOINT_BLOB.into(),
        task: model.task().as_str().into(),
        d: dims.d,
        d_ff: dims.d_ff,
        heads: dims.heads,
        layers: dims.layers,
        max_len: dims.max_len,
        vocab: vocab.tokens().to_vec(),
        labels: labels.names().to_vec(),
        params,
    };
    std::fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join(CHECKPOINT_BLOB), blob)?;
    Ok(())
}

/// Load a checkpoint from the directory holding manifest + blob.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TaskModel, Vocab, LabelMap)> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    if manifest.format != "dropattn-checkpoint" || manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}/{}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = std::fs::read(dir.join(&manifest.blob))?;

    let task = match manifest.task.as_str() {
        "cls" => Task::Cls,
        "tag" => Task::Tag,
        "nli" => Task::Nli,
        other => return Err(Error::Checkpoint(format!("unknown task {other:?}"))),
    };
    let vocab = Vocab::from_tokens(manifest.vocab.clone());
    let labels = LabelMap::from_names(manifest.labels.clone());

    // Build a skeleton with the right shapes, then overwrite every tensor.
    let cfg = ExperimentConfig {
        task,
        train_path: "-".into(),
        dev_path: "-".into(),
        test_path: "-".into(),
        d: manifest.d,
        d_ff: manifest.d_ff,
        heads: manifest.heads,
        layers: manifest.layers,
        max_len: manifest.max_len,
        variant: crate::dropattn::Variant::Column,
        p: 0.0,
        w: 1,
        rescale: crate::dropattn::Rescale::Normalized,
        dropout: 0.0,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        batch: 1,
        epochs: 1,
        patience: 1,
        seed: 0,
        out_dir: "-".into(),
    };
    let mut model = TaskModel::init(&cfg, vocab.len(), labels.len())?;

    let by_name: HashMap<&str, &ManifestParam> =
        manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut failure: Option<Error> = None;
    model.visit_params_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            failure = Some(Error::Checkpoint(format!("missing parameter {name}")));
            return;
        };
        if entry.shape != tensor.shape() {
            failure = Some(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                entry.shape,
                tensor.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        if end > blob.len() {
            failure = Some(Error::Checkpoint(format!("blob truncated at {name}")));
            return;
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            tensor.data_mut()[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    });
    failure.map_or(Ok(()), Err)?;
    Ok((model, vocab, labels))
}
