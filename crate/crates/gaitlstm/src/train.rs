//! Training-loop orchestration: batching, epoch scheduling, loss/metric
//! tracking, checkpointing, and the three published hyperparameter presets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{CohortLabel, NormStats, Segment};
use crate::error::{Error, Result};
use crate::model::{
    classifier_backward, classifier_forward, classifier_infer, init_params, Gradients, Mode,
    ModelParams, TensorDims, NUM_CLASSES,
};
use crate::numerics::Vector;
use crate::optim::{adam_update, add_l2_gradient, cross_entropy, l2_penalty, AdamState};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Model1,
    Model2,
    Model3,
}

/// Reference evaluation figures reported for each preset (precision,
/// sensitivity, specificity on the segment level, accuracy as a fraction).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

impl Preset {
    pub fn all() -> [Preset; 3] {
        [Preset::Model1, Preset::Model2, Preset::Model3]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Model1 => "model1",
            Preset::Model2 => "model2",
            Preset::Model3 => "model3",
        }
    }

    pub fn from_str(s: &str) -> Option<Preset> {
        match s {
            "model1" => Some(Preset::Model1),
            "model2" => Some(Preset::Model2),
            "model3" => Some(Preset::Model3),
            _ => None,
        }
    }

    /// The exact published hyperparameter row:
    /// (hidden units, epochs, L2 strength, learning rate, batch size).
    pub fn row(self) -> (usize, usize, f64, f64, usize) {
        match self {
            Preset::Model1 => (64, 50, 0.0005, 0.001, 128),
            Preset::Model2 => (128, 60, 0.005, 0.0001, 64),
            Preset::Model3 => (256, 80, 0.0005, 0.0001, 64),
        }
    }

    pub fn config(self, seed: u64) -> TrainConfig {
        let (hidden_dim, epochs, l2_lambda, lr, batch_size) = self.row();
        TrainConfig {
            hidden_dim,
            dense_dim: None,
            epochs,
            l2_lambda,
            lr,
            batch_size,
            dropout_p: DEFAULT_DROPOUT,
            seed,
            preset_name: Some(self),
        }
    }

    pub fn reference_metrics(self) -> ReferenceMetrics {
        match self {
            Preset::Model1 => ReferenceMetrics {
                precision: 0.81,
                sensitivity: 0.80,
                specificity: 0.82,
                accuracy: 0.7692,
            },
            Preset::Model2 => ReferenceMetrics {
                precision: 0.90,
                sensitivity: 0.88,
                specificity: 0.89,
                accuracy: 0.8894,
            },
            Preset::Model3 => ReferenceMetrics {
                precision: 0.98,
                sensitivity: 0.99,
                specificity: 0.96,
                accuracy: 0.9771,
            },
        }
    }
}

/// The reference setup does not disclose its dropout rate; 0.5 is the
/// conventional choice for a single dropout layer before the head.
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    /// Optional ReLU layer between h_T and the softmax head. The presets
    /// leave it off.
    pub dense_dim: Option<usize>,
    pub epochs: usize,
    pub l2_lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub preset_name: Option<Preset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut cfg = Preset::Model1.config(0);
        cfg.preset_name = None;
        cfg
    }
}

pub fn validate_config(cfg: &TrainConfig) -> Result<()> {
    if cfg.hidden_dim == 0 {
        return Err(Error::InvalidConfig("hidden_dim must be at least 1".into()));
    }
    if cfg.dense_dim == Some(0) {
        return Err(Error::InvalidConfig(
            "dense_dim must be at least 1 when present".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and nonnegative, got {}",
            cfg.lr
        )));
    }
    if !(cfg.l2_lambda >= 0.0 && cfg.l2_lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "l2_lambda must be finite and nonnegative, got {}",
            cfg.l2_lambda
        )));
    }
    if !(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "dropout probability must lie in [0, 1), got {}",
            cfg.dropout_p
        )));
    }
    Ok(())
}

/// Knobs that change how a run executes without being part of the
/// reproducibility-relevant configuration: `threads` never changes any
/// output bit, and `normalization` is only stamped into the checkpoint so
/// `predict` can standardize raw recordings on its own.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    /// Keep the epoch with the best validation accuracy instead of the last
    /// one. Off for reproduction runs; when on, the checkpoint carries no
    /// optimizer state (a mid-run snapshot is not resumable).
    pub select_best_val: bool,
    pub normalization: Option<NormStats>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            threads: 1,
            select_best_val: false,
            normalization: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLSTMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Epochs finished when the checkpoint was written. All per-epoch
    /// randomness (shuffles, dropout masks) is derived from labeled
    /// sub-seeds of (seed, epoch, position), so this counter pins the
    /// generator state a resumed run would continue from.
    pub epochs_completed: u64,
    pub normalization: NormStats,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

pub fn one_hot(class: usize, n: usize) -> Vector {
    assert!(class < n, "class {class} out of range for {n} classes");
    let mut v = Vector::zeros(n);
    v[class] = 1.0;
    v
}

/// Run `f` for every index in 0..n on up to `threads` workers and return
/// the results in index order. Each call must be independent of the others;
/// the collected output is identical for every thread count by
/// construction.
fn parallel_map<T: Send>(n: usize, threads: usize, f: &(impl Fn(usize) -> T + Sync)) -> Vec<T> {
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut parts: Vec<Vec<T>> = Vec::with_capacity(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
            })
            .collect();
        for h in handles {
            parts.push(h.join().expect("worker thread panicked"));
        }
    });
    parts.into_iter().flatten().collect()
}

/// Mean gradient over one mini-batch, plus whether every per-segment loss
/// and gradient came out finite. The dropout mask of a segment depends only
/// on (seed, epoch, position in the epoch's shuffled order), never on batch
/// or thread layout.
fn batch_gradients(
    params: &ModelParams,
    segments: &[Segment],
    chunk: &[usize],
    config: &TrainConfig,
    epoch: u64,
    base_pos: u64,
    threads: usize,
) -> (Gradients, bool) {
    let results: Vec<(Gradients, f64)> = parallel_map(chunk.len(), threads, &|p| {
        let seg = &segments[chunk[p]];
        let mut rng = seeds::rng_for_n(config.seed, "dropout", &[epoch, base_pos + p as u64]);
        let trace = classifier_forward(
            params,
            &seg.to_sequence(),
            Mode::Train,
            config.dropout_p,
            &mut rng,
        )
        .expect("segment sequences are nonempty and dropout is validated");
        let target = one_hot(seg.label.class_index(), NUM_CLASSES);
        let loss = cross_entropy(&target, &trace.probs);
        (classifier_backward(params, &trace, &target), loss)
    });
    let mut sum = params.zeros_like();
    let mut finite = true;
    for (g, loss) in &results {
        if !loss.is_finite() || !g.is_finite() {
            finite = false;
        }
        sum.add_assign(g);
    }
    sum.scale_assign(1.0 / chunk.len() as f64);
    (sum, finite)
}

/// Mean inference-mode loss (cross entropy plus the L2 term, the quantity
/// training minimizes) and argmax accuracy over a segment set. Summation is
/// in segment order, so results do not depend on the thread count.
pub fn evaluate_segments(
    params: &ModelParams,
    segments: &[Segment],
    dropout_p: f64,
    l2_lambda: f64,
    threads: usize,
) -> Result<(f64, f64)> {
    if segments.is_empty() {
        return Err(Error::InvalidInput(
            "cannot evaluate an empty segment set".to_string(),
        ));
    }
    let results: Vec<(f64, bool)> = parallel_map(segments.len(), threads, &|i| {
        let seg = &segments[i];
        let probs = classifier_infer(params, &seg.to_sequence(), dropout_p)
            .expect("segment sequences are nonempty and dropout is validated");
        let target = one_hot(seg.label.class_index(), NUM_CLASSES);
        let loss = cross_entropy(&target, &probs);
        let correct = probs.argmax() == seg.label.class_index();
        (loss, correct)
    });
    let n = segments.len() as f64;
    let mean_ce = results.iter().map(|r| r.0).sum::<f64>() / n;
    let correct = results.iter().filter(|r| r.1).count();
    Ok((mean_ce + l2_penalty(params, l2_lambda), correct as f64 / n))
}

/// Per-segment argmax predictions in input order.
pub fn predict_segments(
    params: &ModelParams,
    segments: &[Segment],
    dropout_p: f64,
    threads: usize,
) -> Result<Vec<CohortLabel>> {
    let preds = parallel_map(segments.len(), threads, &|i| {
        classifier_infer(params, &segments[i].to_sequence(), dropout_p)
            .map(|p| CohortLabel::from_class_index(p.argmax()))
    });
    preds.into_iter().collect()
}

/// Full training run. Per epoch: shuffle the training set with a sub-seed
/// of (seed, epoch), walk it in mini-batches (the short final batch is
/// trained on, not dropped), apply one Adam step per batch on the
/// batch-mean gradient with the L2 term added, then evaluate both sets in
/// inference mode and append an EpochRecord. Every recorded number is fully
/// determined by (seed, data, config).
pub fn train(
    config: &TrainConfig,
    options: &TrainOptions,
    train_segments: &[Segment],
    val_segments: &[Segment],
    progress: &mut dyn FnMut(&str),
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    validate_config(config)?;
    if train_segments.is_empty() {
        return Err(Error::InvalidInput("training set is empty".to_string()));
    }
    if val_segments.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".to_string()));
    }
    let input_dim = train_segments[0].features.cols();
    for seg in train_segments.iter().chain(val_segments) {
        assert_eq!(
            seg.features.cols(),
            input_dim,
            "segment {} has {} features, expected {input_dim}",
            seg.id(),
            seg.features.cols()
        );
    }

    let mut params = init_params(input_dim, config.hidden_dim, config.dense_dim, config.seed);
    let mut adam = AdamState::new(&params, config.lr)?;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_segments.len()).collect();
        order.shuffle(&mut seeds::rng_for_n(config.seed, "shuffle", &[epoch as u64]));
        let mut base_pos = 0u64;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = batch_idx + 1;
            let (mut grads, finite) = batch_gradients(
                &params,
                train_segments,
                chunk,
                config,
                epoch as u64,
                base_pos,
                options.threads,
            );
            if !finite {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            add_l2_gradient(&mut grads, &params, config.l2_lambda);
            adam_update(&mut adam, &mut params, &grads);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            base_pos += chunk.len() as u64;
        }

        let (train_loss, train_accuracy) = evaluate_segments(
            &params,
            train_segments,
            config.dropout_p,
            config.l2_lambda,
            options.threads,
        )?;
        let (val_loss, val_accuracy) = evaluate_segments(
            &params,
            val_segments,
            config.dropout_p,
            config.l2_lambda,
            options.threads,
        )?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        progress(&format!(
            "epoch={epoch} train_loss={train_loss} val_acc={val_accuracy}"
        ));
        if options.select_best_val && best.as_ref().map_or(true, |(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, params.clone()));
        }
    }

    let (final_params, adam) = match best {
        Some((_, snapshot)) => (snapshot, None),
        None => (params, Some(adam)),
    };
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        epochs_completed: config.epochs as u64,
        normalization: options
            .normalization
            .clone()
            .unwrap_or_else(|| NormStats::identity(input_dim)),
        params: final_params,
        adam,
    };
    Ok((checkpoint, records))
}

/// CSV with full decimal precision; every value round-trips through parse.
pub fn emit_curves(records: &[EpochRecord], path: &Path) -> Result<()> {
    fs::write(path, curves_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn curves_csv(records: &[EpochRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "no epoch records to serialize".to_string(),
        ));
    }
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        ));
    }
    Ok(out)
}

fn put_u8(buf: &mut Vec<u8>, v: u8) {
    buf.push(v);
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointDimensions(format!(
                "file ends while reading {what} (offset {}, need {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| {
            Error::CheckpointDimensions(format!("{what} value {v} does not fit in usize"))
        })
    }
}

fn preset_tag(p: Option<Preset>) -> u8 {
    match p {
        None => 0,
        Some(Preset::Model1) => 1,
        Some(Preset::Model2) => 2,
        Some(Preset::Model3) => 3,
    }
}

fn preset_from_tag(t: u8) -> Result<Option<Preset>> {
    match t {
        0 => Ok(None),
        1 => Ok(Some(Preset::Model1)),
        2 => Ok(Some(Preset::Model2)),
        3 => Ok(Some(Preset::Model3)),
        other => Err(Error::CheckpointDimensions(format!(
            "unknown preset tag {other}"
        ))),
    }
}

impl Checkpoint {
    /// Versioned little-endian binary: magic, version, config block,
    /// completed-epoch counter, normalization stats, every tensor with a
    /// dimensions-first header in canonical order, then optional Adam state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, self.format_version);

        let c = &self.config;
        put_u64(&mut buf, c.hidden_dim as u64);
        put_u64(&mut buf, c.dense_dim.unwrap_or(0) as u64);
        put_u64(&mut buf, c.epochs as u64);
        put_u64(&mut buf, c.batch_size as u64);
        put_u64(&mut buf, c.seed);
        put_f64(&mut buf, c.l2_lambda);
        put_f64(&mut buf, c.lr);
        put_f64(&mut buf, c.dropout_p);
        put_u8(&mut buf, preset_tag(c.preset_name));

        put_u64(&mut buf, self.epochs_completed);

        put_u64(&mut buf, self.normalization.mean.len() as u64);
        for (m, s) in self.normalization.mean.iter().zip(&self.normalization.std) {
            put_f64(&mut buf, *m);
            put_f64(&mut buf, *s);
        }

        put_u64(&mut buf, self.params.input_dim() as u64);
        put_u64(&mut buf, self.params.hidden_dim() as u64);
        put_u64(&mut buf, self.params.dense_dim().unwrap_or(0) as u64);
        put_u64(&mut buf, self.params.head.num_classes as u64);
        for view in self.params.tensor_views() {
            match view.dims {
                TensorDims::Matrix { rows, cols } => {
                    put_u8(&mut buf, 0);
                    put_u64(&mut buf, rows as u64);
                    put_u64(&mut buf, cols as u64);
                }
                TensorDims::Vector { len } => {
                    put_u8(&mut buf, 1);
                    put_u64(&mut buf, len as u64);
                }
            }
            for &v in view.data {
                put_f64(&mut buf, v);
            }
        }

        match &self.adam {
            None => put_u8(&mut buf, 0),
            Some(a) => {
                put_u8(&mut buf, 1);
                put_u64(&mut buf, a.t);
                put_f64(&mut buf, a.beta1);
                put_f64(&mut buf, a.beta2);
                put_f64(&mut buf, a.epsilon);
                put_f64(&mut buf, a.lr);
                for buf_set in [&a.m, &a.v] {
                    for tensor in buf_set {
                        put_u64(&mut buf, tensor.len() as u64);
                        for &v in tensor {
                            put_f64(&mut buf, v);
                        }
                    }
                }
            }
        }
        buf
    }

    /// Strict parse: magic, version, and every dimension header are
    /// validated before any weight is accepted; truncation and trailing
    /// bytes are both dimension-consistency errors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic bytes")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointDimensions(
                "not a checkpoint file (bad magic bytes)".to_string(),
            ));
        }
        let format_version = r.u32("format version")?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: format_version,
                expected: CHECKPOINT_VERSION,
            });
        }

        let hidden_dim = r.usize("config hidden_dim")?;
        let dense_raw = r.usize("config dense_dim")?;
        let epochs = r.usize("config epochs")?;
        let batch_size = r.usize("config batch_size")?;
        let seed = r.u64("config seed")?;
        let l2_lambda = r.f64("config l2_lambda")?;
        let lr = r.f64("config lr")?;
        let dropout_p = r.f64("config dropout_p")?;
        let preset_name = preset_from_tag(r.u8("config preset tag")?)?;
        let config = TrainConfig {
            hidden_dim,
            dense_dim: if dense_raw == 0 { None } else { Some(dense_raw) },
            epochs,
            l2_lambda,
            lr,
            batch_size,
            dropout_p,
            seed,
            preset_name,
        };

        let epochs_completed = r.u64("epochs_completed")?;

        let n_features = r.usize("normalization feature count")?;
        let mut mean = Vec::with_capacity(n_features);
        let mut std = Vec::with_capacity(n_features);
        for i in 0..n_features {
            mean.push(r.f64(&format!("normalization mean {i}"))?);
            std.push(r.f64(&format!("normalization std {i}"))?);
        }
        let normalization = NormStats { mean, std };

        let input_dim = r.usize("model input_dim")?;
        let model_hidden = r.usize("model hidden_dim")?;
        let model_dense = r.usize("model dense_dim")?;
        let num_classes = r.usize("model num_classes")?;
        if model_hidden != config.hidden_dim {
            return Err(Error::CheckpointDimensions(format!(
                "model hidden_dim {model_hidden} disagrees with config hidden_dim {}",
                config.hidden_dim
            )));
        }
        if model_dense != dense_raw {
            return Err(Error::CheckpointDimensions(format!(
                "model dense_dim {model_dense} disagrees with config dense_dim {dense_raw}"
            )));
        }
        if num_classes != NUM_CLASSES {
            return Err(Error::CheckpointDimensions(format!(
                "checkpoint declares {num_classes} classes, this build supports {NUM_CLASSES}"
            )));
        }
        if input_dim == 0 || model_hidden == 0 {
            return Err(Error::CheckpointDimensions(format!(
                "degenerate model dimensions: input {input_dim}, hidden {model_hidden}"
            )));
        }

        let mut params = ModelParams::zeros(
            input_dim,
            model_hidden,
            config.dense_dim,
            num_classes,
        );
        let expected: Vec<(String, TensorDims)> = params
            .tensor_views()
            .iter()
            .map(|v| (v.name.to_string(), v.dims))
            .collect();
        let mut slices = params.tensor_data_mut();
        for ((name, dims), slice) in expected.iter().zip(slices.iter_mut()) {
            let kind = r.u8(&format!("tensor {name} kind"))?;
            let got = match kind {
                0 => TensorDims::Matrix {
                    rows: r.usize(&format!("tensor {name} rows"))?,
                    cols: r.usize(&format!("tensor {name} cols"))?,
                },
                1 => TensorDims::Vector {
                    len: r.usize(&format!("tensor {name} length"))?,
                },
                other => {
                    return Err(Error::CheckpointDimensions(format!(
                        "tensor {name}: unknown kind tag {other}"
                    )))
                }
            };
            if got != *dims {
                return Err(Error::CheckpointDimensions(format!(
                    "tensor {name}: file declares {got:?}, model requires {dims:?}"
                )));
            }
            for i in 0..slice.len() {
                slice[i] = r.f64(&format!("tensor {name} value {i}"))?;
            }
        }

        let adam = match r.u8("adam presence flag")? {
            0 => None,
            1 => {
                let t = r.u64("adam step counter")?;
                let beta1 = r.f64("adam beta1")?;
                let beta2 = r.f64("adam beta2")?;
                let epsilon = r.f64("adam epsilon")?;
                let lr = r.f64("adam lr")?;
                let mut buf_sets = Vec::new();
                for set_name in ["m", "v"] {
                    let mut set = Vec::with_capacity(expected.len());
                    for (name, dims) in &expected {
                        let len = r.usize(&format!("adam {set_name} length for {name}"))?;
                        if len != dims.count() {
                            return Err(Error::CheckpointDimensions(format!(
                                "adam {set_name} buffer for {name} has {len} values, tensor has {}",
                                dims.count()
                            )));
                        }
                        let mut data = Vec::with_capacity(len);
                        for i in 0..len {
                            data.push(r.f64(&format!("adam {set_name} {name} value {i}"))?);
                        }
                        set.push(data);
                    }
                    buf_sets.push(set);
                }
                let v = buf_sets.pop().unwrap();
                let m = buf_sets.pop().unwrap();
                Some(AdamState {
                    m,
                    v,
                    t,
                    beta1,
                    beta2,
                    epsilon,
                    lr,
                })
            }
            other => {
                return Err(Error::CheckpointDimensions(format!(
                    "bad adam presence flag {other}"
                )))
            }
        };

        if r.pos != bytes.len() {
            return Err(Error::CheckpointDimensions(format!(
                "{} trailing bytes after the checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            format_version,
            config,
            epochs_completed,
            normalization,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Lossless text rendering for debugging: every float is printed in
    /// shortest round-trip decimal form.
    pub fn export_text(&self) -> String {
        let mut out = String::from("gaitlstm-checkpoint-text v1\n");
        let c = &self.config;
        out.push_str(&format!("hidden_dim {}\n", c.hidden_dim));
        out.push_str(&format!(
            "dense_dim {}\n",
            c.dense_dim.map_or("none".to_string(), |d| d.to_string())
        ));
        out.push_str(&format!("epochs {}\n", c.epochs));
        out.push_str(&format!("batch_size {}\n", c.batch_size));
        out.push_str(&format!("seed {}\n", c.seed));
        out.push_str(&format!("l2_lambda {}\n", c.l2_lambda));
        out.push_str(&format!("lr {}\n", c.lr));
        out.push_str(&format!("dropout_p {}\n", c.dropout_p));
        out.push_str(&format!(
            "preset {}\n",
            c.preset_name.map_or("none", |p| p.as_str())
        ));
        out.push_str(&format!("epochs_completed {}\n", self.epochs_completed));
        for (i, (m, s)) in self
            .normalization
            .mean
            .iter()
            .zip(&self.normalization.std)
            .enumerate()
        {
            out.push_str(&format!("stat {i} {m} {s}\n"));
        }
        for view in self.params.tensor_views() {
            match view.dims {
                TensorDims::Matrix { rows, cols } => {
                    out.push_str(&format!("tensor {} matrix {rows} {cols}\n", view.name));
                    for r in 0..rows {
                        let row: Vec<String> = view.data[r * cols..(r + 1) * cols]
                            .iter()
                            .map(|v| v.to_string())
                            .collect();
                        out.push_str(&row.join(" "));
                        out.push('\n');
                    }
                }
                TensorDims::Vector { len } => {
                    out.push_str(&format!("tensor {} vector {len}\n", view.name));
                    let row: Vec<String> = view.data.iter().map(|v| v.to_string()).collect();
                    out.push_str(&row.join(" "));
                    out.push('\n');
                }
            }
        }
        match &self.adam {
            None => out.push_str("adam absent\n"),
            Some(a) => {
                out.push_str(&format!(
                    "adam present t {} beta1 {} beta2 {} epsilon {} lr {}\n",
                    a.t, a.beta1, a.beta2, a.epsilon, a.lr
                ));
                for (set_name, set) in [("m", &a.m), ("v", &a.v)] {
                    for (tensor, view) in set.iter().zip(self.params.tensor_views()) {
                        let row: Vec<String> = tensor.iter().map(|v| v.to_string()).collect();
                        out.push_str(&format!("adam {set_name} {} ", view.name));
                        out.push_str(&row.join(" "));
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::subject_of;
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small two-class set: features drawn around +amp for PD, −amp for
    /// Control, 6 timesteps × 3 features per segment.
    fn toy_segments(n: usize, amp: f64, seed: u64) -> Vec<Segment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 {
                    CohortLabel::Control
                } else {
                    CohortLabel::Pd
                };
                let sign = if label == CohortLabel::Pd { amp } else { -amp };
                let mut features = Matrix::zeros(6, 3);
                for v in features.as_mut_slice() {
                    *v = sign + rng.gen_range(-0.3..0.3);
                }
                let file = format!(
                    "Ga{}{:02}_01.txt",
                    if label == CohortLabel::Pd { "Pt" } else { "Co" },
                    i / 2 + 1
                );
                let stem = file.strip_suffix(".txt").unwrap().to_string();
                Segment {
                    features,
                    label,
                    source_subject: subject_of(&stem),
                    source_file: file,
                    segment_index: 0,
                }
            })
            .collect()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            hidden_dim: 4,
            dense_dim: None,
            epochs,
            l2_lambda: 0.001,
            lr: 0.01,
            batch_size: 3,
            dropout_p: 0.5,
            seed: 7,
            preset_name: None,
        }
    }

    fn params_bits(p: &ModelParams) -> Vec<u64> {
        p.tensor_views()
            .iter()
            .flat_map(|v| v.data.iter().map(|x| x.to_bits()))
            .collect()
    }

    #[test]
    fn presets_bind_the_reference_rows() {
        assert_eq!(Preset::Model1.row(), (64, 50, 0.0005, 0.001, 128));
        assert_eq!(Preset::Model2.row(), (128, 60, 0.005, 0.0001, 64));
        assert_eq!(Preset::Model3.row(), (256, 80, 0.0005, 0.0001, 64));
        let m3 = Preset::Model3.reference_metrics();
        assert_eq!(
            (m3.precision, m3.sensitivity, m3.specificity, m3.accuracy),
            (0.98, 0.99, 0.96, 0.9771)
        );
        let m1 = Preset::Model1.reference_metrics();
        assert_eq!(
            (m1.precision, m1.sensitivity, m1.specificity, m1.accuracy),
            (0.81, 0.80, 0.82, 0.7692)
        );
        assert_eq!(Preset::from_str("model2"), Some(Preset::Model2));
        assert_eq!(Preset::from_str("model9"), None);
        let cfg = Preset::Model2.config(5);
        assert_eq!(cfg.hidden_dim, 128);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.preset_name, Some(Preset::Model2));
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let base = tiny_config(3);
        for bad in [
            TrainConfig { hidden_dim: 0, ..base.clone() },
            TrainConfig { epochs: 0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { dropout_p: 1.0, ..base.clone() },
            TrainConfig { dropout_p: -0.1, ..base.clone() },
            TrainConfig { lr: -1.0, ..base.clone() },
            TrainConfig { l2_lambda: f64::NAN, ..base.clone() },
            TrainConfig { dense_dim: Some(0), ..base.clone() },
        ] {
            assert!(matches!(validate_config(&bad), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
        assert!(validate_config(&base).is_ok());
        assert!(validate_config(&TrainConfig { lr: 0.0, ..base }).is_ok());
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let segs = toy_segments(8, 1.0, 1);
        let (train_set, val_set) = segs.split_at(6);
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config(3)
        };
        let mut lines = Vec::new();
        let (cp, records) = train(&cfg, &TrainOptions::default(), train_set, val_set, &mut |l| {
            lines.push(l.to_string())
        })
        .unwrap();

        let init = init_params(3, cfg.hidden_dim, None, cfg.seed);
        assert_eq!(params_bits(&cp.params), params_bits(&init));
        assert_eq!(records.len(), 3);
        for r in &records[1..] {
            assert_eq!(r.train_accuracy.to_bits(), records[0].train_accuracy.to_bits());
            assert_eq!(r.val_accuracy.to_bits(), records[0].val_accuracy.to_bits());
            assert_eq!(r.train_loss.to_bits(), records[0].train_loss.to_bits());
        }
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("epoch=1 train_loss="));
        assert!(lines[0].contains(" val_acc="));
    }

    #[test]
    fn batch_mean_gradient_matches_mean_of_singles() {
        let segs = toy_segments(3, 0.8, 2);
        let cfg = tiny_config(1);
        let params = init_params(3, cfg.hidden_dim, None, cfg.seed);
        let chunk = [0usize, 1, 2];
        let (batch, finite) = batch_gradients(&params, &segs, &chunk, &cfg, 1, 0, 1);
        assert!(finite);

        let mut mean = params.zeros_like();
        for (p, seg) in segs.iter().enumerate() {
            let mut rng = seeds::rng_for_n(cfg.seed, "dropout", &[1, p as u64]);
            let trace = classifier_forward(
                &params,
                &seg.to_sequence(),
                Mode::Train,
                cfg.dropout_p,
                &mut rng,
            )
            .unwrap();
            let target = one_hot(seg.label.class_index(), NUM_CLASSES);
            mean.add_assign(&classifier_backward(&params, &trace, &target));
        }
        mean.scale_assign(1.0 / 3.0);

        for (a, b) in batch.tensor_views().iter().zip(mean.tensor_views()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn l2_pull_alone_shrinks_the_weights() {
        // Zero data gradients isolate the 2λw term; one epoch of Adam steps
        // on it must strictly decrease the summed squared weights.
        let mut params = init_params(3, 4, None, 9);
        let mut adam = AdamState::new(&params, 0.001).unwrap();
        let before = l2_penalty(&params, 1.0);
        for _ in 0..5 {
            let mut grads = params.zeros_like();
            add_l2_gradient(&mut grads, &params, 0.0005);
            adam_update(&mut adam, &mut params, &grads);
        }
        let after = l2_penalty(&params, 1.0);
        assert!(
            after < before,
            "sum of squared weights grew: {before} -> {after}"
        );
    }

    #[test]
    fn equal_seeds_give_bit_identical_runs() {
        let segs = toy_segments(10, 0.9, 3);
        let (train_set, val_set) = segs.split_at(7);
        let cfg = tiny_config(3);
        let run = || {
            let mut lines = Vec::new();
            let (cp, recs) = train(
                &cfg,
                &TrainOptions::default(),
                train_set,
                val_set,
                &mut |l| lines.push(l.to_string()),
            )
            .unwrap();
            (cp.to_bytes(), recs, lines)
        };
        let (bytes_a, recs_a, lines_a) = run();
        let (bytes_b, recs_b, lines_b) = run();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(lines_a, lines_b);
        for (a, b) in recs_a.iter().zip(&recs_b) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            assert_eq!(a.train_accuracy.to_bits(), b.train_accuracy.to_bits());
            assert_eq!(a.val_accuracy.to_bits(), b.val_accuracy.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_any_bit() {
        let segs = toy_segments(9, 0.7, 4);
        let (train_set, val_set) = segs.split_at(6);
        let cfg = tiny_config(2);
        let run = |threads: usize| {
            let opts = TrainOptions {
                threads,
                ..TrainOptions::default()
            };
            let (cp, recs) = train(&cfg, &opts, train_set, val_set, &mut |_| {}).unwrap();
            (cp.to_bytes(), recs)
        };
        let (bytes_1, recs_1) = run(1);
        let (bytes_3, recs_3) = run(3);
        assert_eq!(bytes_1, bytes_3);
        assert_eq!(recs_1.len(), recs_3.len());
        for (a, b) in recs_1.iter().zip(&recs_3) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_epoch_and_batch() {
        let mut segs = toy_segments(4, 0.5, 5);
        segs[0].features.set(0, 0, f64::NAN);
        segs[1].features.set(0, 0, f64::NAN);
        segs[2].features.set(0, 0, f64::NAN);
        let (train_set, val_set) = segs.split_at(3);
        let err = train(
            &tiny_config(1),
            &TrainOptions::default(),
            train_set,
            val_set,
            &mut |_| {},
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, batch } => {
                assert_eq!((epoch, batch), (1, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn trained_checkpoint() -> (Checkpoint, Vec<EpochRecord>, Vec<Segment>) {
        let segs = toy_segments(8, 1.0, 6);
        let (train_set, val_set) = segs.split_at(6);
        let opts = TrainOptions {
            normalization: Some(NormStats {
                mean: vec![0.25, -0.5, 1.0 / 3.0],
                std: vec![1.5, 2.0, 0.75],
            }),
            ..TrainOptions::default()
        };
        let (cp, recs) = train(&tiny_config(2), &opts, train_set, val_set, &mut |_| {}).unwrap();
        (cp, recs, segs)
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical_and_output_preserving() {
        let (cp, _, segs) = trained_checkpoint();
        let bytes = cp.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.config, cp.config);
        assert_eq!(loaded.epochs_completed, 2);
        assert_eq!(loaded.normalization, cp.normalization);
        assert_eq!(loaded.adam.as_ref().unwrap().t, cp.adam.as_ref().unwrap().t);

        let probe = segs[0].to_sequence();
        let before = classifier_infer(&cp.params, &probe, 0.5).unwrap();
        let after = classifier_infer(&loaded.params, &probe, 0.5).unwrap();
        assert_eq!(before[0].to_bits(), after[0].to_bits());
        assert_eq!(before[1].to_bits(), after[1].to_bits());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        cp.save(&path).unwrap();
        let reloaded = Checkpoint::load(&path).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_named_errors() {
        let (cp, _, _) = trained_checkpoint();
        let bytes = cp.to_bytes();

        // One trailing value missing.
        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(Error::CheckpointDimensions(_))
        ));

        // Extra trailing byte.
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&padded),
            Err(Error::CheckpointDimensions(_))
        ));

        // Bad magic.
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::CheckpointDimensions(_))
        ));

        // Unsupported version.
        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(Error::CheckpointVersion {
                found: 99,
                expected: CHECKPOINT_VERSION
            })
        ));
    }

    #[test]
    fn curves_csv_round_trips_every_value() {
        let records = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.6931471805599453,
                train_accuracy: 0.5,
                val_loss: 0.7,
                val_accuracy: 1.0 / 3.0,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.51,
                train_accuracy: 0.75,
                val_loss: 0.66,
                val_accuracy: 2.0 / 3.0,
            },
            EpochRecord {
                epoch: 3,
                train_loss: 0.4,
                train_accuracy: 0.875,
                val_loss: 0.6,
                val_accuracy: 2.0 / 3.0,
            },
        ];
        let csv = curves_csv(&records).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc");
        for (line, rec) in lines[1..].iter().zip(&records) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0].parse::<usize>().unwrap(), rec.epoch);
            assert_eq!(fields[1].parse::<f64>().unwrap().to_bits(), rec.train_loss.to_bits());
            assert_eq!(fields[2].parse::<f64>().unwrap().to_bits(), rec.train_accuracy.to_bits());
            assert_eq!(fields[3].parse::<f64>().unwrap().to_bits(), rec.val_loss.to_bits());
            assert_eq!(fields[4].parse::<f64>().unwrap().to_bits(), rec.val_accuracy.to_bits());
        }
        assert!(curves_csv(&[]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        emit_curves(&records, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), csv);
    }

    #[test]
    fn best_val_selection_returns_the_peak_epoch_model() {
        let segs = toy_segments(10, 1.2, 8);
        let (train_set, val_set) = segs.split_at(7);
        let cfg = tiny_config(4);
        let opts = TrainOptions {
            select_best_val: true,
            ..TrainOptions::default()
        };
        let (cp, records) = train(&cfg, &opts, train_set, val_set, &mut |_| {}).unwrap();
        assert!(cp.adam.is_none(), "best-val snapshot must not carry optimizer state");
        let best = records
            .iter()
            .map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let (_, acc) =
            evaluate_segments(&cp.params, val_set, cfg.dropout_p, cfg.l2_lambda, 1).unwrap();
        assert_eq!(acc.to_bits(), best.to_bits());
    }

    #[test]
    fn text_export_is_lossless_and_complete() {
        let (cp, _, _) = trained_checkpoint();
        let text = cp.export_text();
        assert!(text.starts_with("gaitlstm-checkpoint-text v1\n"));
        for name in ["w_xi", "w_hf", "b_o", "w_out", "b_out"] {
            assert!(text.contains(&format!("tensor {name} ")), "{name} missing");
        }
        // Spot-check one value round-trips to identical bits.
        let first_w = cp.params.lstm.w_xi.get(0, 0);
        let line = text
            .lines()
            .skip_while(|l| !l.starts_with("tensor w_xi"))
            .nth(1)
            .unwrap();
        let parsed: f64 = line.split_whitespace().next().unwrap().parse().unwrap();
        assert_eq!(parsed.to_bits(), first_w.to_bits());
        // 6 train segments / batch 3 = 2 batches per epoch, 2 epochs.
        assert!(text.contains("adam present t 4"));
    }

    #[test]
    fn training_stays_finite_on_normalized_presets_fixture() {
        // Preset hyperparameters (smallest row) on the synthetic fixture for
        // a few epochs: no NaN anywhere.
        let segs = toy_segments(12, 1.0, 10);
        let (train_set, val_set) = segs.split_at(9);
        let mut cfg = Preset::Model1.config(3);
        cfg.epochs = 5;
        cfg.hidden_dim = 8; // keep runtime small; lr/λ/batch stay preset values
        let (cp, records) = train(
            &cfg,
            &TrainOptions::default(),
            train_set,
            val_set,
            &mut |_| {},
        )
        .unwrap();
        assert!(cp.params.is_finite());
        for r in &records {
            assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.train_accuracy));
            assert!((0.0..=1.0).contains(&r.val_accuracy));
        }
    }
}
