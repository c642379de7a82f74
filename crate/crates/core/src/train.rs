//! Training loop, evaluation metrics, checkpointing, attention export, and
//! the ablation report.
//!
//! Optimization is plain SGD with momentum and weight decay folded into the
//! velocity, with the learning rate divided by ten at configured epochs.
//! Every run is bit-reproducible for a fixed seed: shuffles, dropout masks,
//! weight initialization, and kernel projections all derive from it, and
//! batch gradients reduce in sample order regardless of how many worker
//! threads computed them.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{AttnCapture, Model, ModelConfig, PoolMethod, Variant};
use crate::rng::Rng;
use crate::skeleton::{block_count, SkeletonSequence};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Full training configuration. The flat key=value config file carries
/// exactly these fields; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub seed: u64,
    /// Temporal block length (frames).
    pub block_len: usize,
    /// Block stride (frames).
    pub stride: usize,
    pub joints: usize,
    /// Maximum hyper-edge order; branches cover `1..=max_order` unless
    /// `orders` narrows the set.
    pub max_order: usize,
    /// Optional explicit order subset (ablations train single-order
    /// models with, say, `orders = 3`).
    pub orders: Option<Vec<usize>>,
    pub d: usize,
    pub d_prime: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_k: usize,
    pub pool: PoolMethod,
    pub variant: Variant,
    pub torso_index: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            lr_drop_epochs: vec![40, 50],
            seed: 0,
            block_len: 10,
            stride: 5,
            joints: 10,
            max_order: 3,
            orders: None,
            d: 16,
            d_prime: 16,
            depth: 2,
            heads: 4,
            d_k: 64,
            pool: PoolMethod::Rank,
            variant: Variant::TwoBranch,
            torso_index: 0,
        dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::InvalidArgument("lr0 must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument(
                "lr_drop_epochs must be sorted ascending".into(),
            ));
        }
        if self.block_len < 1 || self.stride < 1 || self.stride > self.block_len {
            return Err(Error::InvalidArgument("need 1 <= stride <= block length".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        if let Some(orders) = &self.orders {
            if orders.is_empty() || orders.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(
                    "orders must be strictly increasing and non-empty".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn effective_orders(&self) -> Vec<usize> {
        self.orders
            .clone()
            .unwrap_or_else(|| (1..=self.max_order).collect())
    }

    /// Parse a flat `key=value` config file. Blank lines and `#` comments
    /// are allowed; unknown keys are an error.
    pub fn from_kv_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key=value assignment (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for {key}")))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr_drop_epochs" => {
                self.lr_drop_epochs = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| num("lr_drop_epochs", v.trim()))
                        .collect::<Result<_>>()?
                };
            }
            "seed" => self.seed = num(key, value)?,
            "t" => self.block_len = num(key, value)?,
            "s" => self.stride = num(key, value)?,
            "j" => self.joints = num(key, value)?,
            "r" => self.max_order = num(key, value)?,
            "orders" => {
                self.orders = Some(
                    value
                        .split(',')
                        .map(|v| num("orders", v.trim()))
                        .collect::<Result<_>>()?,
                );
            }
            "d" => {
                self.d = num(key, value)?;
                self.d_prime = self.d;
            }
            "d_prime" => self.d_prime = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "pool" => self.pool = PoolMethod::parse(value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "torso_index" => self.torso_index = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Model dimensions for a dataset with the given frame count and class
    /// count.
    pub fn model_config(&self, frames: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            joints: self.joints,
            coords: 3,
            num_classes,
            orders: self.effective_orders(),
            block_len: self.block_len,
            stride: self.stride,
            tau: block_count(frames, self.block_len, self.stride),
            d: self.d,
            d_prime: self.d_prime,
            d_ff: self.d,
            heads: self.heads,
            d_head: (self.d / self.heads).max(1),
            d_k: self.d_k,
            depth: self.depth,
            variant: self.variant,
            pool: self.pool,
        }
    }
}

/// Learning rate at a 1-based epoch: the base rate divided by ten per
/// passed drop epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr0 * 0.1f64.powi(drops as i32)
}

/// One SGD step with momentum and decoupled-into-velocity weight decay:
/// `v <- momentum * v + (grad + weight_decay * param)`,
/// `param <- param - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(param.len(), grad.len(), "gradient shape mismatch");
    assert_eq!(param.len(), velocity.len(), "velocity shape mismatch");
    let mut data = param.data().to_vec();
    for ((p, &g), v) in data.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    *param = Tensor::from_parts(param.shape().to_vec(), data);
}

/// Evaluation metrics. Top-k ranks logits descending with ties broken by
/// the smaller class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

/// Per-epoch training statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

fn rank_of_label(logits: &[f64], label: usize) -> usize {
    if !logits[label].is_finite() {
        return usize::MAX;
    }
    let mut better = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[label] || (v == logits[label] && c < label) {
            better += 1;
        }
    }
    better
}

/// Metrics from per-sequence logits and labels (the evaluation core,
/// shared with tests that feed oracle logits directly).
pub fn metrics_from_logits(outputs: &[(Vec<f64>, usize)]) -> Metrics {
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut loss = 0.0;
    for (logits, label) in outputs {
        let rank = rank_of_label(logits, *label);
        if rank == 0 {
            top1 += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[*label];
    }
    let n = outputs.len().max(1) as f64;
    Metrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        loss: loss / n,
    }
}

fn check_dataset(dataset: &[SkeletonSequence], cfg: &TrainConfig) -> Result<(usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let frames = dataset[0].frames();
    let mut classes = 0;
    for (i, seq) in dataset.iter().enumerate() {
        if seq.joint_count() != cfg.joints {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i} has {} joints, config says {}",
                seq.joint_count(),
                cfg.joints
            )));
        }
        if seq.coord_count() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i} is {}-D; the pipeline runs on 3-D coordinates",
                seq.coord_count()
            )));
        }
        let tau = block_count(seq.frames(), cfg.block_len, cfg.stride);
        let tau0 = block_count(frames, cfg.block_len, cfg.stride);
        if tau != tau0 {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i} yields {tau} temporal blocks but the run is sized for {tau0}"
            )));
        }
        classes = classes.max(seq.label + 1);
    }
    Ok((frames, classes.max(2)))
}

/// Train a fresh model on the dataset. Deterministic for a fixed seed.
pub fn train(dataset: &[SkeletonSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (frames, num_classes) = check_dataset(dataset, cfg)?;
    let mut init_rng = Rng::new(cfg.seed).derive(0x1217);
    let model_cfg = cfg.model_config(frames, num_classes);
    let mut model = Model::init(model_cfg, &mut init_rng)?;

    let mut names = Vec::new();
    model.visit_params(&mut |n, t| names.push((n, t.len())));
    let mut velocity: Vec<Vec<f64>> = names.iter().map(|(_, len)| vec![0.0; *len]).collect();

    let mut shuffle_rng = Rng::new(cfg.seed).derive(0x517);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, bool, Vec<Option<Tensor>>)> = batch
                .par_iter()
                .map(|&sample_idx| {
                    let seq = &dataset[sample_idx];
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape, true);
                    let mut drop_rng = Rng::new(cfg.seed)
                        .derive(0xD0)
                        .derive(epoch as u64)
                        .derive(sample_idx as u64);
                    let dropout = if cfg.dropout > 0.0 {
                        Some((&mut drop_rng, cfg.dropout))
                    } else {
                        None
                    };
                    let logits = bound
                        .forward(&mut tape, seq, dropout, None)
                        .expect("dataset validated");
                    let loss = tape.cross_entropy(&logits, seq.label).expect("label checked");
                    let grads = tape.backward(&loss).expect("loss is on tape");
                    let mut param_grads = Vec::with_capacity(velocity.len());
                    bound.visit_params(&mut |_, t| {
                        param_grads.push(grads.grad(t).cloned());
                    });
                    let hit = rank_of_label(logits.data(), seq.label) == 0;
                    (loss.scalar_value(), hit, param_grads)
                })
                .collect();

            // Deterministic reduction in batch order.
            let scale = 1.0 / batch.len() as f64;
            let mut summed: Vec<Option<Vec<f64>>> = vec![None; velocity.len()];
            for (loss, hit, grads) in results {
                epoch_loss += loss;
                epoch_hits += hit as usize;
                for (slot, g) in summed.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match slot {
                            None => *slot = Some(g.data().to_vec()),
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(g.data()) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
            }
            let mut slot = 0;
            model.visit_params_mut(&mut |_, param| {
                if let Some(g) = &mut summed[slot] {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                    sgd_step(param, g, &mut velocity[slot], lr, cfg.momentum, cfg.weight_decay);
                }
                slot += 1;
            });
        }
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / dataset.len() as f64,
            train_top1: epoch_hits as f64 / dataset.len() as f64,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Evaluate a model; parallel over sequences, deterministic output.
pub fn evaluate(model: &Model, dataset: &[SkeletonSequence]) -> Result<Metrics> {
    let outputs: Vec<(Vec<f64>, usize)> = dataset
        .par_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, seq, None, None)?;
            Ok((logits.data().to_vec(), seq.label))
        })
        .collect::<Result<_>>()?;
    Ok(metrics_from_logits(&outputs))
}

// ── Checkpoint format ───────────────────────────────────────────────────
//
// A count-prefixed flat list of named tensors, little-endian throughout:
// u64 tensor count, then per tensor a u64 name length, the UTF-8 name,
// u64 rank, u64 extents, and the f64 values in row-major order. Model
// dimensions ride along as `meta.*` scalar tensors.

fn meta_entries(config: &ModelConfig) -> Vec<(String, Vec<f64>)> {
    let variant_idx = Variant::all()
        .iter()
        .position(|v| *v == config.variant)
        .expect("variant listed") as f64;
    let pool_idx = PoolMethod::all()
        .iter()
        .position(|p| *p == config.pool)
        .expect("pool listed") as f64;
    vec![
        ("meta.joints".into(), vec![config.joints as f64]),
        ("meta.coords".into(), vec![config.coords as f64]),
        ("meta.num_classes".into(), vec![config.num_classes as f64]),
        (
            "meta.orders".into(),
            config.orders.iter().map(|&o| o as f64).collect(),
        ),
        ("meta.block_len".into(), vec![config.block_len as f64]),
        ("meta.stride".into(), vec![config.stride as f64]),
        ("meta.tau".into(), vec![config.tau as f64]),
        ("meta.d".into(), vec![config.d as f64]),
        ("meta.d_prime".into(), vec![config.d_prime as f64]),
        ("meta.d_ff".into(), vec![config.d_ff as f64]),
        ("meta.heads".into(), vec![config.heads as f64]),
        ("meta.d_head".into(), vec![config.d_head as f64]),
        ("meta.d_k".into(), vec![config.d_k as f64]),
        ("meta.depth".into(), vec![config.depth as f64]),
        ("meta.variant".into(), vec![variant_idx]),
        ("meta.pool".into(), vec![pool_idx]),
    ]
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = meta_entries(&model.config)
        .into_iter()
        .map(|(name, values)| {
            let len = values.len();
            (name, vec![len], values)
        })
        .collect();
    model.visit_params(&mut |name, t| {
        records.push((name, t.shape().to_vec(), t.data().to_vec()));
    });

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, shape, values) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |f: &mut dyn Read| -> Result<u64> {
        f.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let count = read_u64(&mut file)? as usize;
    let mut records = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut file)? as usize;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::InvalidArgument("checkpoint name is not UTF-8".into()))?;
        let rank = read_u64(&mut file)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut file)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        records.insert(name, (shape, values));
    }

    let scalar = |name: &str| -> Result<usize> {
        let (_, values) = records
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing {name}")))?;
        Ok(values[0] as usize)
    };
    let orders: Vec<usize> = records
        .get("meta.orders")
        .ok_or_else(|| Error::InvalidArgument("checkpoint missing meta.orders".into()))?
        .1
        .iter()
        .map(|&v| v as usize)
        .collect();
    let config = ModelConfig {
        joints: scalar("meta.joints")?,
        coords: scalar("meta.coords")?,
        num_classes: scalar("meta.num_classes")?,
        orders,
        block_len: scalar("meta.block_len")?,
        stride: scalar("meta.stride")?,
        tau: scalar("meta.tau")?,
        d: scalar("meta.d")?,
        d_prime: scalar("meta.d_prime")?,
        d_ff: scalar("meta.d_ff")?,
        heads: scalar("meta.heads")?,
        d_head: scalar("meta.d_head")?,
        d_k: scalar("meta.d_k")?,
        depth: scalar("meta.depth")?,
        variant: Variant::all()[scalar("meta.variant")?],
        pool: PoolMethod::all()[scalar("meta.pool")?],
    };
    let mut model = Model::init(config, &mut Rng::new(0))?;
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, t| match records.get(&name) {
        Some((shape, values)) if shape == t.shape() => {
            *t = Tensor::from_parts(shape.clone(), values.clone());
        }
        Some((shape, _)) => missing.push(format!("{name}: shape {shape:?} vs {:?}", t.shape())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint does not fit the model: {}",
            missing.join("; ")
        )));
    }
    Ok(model)
}

// ── Attention export ────────────────────────────────────────────────────

pub const TOKEN_KINDS: [&str; 4] = [
    "channel_only",
    "channel_edge",
    "order_channel_joint",
    "channel_block",
];

/// Run one sequence through the model and write the post-softmax attention
/// matrix of the requested token type as `<base>.csv` (full precision) and
/// `<base>.pgm` (8-bit, linear min-max scale).
pub fn export_attention(
    model: &Model,
    seq: &SkeletonSequence,
    token: &str,
    base: impl AsRef<Path>,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    if !TOKEN_KINDS.contains(&token) {
        return Err(Error::InvalidArgument(format!(
            "unknown token type '{token}'; expected one of {TOKEN_KINDS:?}"
        )));
    }
    let mut tape = Tape::new();
    let mut capture = AttnCapture::default();
    model.forward(&mut tape, seq, None, Some(&mut capture))?;
    let attn = capture.get(token).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "token '{token}' is not produced by the '{}' variant",
            model.config.variant.name()
        ))
    })?;

    let base = base.as_ref();
    let csv_path = base.with_extension("csv");
    let pgm_path = base.with_extension("pgm");
    let (rows, cols) = (attn.shape()[0], attn.shape()[1]);

    let mut csv = String::new();
    for r in 0..rows {
        let row = &attn.data()[r * cols..(r + 1) * cols];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;

    let lo = attn.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = attn.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    pgm.extend(
        attn.data()
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(&pgm_path, pgm)?;
    Ok((csv_path, pgm_path))
}

// ── Ablation report ─────────────────────────────────────────────────────

/// Train and evaluate each (variant, pool, seed) cell and render the table
/// as CSV with one row per cell, seeds ascending within each cell group.
pub fn ablation_report(
    train_data: &[SkeletonSequence],
    eval_data: &[SkeletonSequence],
    base_cfg: &TrainConfig,
    variants: &[Variant],
    pools: &[PoolMethod],
    seeds: &[u64],
) -> Result<String> {
    let mut csv = String::from("variant,pool,seed,top1,top5,loss\n");
    let seeds: BTreeSet<u64> = seeds.iter().copied().collect();
    for &variant in variants {
        for &pool in pools {
            for &seed in &seeds {
                let mut cfg = base_cfg.clone();
                cfg.variant = variant;
                cfg.pool = pool;
                cfg.seed = seed;
                let outcome = train(train_data, &cfg)?;
                let metrics = evaluate(&outcome.model, eval_data)?;
                csv.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6}\n",
                    variant.name(),
                    pool.name(),
                    seed,
                    metrics.top1,
                    metrics.top5,
                    metrics.loss
                ));
            }
        }
    }
    Ok(csv)
}

/// Deterministic stratified 80/20 split by position within each class.
pub fn split_train_eval(
    dataset: &[SkeletonSequence],
) -> (Vec<SkeletonSequence>, Vec<SkeletonSequence>) {
    let mut per_class_seen = std::collections::BTreeMap::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for seq in dataset {
        let seen = per_class_seen.entry(seq.label).or_insert(0usize);
        if *seen % 5 == 4 {
            eval.push(seq.clone());
        } else {
            train.push(seq.clone());
        }
        *seen += 1;
    }
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::synth_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr_drop_epochs: vec![],
            joints: 7,
            max_order: 2,
            d: 3,
            d_prime: 3,
            depth: 1,
            heads: 1,
            d_k: 8,
            block_len: 4,
            stride: 2,
            dropout: 0.1,
            variant: Variant::MpTp,
            pool: PoolMethod::Avg,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_step_basics() {
        // Zero gradient, zero velocity, zero decay: parameters unchanged.
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p.data(), &[1.0, -2.0]);

        // One step on f(x) = x^2/2 at x=1 with lr 0.1: x becomes 0.9.
        let mut p = Tensor::scalar(1.0);
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p.scalar_value() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = Tensor::scalar(2.0);
        let mut v = vec![0.0];
        let grads = [0.5, -0.25];
        let mut p_ref = 2.0;
        let mut v_ref = 0.0;
        for g in grads {
            sgd_step(&mut p, &[g], &mut v, lr, mu, wd);
            v_ref = mu * v_ref + (g + wd * p_ref);
            p_ref -= lr * v_ref;
        }
        assert!((p.scalar_value() - p_ref).abs() < 1e-15);
        assert!((v[0] - v_ref).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_closed_form() {
        let cfg = TrainConfig::default();
        assert!((lr_at_epoch(&cfg, 1) - 0.1).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 39) - 0.1).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 40) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 49) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 55) - 0.001).abs() < 1e-15);
        for epoch in 1..=80 {
            let drops = [40, 50].iter().filter(|&&e| e <= epoch).count();
            assert_eq!(lr_at_epoch(&cfg, epoch), 0.1 * 0.1f64.powi(drops as i32));
        }
    }

    #[test]
    fn config_parsing_round_trips_and_rejects_unknown_keys() {
        let text = "lr0 = 0.05\nepochs=3\nlr_drop_epochs=2,3\npool=rank\nvariant=two_branch\norders=1,3\n# comment\n\nseed=9\n";
        let cfg = TrainConfig::from_kv_text(text).unwrap();
        assert_eq!(cfg.lr0, 0.05);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr_drop_epochs, vec![2, 3]);
        assert_eq!(cfg.pool, PoolMethod::Rank);
        assert_eq!(cfg.variant, Variant::TwoBranch);
        assert_eq!(cfg.orders, Some(vec![1, 3]));
        assert_eq!(cfg.seed, 9);

        assert!(TrainConfig::from_kv_text("bogus=1\n").is_err());
        assert!(TrainConfig::from_kv_text("lr0\n").is_err());
        assert!(TrainConfig::from_kv_text("lr_drop_epochs=5,2\n").is_err());
    }

    #[test]
    fn metrics_top5_bounds_and_oracle_logits() {
        // Labels-as-logits oracle: logits one-hot at the label.
        let outputs: Vec<(Vec<f64>, usize)> = (0..10)
            .map(|i| {
                let label = i % 4;
                let mut logits = vec![0.0; 4];
                logits[label] = 1.0;
                (logits, label)
            })
            .collect();
        let m = metrics_from_logits(&outputs);
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.top5, 1.0);
        // Ties break by class index: all-zero logits predict class 0.
        let outputs = vec![(vec![0.0; 6], 0usize), (vec![0.0; 6], 5)];
        let m = metrics_from_logits(&outputs);
        assert_eq!(m.top1, 0.5);
        assert!((m.top5 - 0.5).abs() < 1e-12);
        assert!(m.top5 >= m.top1);
    }

    #[test]
    fn training_decreases_loss_on_one_sample() {
        let data: Vec<_> = synth_dataset(2, 1, 7, 8, 3).unwrap();
        let one = vec![data[0].clone()];
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.dropout = 0.0;
        cfg.batch_size = 1;
        cfg.lr0 = 0.005;
        cfg.momentum = 0.0;
        let outcome = train(&one, &cfg).unwrap();
        // Loss at initialization versus after one epoch of updates.
        let initial = {
            let mut probe_rng = Rng::new(cfg.seed).derive(0x1217);
            let fresh = Model::init(cfg.model_config(8, 2), &mut probe_rng).unwrap();
            evaluate(&fresh, &one).unwrap().loss
        };
        let after = evaluate(&outcome.model, &one).unwrap().loss;
        assert!(
            after < initial,
            "loss should drop: {initial} -> {after}"
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = synth_dataset(2, 4, 7, 8, 5).unwrap();
        let cfg = tiny_cfg();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        let mut identical = true;
        let mut pa = Vec::new();
        a.model.visit_params(&mut |_, t| pa.push(t.clone()));
        let mut slot = 0;
        b.model.visit_params(&mut |_, t| {
            identical &= *t == pa[slot];
            slot += 1;
        });
        assert!(identical, "same seed must reproduce parameters bit-exactly");
        assert_eq!(a.history.len(), cfg.epochs);
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.train_loss, hb.train_loss);
        }
    }

    #[test]
    fn fresh_model_sits_at_chance_on_balanced_data() {
        let k = 4;
        let data = synth_dataset(k, 25, 10, 12, 7).unwrap();
        let mut cfg = tiny_cfg();
        cfg.joints = 10;
        let mut rng = Rng::new(99);
        let model = Model::init(cfg.model_config(12, k), &mut rng).unwrap();
        let m = evaluate(&model, &data).unwrap();
        // Within three binomial standard deviations of 1/k.
        let n = data.len() as f64;
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (m.top1 - p).abs() <= 3.0 * sigma + 1e-9,
            "top1 {} vs chance {p}",
            m.top1
        );
        assert!(m.top5 >= m.top1);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let data = synth_dataset(2, 2, 7, 8, 11).unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let outcome = train(&data, &cfg).unwrap();
        let dir = std::env::temp_dir().join("hyperform_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&outcome.model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, outcome.model.config);
        let mut pa = Vec::new();
        outcome.model.visit_params(&mut |_, t| pa.push(t.clone()));
        let mut slot = 0;
        let mut same = true;
        loaded.visit_params(&mut |_, t| {
            same &= *t == pa[slot];
            slot += 1;
        });
        assert!(same);
        // Same logits on a sequence.
        let mut tape = Tape::new();
        let la = outcome.model.forward(&mut tape, &data[0], None, None).unwrap();
        let lb = loaded.forward(&mut tape, &data[0], None, None).unwrap();
        assert_eq!(la, lb);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn attention_export_writes_row_stochastic_csv_and_pgm() {
        let data = synth_dataset(2, 2, 7, 8, 13).unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.variant = Variant::TwoBranch;
        let outcome = train(&data, &cfg).unwrap();
        let dir = std::env::temp_dir().join("hyperform_export_test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("heat");
        let (csv_path, pgm_path) =
            export_attention(&outcome.model, &data[0], "channel_block", &base).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        let d2 = cfg.d_prime * 3; // tau = 3 for F=8, T=4, S=2
        assert_eq!(rows.len(), d2);
        for row in &rows {
            let sum: f64 = row.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
        // PGM header matches the attention dimensions.
        let pgm = std::fs::read(&pgm_path).unwrap();
        let header = String::from_utf8_lossy(&pgm[..20]).to_string();
        assert!(header.starts_with("P5\n"));
        let dims: Vec<usize> = header
            .lines()
            .nth(1)
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(dims, vec![d2, d2]);
        // Unavailable token for this variant.
        let miss = export_attention(&outcome.model, &data[0], "channel_only", &base);
        assert!(miss.is_ok()); // two_branch produces all four
        let base_model = {
            let mut c = cfg.clone();
            c.variant = Variant::Baseline;
            train(&data, &c).unwrap().model
        };
        assert!(export_attention(&base_model, &data[0], "channel_block", &base).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablation_report_is_deterministic_and_complete() {
        let data = synth_dataset(2, 5, 7, 8, 17).unwrap();
        let (train_data, eval_data) = split_train_eval(&data);
        assert_eq!(train_data.len(), 8);
        assert_eq!(eval_data.len(), 2);
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let variants = [Variant::Baseline, Variant::MpOnly];
        let pools = [PoolMethod::Avg];
        let seeds = [1u64, 0];
        let a = ablation_report(&train_data, &eval_data, &cfg, &variants, &pools, &seeds).unwrap();
        let b = ablation_report(&train_data, &eval_data, &cfg, &variants, &pools, &seeds).unwrap();
        assert_eq!(a, b, "report must be byte-identical across runs");
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], "variant,pool,seed,top1,top5,loss");
        assert_eq!(lines.len(), 1 + 2 * 1 * 2);
        // Seeds ascend within each cell.
        assert!(lines[1].starts_with("baseline,avg,0,"));
        assert!(lines[2].starts_with("baseline,avg,1,"));
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let cfg = tiny_cfg();
        assert!(train(&[], &cfg).is_err());
        let data = synth_dataset(2, 2, 10, 8, 1).unwrap();
        // Config J mismatch.
        assert!(train(&data, &cfg).is_err());
    }
}
