//! Exact gradients, AdamW, the training loop, and checkpointing.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataio::{read_tensor_from, write_tensor_to, Dataset, Split};
use crate::error::{CheckpointError, Error, Result};
use crate::evalcli::{directional_ranks, metrics};
use crate::numerics::{finite_diff_grad, gaussian_sample, rel_err, DenseMatrix, SeededRng};
use crate::scoring::{
    batch_loss_t, draw_batch_noise, prepare_pair, similarity_matrix, LossWeights, NoiseSource,
    PreparedPair, ScoreMode,
};

pub use crate::scoring::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training hyperparameters. Every field has a default, so `{}` is a valid
/// config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_v2t: f64,
    pub lambda_t2v: f64,
    pub lambda_v: f64,
    pub gamma: f64,
    pub frames: usize,
    pub seed: u64,
    /// First epoch at which validation runs; full-scale training delays it.
    pub eval_start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            hidden_dim: 256,
            layers: 2,
            lr: 3e-5,
            weight_decay: 0.01,
            batch: 16,
            epochs: 30,
            lambda_v2t: 0.5,
            lambda_t2v: 0.5,
            lambda_v: 0.6,
            gamma: 1.0,
            frames: 10,
            seed: 42,
            eval_start_epoch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("frames", self.frames),
            ("eval_start_epoch", self.eval_start_epoch),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("lr", self.lr), ("gamma", self.gamma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArg(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArg(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_v2t: self.lambda_v2t,
            lambda_t2v: self.lambda_t2v,
            lambda_v: self.lambda_v,
        }
    }

    pub fn from_json_str(s: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(s)
            .map_err(|e| Error::InvalidArg(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json_str(&s)
    }
}

/// Loss value plus the exact gradient of every named tensor.
pub struct BatchGrads {
    pub loss: f64,
    pub l_t2v: f64,
    pub l_v2t: f64,
    pub kl: f64,
    /// Canonical tensor order; zero matrices where the loss is independent.
    pub grads: Vec<(String, DenseMatrix)>,
}

/// Reverse-mode gradient of the batch loss. The reparameterization noise is
/// sampled once and held fixed through the backward pass.
pub fn backward(
    batch: &[PreparedPair],
    params: &ModelParams,
    weights: &LossWeights,
    rng: &mut SeededRng,
) -> Result<BatchGrads> {
    backward_with(batch, params, weights, &mut NoiseSource::Rng(rng))
}

pub fn backward_with(
    batch: &[PreparedPair],
    params: &ModelParams,
    weights: &LossWeights,
    noise: &mut NoiseSource,
) -> Result<BatchGrads> {
    params.validate()?;
    let mut t = Tape::new();
    let (mv, registry) = params.vars(&mut t, true);
    let bl = batch_loss_t(&mut t, &mv, batch, weights, noise)?;
    let loss = t.scalar(bl.total);
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    let g = t.backward(bl.total);
    let mut grads = Vec::with_capacity(registry.len());
    for (name, var) in &registry {
        let shape = params.tensor(name).expect("registered tensor").shape();
        let gm = g.get(*var, shape);
        if !gm.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        grads.push((name.clone(), gm));
    }
    Ok(BatchGrads {
        loss,
        l_t2v: t.scalar(bl.l_t2v),
        l_v2t: t.scalar(bl.l_v2t),
        kl: t.scalar(bl.kl_mean),
        grads,
    })
}

struct MomentSlot {
    name: String,
    m: DenseMatrix,
    v: DenseMatrix,
}

/// AdamW moments, one slot per named tensor.
pub struct OptimizerState {
    slots: Vec<MomentSlot>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> OptimizerState {
        let slots = params
            .names()
            .into_iter()
            .map(|name| {
                let (r, c) = params.tensor(&name).expect("named tensor").shape();
                MomentSlot {
                    name,
                    m: DenseMatrix::zeros(r, c),
                    v: DenseMatrix::zeros(r, c),
                }
            })
            .collect();
        OptimizerState { slots, t: 0 }
    }
}

/// One decoupled-weight-decay Adam step:
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[(String, DenseMatrix)],
    state: &mut OptimizerState,
    lr: f64,
    wd: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let slot = state
            .slots
            .iter_mut()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter `{name}`")))?;
        let theta = params
            .tensor_mut(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter `{name}`")))?;
        if g.shape() != theta.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    theta.shape()
                ),
            ));
        }
        let gd = g.data();
        let td = theta.data_mut();
        let md = slot.m.data_mut();
        let vd = slot.v.data_mut();
        for i in 0..gd.len() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            td[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * td[i]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// Training progress recorded next to the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub epoch: usize,
    pub best_metric: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: TrainConfig,
    params: Vec<TensorIndexEntry>,
    seed: u64,
    epoch: usize,
    best_metric: f64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub best_metric: f64,
}

/// Writes `meta.json` plus `params.bin` (tensor blobs concatenated in
/// canonical name order).
pub fn save_checkpoint(
    params: &ModelParams,
    state: &TrainState,
    config: &TrainConfig,
    dir: &Path,
) -> Result<()> {
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_path = dir.join("params.bin");
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut index = Vec::new();
    let mut offset = 0u64;
    for name in params.names() {
        let tensor = params.tensor(&name).expect("named tensor");
        let (rows, cols) = tensor.shape();
        index.push(TensorIndexEntry {
            name,
            rows,
            cols,
            offset,
        });
        write_tensor_to(&mut w, tensor, &bin_path)?;
        offset += 28 + 4 * (rows as u64) * (cols as u64);
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))?;

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: index,
        seed: state.seed,
        epoch: state.epoch,
        best_metric: state.best_metric,
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
    fs::write(&meta_path, body + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&body)
        .map_err(|e| CheckpointError::Meta(format!("meta.json: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(meta.version).into());
    }
    meta.config.validate()?;

    let entry = |name: &str| -> Result<&TensorIndexEntry> {
        meta.params
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()).into())
    };
    let text_dim = entry("proj.text")?.rows;
    let video_dim = entry("proj.video")?.rows;
    let seeded = SeededRng::new(0);
    let mut params = ModelParams::init(
        text_dim,
        video_dim,
        meta.config.hidden_dim,
        meta.config.layers,
        meta.config.gamma,
        meta.config.frames,
        &seeded,
    )?;
    let canonical = params.names();
    for e in &meta.params {
        if !canonical.iter().any(|n| n == &e.name) {
            return Err(CheckpointError::UnknownTensor(e.name.clone()).into());
        }
    }
    for name in &canonical {
        entry(name)?;
    }

    let bin_path = dir.join("params.bin");
    let file = File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut r = BufReader::new(file);
    let mut pos = 0u64;
    for e in &meta.params {
        if e.offset != pos {
            return Err(CheckpointError::Meta(format!(
                "tensor `{}` indexed at offset {} but stream is at {pos}",
                e.name, e.offset
            ))
            .into());
        }
        let blob = read_tensor_from(&mut r, &bin_path)?;
        pos += 28 + 4 * (blob.data().len() as u64);
        if blob.shape() != (e.rows, e.cols) {
            return Err(CheckpointError::TensorShape {
                name: e.name.clone(),
                expected: format!("{}x{}", e.rows, e.cols),
                got: format!("{}x{}", blob.rows(), blob.cols()),
            }
            .into());
        }
        let dst = params.tensor_mut(&e.name).expect("canonical tensor");
        if dst.shape() != blob.shape() {
            return Err(CheckpointError::TensorShape {
                name: e.name.clone(),
                expected: format!("{}x{}", dst.rows(), dst.cols()),
                got: format!("{}x{}", blob.rows(), blob.cols()),
            }
            .into());
        }
        *dst = blob;
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(CheckpointError::Meta("params.bin has trailing data".into()).into())
        }
        Err(e) => return Err(Error::io(&bin_path, e)),
    }
    params.validate()?;
    Ok(Checkpoint {
        params,
        seed: meta.seed,
        epoch: meta.epoch,
        best_metric: meta.best_metric,
        config: meta.config,
    })
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_kl: f64,
    pub val_rsum: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Trains on the `train` split with per-epoch seeded shuffling and keeps the
/// checkpoint that maximizes validation RSUM (t2v + v2t). Without a `val`
/// split the lowest training loss is kept instead. The whole run is a pure
/// function of (dataset, config).
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let train_items = dataset.split_items(Split::Train);
    let n_train = train_items.len();
    if n_train < config.batch {
        return Err(Error::InvalidArg(format!(
            "training split has {n_train} pairs but batch size is {}; \
             pick a batch size of at most {n_train}",
            config.batch
        )));
    }
    let text_dim = dataset.text_dim().expect("non-empty dataset");
    let video_dim = dataset.video_dim().expect("non-empty dataset");

    let rng = SeededRng::new(config.seed);
    let init_rng = rng.child("init");
    let mut params = ModelParams::init(
        text_dim,
        video_dim,
        config.hidden_dim,
        config.layers,
        config.gamma,
        config.frames,
        &init_rng,
    )?;
    let weights = config.loss_weights();
    let prepared: Vec<PreparedPair> = train_items
        .iter()
        .map(|it| prepare_pair(&it.text, &it.video, config.frames))
        .collect::<Result<_>>()?;
    let val_items = dataset.split_items(Split::Val);
    let val_texts: Vec<DenseMatrix> = val_items.iter().map(|it| it.text.clone()).collect();
    let val_videos: Vec<DenseMatrix> = val_items.iter().map(|it| it.video.clone()).collect();

    let mut opt = OptimizerState::new(&params);
    let mut best: Option<(f64, usize)> = None;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        rng.child(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut noise_rng = rng.child(&format!("noise{epoch}"));
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<PreparedPair> =
                chunk.iter().map(|&i| prepared[i].clone()).collect();
            let bg = backward(&batch, &params, &weights, &mut noise_rng)?;
            adamw_step(&mut params, &bg.grads, &mut opt, config.lr, config.weight_decay)?;
            loss_sum += bg.loss * batch.len() as f64;
            ce_sum += 0.5 * (bg.l_t2v + bg.l_v2t) * batch.len() as f64;
            kl_sum += bg.kl * batch.len() as f64;
        }
        let mean_loss = loss_sum / n_train as f64;
        let mean_ce = ce_sum / n_train as f64;
        let mean_kl = kl_sum / n_train as f64;

        let mut val_rsum = None;
        let metric = if !val_items.is_empty() {
            if epoch >= config.eval_start_epoch {
                let sim =
                    similarity_matrix(&val_texts, &val_videos, &params, &mut ScoreMode::Eval)?;
                let (rt, rv) = directional_ranks(&sim)?;
                let m = metrics(&rt)?.rsum + metrics(&rv)?.rsum;
                val_rsum = Some(m);
                Some(m)
            } else {
                None
            }
        } else {
            Some(-mean_loss)
        };
        // Ties prefer the later epoch: more training at equal validation.
        if let Some(m) = metric {
            if best.map_or(true, |(bm, _)| m >= bm) {
                best = Some((m, epoch));
                let state = TrainState {
                    seed: config.seed,
                    epoch,
                    best_metric: m,
                };
                save_checkpoint(&params, &state, config, out_dir)?;
            }
        }
        match val_rsum {
            Some(v) => eprintln!(
                "epoch {epoch}: loss {mean_loss:.4} (ce {mean_ce:.4}, kl {mean_kl:.4}), val rsum {v:.2}"
            ),
            None => eprintln!("epoch {epoch}: loss {mean_loss:.4} (ce {mean_ce:.4}, kl {mean_kl:.4})"),
        }
        logs.push(EpochLog {
            epoch,
            mean_loss,
            mean_ce,
            mean_kl,
            val_rsum,
        });
    }
    let (best_metric, best_epoch) = best.ok_or_else(|| {
        Error::InvalidArg(
            "no epoch was eligible for checkpointing; lower eval_start_epoch or raise epochs"
                .into(),
        )
    })?;
    Ok(TrainOutcome {
        checkpoint_dir: out_dir.to_path_buf(),
        epochs: logs,
        best_epoch,
        best_metric,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub batch: usize,
    pub frames: usize,
    pub words: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    /// The default seed keeps every ReLU pre-activation well clear of its
    /// kink; central differences straddling a kink report the mean of the
    /// two one-sided slopes and falsely implicate the backward pass.
    fn default() -> GradCheckConfig {
        GradCheckConfig {
            hidden_dim: 8,
            layers: 2,
            batch: 3,
            frames: 4,
            words: 3,
            eps: 1e-5,
            seed: 54,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor owning the worst coordinate.
    pub worst: String,
    pub coords: usize,
}

/// Compares every backward gradient coordinate against central finite
/// differences on a randomly initialized model and batch. The noise draw is
/// shared between both routes, so the comparison is exact up to O(eps^2).
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    const TEXT_DIM: usize = 5;
    const VIDEO_DIM: usize = 7;
    for (name, v) in [
        ("hidden_dim", cfg.hidden_dim),
        ("batch", cfg.batch),
        ("frames", cfg.frames),
        ("words", cfg.words),
    ] {
        if v == 0 {
            return Err(Error::InvalidArg(format!("{name} must be >= 1")));
        }
    }
    let rng = SeededRng::new(cfg.seed);
    let init_rng = rng.child("init");
    let params = ModelParams::init(
        TEXT_DIM,
        VIDEO_DIM,
        cfg.hidden_dim,
        cfg.layers,
        1.0,
        cfg.frames,
        &init_rng,
    )?;
    let mut items = Vec::with_capacity(cfg.batch);
    for i in 0..cfg.batch {
        let mut s = rng.child(&format!("item{i}"));
        let text = gaussian_sample(&mut s, cfg.words, TEXT_DIM)?;
        let video = gaussian_sample(&mut s, cfg.frames + 2, VIDEO_DIM)?;
        items.push(prepare_pair(&text, &video, cfg.frames)?);
    }
    let mut noise_rng = rng.child("noise");
    let noise = draw_batch_noise(&items, cfg.hidden_dim, &mut noise_rng)?;
    let weights = LossWeights::default();

    let bg = backward_with(&items, &params, &weights, &mut NoiseSource::Fixed(&noise))?;
    let mut analytic = Vec::with_capacity(params.num_scalars());
    let mut spans = Vec::with_capacity(bg.grads.len());
    for (name, g) in &bg.grads {
        spans.push((name.clone(), analytic.len(), g.data().len()));
        analytic.extend_from_slice(g.data());
    }

    let theta0 = params.flatten();
    let mut scratch = params.clone();
    let mut f = |theta: &[f64]| -> f64 {
        if scratch.assign_flat(theta).is_err() {
            return f64::NAN;
        }
        let mut t = Tape::new();
        let (mv, _) = scratch.vars(&mut t, false);
        match batch_loss_t(&mut t, &mv, &items, &weights, &mut NoiseSource::Fixed(&noise)) {
            Ok(bl) => t.scalar(bl.total),
            Err(_) => f64::NAN,
        }
    };
    let numeric = finite_diff_grad(&mut f, &theta0, cfg.eps)?;
    if numeric.len() != analytic.len() {
        return Err(Error::shape(
            "gradient_check",
            format!("{} analytic vs {} numeric coords", analytic.len(), numeric.len()),
        ));
    }

    let mut max_rel_err = 0.0;
    let mut worst_idx = 0;
    for (i, (&a, &b)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let e = rel_err(a, b, 1e-8);
        if e > max_rel_err {
            max_rel_err = e;
            worst_idx = i;
        }
    }
    let worst = spans
        .iter()
        .find(|(_, start, len)| worst_idx >= *start && worst_idx < start + len)
        .map(|(name, _, _)| name.clone())
        .unwrap_or_default();
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords: analytic.len(),
    })
}
