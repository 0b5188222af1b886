//! Optimisation loop: AdamW, clipping, loss-dropout stream, FLOPs accounting,
//! checkpoints, and per-seed run reports.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Corpus};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::numerics::Tensor;
use crate::objectives::{dropout_schedule, llm_jepa_loss, ObjectiveConfig};

pub const DEFAULT_SEEDS: [u64; 5] = [82, 23, 37, 84, 4];
pub const LR_GRID: [f64; 4] = [1e-5, 2e-5, 4e-5, 8e-5];
pub const GRID_K: [usize; 5] = [0, 1, 2, 3, 4];
pub const GRID_LAMBDA: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// (k, λ) sweep axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            k: GRID_K.to_vec(),
            lambda: GRID_LAMBDA.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
    pub checkpoint_every_epoch: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs: 4,
            batch_size: 8,
            seeds: default_seeds(),
            optimizer: AdamWConfig::default(),
            clip_norm: Some(1.0),
            shuffle: true,
            checkpoint_every_epoch: true,
            grid: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract("lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("seeds must be non-empty"));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::contract("seeds must be distinct"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract("clip_norm must be positive"));
            }
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::contract("invalid optimizer hyperparameters"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update. `decay[i]` selects which tensors receive weight decay.
pub fn adamw_step(
    weights: &mut [&mut [f64]],
    grads: &[&[f64]],
    decay: &[bool],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() || decay.len() != weights.len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
        if w.len() != g.len() || state.m[i].len() != w.len() {
            return Err(Error::contract("gradient size does not match parameter"));
        }
        let wd = if decay[i] { hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..w.len() {
            w[j] -= lr * wd * w[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            w[j] -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Forward-pass and FLOPs tally.
///
/// A pass is one batched forward over the batch; the JEPA term adds exactly
/// one more when it is kept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsCounter {
    pub batches: u64,
    pub ntp_passes: u64,
    pub jepa_passes: u64,
    pub dropped_batches: u64,
    pub flops: u64,
}

impl FlopsCounter {
    pub fn forward_passes(&self) -> u64 {
        self.ntp_passes + self.jepa_passes
    }

    /// Record one batch: sequence lengths of both passes and whether the second ran.
    pub fn record(&mut self, config: &ModelConfig, ntp_lens: &[usize], packed_lens: &[usize], second_pass: bool, dropped: bool) {
        self.batches += 1;
        self.ntp_passes += 1;
        self.flops += ntp_lens.iter().map(|&l| config.forward_flops(l, true)).sum::<u64>();
        if second_pass {
            self.jepa_passes += 1;
            self.flops += packed_lens.iter().map(|&l| config.forward_flops(l, false)).sum::<u64>();
        }
        if dropped {
            self.dropped_batches += 1;
        }
    }

    pub fn keep_fraction(&self) -> f64 {
        if self.batches == 0 {
            return 1.0;
        }
        1.0 - self.dropped_batches as f64 / self.batches as f64
    }
}

/// One optimiser step as written to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub ntp: f64,
    pub jepa: Option<f64>,
    pub total: f64,
    pub forward_passes: u32,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_ntp: f64,
    /// Mean over batches where the second pass ran.
    pub mean_jepa: Option<f64>,
    pub mean_total: f64,
    pub skipped_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
    pub final_ntp: Option<f64>,
    pub final_jepa: Option<f64>,
    pub flops: FlopsCounter,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
}

/// Outcome of one seed: report, step log, and the final weights if it completed.
#[derive(Debug)]
pub struct SeedRun {
    pub report: SeedReport,
    pub metrics: Vec<StepRecord>,
    pub model: Option<Transformer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub objective: ObjectiveConfig,
    pub seeds: Vec<SeedReport>,
}

/// Shuffle seed for an epoch, distinct from the init and dropout streams.
pub fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0x5851_F42D_4C95_7F2D)
}

fn dropout_stream_seed(seed: u64) -> u64 {
    seed ^ 0xD1B5_4A32_D192_ED03
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Train one seed from random init (or from `init` when provided).
///
/// With `out` set, writes `metrics.jsonl`, per-epoch checkpoints, and
/// `report.json` under `seed-<seed>/`.
pub fn train_seed(
    model_config: &ModelConfig,
    train: &TrainConfig,
    objective: &ObjectiveConfig,
    corpus: &Corpus,
    seed: u64,
    init: Option<&Transformer>,
    out: Option<&Path>,
) -> Result<SeedRun> {
    model_config.validate()?;
    train.validate()?;
    objective.validate()?;
    let dir = out.map(|o| seed_dir(o, seed));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut model = match init {
        Some(m) => m.clone(),
        None => Transformer::init(model_config.clone(), seed)?,
    };
    let decay: Vec<bool> = model.params().iter().map(|p| p.shape().len() == 2).collect();
    let mut state = AdamState::zeros(model.params().iter().map(|p| p.numel()));
    let mut report = SeedReport {
        seed,
        status: RunStatus::Completed,
        diagnostic: None,
        steps: 0,
        epochs: Vec::new(),
        final_ntp: None,
        final_jepa: None,
        flops: FlopsCounter::default(),
        final_checkpoint: None,
    };
    let mut metrics = Vec::new();
    let mut batch_index = 0u64;
    let drop_seed = dropout_stream_seed(seed);

    let outcome = (|| -> Result<()> {
        for epoch in 0..train.epochs {
            let pairs = corpus.pairs_for_epoch(epoch);
            let shuffle = train.shuffle.then(|| epoch_shuffle_seed(seed, epoch));
            let plan = make_batches(&pairs, train.batch_size, objective, model_config.max_seq_len, shuffle)?;
            let (mut sum_ntp, mut sum_total, mut sum_jepa, mut n_jepa) = (0.0, 0.0, 0.0, 0usize);
            for batch in &plan.batches {
                let keep = dropout_schedule(drop_seed, objective.loss_dropout, batch_index);
                batch_index += 1;
                let out = llm_jepa_loss(&model, batch, objective, keep, true)?;
                let mut grads = out.grads.expect("requested");
                let grad_norm = match train.clip_norm {
                    Some(c) => clip_global_norm(&mut grads, c),
                    None => global_norm(&grads),
                };
                {
                    let g: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
                    let mut w: Vec<&mut [f64]> = model.params_mut().map(|t| t.data_mut()).collect();
                    adamw_step(&mut w, &g, &decay, &mut state, train.lr, &train.optimizer)?;
                }
                let loss = out.loss;
                report.flops.record(
                    model_config,
                    &batch.iter().map(|e| e.ntp_tokens.len()).collect::<Vec<_>>(),
                    &batch.iter().map(|e| e.packed.tokens.len()).collect::<Vec<_>>(),
                    loss.forward_passes == 2,
                    objective.runs_second_pass() && !keep,
                );
                sum_ntp += loss.ntp_loss;
                sum_total += loss.total;
                if let Some(d) = loss.jepa_distance {
                    sum_jepa += d;
                    n_jepa += 1;
                }
                report.steps += 1;
                metrics.push(StepRecord {
                    step: report.steps,
                    epoch,
                    ntp: loss.ntp_loss,
                    jepa: loss.jepa_distance,
                    total: loss.total,
                    forward_passes: loss.forward_passes,
                    grad_norm,
                });
            }
            let nb = plan.batches.len() as f64;
            let checkpoint = match (&dir, train.checkpoint_every_epoch) {
                (Some(d), true) => {
                    let name = format!("epoch-{epoch}.ckpt");
                    model.save(&d.join(&name))?;
                    Some(name)
                }
                _ => None,
            };
            report.epochs.push(EpochSummary {
                epoch,
                mean_ntp: sum_ntp / nb,
                mean_jepa: (n_jepa > 0).then(|| sum_jepa / n_jepa as f64),
                mean_total: sum_total / nb,
                skipped_examples: plan.skipped,
                checkpoint,
            });
        }
        Ok(())
    })();

    match outcome {
        Ok(()) => {}
        Err(Error::Divergence(msg)) => {
            report.status = RunStatus::Diverged;
            report.diagnostic = Some(format!("step {}: {msg}", report.steps + 1));
        }
        Err(e) => return Err(e),
    }
    if let Some(last) = report.epochs.last() {
        report.final_ntp = Some(last.mean_ntp);
        report.final_jepa = last.mean_jepa;
    }
    let completed = report.status == RunStatus::Completed;
    if let Some(d) = &dir {
        if completed {
            model.save(&d.join("final.ckpt"))?;
            report.final_checkpoint = Some("final.ckpt".into());
        }
        write_metrics(&d.join("metrics.jsonl"), &metrics)?;
        write_json(&d.join("report.json"), &report)?;
    }
    Ok(SeedRun {
        report,
        metrics,
        model: completed.then_some(model),
    })
}

/// Train every configured seed; a diverged seed does not stop the others.
pub fn train(
    model_config: &ModelConfig,
    train: &TrainConfig,
    objective: &ObjectiveConfig,
    corpus: &Corpus,
    out: Option<&Path>,
) -> Result<(RunReport, Vec<SeedRun>)> {
    train.validate()?;
    let runs = train
        .seeds
        .iter()
        .map(|&s| train_seed(model_config, train, objective, corpus, s, None, out))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        objective: objective.clone(),
        seeds: runs.iter().map(|r| r.report.clone()).collect(),
    };
    if let Some(o) = out {
        write_json(&o.join("report.json"), &report)?;
    }
    Ok((report, runs))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
