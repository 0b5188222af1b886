//! Next-token loss, view-embedding distances, and their weighted combination.
//!
//! A batch costs one forward pass per example for the next-token term. When
//! the JEPA term survives loss dropout a second pass runs over the packed
//! two-view sequence under the block-causal mask, giving the predictor output
//! for the source view and the embedding of the target view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::masking::{block_causal_mask, causal_mask, Direction, Placement};
use crate::model::{Segment, Transformer};
use crate::numerics::{Tape, Tensor, Var};
use crate::parallel::{self, Strategy};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - cos(pred, target)`.
    #[default]
    Cosine,
    /// Euclidean distance.
    L2,
    /// Squared Euclidean distance over the embedding width.
    Mse,
    /// In-batch contrastive loss with cosine logits over temperature.
    #[serde(rename = "infonce")]
    InfoNce,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskMode {
    /// Supervise only the target view (and its end token).
    #[default]
    CompletionOnly,
    FullSequence,
}

/// How the JEPA term participates in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Next-token loss only; no second pass.
    Ntp,
    /// Next-token loss plus the weighted JEPA term.
    #[default]
    Jepa,
    /// Next-token gradients only, with the JEPA distance computed and logged.
    Monitor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub lambda: f64,
    pub gamma: f64,
    /// Number of predictor tokens.
    pub k: usize,
    pub metric: Metric,
    pub tau: f64,
    pub direction: Direction,
    pub placement: Placement,
    /// Probability of dropping the JEPA term for a batch.
    pub loss_dropout: f64,
    pub loss_mask_mode: LossMaskMode,
    /// Treat the target embedding as a constant.
    pub stop_grad_target: bool,
    /// Enforce `max(gamma, lambda) == 1`.
    pub gamma_sweep: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: ObjectiveMode::Jepa,
            lambda: 1.0,
            gamma: 1.0,
            k: 1,
            metric: Metric::Cosine,
            tau: 0.07,
            direction: Direction::TextToCode,
            placement: Placement::Append,
            loss_dropout: 0.0,
            loss_mask_mode: LossMaskMode::CompletionOnly,
            stop_grad_target: false,
            gamma_sweep: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn ntp() -> Self {
        ObjectiveConfig {
            mode: ObjectiveMode::Ntp,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::contract("lambda and gamma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.loss_dropout) {
            return Err(Error::contract("loss_dropout must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::contract("tau must be positive"));
        }
        if self.gamma_sweep && self.gamma.max(self.lambda) != 1.0 {
            return Err(Error::contract("gamma sweep requires max(gamma, lambda) = 1"));
        }
        Ok(())
    }

    /// Weight the JEPA term carries in the gradient.
    pub fn jepa_weight(&self) -> f64 {
        match self.mode {
            ObjectiveMode::Jepa => self.lambda,
            ObjectiveMode::Ntp | ObjectiveMode::Monitor => 0.0,
        }
    }

    pub fn runs_second_pass(&self) -> bool {
        self.mode != ObjectiveMode::Ntp
    }
}

/// Per-batch loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp_loss: f64,
    /// Absent when the second pass did not run.
    pub jepa_distance: Option<f64>,
    pub total: f64,
    /// The JEPA term was computed for this batch.
    pub jepa_active: bool,
    /// Weight applied to `jepa_distance` in `total`.
    pub jepa_weight: f64,
    pub forward_passes: u32,
}

/// Next-token targets for `tokens` under a per-position loss mask.
///
/// Position `i` predicts `tokens[i + 1]` when `mask[i]` is set; the last
/// position never has a target.
pub fn ntp_targets(tokens: &[TokenId], mask: &[bool]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| {
            (i + 1 < tokens.len() && mask.get(i).copied().unwrap_or(false)).then(|| tokens[i + 1] as usize)
        })
        .collect()
}

/// Mean next-token cross-entropy over the marked positions of `logits: [L×V]`.
pub fn ntp_loss(tape: &mut Tape, logits: Var, tokens: &[TokenId], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, &ntp_targets(tokens, mask))
}

/// Batch-mean distance between predictor outputs and target embeddings.
///
/// For InfoNCE the other targets in the batch act as negatives.
pub fn view_distance(tape: &mut Tape, preds: &[Var], targets: &[Var], metric: Metric, tau: f64) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract("view_distance needs equally many, non-zero pairs"));
    }
    if metric == Metric::InfoNce {
        let p = tape.stack_rows(preds)?;
        let c = tape.stack_rows(targets)?;
        let pn = tape.normalize_rows(p).map_err(|_| Error::DegenerateVector { metric: "infonce" })?;
        let cn = tape.normalize_rows(c).map_err(|_| Error::DegenerateVector { metric: "infonce" })?;
        let sim = tape.matmul_nt(pn, cn)?;
        let logits = tape.scale(sim, 1.0 / tau);
        let diag: Vec<Option<usize>> = (0..preds.len()).map(Some).collect();
        return tape.cross_entropy(logits, &diag);
    }
    let mut per_pair = Vec::with_capacity(preds.len());
    for (&p, &c) in preds.iter().zip(targets) {
        let d = match metric {
            Metric::Cosine => {
                let cos = tape.cosine_similarity(p, c)?;
                tape.affine(cos, -1.0, 1.0)
            }
            Metric::L2 => {
                let diff = tape.sub(p, c)?;
                let sq = tape.sum_squares(diff);
                tape.sqrt(sq)
            }
            Metric::Mse => {
                let width = tape.value(p).numel() as f64;
                let diff = tape.sub(p, c)?;
                let sq = tape.sum_squares(diff);
                tape.scale(sq, 1.0 / width)
            }
            Metric::InfoNce => unreachable!(),
        };
        per_pair.push(d);
    }
    let all = tape.stack_rows(&per_pair)?;
    Ok(tape.mean(all))
}

/// Distance between two vectors as a plain number (InfoNCE over a batch of one).
pub fn pair_distance(pred: &Tensor, target: &Tensor, metric: Metric, tau: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let p = tape.constant(pred.clone());
    let c = tape.constant(target.clone());
    let d = view_distance(&mut tape, &[p], &[c], metric, tau)?;
    Ok(tape.value(d).item())
}

/// Keep/drop decision for the JEPA term of one batch.
///
/// Counter-based: the ChaCha stream is keyed by `seed` and selected by
/// `batch_index`, so decisions do not depend on evaluation order.
pub fn dropout_schedule(seed: u64, alpha: f64, batch_index: u64) -> bool {
    if alpha <= 0.0 {
        return true;
    }
    if alpha >= 1.0 {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch_index);
    rng.gen::<f64>() >= alpha
}

/// Loss terms and, optionally, parameter gradients for one batch.
#[derive(Debug)]
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    /// Gradients of `loss.total` in parameter declaration order.
    pub grads: Option<Vec<Tensor>>,
}

struct ExampleTape {
    tape: Tape,
    params: Vec<Var>,
    ntp: Var,
    views: Option<(Var, Var)>,
}

fn forward_example(
    model: &Transformer,
    ex: &EncodedExample,
    second_pass: bool,
    grad: bool,
) -> Result<ExampleTape> {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let l = ex.ntp_tokens.len();
    let positions: Vec<usize> = (0..l).collect();
    let out = model.forward(&mut tape, &ex.ntp_tokens, &positions, &causal_mask(l)?, true)?;
    let ntp = tape.cross_entropy(out.logits.expect("requested"), &ex.targets)?;
    let views = if second_pass {
        let packed = &ex.packed;
        let mask = block_causal_mask(&packed.layout, packed.tokens.len())?;
        let second = model.forward_with(&mut tape, &out.params, &packed.tokens, packed.positions(), &mask, false)?;
        let pred = tape.row(second.hidden, Segment::Predictor.index(&packed.layout))?;
        let target = tape.row(second.hidden, Segment::Target.index(&packed.layout))?;
        Some((pred, target))
    } else {
        None
    };
    Ok(ExampleTape {
        tape,
        params: out.params,
        ntp,
        views,
    })
}

/// Evaluate the combined objective on one batch.
///
/// `keep` is the loss-dropout decision for this batch. With `want_grads` the
/// returned gradients are those of `total`; the JEPA term only feeds them
/// when its effective weight is non-zero.
pub fn llm_jepa_loss(
    model: &Transformer,
    batch: &[EncodedExample],
    config: &ObjectiveConfig,
    keep: bool,
    want_grads: bool,
) -> Result<BatchOutcome> {
    llm_jepa_loss_with(Strategy::default(), model, batch, config, keep, want_grads)
}

/// [`llm_jepa_loss`] with an explicit execution strategy for the per-example work.
pub fn llm_jepa_loss_with(
    strategy: Strategy,
    model: &Transformer,
    batch: &[EncodedExample],
    config: &ObjectiveConfig,
    keep: bool,
    want_grads: bool,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let second_pass = config.runs_second_pass() && keep;
    let weight = if second_pass { config.jepa_weight() } else { 0.0 };
    let b = batch.len() as f64;

    let tapes: Vec<ExampleTape> = parallel::map_with(strategy, batch, |ex| forward_example(model, ex, second_pass, want_grads))
        .into_iter()
        .collect::<Result<_>>()?;
    let ntp_loss = tapes.iter().map(|t| t.tape.value(t.ntp).item()).sum::<f64>() / b;

    // Distance on a small batch-level tape over the extracted embeddings.
    let mut view_seeds: Vec<Option<(Tensor, Tensor)>> = vec![None; tapes.len()];
    let jepa_distance = if second_pass {
        let mut bt = Tape::new();
        let track_target = !config.stop_grad_target;
        let mut preds = Vec::with_capacity(tapes.len());
        let mut targets = Vec::with_capacity(tapes.len());
        for t in &tapes {
            let (p, c) = t.views.expect("second pass ran");
            preds.push(bt.variable(t.tape.value(p).clone()));
            targets.push(bt.leaf(t.tape.value(c).clone(), track_target));
        }
        let d = view_distance(&mut bt, &preds, &targets, config.metric, config.tau)?;
        let value = bt.value(d).item();
        if want_grads && weight != 0.0 {
            let mut g = bt.backward(d)?;
            for (i, (p, c)) in preds.iter().zip(&targets).enumerate() {
                let gp = g.take(*p).expect("pred grad");
                let gc = g.take(*c).unwrap_or_else(|| Tensor::zeros(bt.value(*c).shape()));
                view_seeds[i] = Some((gp, gc));
            }
        }
        Some(value)
    } else {
        None
    };

    let total = config.gamma * ntp_loss + jepa_distance.map_or(0.0, |d| weight * d);
    if !total.is_finite() {
        return Err(Error::Divergence(format!("batch loss {total}")));
    }
    let loss = LossBreakdown {
        ntp_loss,
        jepa_distance,
        total,
        jepa_active: second_pass,
        jepa_weight: weight,
        forward_passes: if second_pass { 2 } else { 1 },
    };
    if !want_grads {
        return Ok(BatchOutcome { loss, grads: None });
    }

    let gamma = config.gamma;
    let work: Vec<(ExampleTape, Option<(Tensor, Tensor)>)> = tapes.into_iter().zip(view_seeds).collect();
    let per_example: Vec<Vec<Tensor>> = parallel::map_with(strategy, &work, |(t, seeds)| -> Result<Vec<Tensor>> {
        let mut s = vec![(t.ntp, Tensor::scalar(gamma / b))];
        if let (Some((gp, gc)), Some((p, c))) = (seeds, t.views) {
            s.push((p, scaled(gp.clone(), weight)));
            s.push((c, scaled(gc.clone(), weight)));
        }
        let mut g = t.tape.backward_from(&s)?;
        Ok(t.params.iter().map(|&v| g.take(v).expect("param grad")).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;

    // Fixed-order reduction keeps parallel and sequential builds identical.
    let mut iter = per_example.into_iter();
    let mut grads = iter.next().expect("non-empty batch");
    for ex in iter {
        for (acc, g) in grads.iter_mut().zip(ex) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    Ok(BatchOutcome {
        loss,
        grads: Some(grads),
    })
}

fn scaled(mut t: Tensor, c: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}
