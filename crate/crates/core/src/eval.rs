//! Generation and option-probability evaluation, match scoring, and the
//! paired one-tailed t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::data::{prompt_ids, ViewPairExample};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::numerics::log_prob;
use crate::parallel;
use crate::tokenizer::{decode, encode, TokenId, EOS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Exact,
    Prefix,
    Substring,
    LabelPrefix,
    McOptionProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub match_mode: MatchMode,
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
    pub strip_trailing_whitespace: bool,
    /// Divide option log-probabilities by option length in `mc_score`.
    pub length_normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_mode: MatchMode::Exact,
            max_new_tokens: 64,
            stop_on_eos: true,
            strip_trailing_whitespace: true,
            length_normalize: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::contract("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// New tokens, excluding a terminating EOS.
    pub ids: Vec<TokenId>,
    pub hit_eos: bool,
}

/// Argmax decoding from `prompt` until EOS, the token budget, or the context limit.
pub fn greedy_generate(model: &Transformer, prompt: &[TokenId], max_new_tokens: usize, stop_on_eos: bool) -> Result<Generation> {
    let max_len = model.config().max_seq_len;
    if prompt.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    if prompt.len() > max_len {
        return Err(Error::Capacity {
            len: prompt.len(),
            max: max_len,
        });
    }
    let emb = model.token_embedding();
    let (vocab, d) = emb.dims2();
    let mut seq = prompt.to_vec();
    let mut ids = Vec::new();
    let mut hit_eos = false;
    while ids.len() < max_new_tokens && seq.len() < max_len {
        let hidden = model.hidden_causal(&seq)?;
        let h = hidden.row(seq.len() - 1);
        let logits: Vec<f64> = (0..vocab)
            .map(|v| emb.data()[v * d..(v + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum())
            .collect();
        let next = argmax(&logits) as TokenId;
        if next == EOS && stop_on_eos {
            hit_eos = true;
            break;
        }
        seq.push(next);
        ids.push(next);
    }
    Ok(Generation { ids, hit_eos })
}

/// Whether a generation counts as correct under `mode`.
///
/// `label_prefix` ignores leading whitespace in the generation; `exact`
/// optionally strips trailing whitespace from both sides.
pub fn score_match(generated: &str, truths: &[String], mode: MatchMode, strip_trailing: bool) -> Result<bool> {
    let first = truths.first().ok_or_else(|| Error::contract("truths must be non-empty"))?;
    Ok(match mode {
        MatchMode::Exact if strip_trailing => generated.trim_end() == first.trim_end(),
        MatchMode::Exact => generated == first,
        MatchMode::Prefix => generated.starts_with(first.as_str()),
        MatchMode::Substring => truths.iter().any(|t| generated.contains(t.as_str())),
        MatchMode::LabelPrefix => generated.trim_start().starts_with(first.as_str()),
        MatchMode::McOptionProb => return Err(Error::contract("option scoring goes through mc_score")),
    })
}

/// Option with the highest (optionally length-normalised) log-probability
/// given `context`; ties go to the lowest index.
pub fn mc_score(model: &Transformer, context: &[TokenId], options: &[Vec<TokenId>], length_normalize: bool) -> Result<usize> {
    if context.is_empty() || options.is_empty() {
        return Err(Error::contract("context and options must be non-empty"));
    }
    let scores = options
        .iter()
        .map(|opt| {
            if opt.is_empty() {
                return Err(Error::contract("empty option"));
            }
            let mut seq = context.to_vec();
            seq.extend_from_slice(opt);
            let logits = model.logits_causal(&seq)?;
            let mut total = 0.0;
            for (j, &tok) in opt.iter().enumerate() {
                total += log_prob(logits.row(context.len() - 1 + j), tok as usize)?;
            }
            Ok(if length_normalize { total / opt.len() as f64 } else { total })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(argmax(&scores))
}

/// One evaluated example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prompt: String,
    pub truth: String,
    pub generated: String,
    pub hit_eos: bool,
    pub correct: bool,
}

impl Transcript {
    /// No visible output: nothing or only special tokens were produced.
    pub fn is_empty_output(&self) -> bool {
        self.generated.is_empty()
    }
}

/// Generate for every test pair and score against its target view.
pub fn evaluate(model: &Transformer, examples: &[ViewPairExample], config: &EvalConfig) -> Result<(f64, Vec<Transcript>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("no evaluation examples"));
    }
    if config.match_mode == MatchMode::McOptionProb {
        return Err(Error::contract("option scoring needs multiple-choice records"));
    }
    let transcripts = parallel::map(examples, |ex| -> Result<Transcript> {
        let g = greedy_generate(model, &prompt_ids(&ex.text), config.max_new_tokens, config.stop_on_eos)?;
        let generated = decode(&g.ids)?;
        let truths = [ex.code.clone()];
        let correct = score_match(&generated, &truths, config.match_mode, config.strip_trailing_whitespace)?;
        Ok(Transcript {
            id: ex.id.clone(),
            prompt: ex.text.clone(),
            truth: ex.code.clone(),
            generated,
            hit_eos: g.hit_eos,
            correct,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let acc = transcripts.iter().filter(|t| t.correct).count() as f64 / transcripts.len() as f64;
    Ok((acc, transcripts))
}

/// Multiple-choice accuracy over `(context, options, answer index)` records.
pub fn evaluate_mc(model: &Transformer, items: &[(String, Vec<String>, usize)], length_normalize: bool) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("no evaluation examples"));
    }
    let hits = parallel::map(items, |(ctx, opts, answer)| -> Result<bool> {
        let options: Vec<Vec<TokenId>> = opts.iter().map(|o| encode(o)).collect();
        Ok(mc_score(model, &prompt_ids(ctx), &options, length_normalize)? == *answer)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// One-tailed p-value for mean(b − a) > 0.
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub degenerate: bool,
}

/// Survival function of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Paired one-tailed test on `d = b − a`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::contract("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;
    if sd == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTest {
            t,
            p,
            df,
            mean_diff: mean,
            sd_diff: 0.0,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_sf(t, df as f64),
        df,
        mean_diff: mean,
        sd_diff: sd,
        degenerate: false,
    })
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Serialised as `report.json` by the eval and compare commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub baseline_ref: Option<String>,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub degenerate: Option<bool>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn new(seeds: Vec<u64>, accuracies: Vec<f64>, config: EvalConfig) -> Result<Self> {
        if seeds.len() != accuracies.len() || seeds.is_empty() {
            return Err(Error::contract("one accuracy per seed is required"));
        }
        if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("accuracies must lie in [0, 1]"));
        }
        let (mean, sd) = mean_sd(&accuracies);
        Ok(EvalReport {
            seeds,
            accuracies,
            mean,
            sd,
            baseline_ref: None,
            t: None,
            p: None,
            degenerate: None,
            config,
        })
    }

    /// Test whether `self` improves on `baseline`; seed lists must match exactly.
    pub fn compare_to(&mut self, baseline: &EvalReport, baseline_ref: &str) -> Result<TTest> {
        if baseline.seeds != self.seeds {
            return Err(Error::contract(format!(
                "seed sets differ: {:?} vs {:?}",
                baseline.seeds, self.seeds
            )));
        }
        let tt = paired_t_test(&baseline.accuracies, &self.accuracies)?;
        self.baseline_ref = Some(baseline_ref.to_string());
        self.t = Some(tt.t);
        self.p = Some(tt.p);
        self.degenerate = Some(tt.degenerate);
        Ok(tt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn match_examples() {
        assert!(score_match("abc", &s(&["abc"]), MatchMode::Exact, true).unwrap());
        assert!(score_match("abc \n", &s(&["abc"]), MatchMode::Exact, true).unwrap());
        assert!(!score_match("abc \n", &s(&["abc"]), MatchMode::Exact, false).unwrap());
        assert!(score_match("abcdef", &s(&["abc"]), MatchMode::Prefix, true).unwrap());
        assert!(score_match("the answer is 42.", &s(&["42", "forty-two"]), MatchMode::Substring, true).unwrap());
        assert!(score_match("  B) yes", &s(&["B"]), MatchMode::LabelPrefix, true).unwrap());
        assert!(score_match("x", &[], MatchMode::Exact, true).is_err());
    }

    proptest! {
        #[test]
        fn match_modes_nest(g in "[a-c ]{0,8}", t in "[a-c]{1,4}") {
            let truths = vec![t];
            prop_assert!(score_match(&g, &[g.clone()], MatchMode::Exact, false).unwrap());
            let exact = score_match(&g, &truths, MatchMode::Exact, false).unwrap();
            let prefix = score_match(&g, &truths, MatchMode::Prefix, false).unwrap();
            let sub = score_match(&g, &truths, MatchMode::Substring, false).unwrap();
            prop_assert!(!exact || prefix);
            prop_assert!(!prefix || sub);
        }
    }

    /// Simpson's rule on the t density over [t, t + 60], plus the far tail
    /// from the density's power law.
    fn quadrature_sf(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let simpson = |a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut acc = pdf(a) + pdf(b);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(a + i as f64 * h);
            }
            acc * h / 3.0
        };
        let upper = if t >= 0.0 { t } else { 0.0 };
        // Tail beyond `far` via substitution u = 1/x on (0, 1/far].
        let far = upper + 60.0;
        let tail = {
            let g = |u: f64| if u == 0.0 { 0.0 } else { pdf(1.0 / u) / (u * u) };
            let n = 4000;
            let b = 1.0 / far;
            let h = b / n as f64;
            let mut acc = g(0.0) + g(b);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
            }
            acc * h / 3.0
        };
        let right = simpson(upper, far, 200_000) + tail;
        if t >= 0.0 {
            right
        } else {
            right + simpson(t, 0.0, 20_000)
        }
    }

    #[test]
    fn t_test_reference_value() {
        let a = [0.0; 5];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 4.2426).abs() < 1e-4, "{}", r.t);
        assert!((r.p - 0.00660).abs() < 1e-4, "{}", r.p);
        assert!((r.p - quadrature_sf(r.t, 4.0)).abs() < 1e-9);
        assert_eq!(r.df, 4);
    }

    #[test]
    fn t_test_matches_quadrature() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(2..=8);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r = paired_t_test(&a, &b).unwrap();
            let q = quadrature_sf(r.t, r.df as f64);
            assert!((r.p - q).abs() < 1e-6, "t={} df={} p={} q={}", r.t, r.df, r.p, q);
        }
    }

    #[test]
    fn t_test_conventions() {
        let z = paired_t_test(&[1.0; 5], &[1.0; 5]).unwrap();
        assert!(z.degenerate && z.p == 0.5);
        assert_eq!(paired_t_test(&[0.0, 0.0], &[1.0, 1.0]).unwrap().p, 0.0);
        assert_eq!(paired_t_test(&[1.0, 1.0], &[0.0, 0.0]).unwrap().p, 1.0);
        let a = [0.2, 0.5, 0.4];
        let b = [0.3, 0.9, 0.4];
        let f = paired_t_test(&a, &b).unwrap();
        let r = paired_t_test(&b, &a).unwrap();
        assert_eq!(f.t, -r.t);
        assert!((f.p - (1.0 - r.p)).abs() < 1e-15);
        assert!(paired_t_test(&a, &b[..2]).is_err());
    }

    #[test]
    fn report_pairing() {
        let a = EvalReport::new(vec![1, 2], vec![0.5, 0.6], EvalConfig::default()).unwrap();
        let mut same = a.clone();
        let tt = same.compare_to(&a, "a").unwrap();
        assert!(tt.degenerate && tt.p == 0.5);
        let mut other = EvalReport::new(vec![1, 3], vec![0.5, 0.6], EvalConfig::default()).unwrap();
        assert!(other.compare_to(&a, "a").is_err());
        assert!(EvalReport::new(vec![1], vec![1.5], EvalConfig::default()).is_err());
    }

    fn tiny_model() -> Transformer {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 32,
            ..Default::default()
        };
        Transformer::init(cfg, 5).unwrap()
    }

    /// Residual stream fixed to the position embedding, which is aligned with
    /// the EOS row of the tied embedding.
    fn eos_model() -> Transformer {
        let m = tiny_model();
        let cfg = m.config().clone();
        let mut params: Vec<Tensor> = m.params().iter().map(|p| (**p).clone()).collect();
        let d = cfg.d_model;
        for (v, row) in params[0].data_mut().chunks_mut(d).enumerate() {
            row.fill(if v == EOS as usize { 1.0 } else { 0.0 });
        }
        params[1].data_mut().fill(1.0);
        for l in 0..cfg.n_layers {
            params[2 + 8 * l + 4].data_mut().fill(0.0);
            params[2 + 8 * l + 7].data_mut().fill(0.0);
        }
        Transformer::from_params(cfg, params).unwrap()
    }

    #[test]
    fn eos_model_generates_nothing() {
        let m = eos_model();
        let g = greedy_generate(&m, &prompt_ids("ab"), 10, true).unwrap();
        assert!(g.ids.is_empty() && g.hit_eos);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let m = tiny_model();
        let p = prompt_ids("abc");
        let a = greedy_generate(&m, &p, 5, false).unwrap();
        assert_eq!(a, greedy_generate(&m, &p, 5, false).unwrap());
        assert_eq!(a.ids.len(), 5);
        let long = vec![65; 40];
        assert!(matches!(greedy_generate(&m, &long, 5, true), Err(Error::Capacity { .. })));
    }

    #[test]
    fn mc_tie_and_equivariance() {
        let m = tiny_model();
        let ctx = prompt_ids("q");
        let same = vec![encode("xy"); 4];
        assert_eq!(mc_score(&m, &ctx, &same, true).unwrap(), 0);
        let opts = vec![encode("a"), encode("bb"), encode("ccc"), encode("d")];
        let i = mc_score(&m, &ctx, &opts, true).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<TokenId>> = perm.iter().map(|&j| opts[j].clone()).collect();
        let k = mc_score(&m, &ctx, &permuted, true).unwrap();
        assert_eq!(perm[k], i);
    }
}
