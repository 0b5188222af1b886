//! Pre-norm decoder-only transformer with tied output head.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{causal_mask, SegmentLayout};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::{TokenId, N_VOCAB};

const NORM_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"JLMJ";
const FORMAT_VERSION: u32 = 1;
const PARAMS_PER_LAYER: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            n_vocab: N_VOCAB,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.n_vocab, self.max_seq_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_vocab != N_VOCAB {
            return Err(Error::contract(format!("n_vocab must be {N_VOCAB}")));
        }
        Ok(())
    }

    /// Analytic multiply-add FLOPs (2 per MAC) of one forward over `len` tokens.
    pub fn forward_flops(&self, len: usize, with_logits: bool) -> u64 {
        let (l, d, f) = (len as u64, self.d_model as u64, self.d_ff as u64);
        let per_layer = 2 * l * d * 4 * d + 2 * l * d * f * 2 + 2 * 2 * l * l * d;
        let head = if with_logits { 2 * l * d * self.n_vocab as u64 } else { 0 };
        self.n_layers as u64 * per_layer + head
    }
}

/// Parameter names in declaration order, matching the checkpoint layout.
pub fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for layer in 0..config.n_layers {
        for p in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2"] {
            names.push(format!("layers.{layer}.{p}"));
        }
    }
    names.push("final_norm".to_string());
    names
}

pub fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut shapes = vec![vec![config.n_vocab, d], vec![config.max_seq_len, d]];
    for _ in 0..config.n_layers {
        shapes.extend([vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d, f], vec![f, d]]);
    }
    shapes.push(vec![d]);
    shapes
}

/// Model weights. The output head reuses `tok_emb`.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: Vec<Arc<Tensor>>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[L×n_vocab]`, when requested.
    pub logits: Option<Var>,
    /// Final-layer hidden states after the final norm, `[L×d_model]`.
    pub hidden: Var,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
    /// Attention nodes, one per layer.
    pub attention: Vec<Var>,
}

impl Transformer {
    /// Normal(0, 0.02) matrices, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let params = param_shapes(&config)
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![1.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Arc::new(Tensor::new(shape, data).expect("consistent shape"))
            })
            .collect();
        Ok(Transformer { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::contract("parameter shapes do not match the model config"));
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::Divergence("non-finite weight".into()));
        }
        Ok(Transformer {
            config,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    /// Mutable parameter buffers; clones a buffer only if a tape still holds it.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(Arc::make_mut)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.params[0]
    }

    fn check_inputs(&self, tokens: &[TokenId], positions: &[usize], mask: &Tensor) -> Result<()> {
        let l = tokens.len();
        if l == 0 {
            return Err(Error::contract("empty token sequence"));
        }
        if l > self.config.max_seq_len {
            return Err(Error::Capacity {
                len: l,
                max: self.config.max_seq_len,
            });
        }
        if positions.len() != l {
            return Err(Error::contract(format!("{} positions for {l} tokens", positions.len())));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Capacity {
                len: p + 1,
                max: self.config.max_seq_len,
            });
        }
        if mask.shape() != [l, l] {
            return Err(Error::contract(format!("mask shape {:?} for length {l}", mask.shape())));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != f64::NEG_INFINITY) {
            return Err(Error::contract("mask entries must be 0 or -inf"));
        }
        Ok(())
    }

    /// Record a forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &Tensor,
        with_logits: bool,
    ) -> Result<ForwardOutput> {
        let params = self.register(tape);
        self.forward_with(tape, &params, tokens, positions, mask, with_logits)
    }

    /// Record the parameters as leaves, in declaration order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.shared(Arc::clone(p), true)).collect()
    }

    /// Forward pass reusing parameter leaves already on `tape`, so several
    /// passes accumulate into one set of parameter gradients.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        tokens: &[TokenId],
        positions: &[usize],
        mask: &Tensor,
        with_logits: bool,
    ) -> Result<ForwardOutput> {
        self.check_inputs(tokens, positions, mask)?;
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter leaves do not match the model"));
        }
        let params = params.to_vec();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let heads = self.config.n_heads;

        let tok = tape.embedding(params[0], &ids)?;
        let pos = tape.embedding(params[1], positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let p = &params[2 + layer * PARAMS_PER_LAYER..2 + (layer + 1) * PARAMS_PER_LAYER];
            let h = tape.rms_norm(x, p[0], NORM_EPS)?;
            let q = tape.matmul(h, p[1])?;
            let k = tape.matmul(h, p[2])?;
            let v = tape.matmul(h, p[3])?;
            let a = tape.attention(q, k, v, heads, mask)?;
            attention.push(a);
            let o = tape.matmul(a, p[4])?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, p[5], NORM_EPS)?;
            let up = tape.matmul(h, p[6])?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, p[7])?;
            x = tape.add(x, down)?;
        }
        let hidden = tape.rms_norm(x, *params.last().expect("final norm"), NORM_EPS)?;
        let logits = if with_logits {
            Some(tape.matmul_nt(hidden, params[0])?)
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            hidden,
            params,
            attention,
        })
    }

    /// Forward without gradient tracking; returns `(logits, hidden)`.
    pub fn infer(&self, tokens: &[TokenId], positions: &[usize], mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, tokens, positions, mask, true)?;
        let logits = tape.value(out.logits.expect("requested")).clone();
        Ok((logits, tape.value(out.hidden).clone()))
    }

    /// Hidden states under the standard causal mask with positions `0..L`.
    pub fn hidden_causal(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = causal_mask(tokens.len())?;
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, tokens, &positions, &mask, false)?;
        Ok(tape.value(out.hidden).clone())
    }

    /// Logits under the standard causal mask with positions `0..L`.
    pub fn logits_causal(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = causal_mask(tokens.len())?;
        Ok(self.infer(tokens, &positions, &mask)?.0)
    }

    /// Embedding of one segment of a packed (or single-view) sequence.
    pub fn encode_view(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &Tensor,
        layout: &SegmentLayout,
        which: Segment,
    ) -> Result<Tensor> {
        layout.validate(tokens.len())?;
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, tokens, positions, mask, false)?;
        let row = which.index(layout);
        Ok(Tensor::vector(tape.value(out.hidden).row(row).to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.num_params() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        for field in [c.n_layers, c.n_heads, c.d_model, c.d_ff, c.n_vocab, c.max_seq_len] {
            buf.extend_from_slice(&(field as u32).to_le_bytes());
        }
        for p in &self.params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;

        let sidecar = CheckpointSidecar {
            format: "JLMJ".into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            params: param_names(c)
                .into_iter()
                .zip(param_shapes(c))
                .map(|(name, shape)| ParamEntry { name, shape })
                .collect(),
        };
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar)?;
        fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: msg.to_string(),
        };
        if bytes.len() < 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a JLMJ checkpoint"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        if u32_at(4) != FORMAT_VERSION as usize {
            return Err(bad("unsupported checkpoint version"));
        }
        let config = ModelConfig {
            n_layers: u32_at(8),
            n_heads: u32_at(12),
            d_model: u32_at(16),
            d_ff: u32_at(20),
            n_vocab: u32_at(24),
            max_seq_len: u32_at(28),
        };
        config.validate()?;
        let shapes = param_shapes(&config);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if bytes.len() != 32 + total * 8 {
            return Err(bad("checkpoint size does not match its header"));
        }
        let mut values = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params = shapes
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Transformer::from_params(config, params)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// Which row of a packed layout to read as an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    /// Last token of the source view.
    Source,
    /// Last token of the target view.
    Target,
    /// Predictor output; identical to `Source` when `k = 0`.
    Predictor,
}

impl Segment {
    pub fn index(self, layout: &SegmentLayout) -> usize {
        match self {
            Segment::Source => layout.source_last(),
            Segment::Target => layout.target_last(),
            Segment::Predictor => layout.predictor_index(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{block_causal_mask, pack_views, Direction, Placement};

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            n_vocab: N_VOCAB,
            max_seq_len: 32,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_shapes() {
        let m = Transformer::init(small(), 1).unwrap();
        let (logits, hidden) = m.infer(&[65], &[0], &causal_mask(1).unwrap()).unwrap();
        assert_eq!(logits.shape(), &[1, N_VOCAB]);
        assert_eq!(hidden.shape(), &[1, 8]);
    }

    #[test]
    fn capacity_error() {
        let m = Transformer::init(small(), 1).unwrap();
        let toks = vec![1; 33];
        let pos: Vec<usize> = (0..33).collect();
        let err = m.infer(&toks, &pos, &causal_mask(33).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Capacity { len: 33, max: 32 }));
    }

    #[test]
    fn malformed_mask_rejected() {
        let m = Transformer::init(small(), 1).unwrap();
        let mask = Tensor::matrix(2, 2, vec![0.0, 0.5, 0.0, 0.0]).unwrap();
        assert!(m.infer(&[1, 2], &[0, 1], &mask).is_err());
    }

    #[test]
    fn causal_perturbation() {
        let m = Transformer::init(small(), 3).unwrap();
        let a = m.logits_causal(&[10, 20, 30, 40, 50]).unwrap();
        let b = m.logits_causal(&[10, 20, 30, 99, 50]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn k0_predictor_equals_source() {
        let m = Transformer::init(small(), 4).unwrap();
        let p = pack_views(&[1, 2, 3], &[4, 5], 0, Placement::Append, Direction::TextToCode, 32).unwrap();
        let mask = block_causal_mask(&p.layout, p.tokens.len()).unwrap();
        let pred = m.encode_view(&p.tokens, p.positions(), &mask, &p.layout, Segment::Predictor).unwrap();
        let src = m.encode_view(&p.tokens, p.positions(), &mask, &p.layout, Segment::Source).unwrap();
        assert_eq!(pred, src);
    }

    #[test]
    fn single_view_reads_last_hidden() {
        let m = Transformer::init(small(), 4).unwrap();
        let toks = [7, 8, 9];
        let h = m.hidden_causal(&toks).unwrap();
        let p = pack_views(&toks, &[1], 0, Placement::Append, Direction::TextToCode, 32).unwrap();
        let mask = block_causal_mask(&p.layout, 4).unwrap();
        let e = m.encode_view(&p.tokens, p.positions(), &mask, &p.layout, Segment::Source).unwrap();
        assert!(e.data().iter().zip(h.row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn predictor_tokens_change_the_embedding() {
        let m = Transformer::init(small(), 5).unwrap();
        let p = pack_views(&[1, 2, 3], &[4, 5], 2, Placement::Append, Direction::TextToCode, 32).unwrap();
        let mask = block_causal_mask(&p.layout, p.tokens.len()).unwrap();
        let pred = m.encode_view(&p.tokens, p.positions(), &mask, &p.layout, Segment::Predictor).unwrap();
        let src = m.encode_view(&p.tokens, p.positions(), &mask, &p.layout, Segment::Source).unwrap();
        assert!(pred.max_abs_diff(&src) > 1e-6);
    }

    #[test]
    fn weight_tying_shares_gradient() {
        // The token table receives gradient from both the lookup and the head.
        let m = Transformer::init(small(), 6).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &[1, 2], &[0, 1], &causal_mask(2).unwrap(), true).unwrap();
        let loss = tape.cross_entropy(out.logits.unwrap(), &[Some(2), Some(200)]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gt = g.get(out.params[0]).unwrap();
        let d = 8;
        // row 200 is never looked up, so its gradient can only come from the head
        assert!(gt.row(200).iter().any(|&v| v != 0.0));
        assert!(gt.data()[..d].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Transformer::init(small(), 9).unwrap();
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"JLMJ");
        assert_eq!(bytes.len(), 32 + m.num_params() * 8);
        let back = Transformer::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["config"]["d_model"], 8);
    }
}
