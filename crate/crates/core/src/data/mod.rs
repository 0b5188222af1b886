//! Corpus records, JSONL ingestion, the synthetic generator, and batching.

pub mod grammar;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{pack_views, PackedViews};
use crate::objectives::{LossMaskMode, ObjectiveConfig};
use crate::tokenizer::{encode, TokenId, BOS, EOS, SEP};

pub use grammar::{parse_description, Pattern};

pub const FORMAT_VERSION: u32 = 1;

/// Two views of the same content.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPairExample {
    pub text: String,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// Ordered views where view `i` predicts view `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGroupExample {
    pub views: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ViewGroupExample {
    /// Consecutive pair used in `epoch`, cycling through the `n - 1` pairs.
    pub fn pair_for_epoch(&self, epoch: usize) -> ViewPairExample {
        let j = epoch % (self.views.len() - 1);
        ViewPairExample {
            text: self.views[j].clone(),
            code: self.views[j + 1].clone(),
            id: self.id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corpus {
    Pairs(Vec<ViewPairExample>),
    Groups(Vec<ViewGroupExample>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Pairs(p) => p.len(),
            Corpus::Groups(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair view of the corpus for one epoch.
    pub fn pairs_for_epoch(&self, epoch: usize) -> Vec<ViewPairExample> {
        match self {
            Corpus::Pairs(p) => p.clone(),
            Corpus::Groups(g) => g.iter().map(|e| e.pair_for_epoch(epoch)).collect(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse a JSONL corpus; every line must use the same schema.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &content)
}

fn parse_jsonl(path: &Path, content: &str) -> Result<Corpus> {
    let err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pairs = Vec::new();
    let mut groups = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| err(line, "expected a JSON object".into()))?;
        if obj.contains_key("views") {
            let g: ViewGroupExample = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
            if g.views.len() < 2 || g.views.iter().any(String::is_empty) {
                return Err(err(line, "a view group needs at least two non-empty views".into()));
            }
            groups.push(g);
        } else {
            let p: ViewPairExample = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
            if p.text.is_empty() || p.code.is_empty() {
                return Err(err(line, "both views must be non-empty".into()));
            }
            pairs.push(p);
        }
        if !pairs.is_empty() && !groups.is_empty() {
            return Err(err(line, "file mixes pair and group records".into()));
        }
    }
    Ok(if groups.is_empty() {
        Corpus::Pairs(pairs)
    } else {
        Corpus::Groups(groups)
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub n_examples: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: String,
    pub n_examples: usize,
    pub sha256: String,
}

/// Sidecar describing a corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub files: Vec<ManifestFile>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn file(&self, split: &str) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.split == split)
    }
}

/// Load `path`, refusing it if a manifest next to it lists a different checksum.
pub fn load_verified(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() {
        let manifest = CorpusManifest::load(&manifest_path)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(entry) = manifest.files.iter().find(|f| f.path == name) {
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::Checksum {
                    path: path.to_path_buf(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
        }
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_jsonl(path, &text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Stable content id of a pair.
pub fn example_id(text: &str, code: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update([0u8]);
    h.update(code.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Hash partition: one in ten ids goes to the test split. Keyed on the
/// description alone so identical prompts never straddle the split.
pub fn split_of(text: &str) -> Split {
    let digest = Sha256::digest(text.as_bytes());
    if digest[0] % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// A synthetic corpus already partitioned into train and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<ViewPairExample>,
    pub test: Vec<ViewPairExample>,
}

/// Deterministic (description, pattern) pairs from the line grammar.
///
/// `n_examples` is the total across both splits.
pub fn generate_synthetic_corpus(seed: u64, n_examples: usize, depth: usize) -> Result<SyntheticCorpus> {
    if n_examples == 0 {
        return Err(Error::contract("n_examples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SyntheticCorpus {
        train: Vec::new(),
        test: Vec::new(),
    };
    for _ in 0..n_examples {
        let p = Pattern::sample(&mut rng, depth);
        let text = p.describe(0);
        let code = p.compile();
        let ex = ViewPairExample {
            id: Some(example_id(&text, &code)),
            text,
            code,
        };
        match split_of(&ex.text) {
            Split::Train => out.train.push(ex),
            Split::Test => out.test.push(ex),
        }
    }
    Ok(out)
}

/// Paraphrase groups: every phrasing of one pattern, followed by the pattern.
pub fn generate_paraphrase_groups(seed: u64, n_examples: usize, depth: usize) -> Result<Vec<ViewGroupExample>> {
    if n_examples == 0 {
        return Err(Error::contract("n_examples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_examples)
        .map(|_| {
            let p = Pattern::sample(&mut rng, depth);
            let mut views: Vec<String> = (0..grammar::num_phrasings()).map(|s| p.describe(s)).collect();
            views.push(p.compile());
            let id = Some(example_id(&views[0], views.last().expect("non-empty")));
            ViewGroupExample { views, id }
        })
        .collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&buf))
}

/// Write `train.jsonl`, `test.jsonl`, and the manifest into `dir`.
pub fn write_corpus_dir(dir: &Path, corpus: &SyntheticCorpus, generator: Option<GeneratorInfo>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (split, records) in [(Split::Train, &corpus.train), (Split::Test, &corpus.test)] {
        let name = format!("{}.jsonl", split.name());
        let sha256 = write_jsonl(&dir.join(&name), records)?;
        files.push(ManifestFile {
            path: name,
            split: split.name().into(),
            n_examples: records.len(),
            sha256,
        });
    }
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        generator,
        files,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Text view: exactly the generation prompt `[BOS] text [SEP]`.
pub fn text_view(text: &str) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(encode(text));
    ids.push(SEP);
    ids
}

/// Code view: the completion with its terminator, `code [EOS]`.
pub fn code_view(code: &str) -> Vec<TokenId> {
    let mut ids = encode(code);
    ids.push(EOS);
    ids
}

pub fn prompt_ids(text: &str) -> Vec<TokenId> {
    text_view(text)
}

/// Everything the objective needs for one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    /// `[BOS] text [SEP] code [EOS]`.
    pub ntp_tokens: Vec<TokenId>,
    /// Next-token target per position (`None` where unsupervised).
    pub targets: Vec<Option<usize>>,
    pub packed: PackedViews,
}

/// Tokenize one pair; `Err(Capacity)` when either sequence is too long.
pub fn encode_pair(ex: &ViewPairExample, config: &ObjectiveConfig, max_len: usize) -> Result<EncodedExample> {
    let mut ntp_tokens = prompt_ids(&ex.text);
    let completion_from = ntp_tokens.len() - 1;
    ntp_tokens.extend(encode(&ex.code));
    ntp_tokens.push(EOS);
    if ntp_tokens.len() > max_len {
        return Err(Error::Capacity {
            len: ntp_tokens.len(),
            max: max_len,
        });
    }
    let mask: Vec<bool> = (0..ntp_tokens.len())
        .map(|i| match config.loss_mask_mode {
            LossMaskMode::CompletionOnly => i >= completion_from,
            LossMaskMode::FullSequence => true,
        })
        .collect();
    let targets = crate::objectives::ntp_targets(&ntp_tokens, &mask);
    let packed = pack_views(
        &text_view(&ex.text),
        &code_view(&ex.code),
        config.k,
        config.placement,
        config.direction,
        max_len,
    )?;
    Ok(EncodedExample {
        ntp_tokens,
        targets,
        packed,
    })
}

/// Batches plus the count of examples dropped for length.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batches: Vec<Vec<EncodedExample>>,
    pub skipped: usize,
}

/// Encode, optionally shuffle, and chunk examples into batches.
pub fn make_batches(
    examples: &[ViewPairExample],
    batch_size: usize,
    config: &ObjectiveConfig,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchPlan> {
    if examples.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut skipped = 0;
    let mut encoded = Vec::with_capacity(order.len());
    for i in order {
        match encode_pair(&examples[i], config, max_len) {
            Ok(e) => encoded.push(e),
            Err(Error::Capacity { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if encoded.is_empty() {
        return Err(Error::contract("every example exceeds the sequence capacity"));
    }
    let mut batches = Vec::with_capacity(encoded.len().div_ceil(batch_size));
    let mut iter = encoded.into_iter().peekable();
    while iter.peek().is_some() {
        batches.push(iter.by_ref().take(batch_size).collect());
    }
    Ok(BatchPlan { batches, skipped })
}
