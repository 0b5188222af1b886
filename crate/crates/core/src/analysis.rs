//! Representation geometry: view embeddings, the singular spectrum of their
//! difference, and how close the text-to-code map is to linear.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{code_view, text_view, ViewPairExample};
use crate::error::{Error, Result};
use crate::masking::Placement;
use crate::model::Transformer;
use crate::parallel;
use crate::tokenizer::{TokenId, PRED};

/// Ridge added to the normal equations in [`linear_fit_residual`].
pub const RIDGE: f64 = 1e-8;
/// Number of leading singular values averaged in reports.
pub const TOP_SINGULAR: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Text,
    Code,
    Predictor,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Text => "text",
            Role::Code => "code",
            Role::Predictor => "predictor",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub corpus: String,
    pub k: usize,
}

/// One row per example, `d_model` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub role: Role,
    pub provenance: Provenance,
    pub rows: DMatrix<f64>,
}

/// Tokens of the standalone sequence whose last hidden state is the embedding,
/// and the index to read.
fn view_tokens(ex: &ViewPairExample, role: Role, k: usize, placement: Placement) -> (Vec<TokenId>, usize) {
    match role {
        Role::Text => {
            let t = text_view(&ex.text);
            let last = t.len() - 1;
            (t, last)
        }
        Role::Code => {
            let t = code_view(&ex.code);
            let last = t.len() - 1;
            (t, last)
        }
        Role::Predictor => {
            let text = text_view(&ex.text);
            match placement {
                Placement::Append => {
                    let mut t = text;
                    t.extend(std::iter::repeat(PRED).take(k));
                    let last = t.len() - 1;
                    (t, last)
                }
                Placement::Prepend => {
                    let mut t = vec![PRED; k];
                    t.extend(text);
                    let last = t.len() - 1;
                    (t, last)
                }
            }
        }
    }
}

/// Final-layer hidden state at the read-out token of each example's
/// standalone causal forward, in corpus order.
pub fn extract_embeddings(
    model: &Transformer,
    examples: &[ViewPairExample],
    role: Role,
    k: usize,
    placement: Placement,
    provenance: Provenance,
) -> Result<EmbeddingMatrix> {
    if examples.is_empty() {
        return Err(Error::contract("no examples to embed"));
    }
    let d = model.config().d_model;
    let rows = parallel::map(examples, |ex| -> Result<Vec<f64>> {
        let (tokens, at) = view_tokens(ex, role, k, placement);
        let hidden = model.hidden_causal(&tokens)?;
        Ok(hidden.row(at).to_vec())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("non-finite embedding".into()));
    }
    Ok(EmbeddingMatrix {
        role,
        provenance: Provenance { k, ..provenance },
        rows: DMatrix::from_row_slice(examples.len(), d, &flat),
    })
}

/// Singular values of `t - c`, descending, at most `top_k` of them.
///
/// Computed from the eigenvalues of the `d x d` Gram matrix.
pub fn diff_spectrum(t: &DMatrix<f64>, c: &DMatrix<f64>, top_k: usize) -> Result<Vec<f64>> {
    if t.shape() != c.shape() {
        return Err(Error::Dimension {
            op: "diff_spectrum",
            lhs: vec![t.nrows(), t.ncols()],
            rhs: vec![c.nrows(), c.ncols()],
        });
    }
    singular_values(&(t - c), top_k)
}

pub fn singular_values(a: &DMatrix<f64>, top_k: usize) -> Result<Vec<f64>> {
    let gram = a.transpose() * a;
    let eig = SymmetricEigen::new(gram);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv.truncate(top_k.min(a.nrows()).min(a.ncols()));
    Ok(sv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// `||T X - C||_F` at the ridge least-squares `X`.
    pub residual: f64,
    /// Mean of the leading `top_used` singular values of `T - C`.
    pub avg_top_singular: f64,
    pub top_used: usize,
    /// Fewer rows than columns.
    pub underdetermined: bool,
}

/// Least-squares map from text to code embeddings, with ridge [`RIDGE`].
pub fn linear_fit_residual(t: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(LinearFit, DMatrix<f64>)> {
    if t.shape() != c.shape() {
        return Err(Error::Dimension {
            op: "linear_fit_residual",
            lhs: vec![t.nrows(), t.ncols()],
            rhs: vec![c.nrows(), c.ncols()],
        });
    }
    let d = t.ncols();
    let mut normal = t.transpose() * t;
    for i in 0..d {
        normal[(i, i)] += RIDGE;
    }
    let rhs = t.transpose() * c;
    let x = normal
        .cholesky()
        .ok_or_else(|| Error::contract("normal equations are not positive definite"))?
        .solve(&rhs);
    let residual = (t * &x - c).norm();
    let sv = diff_spectrum(t, c, TOP_SINGULAR)?;
    let fit = LinearFit {
        residual,
        avg_top_singular: sv.iter().sum::<f64>() / sv.len() as f64,
        top_used: sv.len(),
        underdetermined: t.nrows() < d,
    };
    Ok((fit, x))
}

/// Contents of `analysis_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub n_examples: usize,
    pub d_model: usize,
    pub fit: LinearFit,
    pub spectrum: Vec<f64>,
    /// Mean cosine similarity between predictor and code embeddings.
    pub mean_pred_code_cosine: f64,
}

fn mean_row_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    (0..n)
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let denom = x.norm() * y.norm();
            if denom == 0.0 {
                0.0
            } else {
                x.dot(&y) / denom
            }
        })
        .sum::<f64>()
        / n as f64
}

/// Embed every pair and summarise the text/code geometry.
pub fn analyze(
    model: &Transformer,
    examples: &[ViewPairExample],
    k: usize,
    placement: Placement,
    provenance: Provenance,
) -> Result<(AnalysisReport, [EmbeddingMatrix; 3])> {
    let text = extract_embeddings(model, examples, Role::Text, k, placement, provenance.clone())?;
    let code = extract_embeddings(model, examples, Role::Code, k, placement, provenance.clone())?;
    let pred = extract_embeddings(model, examples, Role::Predictor, k, placement, provenance.clone())?;
    let (fit, _) = linear_fit_residual(&text.rows, &code.rows)?;
    let spectrum = diff_spectrum(&text.rows, &code.rows, TOP_SINGULAR)?;
    let report = AnalysisReport {
        provenance: Provenance { k, ..provenance },
        n_examples: examples.len(),
        d_model: model.config().d_model,
        fit,
        spectrum,
        mean_pred_code_cosine: mean_row_cosine(&pred.rows, &code.rows),
    };
    Ok((report, [text, code, pred]))
}

/// `embeddings.csv`: a provenance comment line, a column header, one row per example.
pub fn embeddings_csv(m: &EmbeddingMatrix) -> String {
    let mut out = format!(
        "# role={} checkpoint={} corpus={} k={}\n",
        m.role.name(),
        m.provenance.checkpoint,
        m.provenance.corpus,
        m.provenance.k
    );
    let header: Vec<String> = (0..m.rows.ncols()).map(|j| format!("d{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.rows.nrows() {
        let row: Vec<String> = m.rows.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn spectrum_csv(spectrum: &[f64]) -> String {
    let mut out = String::from("index,singular_value\n");
    for (i, s) in spectrum.iter().enumerate() {
        let _ = writeln!(out, "{i},{s}");
    }
    out
}

/// Write `embeddings.csv` (text, code and predictor stacked, tagged by role
/// comment blocks), `spectrum.csv`, and `analysis_report.json` into `dir`.
pub fn write_analysis(dir: &Path, report: &AnalysisReport, embeddings: &[EmbeddingMatrix]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let emb: String = embeddings.iter().map(embeddings_csv).collect();
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("embeddings.csv", emb)?;
    write("spectrum.csv", spectrum_csv(&report.spectrum))?;
    write("analysis_report.json", serde_json::to_string_pretty(report)? + "\n")
}
