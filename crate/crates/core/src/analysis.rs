//! Evaluation and the embedding analyses: same-class cosine histograms,
//! embedding export and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{DatasetSplits, HeldOutLabels, SampleSet};
use crate::model::{Model, ModelError};
use crate::selection::{pseudo_label, StudentSet};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;
pub const HISTOGRAM_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EMBEDDINGS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot evaluate on an empty set")]
    EmptySet,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &Model, set: &SampleSet) -> Result<f64, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let pred = model.predict(&set.batch(&all))?;
    let k = pred.probs.shape()[1];
    let correct = pred
        .probs
        .data()
        .chunks_exact(k)
        .zip(set.labels())
        .filter(|(p, &y)| pseudo_label(p) == y as usize)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Scores student sets against held-out unlabeled labels. Lives on the
/// evaluator side; training code only ever sees the resulting number.
pub struct PseudoLabelAudit<'a> {
    truth: &'a HeldOutLabels,
}

impl<'a> PseudoLabelAudit<'a> {
    pub fn new(truth: &'a HeldOutLabels) -> Self {
        Self { truth }
    }

    /// Fraction of members whose pseudo-label is correct; `None` for an empty set.
    pub fn precision(&self, students: &StudentSet) -> Option<f64> {
        if students.is_empty() {
            return None;
        }
        let labels = self.truth.labels();
        let correct = students
            .members()
            .iter()
            .filter(|s| labels[s.index] as usize == s.pseudo_label)
            .count();
        Some(correct as f64 / students.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    /// Source against target embeddings.
    InterDomain,
    /// Labeled target against unlabeled target embeddings.
    IntraDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub schema_version: u32,
    pub population: Population,
    pub checkpoint_iteration: u64,
    /// `HISTOGRAM_BINS + 1` edges spanning `[-1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub pairs: u64,
    /// Mean cosine over all pairs; `None` when there are none.
    pub mean: Option<f64>,
}

pub fn histogram_edges() -> Vec<f64> {
    (0..=HISTOGRAM_BINS)
        .map(|i| -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64)
        .collect()
}

fn bin_of(cos: f64) -> usize {
    let b = ((cos + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
    (b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

impl SimilarityHistogram {
    pub fn from_values(population: Population, checkpoint_iteration: u64, values: &[f64]) -> Self {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &v in values {
            counts[bin_of(v)] += 1;
        }
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Self {
            schema_version: HISTOGRAM_SCHEMA_VERSION,
            population,
            checkpoint_iteration,
            edges: histogram_edges(),
            counts,
            pairs: values.len() as u64,
            mean,
        }
    }
}

fn unit_rows(emb: &Tensor) -> Vec<Vec<f64>> {
    let e = emb.shape()[1];
    emb.data()
        .chunks_exact(e)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::graph::NORM_EPS);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Cosine similarity of every same-class pair across two labeled embedding
/// sets. Classes missing from either side are skipped.
pub fn same_class_cosines(a: &Tensor, a_labels: &[u32], b: &Tensor, b_labels: &[u32]) -> Vec<f64> {
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let classes = a_labels.iter().chain(b_labels).copied().max().map_or(0, |m| m as usize + 1);
    let mut out = Vec::new();
    for class in 0..classes {
        let ia: Vec<usize> = (0..a_labels.len()).filter(|&i| a_labels[i] as usize == class).collect();
        let ib: Vec<usize> = (0..b_labels.len()).filter(|&i| b_labels[i] as usize == class).collect();
        if ia.is_empty() || ib.is_empty() {
            log::info!("class {class} absent from one population, skipped");
            continue;
        }
        for &i in &ia {
            for &j in &ib {
                let c: f64 = ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum();
                out.push(c.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

fn embed_set(model: &Model, set: &SampleSet) -> Result<Tensor, AnalysisError> {
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(model.embed(&set.batch(&all))?)
}

/// Inter- and intra-domain same-class histograms of one checkpoint.
pub fn similarity_histograms(
    model: &Model,
    data: &DatasetSplits,
    checkpoint_iteration: u64,
) -> Result<[SimilarityHistogram; 2], AnalysisError> {
    let unlabeled = data.unlabeled_with_truth();
    let source = embed_set(model, &data.source)?;
    let target = embed_set(model, &unlabeled)?;
    let inter = same_class_cosines(&source, data.source.labels(), &target, unlabeled.labels());
    let intra = if data.target_labeled.is_empty() {
        log::info!("no labeled target samples; intra-domain histogram is empty");
        Vec::new()
    } else {
        let labeled = embed_set(model, &data.target_labeled)?;
        same_class_cosines(&labeled, data.target_labeled.labels(), &target, unlabeled.labels())
    };
    Ok([
        SimilarityHistogram::from_values(Population::InterDomain, checkpoint_iteration, &inter),
        SimilarityHistogram::from_values(Population::IntraDomain, checkpoint_iteration, &intra),
    ])
}

/// Writes one CSV row per sample of every split: split, domain, label and
/// the embedding coordinates `e0..`. The first line is a `#` comment carrying
/// the schema version.
pub fn export_embeddings(model: &Model, data: &DatasetSplits, path: &Path) -> Result<usize, AnalysisError> {
    let csv_err = |source| AnalysisError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let io_err = |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::create(path).map_err(io_err)?;
    writeln!(file, "# s3d embeddings schema_version={EMBEDDINGS_SCHEMA_VERSION}").map_err(io_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let dim = model.config().embedding_dim;
    let mut header = vec!["split".to_string(), "domain".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let unlabeled = data.unlabeled_with_truth();
    let splits = [
        ("source", data.source_domain.as_str(), &data.source),
        ("target_labeled", data.target_domain.as_str(), &data.target_labeled),
        ("target_unlabeled", data.target_domain.as_str(), &unlabeled),
        ("target_val", data.target_domain.as_str(), &data.target_val),
    ];
    let mut rows = 0;
    for (split, domain, set) in splits {
        if set.is_empty() {
            continue;
        }
        let emb = embed_set(model, set)?;
        for (row, &label) in emb.data().chunks_exact(dim).zip(set.labels()) {
            let mut record = vec![split.to_string(), domain.to_string(), label.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(rows)
}

/// One parsed row of an embeddings CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub split: String,
    pub domain: String,
    pub label: u32,
    pub embedding: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>, AnalysisError> {
    let csv_err = |source| AnalysisError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let parse_err = |what: &str| AnalysisError::Parse {
            path: path.to_path_buf(),
            reason: format!("bad {what} on line {}", record.position().map_or(0, |p| p.line())),
        };
        rows.push(EmbeddingRow {
            split: field(0).to_string(),
            domain: field(1).to_string(),
            label: field(2).parse().map_err(|_| parse_err("label"))?,
            embedding: (3..record.len())
                .map(|i| field(i).parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err("coordinate"))?,
        });
    }
    Ok(rows)
}

/// Hex SHA-256 of the value's JSON form with object keys sorted, so the
/// digest does not depend on field order.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    // serde_json's Map is ordered by key unless `preserve_order` is enabled
    let canonical = serde_json::to_value(config).expect("config serializes to JSON");
    let bytes = serde_json::to_vec(&canonical).expect("JSON value serializes");
    Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: String,
    pub seed: u64,
    pub config_digest: String,
    /// Accuracy keyed by split name.
    pub accuracy: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
    pub histograms: Vec<SimilarityHistogram>,
    pub embedding_paths: Vec<String>,
}
