//! Evaluation metrics: OOD detection from energy scores, clean-selection
//! quality, class geometry and the singular spectrum of the embeddings.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossComponents;
use crate::sphere::UnitVector;

/// CSV column order of [`MetricsRecord`] rows.
pub const CSV_COLUMNS: [&str; 13] = [
    "epoch",
    "loss_x",
    "loss_u",
    "loss_reg",
    "loss_con",
    "loss_hambr",
    "sel_precision",
    "sel_recall",
    "sel_f1",
    "intra",
    "inter",
    "auroc",
    "fpr95",
];

/// Percentile `q` (0..=100) of ascending `sorted` data, interpolating
/// linearly between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half. Higher scores mean "more OOD".
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    // Mann-Whitney U with mid-ranks for ties.
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_ood += mid_rank * all[i..=j].iter().filter(|(_, ood)| *ood).count() as f64;
        i = j + 1;
    }
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

/// Fraction of OOD scores accepted as in-distribution at the threshold that
/// accepts 95% of ID scores.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.len() < 20 {
        return Err(Error::InsufficientId(id_scores.len()));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile(&sorted, 95.0);
    Ok(ood_scores.iter().filter(|&&s| s <= threshold).count() as f64 / ood_scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall of `selected` against the samples whose
/// `clean_mask` entry is true. An empty selection scores zero throughout.
pub fn selection_f1(selected: &[usize], clean_mask: &[bool]) -> SelectionScore {
    let n_clean = clean_mask.iter().filter(|&&c| c).count();
    if selected.is_empty() || n_clean == 0 {
        return SelectionScore::default();
    }
    let hits = selected.iter().filter(|&&i| clean_mask.get(i).copied().unwrap_or(false)).count() as f64;
    let precision = hits / selected.len() as f64;
    let recall = hits / n_clean as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SelectionScore { precision, recall, f1 }
}

/// Eigenvalues of a symmetric matrix (row-major `n × n`) by cyclic Jacobi
/// rotations, in no particular order.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Natural-log singular values of the `n × d` feature matrix, descending.
///
/// Computed from the eigenvalues of the `d × d` Gram matrix. With
/// `centered`, the column means are subtracted first. Singular values that
/// are zero to working precision are reported as `-inf`.
pub fn singular_spectrum(features: &[impl AsRef<[f64]>], centered: bool) -> Vec<f64> {
    assert!(!features.is_empty(), "singular spectrum of an empty matrix");
    let d = features[0].as_ref().len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    if centered {
        for row in features {
            for (m, x) in mean.iter_mut().zip(row.as_ref()) {
                *m += x / n;
            }
        }
    }
    let mut gram = vec![0.0; d * d];
    for row in features {
        let r: Vec<f64> = row.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                gram[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    let mut eig = symmetric_eigenvalues(&gram, d);
    eig.sort_by(|a, b| b.total_cmp(a));
    let cutoff = eig.first().copied().unwrap_or(0.0).max(0.0) * 1e-13 * (d as f64);
    eig.into_iter()
        .map(|l| if l > cutoff { 0.5 * l.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Mean cosine of each feature to its class prototype, and the smallest
/// angle (radians) between any two prototypes. Classes without a prototype
/// are skipped; fewer than two prototypes give an `inter` of NaN.
pub fn geometry_metrics(
    features: &[UnitVector],
    labels: &[usize],
    prototypes: &[Option<UnitVector>],
) -> (f64, f64) {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        if let Some(Some(mu)) = prototypes.get(y) {
            total += x.dot(mu);
            count += 1;
        }
    }
    let intra = if count > 0 { total / count as f64 } else { f64::NAN };
    let present: Vec<&UnitVector> = prototypes.iter().flatten().collect();
    let mut inter = f64::NAN;
    for (i, a) in present.iter().enumerate() {
        for b in &present[..i] {
            let angle = a.angle_to(b);
            if inter.is_nan() || angle < inter {
                inter = angle;
            }
        }
    }
    (intra, inter)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub selection: SelectionScore,
    pub intra_compactness: f64,
    pub inter_margin: f64,
    pub auroc: f64,
    pub fpr95: f64,
    /// Descending; `-inf` (serialized as `null`) marks zero singular values.
    pub log_singular_values: Vec<f64>,
}

impl MetricsRecord {
    fn csv_row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut row = vec![self.epoch.to_string()];
        row.extend(
            [
                l.loss_x,
                l.loss_u,
                l.loss_reg,
                l.loss_con,
                l.loss_hambr,
                self.selection.precision,
                self.selection.recall,
                self.selection.f1,
                self.intra_compactness,
                self.inter_margin,
                self.auroc,
                self.fpr95,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        row
    }
}

/// Appends metric rows to `metrics.csv` (fixed header) and `metrics.jsonl`.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    jsonl_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let csv_path = dir.join("metrics.csv");
        let jsonl_path = dir.join("metrics.jsonl");
        let mut csv = csv::Writer::from_path(&csv_path)?;
        csv.write_record(CSV_COLUMNS)?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        let jsonl = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&jsonl_path)
            .map_err(|e| Error::io(&jsonl_path, e))?;
        Ok(MetricsWriter {
            csv,
            jsonl: BufWriter::new(jsonl),
            jsonl_path,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        self.csv.write_record(record.csv_row())?;
        self.csv.flush().map_err(|e| Error::io("metrics.csv", e))?;
        serde_json::to_writer(&mut self.jsonl, record)?;
        self.jsonl
            .write_all(b"\n")
            .and_then(|_| self.jsonl.flush())
            .map_err(|e| Error::io(&self.jsonl_path, e))
    }
}
