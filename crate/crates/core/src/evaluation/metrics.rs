//! Threshold metrics, rank-statistic AUC and cross-modal recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or(Error::AucUndefined)
    }
}

/// Mann-Whitney AUC with tied scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, averaged
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Precision, AUC, accuracy and F1 at a 0.5 threshold.
pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Precondition("labels must be 0/1 and scores finite".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= THRESHOLD, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        auc: auc(scores, labels),
        acc: ratio(tp + tn, labels.len()),
        f1,
    })
}

/// Unweighted mean over attributes; AUC over attributes where it is defined.
pub fn macro_average<'a>(per_attribute: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
    let all: Vec<&Metrics> = per_attribute.into_iter().collect();
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let aucs: Vec<f64> = all.iter().filter_map(|m| m.auc).collect();
    Some(Metrics {
        precision: all.iter().map(|m| m.precision).sum::<f64>() / n,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        acc: all.iter().map(|m| m.acc).sum::<f64>() / n,
        f1: all.iter().map(|m| m.f1).sum::<f64>() / n,
    })
}

/// Scores and labels per attribute, `[samples, attributes]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub attributes: Vec<String>,
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreTable {
    pub fn new(attributes: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let a = attributes.len();
        if a == 0 || scores.len() != labels.len() || scores.len() % a != 0 {
            return Err(Error::Shape(format!(
                "{} scores and {} labels over {a} attributes",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Precondition("non-finite score".into()));
        }
        Ok(ScoreTable {
            attributes,
            scores,
            labels,
        })
    }

    pub fn samples(&self) -> usize {
        self.scores.len() / self.attributes.len()
    }

    pub fn score(&self, sample: usize, attr: usize) -> f64 {
        self.scores[sample * self.attributes.len() + attr]
    }

    pub fn column(&self, attr: usize) -> (Vec<f64>, Vec<u8>) {
        let a = self.attributes.len();
        (
            self.scores.iter().skip(attr).step_by(a).copied().collect(),
            self.labels.iter().skip(attr).step_by(a).copied().collect(),
        )
    }

    pub fn per_attribute(&self) -> Result<BTreeMap<String, Metrics>> {
        (0..self.attributes.len())
            .map(|j| {
                let (s, l) = self.column(j);
                Ok((self.attributes[j].clone(), compute_metrics(&s, &l)?))
            })
            .collect()
    }
}

/// Recall@K in both directions for each requested K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub ks: Vec<usize>,
    pub text_to_image: Vec<f64>,
    pub image_to_text: Vec<f64>,
}

/// 0-based rank of candidate `target` in `sims`; ties go to the lower index.
fn rank_of(sims: &[f64], target: usize) -> usize {
    let t = sims[target];
    sims.iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Recall of the paired item among all candidates, by dot product of the
/// normalized embeddings.
pub fn retrieval_eval(zv: &EmbeddingBatch, zr: &EmbeddingBatch, ks: &[usize]) -> Result<Recalls> {
    let n = zv.batch();
    if n == 0 || zr.batch() != n || zv.width() != zr.width() {
        return Err(Error::Shape(format!(
            "{}x{} visual vs {}x{} report embeddings",
            n,
            zv.width(),
            zr.batch(),
            zr.width()
        )));
    }
    if !zv.normalized || !zr.normalized {
        return Err(Error::Precondition("retrieval needs normalized embeddings".into()));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Config("recall K must be at least 1".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut t2i = Vec::with_capacity(n);
    let mut i2t = Vec::with_capacity(n);
    for q in 0..n {
        let sims: Vec<f64> = (0..n).map(|j| dot(zr.row(q), zv.row(j))).collect();
        t2i.push(rank_of(&sims, q));
        let sims: Vec<f64> = (0..n).map(|j| dot(zv.row(q), zr.row(j))).collect();
        i2t.push(rank_of(&sims, q));
    }
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(Recalls {
        ks: ks.to_vec(),
        text_to_image: ks.iter().map(|&k| recall(&t2i, k)).collect(),
        image_to_text: ks.iter().map(|&k| recall(&i2t, k)).collect(),
    })
}
