//! Downstream protocols over a frozen model: zero-shot prompt
//! classification, cross-modal retrieval and a linear probe.

mod metrics;

pub use metrics::{auc, compute_metrics, macro_average, retrieval_eval, Metrics, Recalls, ScoreTable, THRESHOLD};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::tokenizer::{words, UNK_ID};
use crate::dataset::{tokenize, TokenSequence, Vocab, Volume};
use crate::encoders::{embed_texts, embed_volumes, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

/// Attribute name -> prompt pair.
pub type PromptSet = BTreeMap<String, PromptPair>;

pub fn read_prompts(path: impl AsRef<Path>) -> Result<PromptSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: PromptSet = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if set.is_empty() {
        return Err(Error::Config(format!("{}: empty prompt set", path.display())));
    }
    Ok(set)
}

fn tokenize_prompt(attr: &str, text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let err = |reason: &str| Error::Prompt {
        attribute: attr.to_string(),
        reason: reason.to_string(),
    };
    if words(text).is_empty() {
        return Err(err("prompt has no words"));
    }
    let seq = tokenize(text, vocab, max_len)?;
    if seq.ids[1..].iter().zip(&seq.mask[1..]).all(|(&id, &m)| !m || id == UNK_ID) {
        return Err(err("no prompt word is in the vocabulary"));
    }
    Ok(seq)
}

/// Two-way softmax between the positive and negative prompt similarities:
/// `sigmoid((sim_pos - sim_neg) / tau)`.
pub fn prompt_score(zv: &[f64], pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let d = (dot(zv, pos) - dot(zv, neg)) / tau;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Scores every volume against every attribute's prompt pair. `labels[i]`
/// maps attribute names to the ground truth of volume `i`.
pub fn zero_shot_classify(
    volumes: &[&Volume],
    labels: &[&BTreeMap<String, u8>],
    prompts: &PromptSet,
    model: &Model,
    vocab: &Vocab,
    tau: f64,
) -> Result<ScoreTable> {
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt set".into()));
    }
    if volumes.len() != labels.len() {
        return Err(Error::Shape("one label map per volume required".into()));
    }
    let max_len = model.config.max_tokens;
    let mut pos = Vec::with_capacity(prompts.len());
    let mut neg = Vec::with_capacity(prompts.len());
    for (attr, pair) in prompts {
        pos.push(tokenize_prompt(attr, &pair.positive, vocab, max_len)?);
        neg.push(tokenize_prompt(attr, &pair.negative, vocab, max_len)?);
    }
    let zp = embed_texts(model, &pos)?;
    let zn = embed_texts(model, &neg)?;
    let zv = embed_volumes(model, volumes)?;
    let attributes: Vec<String> = prompts.keys().cloned().collect();
    let mut scores = Vec::with_capacity(volumes.len() * attributes.len());
    let mut truth = Vec::with_capacity(scores.capacity());
    for (i, lab) in labels.iter().enumerate() {
        for (j, attr) in attributes.iter().enumerate() {
            let l = *lab.get(attr).ok_or_else(|| Error::Prompt {
                attribute: attr.clone(),
                reason: "attribute missing from the manifest labels".into(),
            })?;
            scores.push(prompt_score(zv.row(i), zp.row(j), zn.row(j), tau));
            truth.push(l);
        }
    }
    ScoreTable::new(attributes, scores, truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            lr: 0.05,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub test: ScoreTable,
    pub train_acc: BTreeMap<String, f64>,
}

fn logistic_fit(x: &EmbeddingBatch, y: &[u8], cfg: &ProbeConfig) -> (Vec<f64>, f64) {
    let (n, d) = (x.batch(), x.width());
    let mut w = vec![0.0; d];
    let mut b = vec![0.0];
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        [d, 1],
    );
    let mut gw = vec![0.0; d];
    for _ in 0..cfg.steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (i, row) in x.rows().enumerate() {
            let z = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b[0];
            let p = 1.0 / (1.0 + (-z).exp());
            let e = (p - f64::from(y[i])) / n as f64;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += e * a;
            }
            gb += e;
        }
        let gbv = [gb];
        opt.step(cfg.lr, [(0, w.as_mut_slice(), gw.as_slice(), true), (1, b.as_mut_slice(), &gbv[..], false)]);
    }
    (w, b[0])
}

fn logistic_predict(x: &EmbeddingBatch, w: &[f64], b: f64) -> Vec<f64> {
    x.rows()
        .map(|row| {
            let z = row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// One logistic classifier per attribute on frozen embeddings. Labels are
/// `[samples][attributes]`.
pub fn linear_probe(
    train: &EmbeddingBatch,
    train_labels: &[Vec<u8>],
    test: &EmbeddingBatch,
    test_labels: &[Vec<u8>],
    attributes: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.batch() != train_labels.len() || test.batch() != test_labels.len() {
        return Err(Error::Shape("one label row per embedding required".into()));
    }
    if train.width() != test.width() {
        return Err(Error::Shape("train and test embeddings differ in width".into()));
    }
    let a = attributes.len();
    if train_labels.iter().chain(test_labels).any(|r| r.len() != a) {
        return Err(Error::Shape(format!("label rows must have {a} entries")));
    }
    let mut scores = vec![0.0; test.batch() * a];
    let mut train_acc = BTreeMap::new();
    for (j, attr) in attributes.iter().enumerate() {
        let y: Vec<u8> = train_labels.iter().map(|r| r[j]).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::DegenerateLabels(attr.clone()));
        }
        let (w, b) = logistic_fit(train, &y, cfg);
        let fit = logistic_predict(train, &w, b);
        train_acc.insert(attr.clone(), compute_metrics(&fit, &y)?.acc);
        for (i, p) in logistic_predict(test, &w, b).into_iter().enumerate() {
            scores[i * a + j] = p;
        }
    }
    let truth = test_labels.iter().flatten().copied().collect();
    Ok(ProbeResult {
        test: ScoreTable::new(attributes.to_vec(), scores, truth)?,
        train_acc,
    })
}

/// The evaluation report document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub checkpoint_hash: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub per_attribute: serde_json::Value,
}
