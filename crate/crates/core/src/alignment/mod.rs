//! Global cross-modal alignment, text-informed multi-view alignment, and the
//! combined objective over a batch.

mod fusion;
pub mod losses;

pub use fusion::{ClusterHead, FusionParams};
pub use losses::{gca_loss, tma_loss, NORM_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::dataset::{TokenSequence, Volume};
use crate::encoders::{global_text, global_visual, visual_features, TextFeatures};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_tma: f64,
    pub gca_weight: f64,
    pub tma_weight: f64,
    /// Average the text-anchored direction into the contrastive term.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            tau_tma: DEFAULT_TAU,
            gca_weight: 1.0,
            tma_weight: 1.0,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_tma > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.gca_weight >= 0.0) || !(self.tma_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Weighted loss terms; `total == gca + tma`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gca: f64,
    pub tma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(gca: f64, tma: f64) -> Self {
        LossBreakdown {
            gca,
            tma,
            total: gca + tma,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gca.is_finite() && self.tma.is_finite() && self.total.is_finite()
    }
}

/// `B` samples, each with a full volume, `M` equally sized views and a report.
#[derive(Clone, Debug)]
pub struct Batch {
    pub volumes: Vec<Volume>,
    pub views: Vec<Vec<Volume>>,
    pub tokens: Vec<TokenSequence>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Checks the batch is complete and returns `M`.
    pub fn views_per_sample(&self) -> Result<usize> {
        let b = self.len();
        if b == 0 || self.views.len() != b || self.tokens.len() != b {
            return Err(Error::Shape(format!(
                "batch has {} volumes, {} view sets and {} reports",
                b,
                self.views.len(),
                self.tokens.len()
            )));
        }
        let m = self.views[0].len();
        if m == 0 || self.views.iter().any(|v| v.len() != m) {
            return Err(Error::Shape("every sample needs the same non-zero view count".into()));
        }
        Ok(m)
    }

    fn view_refs(&self) -> Vec<&Volume> {
        self.views.iter().flatten().collect()
    }
}

/// Refines one view's tokens `[L_v, d_f]` with the report and mean-pools.
pub fn fuse_text_informed(v_seq: &Tensor, t: &TextFeatures, model: &Model) -> Result<Vec<f64>> {
    let d_f = model.config.feature_dim();
    if v_seq.shape().len() != 2 || v_seq.shape()[1] != d_f || v_seq.shape()[0] == 0 {
        return Err(Error::Shape(format!("visual tokens {:?}, expected [L_v, {d_f}]", v_seq.shape())));
    }
    let (l, d_r) = (t.tokens.shape()[0], t.tokens.shape()[1]);
    if d_r != model.config.text_width || t.mask.len() != l {
        return Err(Error::Shape("text features do not match the model".into()));
    }
    let mut g = Graph::new();
    let v = g.input(v_seq.clone().reshape(&[1, v_seq.shape()[0], d_f]));
    let tt = g.input(t.tokens.clone().reshape(&[1, l, d_r]));
    let z = model.fusion.forward(&mut g, &model.store, v, tt, &t.mask)?;
    Ok(g.value(z).data().to_vec())
}

/// The first `active_b` cluster logits for one local embedding.
pub fn cluster_logits(z_hat: &[f64], model: &Model, active_b: usize) -> Result<Vec<f64>> {
    let d_f = model.config.feature_dim();
    if z_hat.len() != d_f {
        return Err(Error::Shape(format!("local embedding of width {}, expected {d_f}", z_hat.len())));
    }
    fusion::check_active(active_b, model.cluster.slots)?;
    let mut g = Graph::new();
    let z = g.input(Tensor::from_vec(&[1, d_f], z_hat.to_vec()));
    let out = model.cluster.forward(&mut g, &model.store, z, active_b)?;
    Ok(g.value(out).data().to_vec())
}

/// Local embeddings `[B*M, d_f]`, rows ordered sample-major.
fn local_embeddings(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    views: usize,
    text: Option<(Var, &[bool])>,
) -> Result<Var> {
    let f = visual_features(g, model, &batch.view_refs())?;
    let tokens = g.channels_last(f);
    match text {
        Some((t, mask)) if model.config.text_informing => {
            let t = g.repeat_interleave(t, views);
            let l = mask.len() / batch.len();
            let mask: Vec<bool> = mask
                .chunks(l)
                .flat_map(|m| std::iter::repeat(m).take(views).flatten().copied())
                .collect();
            model.fusion.forward(g, &model.store, tokens, t, &mask)
        }
        _ => Ok(g.mean_rows(tokens)),
    }
}

/// A recorded forward pass of the weighted objective.
pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// `[B*M, B]` cluster logits when the multi-view term is active.
    pub cluster_logits: Option<Var>,
}

/// One forward pass over the batch. Terms with zero weight are not built, so
/// their parameters receive no gradient at all.
pub fn build_loss(batch: &Batch, model: &Model, cfg: &LossConfig) -> Result<LossGraph> {
    cfg.validate()?;
    let m = batch.views_per_sample()?;
    let b = batch.len();
    let use_gca = cfg.gca_weight > 0.0;
    let use_tma = cfg.tma_weight > 0.0;
    if use_tma {
        fusion::check_active(b, model.cluster.slots)?;
    }
    let mut g = Graph::new();
    let needs_text = use_gca || (use_tma && model.config.text_informing);
    let text = if needs_text {
        Some(model.encoders.text.forward(&mut g, &model.store, &batch.tokens)?)
    } else {
        None
    };
    let targets: Vec<usize> = (0..b).collect();
    let mut terms: Vec<Var> = Vec::new();
    let mut gca = 0.0;
    let mut tma = 0.0;

    if use_gca {
        let (t, _) = text.as_ref().expect("text encoded");
        let refs: Vec<&Volume> = batch.volumes.iter().collect();
        let f = visual_features(&mut g, model, &refs)?;
        let zv = global_visual(&mut g, model, f)?;
        let zr = global_text(&mut g, model, *t)?;
        let s = g.matmul_nt(zv, zr);
        let mut l = g.softmax_xent(s, &targets, 1.0 / cfg.tau);
        if cfg.symmetric {
            let st = g.matmul_nt(zr, zv);
            let lt = g.softmax_xent(st, &targets, 1.0 / cfg.tau);
            let sum = g.add(l, lt);
            l = g.scale(sum, 0.5);
        }
        let weighted = g.scale(l, cfg.gca_weight);
        gca = g.value(weighted).data()[0];
        terms.push(weighted);
    }

    let mut logits = None;
    if use_tma {
        let text_ref = text.as_ref().map(|(t, mask)| (*t, mask.as_slice()));
        let z = local_embeddings(&mut g, model, batch, m, text_ref)?;
        let lg = model.cluster.forward(&mut g, &model.store, z, b)?;
        let view_targets: Vec<usize> = (0..b * m).map(|r| r / m).collect();
        let l = g.softmax_xent(lg, &view_targets, 1.0 / cfg.tau_tma);
        let weighted = g.scale(l, cfg.tma_weight);
        tma = g.value(weighted).data()[0];
        terms.push(weighted);
        logits = Some(lg);
    }

    let total = match terms.as_slice() {
        [] => g.input(Tensor::scalar(0.0)),
        [one] => *one,
        [a, c] => g.add(*a, *c),
        _ => unreachable!(),
    };
    Ok(LossGraph {
        graph: g,
        total,
        breakdown: LossBreakdown::new(gca, tma),
        cluster_logits: logits,
    })
}

pub fn total_loss(batch: &Batch, model: &Model, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(build_loss(batch, model, cfg)?.breakdown)
}

pub fn loss_and_grads(batch: &Batch, model: &Model, cfg: &LossConfig) -> Result<(LossBreakdown, Gradients)> {
    let lg = build_loss(batch, model, cfg)?;
    let grads = lg.graph.backward(lg.total);
    Ok((lg.breakdown, grads))
}

/// Argmax cluster per view, rows ordered sample-major.
pub fn cluster_predictions(batch: &Batch, model: &Model) -> Result<Vec<usize>> {
    let m = batch.views_per_sample()?;
    let b = batch.len();
    fusion::check_active(b, model.cluster.slots)?;
    let mut g = Graph::new();
    let text = if model.config.text_informing {
        Some(model.encoders.text.forward(&mut g, &model.store, &batch.tokens)?)
    } else {
        None
    };
    let text_ref = text.as_ref().map(|(t, mask)| (*t, mask.as_slice()));
    let z = local_embeddings(&mut g, model, batch, m, text_ref)?;
    let lg = model.cluster.forward(&mut g, &model.store, z, b)?;
    Ok(g.value(lg)
        .data()
        .chunks(b)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}
