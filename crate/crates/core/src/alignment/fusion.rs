//! Text-informed fusion of local visual tokens and the cluster head.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{Dense, FeedForward, LayerNorm};
use crate::error::{Error, Result};
use crate::model::{Init, ModelConfig};
use crate::params::{ParamId, ParamStore};

/// Cross-attention (visual queries, text keys/values) then a feed-forward
/// sublayer, each with a residual and layer norm.
#[derive(Clone, Debug)]
struct FusionLayer {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    layers: Vec<FusionLayer>,
    heads: usize,
}

impl FusionParams {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let (d_f, d_r) = (cfg.feature_dim(), cfg.text_width);
        let layers = (0..cfg.fusion_layers)
            .map(|i| {
                let p = format!("fusion.layer{i}");
                FusionLayer {
                    q: Dense::new(init, &format!("{p}.q"), d_f, d_f),
                    k: Dense::new(init, &format!("{p}.k"), d_r, d_f),
                    v: Dense::new(init, &format!("{p}.v"), d_r, d_f),
                    out: Dense::new(init, &format!("{p}.out"), d_f, d_f),
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), d_f),
                    ffn: FeedForward::new(init, &format!("{p}.ffn"), d_f),
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), d_f),
                }
            })
            .collect();
        FusionParams {
            layers,
            heads: cfg.fusion_heads,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `visual: [n, L_v, d_f]`, `text: [n, L_r, d_r]` -> `[n, d_f]`.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: Var,
        text: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let mut x = visual;
        for layer in &self.layers {
            let q = layer.q.forward(g, store, x);
            let k = layer.k.forward(g, store, text);
            let v = layer.v.forward(g, store, text);
            let a = g.attention(q, k, v, mask, self.heads)?;
            let a = layer.out.forward(g, store, a);
            let h = g.add(x, a);
            let h = layer.norm1.forward(g, store, h);
            let f = layer.ffn.forward(g, store, h);
            let h2 = g.add(h, f);
            x = layer.norm2.forward(g, store, h2);
        }
        Ok(g.mean_rows(x))
    }
}

/// Linear map from local embeddings to `slots` cluster logits.
#[derive(Clone, Debug)]
pub struct ClusterHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub slots: usize,
}

impl ClusterHead {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, d_f: usize, slots: usize) -> Self {
        ClusterHead {
            weight: init.weight("cluster.weight", &[slots, d_f], d_f),
            bias: init.zeros("cluster.bias", &[slots]),
            slots,
        }
    }

    /// `[n, d_f]` -> `[n, active]`, the first `active` outputs of the head.
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, active: usize) -> Result<Var> {
        check_active(active, self.slots)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let logits = g.linear(z, w, Some(b));
        Ok(g.slice_cols(logits, active))
    }
}

pub(crate) fn check_active(active: usize, slots: usize) -> Result<()> {
    if active == 0 || active > slots {
        return Err(Error::Config(format!(
            "active batch size {active} outside 1..={slots} cluster slots"
        )));
    }
    Ok(())
}
