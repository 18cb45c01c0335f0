//! The report encoder: token and learned position embeddings followed by
//! post-norm transformer layers with a key padding mask.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::dataset::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Init, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Dense {
            weight: init.weight(&format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: init.zeros(&format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&format!("{name}.gamma"), &[d]),
            beta: init.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer position-wise MLP with a SiLU in between.
#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub up: Dense,
    pub down: Dense,
}

impl FeedForward {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        FeedForward {
            up: Dense::new(init, &format!("{name}.up"), d, 2 * d),
            down: Dense::new(init, &format!("{name}.down"), 2 * d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct TextLayer {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    token: ParamId,
    position: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<TextLayer>,
    heads: usize,
    vocab_size: usize,
    max_tokens: usize,
}

impl TextEncoder {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let d = cfg.text_width;
        let token = init.embedding("text.token", &[cfg.vocab_size, d]);
        let position = init.embedding("text.position", &[cfg.max_tokens, d]);
        let embed_norm = LayerNorm::new(init, "text.embed_norm", d);
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let p = format!("text.layer{i}");
                TextLayer {
                    q: Dense::new(init, &format!("{p}.q"), d, d),
                    k: Dense::new(init, &format!("{p}.k"), d, d),
                    v: Dense::new(init, &format!("{p}.v"), d, d),
                    out: Dense::new(init, &format!("{p}.out"), d, d),
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), d),
                    ffn: FeedForward::new(init, &format!("{p}.ffn"), d),
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        TextEncoder {
            token,
            position,
            embed_norm,
            layers,
            heads: cfg.text_heads,
            vocab_size: cfg.vocab_size,
            max_tokens: cfg.max_tokens,
        }
    }

    /// Returns `[b, l, d_r]` token features and the flattened key mask.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[TokenSequence],
    ) -> Result<(Var, Vec<bool>)> {
        let l = seqs.first().map(TokenSequence::len).unwrap_or(0);
        if seqs.is_empty() || l == 0 {
            return Err(Error::Shape("empty token batch".into()));
        }
        if l > self.max_tokens {
            return Err(Error::Shape(format!(
                "{l} tokens exceed the configured maximum {}",
                self.max_tokens
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * l);
        let mut mask = Vec::with_capacity(seqs.len() * l);
        for s in seqs {
            if s.len() != l {
                return Err(Error::Shape("token sequences differ in length".into()));
            }
            s.validate(self.vocab_size)?;
            ids.extend_from_slice(&s.ids);
            mask.extend_from_slice(&s.mask);
        }
        let table = g.param(store, self.token);
        let x = g.embedding(table, &ids, &[seqs.len(), l])?;
        let pos_table = g.param(store, self.position);
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embedding(pos_table, &positions, &[l])?;
        let x = g.add_broadcast(x, pos);
        let mut x = self.embed_norm.forward(g, store, x);
        for layer in &self.layers {
            let q = layer.q.forward(g, store, x);
            let k = layer.k.forward(g, store, x);
            let v = layer.v.forward(g, store, x);
            let a = g.attention(q, k, v, &mask, self.heads)?;
            let a = layer.out.forward(g, store, a);
            let h = g.add(x, a);
            let h = layer.norm1.forward(g, store, h);
            let f = layer.ffn.forward(g, store, h);
            let h2 = g.add(h, f);
            x = layer.norm2.forward(g, store, h2);
        }
        Ok((x, mask))
    }
}
