//! The 3D residual convolutional backbone.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::model::{Init, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv {
            weight: init.weight(&format!("{name}.weight"), &[c_out, c_in, k, k, k], c_in * k * k * k),
            bias: init.zeros(&format!("{name}.bias"), &[c_out]),
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, channels: usize, groups: usize) -> Self {
        Norm {
            gamma: init.ones(&format!("{name}.gamma"), &[channels]),
            beta: init.zeros(&format!("{name}.beta"), &[channels]),
            groups,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// conv-norm-act-conv-norm plus a shortcut, then the activation.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.norm1.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.norm2.forward(g, store, h);
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        let y = g.add(h, skip);
        g.silu(y)
    }
}

/// Stride-2 stem followed by residual stages; one block per stage.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    stem: Conv,
    stem_norm: Norm,
    blocks: Vec<ResBlock>,
}

impl VisualEncoder {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let groups = cfg.norm_groups;
        let stem = Conv::new(init, "visual.stem", 1, cfg.stem_channels, 3, 2);
        let stem_norm = Norm::new(init, "visual.stem_norm", cfg.stem_channels, groups);
        let mut blocks = Vec::with_capacity(cfg.stages.len());
        let mut c_in = cfg.stem_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let p = format!("visual.stage{i}");
            let c = s.channels;
            let shortcut = (c != c_in || s.stride != 1)
                .then(|| Conv::new(init, &format!("{p}.shortcut"), c_in, c, 1, s.stride));
            blocks.push(ResBlock {
                conv1: Conv::new(init, &format!("{p}.conv1"), c_in, c, 3, s.stride),
                norm1: Norm::new(init, &format!("{p}.norm1"), c, groups),
                conv2: Conv::new(init, &format!("{p}.conv2"), c, c, 3, 1),
                norm2: Norm::new(init, &format!("{p}.norm2"), c, groups),
                shortcut,
            });
            c_in = c;
        }
        VisualEncoder {
            stem,
            stem_norm,
            blocks,
        }
    }

    /// `x: [n, 1, S, H, W]` -> `[n, d_f, s, h, w]`.
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.stem.forward(g, store, x);
        let h = self.stem_norm.forward(g, store, h);
        let mut h = g.silu(h);
        for block in &self.blocks {
            h = block.forward(g, store, h);
        }
        h
    }
}
