//! The full parameter set: visual backbone, text transformer, the two
//! projections into the shared space, the fusion block and the cluster head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{ClusterHead, FusionParams};
use crate::encoders::{EncoderParams, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::rng::child_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

/// Architecture knobs. The feature width `d_f` is the channel count of the
/// last stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub norm_groups: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub shared_dim: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    /// When off, local embeddings are the mean of the raw visual tokens.
    pub text_informing: bool,
    pub init_seed: u64,
}

pub const DEFAULT_SHARED_DIM: usize = 768;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 8,
            stages: vec![
                StageConfig { channels: 16, stride: 2 },
                StageConfig { channels: 32, stride: 2 },
                StageConfig { channels: 32, stride: 1 },
            ],
            norm_groups: 4,
            vocab_size: 32,
            max_tokens: 24,
            text_width: 32,
            text_layers: 2,
            text_heads: 4,
            shared_dim: DEFAULT_SHARED_DIM,
            fusion_layers: 1,
            fusion_heads: 4,
            text_informing: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// Total downsampling factor of the backbone along each axis.
    pub fn stride_product(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("stem_channels", self.stem_channels),
            ("norm_groups", self.norm_groups),
            ("vocab_size", self.vocab_size),
            ("max_tokens", self.max_tokens),
            ("text_width", self.text_width),
            ("text_heads", self.text_heads),
            ("shared_dim", self.shared_dim),
            ("fusion_layers", self.fusion_layers),
            ("fusion_heads", self.fusion_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.vocab_size < 3 {
            return bad("model.vocab_size must cover the reserved tokens".into());
        }
        let mut widths = vec![self.stem_channels];
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || !(1..=2).contains(&s.stride) {
                return bad(format!("model.stages[{i}] needs channels > 0 and stride 1 or 2"));
            }
            widths.push(s.channels);
        }
        if let Some(w) = widths.iter().find(|&&w| w % self.norm_groups != 0) {
            return bad(format!("channel count {w} not divisible by norm_groups {}", self.norm_groups));
        }
        if self.text_width % self.text_heads != 0 {
            return bad("model.text_width must be divisible by model.text_heads".into());
        }
        if self.feature_dim() % self.fusion_heads != 0 {
            return bad("feature width must be divisible by model.fusion_heads".into());
        }
        Ok(())
    }
}

/// Parameter registration with seeded truncated-normal weights and zero biases.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: R,
}

impl<R: Rng> Init<'_, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = truncated_normal(&mut self.rng, shape, 1.0 / (fan_in as f64).sqrt());
        self.store.add(name, t, true)
    }

    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = truncated_normal(&mut self.rng, shape, 0.5);
        self.store.add(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0), false)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub fusion: FusionParams,
    pub cluster: ClusterHead,
}

impl Model {
    /// Builds and initializes a model whose cluster head has `cluster_slots`
    /// outputs (the training batch size).
    pub fn new(config: &ModelConfig, cluster_slots: usize) -> Result<Self> {
        config.validate()?;
        if cluster_slots == 0 {
            return Err(Error::Config("cluster head needs at least one slot".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: child_rng(config.init_seed, "init", 0),
        };
        let d_f = config.feature_dim();
        let visual = VisualEncoder::new(&mut init, config);
        let text = TextEncoder::new(&mut init, config);
        let proj_v_w = init.weight("proj_v.weight", &[config.shared_dim, d_f], d_f);
        let proj_v_b = init.zeros("proj_v.bias", &[config.shared_dim]);
        let proj_r_w = init.weight("proj_r.weight", &[config.shared_dim, config.text_width], config.text_width);
        let proj_r_b = init.zeros("proj_r.bias", &[config.shared_dim]);
        let fusion = FusionParams::new(&mut init, config);
        let cluster = ClusterHead::new(&mut init, d_f, cluster_slots);
        Ok(Model {
            config: config.clone(),
            store,
            encoders: EncoderParams {
                visual,
                text,
                proj_v: (proj_v_w, proj_v_b),
                proj_r: (proj_r_w, proj_r_b),
            },
            fusion,
            cluster,
        })
    }

    pub fn cluster_slots(&self) -> usize {
        self.cluster.slots
    }

    /// Replaces every parameter tensor, checking names and shapes.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {} parameters",
                tensors.len(),
                self.store.len()
            )));
        }
        for ((name, t), p) in tensors.into_iter().zip(self.store.params_mut()) {
            if name != p.name || t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match parameter `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_deterministic() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_dim(), 32);
        assert_eq!(cfg.stride_product(), 8);
        let a = Model::new(&cfg, 4).unwrap();
        let b = Model::new(&cfg, 4).unwrap();
        assert_eq!(a.store, b.store);
        assert!(a.store.all_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.fusion_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.stages[0].stride = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.norm_groups = 3;
        assert!(cfg.validate().is_err());
        assert!(Model::new(&ModelConfig::default(), 0).is_err());
    }

    #[test]
    fn biases_and_norms_skip_decay() {
        let m = Model::new(&ModelConfig::default(), 2).unwrap();
        for (_, p) in m.store.iter() {
            let is_bias_or_norm =
                p.name.ends_with("bias") || p.name.ends_with("gamma") || p.name.ends_with("beta");
            assert_eq!(p.decay, !is_bias_or_norm, "{}", p.name);
        }
    }
}
