//! Visual and report encoders and their projections into the shared
//! embedding space.

mod text;
mod visual;

pub(crate) use text::{Dense, FeedForward, LayerNorm};
pub use text::TextEncoder;
pub use visual::VisualEncoder;

use crate::alignment::losses::NORM_TOLERANCE;
use crate::autograd::{Graph, Var};
use crate::dataset::{TokenSequence, Volume};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Rows of shared-space embeddings, `[batch, width]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    values: Vec<f64>,
    width: usize,
    pub normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps `values`. When `normalized` is set every row must have unit norm.
    pub fn new(values: Vec<f64>, width: usize, normalized: bool) -> Result<Self> {
        if width == 0 || values.len() % width != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite embedding".into()));
        }
        let batch = EmbeddingBatch {
            values,
            width,
            normalized: false,
        };
        if normalized {
            for (i, row) in batch.rows().enumerate() {
                let n = norm(row);
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::Precondition(format!("row {i} has norm {n}, expected 1")));
                }
            }
        }
        Ok(EmbeddingBatch { normalized, ..batch })
    }

    /// L2-normalizes every row.
    pub fn normalize(values: Vec<f64>, width: usize) -> Result<Self> {
        let mut b = Self::new(values, width, false)?;
        for row in b.values.chunks_mut(width) {
            normalize_in_place(row)?;
        }
        b.normalized = true;
        Ok(b)
    }

    pub fn batch(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.width)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.width);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        EmbeddingBatch {
            values,
            width: self.width,
            normalized: self.normalized,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > f64::MIN_POSITIVE) || !n.is_finite() {
        return Err(Error::DegenerateNorm(n));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    GlobalVolume,
    LocalView,
}

/// Backbone output for one volume: `[d_f, s, h, w]` with `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(values: Tensor, provenance: Provenance) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("feature map shape {s:?}, expected 4 non-zero dims")));
        }
        if !values.is_finite() {
            return Err(Error::Precondition("non-finite feature map".into()));
        }
        Ok(FeatureMap { values, provenance })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// `(w, h, s)`, in the same axis order as [`Volume::dims`].
    pub fn spatial_dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[3], s[2], s[1]]
    }

    /// `[L_v, d_f]`: one row per spatial position.
    pub fn tokens(&self) -> Tensor {
        let c = self.channels();
        let l = self.values.numel() / c;
        let src = self.values.data();
        let mut out = vec![0.0; l * c];
        for ci in 0..c {
            for li in 0..l {
                out[li * c + ci] = src[ci * l + li];
            }
        }
        Tensor::from_vec(&[l, c], out)
    }
}

/// Encoded report: `[L_r, d_r]` token features, the CLS row and the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub tokens: Tensor,
    pub cls: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Parameter handles for both encoders and the shared-space projections.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub proj_v: (ParamId, ParamId),
    pub proj_r: (ParamId, ParamId),
}

/// Stacks volumes into `[n, 1, S, H, W]`.
pub(crate) fn volume_tensor(volumes: &[&Volume]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Shape("empty volume batch".into()))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.dims() != dims {
            return Err(Error::Shape(format!(
                "mixed volume dims {:?} and {dims:?} in one batch",
                v.dims()
            )));
        }
        if !v.unit_range() {
            return Err(Error::Precondition("volume is not normalized to [0, 1]".into()));
        }
        data.extend(v.voxels().iter().map(|&x| f64::from(x)));
    }
    Ok(Tensor::from_vec(&[volumes.len(), 1, dims[2], dims[1], dims[0]], data))
}

/// Backbone features `[n, d_f, s, h, w]` for a batch of equally sized volumes.
pub(crate) fn visual_features(g: &mut Graph, model: &Model, volumes: &[&Volume]) -> Result<Var> {
    let x = g.input(volume_tensor(volumes)?);
    Ok(model.encoders.visual.forward(g, &model.store, x))
}

/// `z^v`: spatial mean, projection, L2 normalization.
pub(crate) fn global_visual(g: &mut Graph, model: &Model, features: Var) -> Result<Var> {
    let pooled = g.mean_spatial(features);
    let (w, b) = model.encoders.proj_v;
    let (w, b) = (g.param(&model.store, w), g.param(&model.store, b));
    let z = g.linear(pooled, w, Some(b));
    g.l2_normalize(z)
}

/// `z^r`: the CLS row, projection, L2 normalization.
pub(crate) fn global_text(g: &mut Graph, model: &Model, tokens: Var) -> Result<Var> {
    let cls = g.select_row(tokens, crate::dataset::tokenizer::CLS_POSITION);
    let (w, b) = model.encoders.proj_r;
    let (w, b) = (g.param(&model.store, w), g.param(&model.store, b));
    let z = g.linear(cls, w, Some(b));
    g.l2_normalize(z)
}

/// Runs the backbone on every volume. Volumes must share dims and be in [0, 1].
pub fn encode_volume(volumes: &[Volume], model: &Model, provenance: Provenance) -> Result<Vec<FeatureMap>> {
    let refs: Vec<&Volume> = volumes.iter().collect();
    let mut g = Graph::new();
    let f = visual_features(&mut g, model, &refs)?;
    let value = g.value(f);
    let shape = value.shape()[1..].to_vec();
    value
        .data()
        .chunks(shape.iter().product())
        .map(|chunk| FeatureMap::new(Tensor::from_vec(&shape, chunk.to_vec()), provenance))
        .collect()
}

/// `normalize(weight @ input + bias)` with `weight: [out, in]`.
pub fn project_normalized(input: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != in_dim || bias.numel() != out_dim {
        return Err(Error::Shape(format!(
            "projection {out_dim}x{in_dim} applied to a {}-vector",
            input.len()
        )));
    }
    let mut out: Vec<f64> = weight
        .data()
        .chunks(in_dim)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// `z^v` for one feature map.
pub fn pool_project_visual(f: &FeatureMap, model: &Model) -> Result<Vec<f64>> {
    let c = f.channels();
    let (w, b) = model.encoders.proj_v;
    if model.store.value(w).shape()[1] != c {
        return Err(Error::Shape(format!("feature map has {c} channels")));
    }
    let l = f.values.numel() / c;
    let pooled: Vec<f64> = f
        .values
        .data()
        .chunks(l)
        .map(|ch| ch.iter().sum::<f64>() / l as f64)
        .collect();
    project_normalized(&pooled, model.store.value(w), model.store.value(b))
}

/// Token features and CLS rows for a batch of equally long sequences.
pub fn encode_text(seqs: &[TokenSequence], model: &Model) -> Result<Vec<TextFeatures>> {
    let mut g = Graph::new();
    let (tokens, mask) = model.encoders.text.forward(&mut g, &model.store, seqs)?;
    let value = g.value(tokens);
    let (l, d) = (value.shape()[1], value.shape()[2]);
    Ok(value
        .data()
        .chunks(l * d)
        .zip(mask.chunks(l))
        .map(|(rows, m)| TextFeatures {
            tokens: Tensor::from_vec(&[l, d], rows.to_vec()),
            cls: rows[..d].to_vec(),
            mask: m.to_vec(),
        })
        .collect())
}

/// `z^r` for one CLS vector.
pub fn project_text(cls: &[f64], model: &Model) -> Result<Vec<f64>> {
    let (w, b) = model.encoders.proj_r;
    project_normalized(cls, model.store.value(w), model.store.value(b))
}

const EMBED_CHUNK: usize = 16;

/// Normalized `z^v` rows for any number of volumes.
pub fn embed_volumes(model: &Model, volumes: &[&Volume]) -> Result<EmbeddingBatch> {
    let mut values = Vec::with_capacity(volumes.len() * model.config.shared_dim);
    for chunk in volumes.chunks(EMBED_CHUNK) {
        let mut g = Graph::new();
        let f = visual_features(&mut g, model, chunk)?;
        let z = global_visual(&mut g, model, f)?;
        values.extend_from_slice(g.value(z).data());
    }
    EmbeddingBatch::new(values, model.config.shared_dim, true)
}

/// Normalized `z^r` rows for any number of token sequences.
pub fn embed_texts(model: &Model, seqs: &[TokenSequence]) -> Result<EmbeddingBatch> {
    let mut values = Vec::with_capacity(seqs.len() * model.config.shared_dim);
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let mut g = Graph::new();
        let (t, _) = model.encoders.text.forward(&mut g, &model.store, chunk)?;
        let z = global_text(&mut g, model, t)?;
        values.extend_from_slice(g.value(z).data());
    }
    EmbeddingBatch::new(values, model.config.shared_dim, true)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::{tokenize, Vocab, PAD_ID};
    use crate::model::{ModelConfig, DEFAULT_SHARED_DIM};

    fn small_config() -> ModelConfig {
        ModelConfig {
            shared_dim: 32,
            ..ModelConfig::default()
        }
    }

    fn random_volume(rng: &mut impl Rng, dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0, 1.0, 4.0], |_, _, _| rng.gen::<f32>())
            .unwrap()
            .with_unit_range()
            .unwrap()
    }

    #[test]
    fn feature_map_shapes_follow_the_stride_product() {
        let model = Model::new(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = random_volume(&mut rng, [32, 32, 16]);
        let f = encode_volume(&[full.clone(), full.clone()], &model, Provenance::GlobalVolume).unwrap();
        assert_eq!(f[0].spatial_dims(), [4, 4, 2]);
        assert_eq!(f[0].channels(), 32);
        assert_eq!(f[0], f[1]);

        let view = full.slice([0, 0, 0], [16, 16, 8]);
        let fv = encode_volume(&[view], &model, Provenance::LocalView).unwrap();
        let (a, b) = (fv[0].spatial_dims(), f[0].spatial_dims());
        assert!(a.iter().zip(&b).all(|(x, y)| x < y), "{a:?} vs {b:?}");
    }

    #[test]
    fn encode_volume_checks_inputs() {
        let model = Model::new(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_volume(&mut rng, [16, 16, 8]);
        let b = random_volume(&mut rng, [16, 16, 4]);
        assert!(matches!(
            encode_volume(&[a.clone(), b], &model, Provenance::LocalView),
            Err(Error::Shape(_))
        ));
        let raw = Volume::filled([16, 16, 8], [1.0; 3], 0.5).unwrap();
        assert!(matches!(
            encode_volume(&[raw], &model, Provenance::LocalView),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn weight_sharing_between_views_and_volumes() {
        let mut model = Model::new(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = random_volume(&mut rng, [32, 32, 16]);
        let view = full.slice([8, 8, 4], [16, 16, 8]);
        let before = (
            encode_volume(&[full.clone()], &model, Provenance::GlobalVolume).unwrap(),
            encode_volume(&[view.clone()], &model, Provenance::LocalView).unwrap(),
        );
        let id = model.store.find("visual.stem.weight").unwrap();
        model.store.value_mut(id).data_mut()[0] += 0.5;
        let after = (
            encode_volume(&[full], &model, Provenance::GlobalVolume).unwrap(),
            encode_volume(&[view], &model, Provenance::LocalView).unwrap(),
        );
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
    }

    #[test]
    fn constant_feature_map_projects_the_constant_vector() {
        // normalize(W (c,c,c) + b) with W = [[1,2,3],[0,-1,1]], b = 0, c = 0.5
        // = normalize(3, 0) = (1, 0).
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 1.0]);
        let b = Tensor::zeros(&[2]);
        let out = project_normalized(&[0.5; 3], &w, &b).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-15);

        let cfg = ModelConfig {
            stem_channels: 3,
            stages: vec![],
            norm_groups: 1,
            shared_dim: 2,
            fusion_heads: 1,
            ..ModelConfig::default()
        };
        let mut model = Model::new(&cfg, 2).unwrap();
        let (wid, _) = model.encoders.proj_v;
        *model.store.value_mut(wid) = w;
        let f = FeatureMap::new(Tensor::full(&[3, 2, 2, 2], 0.5), Provenance::GlobalVolume).unwrap();
        let z = pool_project_visual(&f, &model).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn default_shared_width() {
        let model = Model::new(&ModelConfig::default(), 2).unwrap();
        let f = FeatureMap::new(Tensor::full(&[32, 1, 1, 1], 0.3), Provenance::GlobalVolume).unwrap();
        assert_eq!(pool_project_visual(&f, &model).unwrap().len(), DEFAULT_SHARED_DIM);
    }

    #[test]
    fn project_text_cases() {
        let mut model = Model::new(&small_config(), 2).unwrap();
        let zero = vec![0.0; model.config.text_width];
        assert!(matches!(project_text(&zero, &model), Err(Error::DegenerateNorm(_))));

        // identity on d_r = D_shared
        let d = model.config.text_width;
        let (wid, _) = model.encoders.proj_r;
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        *model.store.value_mut(wid) = eye;
        let mut unit = vec![0.0; d];
        unit[3] = 1.0;
        assert_eq!(project_text(&unit, &model).unwrap(), unit);

        // [[3, 1], [4, 2]] (1, 0) = (3, 4) -> (0.6, 0.8)
        let w = Tensor::from_vec(&[2, 2], vec![3.0, 1.0, 4.0, 2.0]);
        let out = project_normalized(&[1.0, 0.0], &w, &Tensor::zeros(&[2])).unwrap();
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-15);
    }

    fn text_model() -> (Model, Vocab) {
        let cfg = ModelConfig {
            max_tokens: 32,
            text_width: 64,
            shared_dim: 32,
            ..ModelConfig::default()
        };
        let vocab = Vocab::from_words(["no", "findings", "bright", "sphere", "left"]);
        (Model::new(&cfg, 2).unwrap(), vocab)
    }

    #[test]
    fn text_features_shape_and_determinism() {
        let (model, vocab) = text_model();
        let s = tokenize("bright sphere left", &vocab, 32).unwrap();
        let t = encode_text(&[s.clone(), s], &model).unwrap();
        assert_eq!(t[0].tokens.shape(), &[32, 64]);
        assert_eq!(t[0], t[1]);
        assert_eq!(t[0].cls, t[0].tokens.data()[..64].to_vec());
    }

    #[test]
    fn masked_positions_do_not_leak() {
        let (model, vocab) = text_model();
        let a = tokenize("no findings", &vocab, 32).unwrap();
        let mut b = a.clone();
        b.ids[10] = 4;
        assert!(encode_text(&[b], &model).is_err());
        // Masked positions must hold the pad id, so perturb the pad row of the
        // embedding table instead and compare the unmasked outputs.
        let mut model2 = model.clone();
        let tok = model2.store.find("text.token").unwrap();
        let d = model2.config.text_width;
        for v in &mut model2.store.value_mut(tok).data_mut()[PAD_ID * d..(PAD_ID + 1) * d] {
            *v += 1.0;
        }
        let fa = encode_text(&[a.clone()], &model).unwrap();
        let fb = encode_text(&[a.clone()], &model2).unwrap();
        for (i, &m) in a.mask.iter().enumerate() {
            let (ra, rb) = (&fa[0].tokens.data()[i * d..][..d], &fb[0].tokens.data()[i * d..][..d]);
            if m {
                for (x, y) in ra.iter().zip(rb) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            } else {
                assert_ne!(ra, rb);
            }
        }
    }

    #[test]
    fn out_of_vocabulary_id_is_an_error() {
        let (model, vocab) = text_model();
        let mut s = tokenize("bright", &vocab, 32).unwrap();
        s.ids[1] = 999;
        assert!(matches!(encode_text(&[s], &model), Err(Error::Vocab { id: 999, .. })));
    }

    #[test]
    fn encoder_outputs_are_finite() {
        let model = Model::new(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vols: Vec<Volume> = (0..3).map(|_| random_volume(&mut rng, [32, 32, 16])).collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let z = embed_volumes(&model, &refs).unwrap();
        assert!(z.values().iter().all(|v| v.is_finite()));
        assert_eq!(z.batch(), 3);
    }

    proptest! {
        #[test]
        fn pooled_projection_ignores_spatial_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::new(&small_config(), 2).unwrap();
            let data: Vec<f64> = (0..32 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = FeatureMap::new(Tensor::from_vec(&[32, 2, 2, 2], data.clone()), Provenance::GlobalVolume).unwrap();
            let mut perm: Vec<usize> = (0..8).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let mut shuffled = vec![0.0; data.len()];
            for c in 0..32 {
                for (dst, &src) in perm.iter().enumerate() {
                    shuffled[c * 8 + dst] = data[c * 8 + src];
                }
            }
            let g = FeatureMap::new(Tensor::from_vec(&[32, 2, 2, 2], shuffled), Provenance::GlobalVolume).unwrap();
            let (a, b) = (pool_project_visual(&f, &model).unwrap(), pool_project_visual(&g, &model).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn projections_have_unit_norm(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = crate::params::truncated_normal(&mut rng, &[16, 8], 1.0);
            let b = crate::params::truncated_normal(&mut rng, &[16], 0.1);
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z = project_normalized(&x, &w, &b).unwrap();
            prop_assert!((norm(&z) - 1.0).abs() < 1e-6);
        }
    }
}
