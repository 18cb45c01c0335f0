//! The voxel grid type and the intensity/geometry preprocessing ops.
//!
//! Sampling convention: voxel `i` along an axis sits at physical position
//! `i * spacing` (corner-anchored), and positions past the last voxel clamp
//! to the boundary voxel.

use crate::error::{Error, Result};

/// A rank-3 voxel grid, `x` fastest: `offset(x, y, z) = x + y*W + z*W*H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
    unit_range: bool,
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing.map(f64::from)))
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().all(|&d| d >= 1) {
        Ok(())
    } else {
        Err(Error::InvalidDims(dims))
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>, unit_range: bool) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims:?} (expected {n})",
                voxels.len()
            )));
        }
        if unit_range && voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition(
                "volume flagged unit_range has voxels outside [0, 1]".into(),
            ));
        }
        Ok(Volume {
            dims,
            spacing,
            voxels,
            unit_range,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n], false)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(dims)?;
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels, false)
    }

    /// `(W, H, S)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn unit_range(&self) -> bool {
        self.unit_range
    }

    /// Marks the volume as normalized after checking every voxel lies in `[0, 1]`.
    pub fn with_unit_range(mut self) -> Result<Self> {
        if self.voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("voxels outside [0, 1]".into()));
        }
        self.unit_range = true;
        Ok(self)
    }

    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + y * self.dims[0] + z * self.dims[0] * self.dims[1]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.offset(x, y, z)]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let o = self.offset(x, y, z);
        self.voxels[o] = v;
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear sample at fractional voxel indices, clamped to the grid.
    fn sample(&self, pos: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let p = pos[a].clamp(0.0, max);
            let f = p.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            t[a] = p - f;
        }
        let mut acc = 0.0;
        for (cz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
            if wz == 0.0 {
                continue;
            }
            for (cy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
                if wy == 0.0 {
                    continue;
                }
                for (cx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * f64::from(self.get(cx, cy, cz));
                }
            }
        }
        acc
    }

    /// Output voxel `i` samples input index `i * step[a]`.
    fn resample_grid(&self, out_dims: [usize; 3], step: [f64; 3], spacing: [f32; 3]) -> Volume {
        let mut voxels = Vec::with_capacity(out_dims.iter().product());
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let p = [x as f64 * step[0], y as f64 * step[1], z as f64 * step[2]];
                    voxels.push(self.sample(p) as f32);
                }
            }
        }
        Volume {
            dims: out_dims,
            spacing,
            voxels,
            unit_range: self.unit_range,
        }
    }

    /// Sub-block starting at `origin`. Panics when it does not fit.
    pub fn slice(&self, origin: [usize; 3], dims: [usize; 3]) -> Volume {
        for a in 0..3 {
            assert!(origin[a] + dims[a] <= self.dims[a], "slice out of bounds");
        }
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let start = self.offset(origin[0], origin[1] + y, origin[2] + z);
                voxels.extend_from_slice(&self.voxels[start..start + dims[0]]);
            }
        }
        Volume {
            dims,
            spacing: self.spacing,
            voxels,
            unit_range: self.unit_range,
        }
    }
}

/// Clips intensities to `[lo, hi]` and maps them affinely onto `[0, 1]`.
pub fn hu_window(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let span = hi - lo;
    let voxels = v
        .voxels
        .iter()
        .map(|&x| ((f64::from(x).clamp(lo, hi) - lo) / span) as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        voxels,
        unit_range: true,
    })
}

/// Trilinear resampling onto a new voxel spacing.
/// Output dims are `round(dims * spacing / target)`, at least 1.
pub fn resample(v: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    check_spacing(target_spacing)?;
    if target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let mut out_dims = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        let extent = v.dims[a] as f64 * f64::from(v.spacing[a]);
        out_dims[a] = ((extent / f64::from(target_spacing[a])).round() as usize).max(1);
        step[a] = f64::from(target_spacing[a]) / f64::from(v.spacing[a]);
    }
    Ok(v.resample_grid(out_dims, step, target_spacing))
}

/// Trilinear resampling to exactly `target_dims`, rescaling spacing so the
/// physical extent `dims * spacing` is unchanged.
pub fn resize(v: &Volume, target_dims: [usize; 3]) -> Result<Volume> {
    check_dims(target_dims)?;
    if target_dims == v.dims {
        return Ok(v.clone());
    }
    let mut spacing = [0f32; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        step[a] = v.dims[a] as f64 / target_dims[a] as f64;
        spacing[a] = (f64::from(v.spacing[a]) * step[a]) as f32;
    }
    Ok(v.resample_grid(target_dims, step, spacing))
}

/// Ordered preprocessing: resample to spacing, resize to dims, intensity window.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    #[serde(default)]
    pub target_spacing: Option<[f32; 3]>,
    #[serde(default)]
    pub target_dims: Option<[usize; 3]>,
    #[serde(default)]
    pub window: Option<[f64; 2]>,
}

impl Preprocess {
    /// Full-scale CT settings: 1x1x4 mm spacing, 256x256x128 grid, HU window [-1000, 1000].
    pub fn ct_full_scale() -> Self {
        Preprocess {
            target_spacing: Some([1.0, 1.0, 4.0]),
            target_dims: Some([256, 256, 128]),
            window: Some([-1000.0, 1000.0]),
        }
    }

    pub fn apply(&self, v: Volume) -> Result<Volume> {
        let mut v = v;
        if let Some(s) = self.target_spacing {
            v = resample(&v, s)?;
        }
        if let Some(d) = self.target_dims {
            v = resize(&v, d)?;
        }
        if let Some([lo, hi]) = self.window {
            v = hu_window(&v, lo, hi)?;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_boundaries() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![-1500.0, 1000.0, 0.0], false).unwrap();
        let w = hu_window(&v, -1000.0, 1000.0).unwrap();
        assert_eq!(w.voxels(), &[0.0, 1.0, 0.5]);
        assert!(w.unit_range());
        assert_eq!(w.spacing(), v.spacing());
    }

    #[test]
    fn window_rejects_inverted_bounds() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(matches!(hu_window(&v, 1.0, 1.0), Err(Error::InvalidWindow { .. })));
        assert!(matches!(hu_window(&v, 2.0, -1.0), Err(Error::InvalidWindow { .. })));
    }

    #[test]
    fn resample_and_resize_reject_bad_targets() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(matches!(resample(&v, [1.0, 0.0, 1.0]), Err(Error::InvalidSpacing(_))));
        assert!(matches!(resample(&v, [1.0, -2.0, 1.0]), Err(Error::InvalidSpacing(_))));
        assert!(matches!(resize(&v, [2, 0, 2]), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([5, 4, 3], [1.0, 2.0, 3.0], 0.25).unwrap();
        let r = resample(&v, [0.7, 1.3, 4.0]).unwrap();
        assert!(r.voxels().iter().all(|&x| x == 0.25));
        let s = resize(&v, [9, 2, 7]).unwrap();
        assert!(s.voxels().iter().all(|&x| x == 0.25));
        assert_eq!(s.dims(), [9, 2, 7]);
    }

    #[test]
    fn resize_preserves_extent() {
        let v = Volume::filled([16, 16, 8], [1.0, 1.0, 4.0], 0.0).unwrap();
        let r = resize(&v, [8, 8, 4]).unwrap();
        assert_eq!(r.spacing(), [2.0, 2.0, 8.0]);
    }

    #[test]
    fn resample_output_dims_round() {
        let v = Volume::filled([10, 3, 1], [1.0, 1.0, 1.0], 0.0).unwrap();
        let r = resample(&v, [3.0, 2.0, 5.0]).unwrap();
        // 10/3 = 3.33 -> 3; 3/2 = 1.5 -> 2; 1/5 = 0.2 -> 0 -> clamped to 1
        assert_eq!(r.dims(), [3, 2, 1]);
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(w, h, s)| {
            prop::collection::vec(-5.0f32..5.0, w * h * s)
                .prop_map(move |vox| Volume::new([w, h, s], [1.0, 1.5, 2.5], vox, false).unwrap())
        })
    }

    proptest! {
        #[test]
        fn window_is_idempotent_on_unit_range(v in arb_volume()) {
            let w = hu_window(&v, -5.0, 5.0).unwrap();
            let again = hu_window(&w, 0.0, 1.0).unwrap();
            prop_assert_eq!(w.voxels(), again.voxels());
        }

        #[test]
        fn resample_stays_within_envelope(
            v in arb_volume(),
            sx in 0.3f32..4.0, sy in 0.3f32..4.0, sz in 0.3f32..4.0,
        ) {
            let (lo, hi) = v.min_max();
            let r = resample(&v, [sx, sy, sz]).unwrap();
            for &x in r.voxels() {
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5);
            }
        }

        #[test]
        fn resample_to_same_spacing_is_identity(v in arb_volume()) {
            let r = resample(&v, v.spacing()).unwrap();
            prop_assert_eq!(r, v);
        }
    }
}
