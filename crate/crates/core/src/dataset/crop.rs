use rand::Rng;

use super::volume::Volume;
use crate::error::{Error, Result};

/// Number of local views drawn per volume.
pub const DEFAULT_VIEWS: usize = 3;

/// A cropped sub-volume and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub volume: Volume,
    pub origin: [usize; 3],
}

/// Contiguous sub-block at an origin drawn uniformly and independently per axis.
pub fn random_crop<R: Rng + ?Sized>(v: &Volume, crop_dims: [usize; 3], rng: &mut R) -> Result<Crop> {
    let dims = v.dims();
    if crop_dims.iter().any(|&c| c == 0) {
        return Err(Error::InvalidDims(crop_dims));
    }
    if (0..3).any(|a| crop_dims[a] > dims[a]) {
        return Err(Error::CropTooLarge {
            crop: crop_dims,
            dims,
        });
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=dims[a] - crop_dims[a]);
    }
    Ok(Crop {
        volume: v.slice(origin, crop_dims),
        origin,
    })
}

/// `m` independent random crops; views may overlap.
pub fn make_views<R: Rng + ?Sized>(
    v: &Volume,
    m: usize,
    crop_dims: [usize; 3],
    rng: &mut R,
) -> Result<Vec<Crop>> {
    if m == 0 {
        return Err(Error::Config("number of views must be at least 1".into()));
    }
    (0..m).map(|_| random_crop(v, crop_dims, rng)).collect()
}
