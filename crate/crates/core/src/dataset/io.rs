//! Binary volume files.
//!
//! Layout, little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4  | magic `T3DV` |
//! | 2  | format version, u16 = 1 |
//! | 1  | dtype code, u8 (0 = float32) |
//! | 1  | reserved, u8 = 0 |
//! | 12 | dims `W, H, S` as u32 |
//! | 12 | spacing in mm as f32 |
//! | 1  | unit_range flag, u8 (0 or 1) |
//! | 4·W·H·S | float32 voxels, `offset(x,y,z) = x + y·W + z·W·H` |

use std::fs;
use std::path::Path;

use super::volume::Volume;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"T3DV";
pub const VOLUME_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 33;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(u8::from(v.unit_range()));
    for x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                field,
                reason: format!(
                    "truncated: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(Error::Format {
            field: "magic",
            reason: format!("expected {VOLUME_MAGIC:?}, found {magic:?}"),
        });
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != VOLUME_VERSION {
        return Err(Error::Format {
            field: "version",
            reason: format!("unsupported version {version}"),
        });
    }
    let dtype = r.array::<1>("dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            field: "dtype",
            reason: format!("unsupported dtype code {dtype}"),
        });
    }
    r.take(1, "reserved")?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(r.array("dims")?) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format {
            field: "dims",
            reason: format!("zero-length axis in {dims:?}"),
        });
    }
    let mut spacing = [0f32; 3];
    for s in spacing.iter_mut() {
        *s = f32::from_le_bytes(r.array("spacing")?);
    }
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::Format {
            field: "spacing",
            reason: format!("non-positive spacing {spacing:?}"),
        });
    }
    let unit_range = match r.array::<1>("unit_range")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                field: "unit_range",
                reason: format!("flag byte {other} is neither 0 nor 1"),
            })
        }
    };
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            field: "dims",
            reason: "voxel count overflows".into(),
        })?;
    let payload = r.take(n, "voxels")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            field: "voxels",
            reason: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, voxels, unit_range).map_err(|e| Error::Format {
        field: "voxels",
        reason: e.to_string(),
    })
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cube() -> Volume {
        Volume::new(
            [2, 2, 2],
            [1.0, 1.0, 4.0],
            (0..8).map(|i| i as f32 * 0.125).collect(),
            true,
        )
        .unwrap()
    }

    #[test]
    fn byte_layout_follows_offset_formula() {
        let v = two_cube();
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), HEADER_LEN + 32);
        assert_eq!(&bytes[0..4], b"T3DV");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &4.0f32.to_le_bytes());
        assert_eq!(bytes[32], 1);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let off = HEADER_LEN + 4 * (x + y * 2 + z * 4);
                    let val = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                    assert_eq!(val, v.get(x, y, z));
                }
            }
        }
        // voxel (1, 0, 1): offset 1 + 0 + 4 = 5 -> bytes 33 + 20
        assert_eq!(&bytes[53..57], &0.625f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let v = two_cube();
        assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
    }

    fn field_of(bytes: &[u8]) -> &'static str {
        match decode_volume(bytes) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_offending_field() {
        let good = encode_volume(&two_cube());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field_of(&bad), "magic");
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(field_of(&bad), "version");
        let mut bad = good.clone();
        bad[6] = 1;
        assert_eq!(field_of(&bad), "dtype");
        let mut bad = good.clone();
        bad[32] = 7;
        assert_eq!(field_of(&bad), "unit_range");
        assert_eq!(field_of(&good[..good.len() - 1]), "voxels");
        assert_eq!(field_of(&good[..10]), "dims");
        assert_eq!(field_of(&good[..2]), "magic");
        let mut long = good.clone();
        long.push(0);
        assert_eq!(field_of(&long), "voxels");
    }
}
