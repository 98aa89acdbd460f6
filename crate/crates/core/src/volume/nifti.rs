//! Minimal single-file NIfTI-1 reader.
//!
//! Handles uncompressed `.nii` files with magic `n+1\0` and datatypes uint8,
//! int16 and float32. Data is read in stored order: the NIfTI `x` axis (fastest
//! varying on disk) becomes our `W` axis, `z` becomes `D`, and a fourth
//! dimension, when present, becomes the channel axis. Orientation matrices are
//! ignored.

use std::fs;
use std::path::Path;

use super::{Result, Volume, VolumeError};

const HEADER_SIZE: usize = 348;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().expect("in header");
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }

    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.raw(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(VolumeError::UnsupportedFeature("compression".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::TruncatedPayload {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let le = Reader {
        bytes,
        big_endian: false,
    };
    let r = if le.i32(0) == HEADER_SIZE as i32 {
        le
    } else {
        let be = Reader {
            bytes,
            big_endian: true,
        };
        if be.i32(0) != HEADER_SIZE as i32 {
            return Err(VolumeError::Header(format!("sizeof_hdr is {}", le.i32(0))));
        }
        be
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(VolumeError::UnsupportedFeature("magic (split header/image pair)".into())),
        other => return Err(VolumeError::BadMagic { found: other.to_vec() }),
    }

    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=4).contains(&ndim) {
        return Err(VolumeError::UnsupportedFeature(format!("dim (rank {ndim})")));
    }
    let extent = |i: usize| -> Result<usize> {
        if i as i16 > ndim {
            return Ok(1);
        }
        match dim[i] {
            n if n >= 1 => Ok(n as usize),
            n => Err(VolumeError::Header(format!("dim[{i}] = {n}"))),
        }
    };
    let (nx, ny, nz, nt) = (extent(1)?, extent(2)?, extent(3)?, extent(4)?);

    let datatype = r.i16(70);
    let width = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        _ => return Err(VolumeError::UnsupportedFeature("datatype".into())),
    };
    let pixdim: Vec<f32> = (0..8).map(|i| r.f32(76 + 4 * i)).collect();
    let spacing_of = |i: usize| -> f64 {
        let s = pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(VolumeError::Header(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;

    let count = nx * ny * nz * nt;
    let expected = start + count * width;
    if bytes.len() < expected {
        return Err(VolumeError::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[start..expected];
    let read = |i: usize| -> f64 {
        let b = &payload[i * width..(i + 1) * width];
        match datatype {
            2 => b[0] as f64,
            4 => {
                let mut a = [b[0], b[1]];
                if r.big_endian {
                    a.reverse();
                }
                i16::from_le_bytes(a) as f64
            }
            _ => {
                let mut a = [b[0], b[1], b[2], b[3]];
                if r.big_endian {
                    a.reverse();
                }
                f32::from_le_bytes(a) as f64
            }
        }
    };
    let scaled = slope != 0.0 && slope.is_finite();
    let data = (0..count)
        .map(|i| {
            let v = read(i);
            if scaled {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Volume::new(nt, [nz, ny, nx], [spacing_of(3), spacing_of(2), spacing_of(1)], data)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Builds a little-endian single-file NIfTI-1 image.
    pub(crate) fn build(dims: &[i16], datatype: i16, pixdim: [f32; 3], slope: f32, inter: f32, payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let bitpix: i16 = match datatype {
            2 => 8,
            4 => 16,
            16 => 32,
            _ => 64,
        };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[76..80].copy_from_slice(&1f32.to_le_bytes());
        for (i, p) in pixdim.iter().enumerate() {
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn float32_values_reproduced() {
        let vals: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 2.0).collect();
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let v = decode(&build(&[4, 3, 2], 16, [0.5, 1.0, 2.0], 0.0, 0.0, &payload)).unwrap();
        assert_eq!(v.dims, [2, 3, 4]);
        assert_eq!(v.spacing, [2.0, 1.0, 0.5]);
        assert_eq!(v.channels, 1);
        for (a, b) in v.data.iter().zip(&vals) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn scaling_applied_when_slope_nonzero() {
        let payload = 3i16.to_le_bytes();
        let v = decode(&build(&[1, 1, 1], 4, [1.0; 3], 2.0, 1.0, &payload)).unwrap();
        assert_eq!(v.data, vec![7.0]);
        let v = decode(&build(&[1, 1, 1], 2, [1.0; 3], 0.0, 5.0, &[3u8])).unwrap();
        assert_eq!(v.data, vec![3.0]);
    }

    #[test]
    fn four_d_becomes_channels() {
        let payload: Vec<u8> = (0..16u8).collect();
        let v = decode(&build(&[2, 2, 2, 2], 2, [1.0; 3], 0.0, 0.0, &payload)).unwrap();
        assert_eq!(v.channels, 2);
        assert_eq!(v.channel(1)[0], 8.0);
    }

    #[test]
    fn unsupported_inputs_are_named() {
        let b = build(&[1, 1, 1], 64, [1.0; 3], 0.0, 0.0, &[0u8; 8]);
        match decode(&b) {
            Err(VolumeError::UnsupportedFeature(f)) => assert_eq!(f, "datatype"),
            other => panic!("{other:?}"),
        }
        match decode(&[0x1f, 0x8b, 8, 0]) {
            Err(VolumeError::UnsupportedFeature(f)) => assert_eq!(f, "compression"),
            other => panic!("{other:?}"),
        }
        let mut b = build(&[1, 1, 1], 2, [1.0; 3], 0.0, 0.0, &[1u8]);
        b[344..348].copy_from_slice(b"abcd");
        assert!(matches!(decode(&b), Err(VolumeError::BadMagic { .. })));
        let b = build(&[2, 2, 2], 16, [1.0; 3], 0.0, 0.0, &[0u8; 4]);
        assert!(matches!(decode(&b), Err(VolumeError::TruncatedPayload { .. })));
    }
}
