//! `svol`: a tiny little-endian container.
//!
//! ```text
//! 0..6     magic "SVOL1\0"
//! 6..10    u32 header length L
//! 10..10+L UTF-8 JSON header
//! ...      payload in C order (f64 for volumes, u16 for labels)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelMap, Result, Volume, VolumeError};

const MAGIC: &[u8; 6] = b"SVOL1\0";

#[derive(Clone, Debug, PartialEq)]
pub enum SvolData {
    Volume(Volume),
    Labels(LabelMap),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    channels: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_count: Option<u16>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode(item: &SvolData) -> Vec<u8> {
    let (header, payload): (Header, Vec<u8>) = match item {
        SvolData::Volume(v) => (
            Header {
                kind: "volume".into(),
                channels: v.channels,
                dims: v.dims,
                spacing: v.spacing,
                dtype: "f64".into(),
                class_count: None,
            },
            v.data.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        SvolData::Labels(l) => (
            Header {
                kind: "labels".into(),
                channels: 1,
                dims: l.dims,
                spacing: l.spacing,
                dtype: "u16".into(),
                class_count: Some(l.class_count),
            },
            l.labels.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<SvolData> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(VolumeError::BadMagic {
            found: bytes[..bytes.len().min(6)].to_vec(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let hend = 10 + hlen;
    if bytes.len() < hend {
        return Err(VolumeError::TruncatedPayload {
            expected: hend,
            found: bytes.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[10..hend]).map_err(|e| VolumeError::Header(e.to_string()))?;
    let voxels: usize = header.dims.iter().product();
    let width = match header.dtype.as_str() {
        "f64" => 8,
        "u16" => 2,
        other => return Err(VolumeError::UnsupportedFeature(format!("dtype {other}"))),
    };
    let expected = header.channels * voxels * width;
    let payload = &bytes[hend..];
    if payload.len() < expected {
        return Err(VolumeError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    match (header.kind.as_str(), width) {
        ("volume", 8) => {
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok(SvolData::Volume(Volume::new(header.channels, header.dims, header.spacing, data)?))
        }
        ("labels", 2) => {
            let labels: Vec<u16> = payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
                .collect();
            let class_count = header
                .class_count
                .ok_or_else(|| VolumeError::Header("labels without class_count".into()))?;
            Ok(SvolData::Labels(LabelMap::new(header.dims, header.spacing, labels, class_count)?))
        }
        (kind, _) => Err(VolumeError::Header(format!(
            "kind {kind:?} incompatible with dtype {}",
            header.dtype
        ))),
    }
}

pub fn write_svol(path: impl AsRef<Path>, item: &SvolData) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(item)).map_err(io_err(path))
}

pub fn read_svol(path: impl AsRef<Path>) -> Result<SvolData> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn read_svol_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_svol(path)? {
        SvolData::Volume(v) => Ok(v),
        SvolData::Labels(_) => Err(VolumeError::Header("expected a volume, found labels".into())),
    }
}

pub fn read_svol_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_svol(path)? {
        SvolData::Labels(l) => Ok(l),
        SvolData::Volume(_) => Err(VolumeError::Header("expected labels, found a volume".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header_bytes(json: &str) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(json.as_bytes());
        b
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = header_bytes("{}");
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(VolumeError::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncated_and_oversized_payload() {
        let json = r#"{"kind":"volume","channels":1,"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f64"}"#;
        let mut b = header_bytes(json);
        b.extend(std::iter::repeat(0u8).take(4 * 8));
        assert!(matches!(
            decode(&b),
            Err(VolumeError::TruncatedPayload { expected: 64, found: 32 })
        ));
        b.extend(std::iter::repeat(0u8).take(5 * 8));
        assert!(matches!(decode(&b), Err(VolumeError::PayloadLength { .. })));
    }

    #[test]
    fn labels_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelMap::new([1, 2, 3], [1.0, 0.5, 2.0], vec![0, 1, 2, 3, 2, 1], 4).unwrap();
        let p = dir.path().join("l.svol");
        write_svol(&p, &SvolData::Labels(l.clone())).unwrap();
        assert_eq!(read_svol_labels(&p).unwrap(), l);
        assert!(read_svol_volume(&p).is_err());
    }

    proptest! {
        #[test]
        fn volume_round_trip_is_bit_exact(
            c in 1usize..3,
            d in 1usize..4, h in 1usize..4, w in 1usize..4,
            seed in any::<u64>(),
            spacing in proptest::array::uniform3(0.05f64..5.0),
        ) {
            let n = c * d * h * w;
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(7) & 0x7fef_ffff_ffff_ffff))
                .collect();
            let v = Volume::new(c, [d, h, w], spacing, data).unwrap();
            let bytes = encode(&SvolData::Volume(v.clone()));
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            match back {
                SvolData::Volume(b) => {
                    let same = b.data.iter().zip(&v.data).all(|(x, y)| x.to_bits() == y.to_bits());
                    prop_assert!(same);
                    prop_assert_eq!(b.spacing.map(f64::to_bits), v.spacing.map(f64::to_bits));
                }
                _ => prop_assert!(false),
            }
        }
    }
}
