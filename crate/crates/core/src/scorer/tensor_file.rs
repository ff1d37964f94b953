//! The `MCPT` binary container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"MCPT" | version u32 | W u32 | H u32 | C u32 | T u32
//! W*H*C*T f32 values, row-major over (v, u, c, t)
//! W*H validity bytes, row-major over (v, u)
//! ```
//!
//! Version 1 holds MC probability tensors. Version 2 stores a range image as
//! `C = 7` planes with `T = 1`: x, y, range, remission, label, instance and
//! point index, with -1 marking an absent label, instance plane or index.

use std::fs;
use std::path::Path;

use crate::dataset_io::IGNORE;
use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::uncertainty::McProbTensor;

pub const MAGIC: &[u8; 4] = b"MCPT";
pub const VERSION_PROBS: u32 = 1;
pub const VERSION_RANGE_IMAGE: u32 = 2;
const HEADER_LEN: usize = 24;
const IMAGE_PLANES: usize = 7;

/// Decoded header plus payload of any `MCPT` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub iterations: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl RawContainer {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4 + self.valid.len());
        out.extend_from_slice(MAGIC);
        for v in [self.version, self.width as u32, self.height as u32, self.channels as u32, self.iterations as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.valid.iter().map(|&b| b as u8));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedTensor(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let (version, w, h, c, t) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        if version != VERSION_PROBS && version != VERSION_RANGE_IMAGE {
            return Err(Error::MalformedTensor(format!("unsupported version {version}")));
        }
        let pixels = w.checked_mul(h).ok_or_else(|| bad("dimension overflow"))?;
        let count = pixels
            .checked_mul(c)
            .and_then(|n| n.checked_mul(t))
            .ok_or_else(|| bad("dimension overflow"))?;
        let expected = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(HEADER_LEN + pixels))
            .ok_or_else(|| bad("dimension overflow"))?;
        if bytes.len() != expected {
            return Err(Error::MalformedTensor(format!(
                "payload is {} bytes, header W={w} H={h} C={c} T={t} implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_LEN..HEADER_LEN + count * 4];
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mask = &bytes[HEADER_LEN + count * 4..];
        if mask.iter().any(|&b| b > 1) {
            return Err(bad("validity bytes must be 0 or 1"));
        }
        Ok(Self {
            version,
            width: w,
            height: h,
            channels: c,
            iterations: t,
            values,
            valid: mask.iter().map(|&b| b == 1).collect(),
        })
    }
}

pub fn encode_tensor(t: &McProbTensor) -> Vec<u8> {
    RawContainer {
        version: VERSION_PROBS,
        width: t.width,
        height: t.height,
        channels: t.classes,
        iterations: t.iterations,
        values: t.probs.clone(),
        valid: t.valid.clone(),
    }
    .encode()
}

pub fn decode_tensor(bytes: &[u8]) -> Result<McProbTensor> {
    let raw = RawContainer::decode(bytes)?;
    if raw.version != VERSION_PROBS {
        return Err(Error::MalformedTensor(format!(
            "version {} is not a probability tensor",
            raw.version
        )));
    }
    McProbTensor::new(raw.width, raw.height, raw.channels, raw.iterations, raw.values, raw.valid)
}

pub fn store_tensor(t: &McProbTensor, path: &Path) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_external_tensor(path: &Path) -> Result<McProbTensor> {
    decode_tensor(&read_file(path)?)
}

pub fn encode_range_image(img: &RangeImage) -> Vec<u8> {
    let n = img.len();
    let mut values = Vec::with_capacity(n * IMAGE_PLANES);
    for i in 0..n {
        values.extend_from_slice(&[
            img.x[i],
            img.y[i],
            img.range[i],
            img.remission[i],
            if img.labels[i] == IGNORE { -1.0 } else { img.labels[i] as f32 },
            img.instances.as_ref().map_or(-1.0, |p| p[i] as f32),
            img.point_index[i].map_or(-1.0, |k| k as f32),
        ]);
    }
    RawContainer {
        version: VERSION_RANGE_IMAGE,
        width: img.width,
        height: img.height,
        channels: IMAGE_PLANES,
        iterations: 1,
        values,
        valid: img.valid.clone(),
    }
    .encode()
}

pub fn decode_range_image(bytes: &[u8]) -> Result<RangeImage> {
    let raw = RawContainer::decode(bytes)?;
    if raw.version != VERSION_RANGE_IMAGE || raw.channels != IMAGE_PLANES || raw.iterations != 1 {
        return Err(Error::MalformedTensor("not a range-image container".into()));
    }
    let mut img = RangeImage::empty(raw.width, raw.height);
    let has_instances = raw.values.chunks_exact(IMAGE_PLANES).any(|p| p[5] >= 0.0);
    if has_instances {
        img.instances = Some(vec![0; img.len()]);
    }
    let int = |v: f32, what: &str| -> Result<Option<u32>> {
        if v == -1.0 {
            Ok(None)
        } else if v >= 0.0 && v.fract() == 0.0 && v <= 16_777_216.0 {
            Ok(Some(v as u32))
        } else {
            Err(Error::MalformedTensor(format!("{what} plane holds {v}")))
        }
    };
    for (i, p) in raw.values.chunks_exact(IMAGE_PLANES).enumerate() {
        img.x[i] = p[0];
        img.y[i] = p[1];
        img.range[i] = p[2];
        img.remission[i] = p[3];
        img.labels[i] = int(p[4], "label")?.map_or(IGNORE, |l| l as u16);
        if let Some(inst) = &mut img.instances {
            inst[i] = int(p[5], "instance")?.unwrap_or(0) as u16;
        }
        img.point_index[i] = int(p[6], "point index")?;
    }
    img.valid = raw.valid;
    Ok(img)
}

pub fn store_range_image(img: &RangeImage, path: &Path) -> Result<()> {
    write_file(path, &encode_range_image(img))
}

pub fn load_range_image(path: &Path) -> Result<RangeImage> {
    decode_range_image(&read_file(path)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPredictions(path.to_path_buf())
        } else {
            Error::storage(path, e)
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor() -> McProbTensor {
        let probs = vec![0.25, 0.5, 0.75, 0.5, 1.0, 0.0, 0.0, 1.0];
        McProbTensor::new(2, 1, 2, 2, probs, vec![true, false]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&tensor());
        assert_eq!(&bytes[..4], b"MCPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0.25);
        assert_eq!(bytes.len(), 24 + 8 * 4 + 2);
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 0]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let t = tensor();
        let bytes = encode_tensor(&t);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::MalformedTensor(_))));
        assert!(matches!(decode_tensor(&bytes[..10]), Err(Error::MalformedTensor(_))));
        let mut wrong_dims = bytes.clone();
        wrong_dims[20] = 3;
        assert!(matches!(decode_tensor(&wrong_dims), Err(Error::MalformedTensor(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_tensor(&magic), Err(Error::MalformedTensor(_))));
    }

    #[test]
    fn range_image_round_trip() {
        let mut img = RangeImage::empty(3, 2);
        img.instances = Some(vec![0; 6]);
        img.valid[1] = true;
        img.x[1] = 1.5;
        img.range[1] = 4.25;
        img.remission[1] = 0.3;
        img.labels[1] = 2;
        img.point_index[1] = Some(17);
        img.instances.as_mut().unwrap()[1] = 9;
        let back = decode_range_image(&encode_range_image(&img)).unwrap();
        assert_eq!(back, img);
        assert!(decode_tensor(&encode_range_image(&img)).is_err());
    }
}
