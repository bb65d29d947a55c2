//! CLF1 feature container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CLF1"
//! 4       2     version (u16 LE) = 1
//! 6       4     N (u32 LE)
//! 10      4     L (u32 LE)
//! 14      4     D (u32 LE)
//! 18      4*NLD payload, f32 LE, row-major (sample, position, channel)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CLF1";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 18;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "feature",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn encode_features(tensor: &Tensor) -> Result<Vec<u8>> {
    let s = tensor.shape();
    if s.len() != 3 {
        return Err(Error::shape("write_features", format!("expected [N, L, D], got {s:?}")));
    }
    let dims = s
        .iter()
        .map(|&d| u32::try_from(d))
        .collect::<std::result::Result<Vec<u32>, _>>()
        .map_err(|_| Error::shape("write_features", format!("dimension of {s:?} exceeds u32")))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(format_err(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, l, d) = (dim(6), dim(10), dim(14));
    let count = n
        .checked_mul(l)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    let expected = FEATURE_HEADER_LEN + 4 * count;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes for {n}x{l}x{d}, found {}", bytes.len()),
        ));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[n, l, d], data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_features(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_file_size() {
        let t = Tensor::new(&[1, 1, 1], vec![0.25]).unwrap();
        let bytes = encode_features(&t).unwrap();
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"CLF1");
        assert_eq!(decode_features(&bytes, Path::new("mem")).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_features(&t).unwrap();
        let p = Path::new("mem");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic, p), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode_features(&bad_version, p).unwrap_err().to_string().contains("version"));

        assert!(decode_features(&good[..good.len() - 1], p).is_err());
        assert!(decode_features(&good[..10], p).is_err());
    }
}
