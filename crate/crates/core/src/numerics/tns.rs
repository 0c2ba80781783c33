//! `TNS1` tensor files: one JSON header line `{"shape":[...],"dtype":"f32"|"f64"}`
//! followed by raw little-endian scalars in row-major order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dtype, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: Dtype,
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: T::DTYPE,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a `TNS1` stream of either dtype, converting to `T`.
pub fn decode<T: Real, R: BufRead>(mut r: R) -> std::result::Result<Tensor<T>, String> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| e.to_string())?;
    if line.last() != Some(&b'\n') {
        return Err("missing header line".into());
    }
    let header: Header =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| format!("bad header: {e}"))?;
    let n: usize = header.shape.iter().product();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let width = header.dtype.size();
    if raw.len() != n * width {
        return Err(format!(
            "payload holds {} bytes, shape {:?} of {:?} needs {}",
            raw.len(),
            header.shape,
            header.dtype,
            n * width
        ));
    }
    let data: Vec<T> = match header.dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(header.shape, data).map_err(|e| e.to_string())
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode(std::io::BufReader::new(file)).map_err(|d| Error::format(path, d))
}

/// Element type recorded in a file's header.
pub fn read_dtype(path: &Path) -> Result<Dtype> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = Vec::new();
    std::io::BufReader::new(file)
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(path, e))?;
    let body = line.strip_suffix(b"\n").ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    Ok(header.dtype)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0_f32, -2.0]).unwrap();
        let bytes = encode(&t);
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..header_end], br#"{"shape":[1,2],"dtype":"f32"}"#);
        assert_eq!(&bytes[header_end + 1..header_end + 5], &1.0_f32.to_le_bytes());
        assert_eq!(bytes.len(), header_end + 1 + 8);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::new(vec![3], vec![1.0_f64, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&t);
        bytes.pop();
        assert!(decode::<f64, _>(&bytes[..]).is_err());
        assert!(decode::<f64, _>(&b"{\"shape\":[1]}"[..]).is_err());
    }

    #[test]
    fn f32_file_loads_as_f64() {
        let t = Tensor::new(vec![2], vec![0.5_f32, 0.25]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t)[..]).unwrap();
        assert_eq!(back.data(), &[0.5, 0.25]);
    }

    #[test]
    fn dtype_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        write(&path, &Tensor::new(vec![1], vec![2.0_f64]).unwrap()).unwrap();
        assert_eq!(read_dtype(&path).unwrap(), Dtype::F64);
        std::fs::write(&path, b"{}").unwrap();
        assert!(matches!(read_dtype(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t)[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
