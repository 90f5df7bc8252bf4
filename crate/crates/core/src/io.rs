//! On-disk formats: CRT1 tensors, PGM images, flow-field sidecars.
//!
//! CRT1 layout: bytes 0..4 = ASCII "CRT1", byte 4 = ndim (u8), then ndim
//! little-endian u32 dims, then product(dims) little-endian f32 values in
//! row-major order. Readers reject wrong magic and truncated payloads.

use crate::error::{CrftError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CRT1";

pub fn write_crt1(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(5 + tensor.shape().len() * 4 + tensor.numel() * 4);
    buf.extend_from_slice(MAGIC);
    let ndim = tensor.shape().len();
    if ndim > u8::MAX as usize {
        return Err(CrftError::InvalidArgument(format!(
            "CRT1 supports at most 255 dims, got {}",
            ndim
        )));
    }
    buf.push(ndim as u8);
    for &d in tensor.shape() {
        if d > u32::MAX as usize {
            return Err(CrftError::InvalidArgument(format!(
                "CRT1 dim {} exceeds u32",
                d
            )));
        }
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file =
        fs::File::create(path).map_err(|e| CrftError::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| CrftError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_crt1(path: &Path) -> Result<Tensor> {
    let mut file =
        fs::File::open(path).map_err(|e| CrftError::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| CrftError::io(path.display().to_string(), e))?;
    parse_crt1(&buf).map_err(|detail| CrftError::format(path.display().to_string(), detail))
}

/// Parse a CRT1 payload from memory. Returns a plain error string so the
/// caller can attach the path.
pub fn parse_crt1(buf: &[u8]) -> std::result::Result<Tensor, String> {
    if buf.len() < 5 {
        return Err(format!("truncated header: {} bytes", buf.len()));
    }
    if &buf[0..4] != MAGIC {
        return Err(format!("bad magic {:?}", &buf[0..4]));
    }
    let ndim = buf[4] as usize;
    let dims_end = 5 + ndim * 4;
    if buf.len() < dims_end {
        return Err("truncated dimension table".into());
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 5 + i * 4;
        let d = u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = dims_end + numel * 4;
    if buf.len() != expected {
        return Err(format!(
            "payload is {} bytes, expected {} for shape {:?}",
            buf.len(),
            expected,
            shape
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + i * 4;
        let v = f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
        data.push(v as f64);
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Serialize to the CRT1 byte layout in memory.
pub fn encode_crt1(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + tensor.shape().len() * 4 + tensor.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Write an intensity map in [0,1] as an 8-bit binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, intensities: &[f64]) -> Result<()> {
    if intensities.len() != width * height {
        return Err(CrftError::InvalidArgument(format!(
            "pgm: {}x{} needs {} values, got {}",
            width,
            height,
            width * height,
            intensities.len()
        )));
    }
    let mut buf = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    buf.extend(
        intensities
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut file =
        fs::File::create(path).map_err(|e| CrftError::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| CrftError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| CrftError::io(path.display().to_string(), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CrftError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CrftError::format(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::env;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = env::temp_dir().join(format!("crft-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn crt1_roundtrip_is_byte_exact() {
        // values representable in f32 so the f64 roundtrip is lossless
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.25, 1e10, -0.125]).unwrap();
        let p = tmp("roundtrip.crt1");
        write_crt1(&p, &t).unwrap();
        let back = read_crt1(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        // encoding twice produces identical bytes
        assert_eq!(encode_crt1(&t), encode_crt1(&back));
    }

    #[test]
    fn crt1_rejects_bad_magic() {
        let p = tmp("badmagic.crt1");
        fs::write(&p, b"NOPE\x01\x02\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_crt1(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn crt1_rejects_truncated_payload() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_crt1(&t);
        bytes.truncate(bytes.len() - 3);
        let p = tmp("truncated.crt1");
        fs::write(&p, &bytes).unwrap();
        assert!(read_crt1(&p).is_err());
    }

    #[test]
    fn pgm_header_and_payload() {
        let p = tmp("img.pgm");
        write_pgm(&p, 2, 2, &[0.0, 0.5, 1.0, 2.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 255]);
    }
}
