//! Named-array container files.
//!
//! Checkpoints and adapter files share one on-disk layout:
//!
//! ```text
//! bytes 0..8    magic "SGCONT01"
//! bytes 8..16   header length (u64, little-endian)
//! header        JSON: { format_version, config, arrays: [{name, shape, dtype, offset, len}] }
//! payload       all array elements as little-endian f64, concatenated
//! ```
//!
//! `offset`/`len` are element counts into the payload. Writing and reading
//! go through `f64` byte round-trips, so a reload is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGCONT01";
pub const FORMAT_VERSION: u64 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u64,
    config: serde_json::Value,
    arrays: Vec<ArrayMeta>,
}

/// Write a container holding `config` plus the named arrays.
pub fn save_container(
    path: &Path,
    config: &serde_json::Value,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<()> {
    let mut metas = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, arr) in arrays {
        metas.push(ArrayMeta {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            len: arr.len() as u64,
        });
        offset += arr.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        arrays: metas,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, arr) in arrays {
        // Iterate in logical order so layout quirks of the in-memory array
        // never leak into the file.
        for v in arr.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a container back: (config, name → array).
pub fn load_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f64>>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}; not a container file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut arrays = BTreeMap::new();
    for meta in &header.arrays {
        if meta.dtype != "f64" {
            return Err(Error::Format(format!(
                "array '{}' has unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let start = meta.offset as usize * 8;
        let end = start + meta.len as usize * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "array '{}' extends past end of payload",
                meta.name
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = meta.shape.iter().product();
        if expected != values.len() {
            return Err(Error::Format(format!(
                "array '{}' shape {:?} does not match element count {}",
                meta.name,
                meta.shape,
                values.len()
            )));
        }
        let arr = ArrayD::from_shape_vec(meta.shape.clone(), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        arrays.insert(meta.name.clone(), arr);
    }
    Ok((header.config, arrays))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        // Include values that stress bit-exactness: subnormals, exact
        // negatives, irrational-looking doubles.
        let a = arr2(&[[0.1, -0.7], [f64::MIN_POSITIVE, 1.0 / 3.0]]).into_dyn();
        let b = ndarray::arr1(&[2.0f64.sqrt(), -0.0]).into_dyn();
        let cfg = serde_json::json!({"widths": [32, 64], "note": "test"});
        save_container(&path, &cfg, &[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();

        let (cfg2, arrays) = load_container(&path).unwrap();
        assert_eq!(cfg2["widths"][1], 64);
        let a2 = &arrays["a"];
        assert_eq!(a2.shape(), &[2, 2]);
        for (x, y) in a.iter().zip(a2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in b.iter().zip(arrays["b"].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC00000000").unwrap();
        assert!(matches!(load_container(&path), Err(Error::Format(_))));
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
