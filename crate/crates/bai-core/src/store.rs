//! Checkpoint container format.
//!
//! Layout, bit-exact:
//!   magic "BAICKPT1" (8 bytes)
//!   header length H as u64 little-endian
//!   H bytes of UTF-8 JSON: {"meta": {...}, "tensors": {name: {"dtype",
//!     "shape", "offset", "nbytes"}}}
//!   raw little-endian IEEE-754 payload, tensors back to back in lexicographic
//!     name order, offsets relative to the payload start, no padding
//!
//! Serialization is a pure function of the checkpoint contents (sorted maps,
//! compact JSON), so saving the same object twice yields identical bytes and
//! `checksum` can hash the serialized form directly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Dtype, Tensor, TensorData};

pub const MAGIC: &[u8; 8] = b"BAICKPT1";

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, HeaderTensor>,
}

/// Canonical container bytes for a checkpoint. Validates first (required meta,
/// finiteness, shape agreement) so corrupt objects never reach disk.
pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in ckpt.iter() {
        let nbytes = t.nbytes() as u64;
        tensors.insert(
            name.clone(),
            HeaderTensor {
                dtype: t.dtype().name().to_string(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = Header { meta: ckpt.meta.clone(), tensors };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in ckpt.iter() {
        match &t.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// SHA-256 (lowercase hex) of the canonical serialization.
pub fn checksum(ckpt: &Checkpoint) -> Result<String> {
    Ok(sha256_hex(&serialize_checkpoint(ckpt)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = serialize_checkpoint(ckpt)?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_checkpoint(&bytes)
        .map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "container truncated: {} bytes, need at least 16 for magic + header length",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(hlen).ok_or_else(|| {
        Error::Format("header length overflows".into())
    })?;
    if bytes.len() < payload_start {
        return Err(Error::Format(format!(
            "container truncated inside header: header claims {hlen} bytes, {} available",
            bytes.len() - 16
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut ckpt = Checkpoint::new(header.meta);
    let mut expect_offset = 0u64;
    for (name, ht) in &header.tensors {
        // offsets must be contiguous in lexicographic order — that is the format
        if ht.offset != expect_offset {
            return Err(Error::Format(format!(
                "tensor '{name}': offset {} but payload cursor is {expect_offset}",
                ht.offset
            )));
        }
        let dtype = Dtype::parse(&ht.dtype)?;
        let numel: usize = ht.shape.iter().product();
        if numel * dtype.elem_size() != ht.nbytes as usize {
            return Err(Error::Format(format!(
                "tensor '{name}': shape {:?} needs {} bytes, header claims {}",
                ht.shape,
                numel * dtype.elem_size(),
                ht.nbytes
            )));
        }
        let start = ht.offset as usize;
        let end = start + ht.nbytes as usize;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "container truncated: tensor '{name}' wants bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        let raw = &payload[start..end];
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        ckpt.insert(Tensor { name: name.clone(), shape: ht.shape.clone(), data })?;
        expect_offset = end as u64;
    }
    if expect_offset != payload.len() as u64 {
        return Err(Error::Format(format!(
            "trailing bytes: payload is {} bytes, tensors account for {expect_offset}",
            payload.len()
        )));
    }
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};

    fn meta() -> BTreeMap<String, String> {
        [("arch", "test"), ("vocab", "16"), ("role", "base")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn sample_ckpt() -> Checkpoint {
        let mut c = Checkpoint::new(meta());
        c.insert(Tensor::f32("b.w", vec![2, 3], vec![1.5, -2.25, 0.0, 3.5e-3, 1e20, -7.0]))
            .unwrap();
        c.insert(Tensor::f64("a.bias", vec![4], vec![0.1, -0.2, 0.3, -0.4])).unwrap();
        c.insert(Tensor::f32("c", vec![1], vec![42.0])).unwrap();
        c
    }

    #[test]
    fn roundtrip_is_element_exact_for_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample_ckpt();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn digest_is_insertion_order_independent_and_stable() {
        let c1 = sample_ckpt();
        let mut c2 = Checkpoint::new(meta());
        // same tensors, different insertion order
        c2.insert(Tensor::f32("c", vec![1], vec![42.0])).unwrap();
        c2.insert(Tensor::f64("a.bias", vec![4], vec![0.1, -0.2, 0.3, -0.4])).unwrap();
        c2.insert(Tensor::f32("b.w", vec![2, 3], vec![1.5, -2.25, 0.0, 3.5e-3, 1e20, -7.0]))
            .unwrap();
        assert_eq!(checksum(&c1).unwrap(), checksum(&c2).unwrap());
        // double save -> identical bytes
        assert_eq!(serialize_checkpoint(&c1).unwrap(), serialize_checkpoint(&c1).unwrap());
    }

    #[test]
    fn digest_separates_small_perturbations() {
        let base = checksum(&sample_ckpt()).unwrap();
        let mut rng = rng::stream(9, Domain::DataGen, &[]);
        for _ in 0..20 {
            let c = sample_ckpt();
            // flip one random element by one ulp-ish nudge
            let mut t = c.get("b.w").unwrap().clone();
            if let TensorData::F32(v) = &mut t.data {
                let i = rng::uniform_range(&mut rng, v.len());
                v[i] = f32::from_bits(v[i].to_bits() ^ 1);
            }
            let mut c2 = Checkpoint::new(c.meta.clone());
            for (n, tt) in c.iter() {
                c2.insert(if n == "b.w" { t.clone() } else { tt.clone() }).unwrap();
            }
            assert_ne!(checksum(&c2).unwrap(), base);
        }
    }

    #[test]
    fn empty_tensor_set_has_a_defined_digest() {
        let c = Checkpoint::new(meta());
        let d1 = checksum(&c).unwrap();
        let d2 = checksum(&Checkpoint::new(meta())).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 64);
    }

    #[test]
    fn save_rejects_non_finite_with_tensor_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new(meta());
        c.insert(Tensor::f64("q", vec![3], vec![1.0, f64::INFINITY, 2.0])).unwrap();
        match save_checkpoint(&c, &dir.path().join("bad.ckpt")) {
            Err(Error::NonFinite { tensor, index }) => {
                assert_eq!(tensor, "q");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_clean_error() {
        let mut bytes = serialize_checkpoint(&sample_ckpt()).unwrap();
        bytes[0] = b'X';
        match deserialize_checkpoint(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected Format, got {other:?}"),
        }
    }

    #[test]
    fn truncation_anywhere_is_a_clean_error() {
        let bytes = serialize_checkpoint(&sample_ckpt()).unwrap();
        // chop one byte off the end
        assert!(matches!(
            deserialize_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        // and probe a few interior truncations including inside the header
        for cut in [0, 7, 15, 16, 20, bytes.len() / 2] {
            assert!(
                deserialize_checkpoint(&bytes[..cut]).is_err(),
                "cut at {cut} must not parse"
            );
        }
    }

    #[test]
    fn header_payload_inconsistency_is_rejected() {
        let bytes = serialize_checkpoint(&sample_ckpt()).unwrap();
        // append trailing garbage
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 4]);
        assert!(matches!(deserialize_checkpoint(&padded), Err(Error::Format(_))));
    }

    #[test]
    fn header_shape_nbytes_mismatch_is_rejected() {
        // hand-build a header whose nbytes disagrees with the shape
        let header = br#"{"meta":{"arch":"t","vocab":"16"},"tensors":{"w":{"dtype":"f32","shape":[2],"offset":0,"nbytes":4}}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        match deserialize_checkpoint(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains('w'), "{msg}"),
            other => panic!("expected Format, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_non_finite_payload() {
        // build valid bytes, then overwrite an f64 with NaN bits
        let mut c = Checkpoint::new(meta());
        c.insert(Tensor::f64("only", vec![2], vec![1.0, 2.0])).unwrap();
        let mut bytes = serialize_checkpoint(&c).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        match deserialize_checkpoint(&bytes) {
            Err(Error::NonFinite { tensor, index }) => {
                assert_eq!(tensor, "only");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
