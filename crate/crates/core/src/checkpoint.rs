//! Versioned binary checkpoints for policy networks.
//!
//! Layout: 4 magic bytes `BARL`, a little-endian u32 format version, a
//! little-endian u32 metadata length, UTF-8 JSON metadata (architecture
//! config plus an ordered tensor manifest of name/shape/dtype), then the
//! raw little-endian IEEE-754 tensor payloads concatenated in manifest
//! order. Loading is strict: magic, version, dtype, names, shapes, and
//! total length must all match.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ArchitectureConfig, PolicyNetwork};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

pub const MAGIC: [u8; 4] = *b"BARL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("checkpoint truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ArchitectureConfig,
    tensors: Vec<TensorMeta>,
}

pub fn save<E: Scalar>(net: &PolicyNetwork<E>, path: &Path) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    net.visit_params(&mut |name, t| {
        tensors.push(TensorMeta {
            name,
            shape: t.shape().to_vec(),
            dtype: E::DTYPE.as_str().to_string(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    });
    let meta = Metadata {
        config: net.config().clone(),
        tensors,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;

    let mut file = fs::File::create(path)?;
    file.write_all(&MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    file.write_all(&meta_json)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

pub fn load<E: Scalar>(path: &Path) -> Result<PolicyNetwork<E>, CheckpointError> {
    let bytes = fs::read(path)?;
    load_bytes(&bytes)
}

pub fn load_bytes<E: Scalar>(bytes: &[u8]) -> Result<PolicyNetwork<E>, CheckpointError> {
    let need = |expected: usize| -> Result<(), CheckpointError> {
        if bytes.len() < expected {
            Err(CheckpointError::Truncated {
                expected,
                got: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(12)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    need(12 + meta_len)?;
    let meta: Metadata = serde_json::from_slice(&bytes[12..12 + meta_len])
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;

    let mut net = PolicyNetwork::<E>::zeros(meta.config.clone())?;
    let elem = E::DTYPE.size_bytes();

    // pair the network's parameters with the manifest, in order
    let mut expected = Vec::new();
    net.visit_params(&mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != meta.tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "config implies {} tensors, manifest lists {}",
            expected.len(),
            meta.tensors.len()
        )));
    }
    let mut offset = 12 + meta_len;
    let mut reads = Vec::with_capacity(meta.tensors.len());
    for ((name, shape), m) in expected.iter().zip(&meta.tensors) {
        if *name != m.name {
            return Err(CheckpointError::Mismatch(format!(
                "tensor order: expected {name}, manifest has {}",
                m.name
            )));
        }
        if *shape != m.shape {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: config implies shape {shape:?}, manifest has {:?}",
                m.shape
            )));
        }
        if m.dtype != E::DTYPE.as_str() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: dtype {} does not match the requested {}",
                m.dtype,
                E::DTYPE.as_str()
            )));
        }
        let n: usize = shape.iter().product();
        need(offset + n * elem)?;
        reads.push(offset);
        offset += n * elem;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - offset,
        });
    }

    let mut idx = 0;
    net.visit_params_mut(&mut |_, t| {
        let mut pos = reads[idx];
        idx += 1;
        for v in t.data_mut() {
            *v = E::read_le(&bytes[pos..pos + elem]);
            pos += elem;
        }
    });
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ArchitectureConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(with_bam: bool, seed: u64) -> PolicyNetwork<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNetwork::init(ArchitectureConfig::nature_lite(3, with_bam), &mut rng).unwrap()
    }

    fn nets_equal(a: &PolicyNetwork<f32>, b: &PolicyNetwork<f32>) -> bool {
        let mut params_a = Vec::new();
        a.visit_params(&mut |n, t| params_a.push((n, t.clone())));
        let mut equal = a.config() == b.config();
        let mut i = 0;
        b.visit_params(&mut |n, t| {
            let (na, ta) = &params_a[i];
            equal &= *na == n && ta == t;
            i += 1;
        });
        equal && i == params_a.len()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("bamrl-checkpoint-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        for (i, with_bam) in [false, true].into_iter().enumerate() {
            let net = random_net(with_bam, 40 + i as u64);
            let path = dir.join(format!("net{i}.ckpt"));
            save(&net, &path).unwrap();
            let loaded = load::<f32>(&path).unwrap();
            assert!(nets_equal(&net, &loaded));
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = std::env::temp_dir().join("bamrl-checkpoint-magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save(&random_net(true, 1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            load_bytes::<f32>(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            load_bytes::<f32>(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 99 })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = std::env::temp_dir().join("bamrl-checkpoint-truncated");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save(&random_net(false, 2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 17];
        assert!(matches!(
            load_bytes::<f32>(cut),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = std::env::temp_dir().join("bamrl-checkpoint-trailing");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save(&random_net(false, 3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 5]);
        assert!(matches!(
            load_bytes::<f32>(&bytes),
            Err(CheckpointError::TrailingBytes { extra: 5 })
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("bamrl-checkpoint-dtype");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save(&random_net(false, 4), &path).unwrap();
        assert!(matches!(
            load::<f64>(&path),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn garbled_metadata_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let junk = b"{not json";
        bytes.extend_from_slice(&(junk.len() as u32).to_le_bytes());
        bytes.extend_from_slice(junk);
        assert!(matches!(
            load_bytes::<f32>(&bytes),
            Err(CheckpointError::Metadata(_))
        ));
    }
}
