//! Checkpoints: a JSON header followed by flat little-endian parameter
//! blobs, with a SHA-256 digest over the payload. Round trips are bit-exact.
//!
//! Layout: 8-byte magic, u64 header length, header JSON, parameter blob,
//! and, when optimizer state is included, the first- and second-moment blobs
//! plus the step counter. Tensors appear in `tensor_slices` order and the
//! header records their names and lengths, so a mismatched architecture is
//! caught before any numbers are copied.

use crate::error::{Error, Result};
use crate::model::optim::{Adam, OptimConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"U2ADCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    epoch: u64,
    phase: String,
    /// Master seed; all random streams derive from it statelessly, so this
    /// is the entire RNG state needed to resume.
    seed: u64,
    config: ModelConfig,
    names: Vec<String>,
    lens: Vec<u64>,
    optim: Option<OptimConfig>,
    adam_t: Option<u64>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub phase: String,
    pub seed: u64,
}

fn dtype_name<T: Scalar>() -> &'static str {
    match std::mem::size_of::<T>() {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

fn push_blob<T: Scalar>(out: &mut Vec<u8>, params: &ModelParams<T>) {
    for (_, slice) in params.tensor_slices() {
        for v in slice {
            if std::mem::size_of::<T>() == 4 {
                out.extend_from_slice(&(v.to_real() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_real().to_le_bytes());
            }
        }
    }
}

fn fill_from_blob<T: Scalar>(
    bytes: &[u8],
    offset: &mut usize,
    params: &mut ModelParams<T>,
) -> Result<()> {
    let width = std::mem::size_of::<T>();
    for (name, slice) in params.tensor_slices_mut() {
        let need = slice.len() * width;
        let chunk = bytes.get(*offset..*offset + need).ok_or_else(|| {
            Error::precondition(format!("checkpoint payload truncated inside {name}"))
        })?;
        for (v, raw) in slice.iter_mut().zip(chunk.chunks_exact(width)) {
            *v = if width == 4 {
                T::from_real(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64)
            } else {
                T::from_real(f64::from_le_bytes(raw.try_into().expect("8-byte chunk")))
            };
        }
        *offset += need;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    opt: Option<&Adam<T>>,
    epoch: u64,
    phase: &str,
    seed: u64,
) -> Result<()> {
    let slices = params.tensor_slices();
    let mut payload = Vec::new();
    push_blob(&mut payload, params);
    if let Some(adam) = opt {
        push_blob(&mut payload, &adam.m);
        push_blob(&mut payload, &adam.v);
        payload.extend_from_slice(&adam.t.to_le_bytes());
    }
    let header = Header {
        version: VERSION,
        dtype: dtype_name::<T>().to_string(),
        epoch,
        phase: phase.to_string(),
        seed,
        config: params.cfg.clone(),
        names: slices.iter().map(|(n, _)| n.clone()).collect(),
        lens: slices.iter().map(|(_, s)| s.len() as u64).collect(),
        optim: opt.map(|a| a.cfg.clone()),
        adam_t: opt.map(|a| a.t),
        payload_sha256: format!("{:x}", Sha256::digest(&payload)),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelParams<T>, Option<Adam<T>>, CheckpointMeta)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::precondition(format!("checkpoint missing at {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::precondition("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16 + header_len;
    let header: Header = serde_json::from_slice(
        bytes
            .get(16..header_end)
            .ok_or_else(|| Error::precondition("checkpoint header truncated"))?,
    )?;
    if header.version != VERSION {
        return Err(Error::precondition(format!("checkpoint version {}", header.version)));
    }
    if header.dtype != dtype_name::<T>() {
        return Err(Error::precondition(format!(
            "checkpoint stores {}, requested {}",
            header.dtype,
            dtype_name::<T>()
        )));
    }
    let payload = &bytes[header_end..];
    let digest = format!("{:x}", Sha256::digest(payload));
    if digest != header.payload_sha256 {
        return Err(Error::precondition("checkpoint payload digest mismatch"));
    }

    let mut params = ModelParams::<T>::zeros(header.config.clone())?;
    let slices = params.tensor_slices();
    if slices.len() != header.names.len() {
        return Err(Error::precondition("checkpoint tensor list does not match the config"));
    }
    for ((name, slice), (h_name, h_len)) in
        slices.iter().zip(header.names.iter().zip(header.lens.iter()))
    {
        if name != h_name || slice.len() as u64 != *h_len {
            return Err(Error::precondition(format!(
                "checkpoint tensor {h_name} ({h_len} values) does not match {name} ({})",
                slice.len()
            )));
        }
    }
    let mut offset = 0usize;
    fill_from_blob(payload, &mut offset, &mut params)?;

    let opt = match (header.optim, header.adam_t) {
        (Some(cfg), Some(t)) => {
            let mut adam = Adam::new(cfg, &params)?;
            fill_from_blob(payload, &mut offset, &mut adam.m)?;
            fill_from_blob(payload, &mut offset, &mut adam.v)?;
            let raw = payload
                .get(offset..offset + 8)
                .ok_or_else(|| Error::precondition("checkpoint payload truncated at step counter"))?;
            offset += 8;
            debug_assert_eq!(u64::from_le_bytes(raw.try_into().expect("8 bytes")), t);
            adam.t = t;
            Some(adam)
        }
        (None, None) => None,
        _ => return Err(Error::precondition("checkpoint optimizer fields are inconsistent")),
    };
    if offset != payload.len() {
        return Err(Error::precondition("checkpoint payload has trailing bytes"));
    }
    let meta = CheckpointMeta { epoch: header.epoch, phase: header.phase, seed: header.seed };
    Ok((params, opt, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            image_height: 16,
            image_width: 16,
            ..ModelConfig::default()
        }
    }

    fn assert_params_bit_equal<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) {
        for ((name, x), (_, y)) in a.tensor_slices().iter().zip(b.tensor_slices()) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert_eq!(
                    p.to_real().to_bits(),
                    q.to_real().to_bits(),
                    "tensor {name} differs"
                );
            }
        }
    }

    #[test]
    fn parameters_round_trip_bit_exactly_in_both_widths() {
        let dir = tempfile::tempdir().unwrap();
        let p32 =
            ModelParams::<f32>::init(tiny_cfg(), &mut stream(3, tag::TRAIN_INIT, &[])).unwrap();
        let path32 = dir.path().join("m32.ckpt");
        save_checkpoint(&path32, &p32, None, 17, "pretrain", 3).unwrap();
        let (back32, opt, meta) = load_checkpoint::<f32>(&path32).unwrap();
        assert_params_bit_equal(&p32, &back32);
        assert!(opt.is_none());
        assert_eq!(meta, CheckpointMeta { epoch: 17, phase: "pretrain".into(), seed: 3 });

        let p64 =
            ModelParams::<f64>::init(tiny_cfg(), &mut stream(4, tag::TRAIN_INIT, &[])).unwrap();
        let path64 = dir.path().join("m64.ckpt");
        save_checkpoint(&path64, &p64, None, 0, "init", 4).unwrap();
        let (back64, _, _) = load_checkpoint::<f64>(&path64).unwrap();
        assert_params_bit_equal(&p64, &back64);

        assert!(matches!(load_checkpoint::<f64>(&path32), Err(Error::Precondition(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let params =
            ModelParams::<f32>::init(tiny_cfg(), &mut stream(5, tag::TRAIN_INIT, &[])).unwrap();
        let mut adam = Adam::new(OptimConfig::default(), &params).unwrap();
        adam.t = 42;
        for (_, slice) in adam.m.tensor_slices_mut() {
            for (i, v) in slice.iter_mut().enumerate() {
                *v = 0.001 * (i as f32 + 1.0);
            }
        }
        let path = dir.path().join("opt.ckpt");
        save_checkpoint(&path, &params, Some(&adam), 50, "adapt", 5).unwrap();
        let (back_p, back_opt, _) = load_checkpoint::<f32>(&path).unwrap();
        let back_opt = back_opt.expect("optimizer state present");
        assert_params_bit_equal(&params, &back_p);
        assert_params_bit_equal(&adam.m, &back_opt.m);
        assert_params_bit_equal(&adam.v, &back_opt.v);
        assert_eq!(back_opt.t, 42);
        assert_eq!(back_opt.cfg, OptimConfig::default());
    }

    #[test]
    fn corrupted_payloads_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params =
            ModelParams::<f32>::init(tiny_cfg(), &mut stream(6, tag::TRAIN_INIT, &[])).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &params, None, 1, "pretrain", 6).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Precondition(_))));
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Precondition(_))));
    }
}
