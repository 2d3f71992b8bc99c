//! Single-file checkpoints: safetensors tensors plus a JSON header entry.
//!
//! Tensor names are the parameter names (`encoder.*`, `generator.*`,
//! `discriminator.*`) and optimizer moments (`opt_g.m.*`, `opt_d.v.*`, ...).
//! The header carries [`CheckpointMeta`] under the `ehgan` key.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{NetworkConfig, Networks};
use crate::training::TrainConfig;

pub const FORMAT_TAG: &str = "ehgan-ckpt-v1";
const META_KEY: &str = "ehgan";
const FORMAT_KEY: &str = "format";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub network: NetworkConfig,
    /// Absent for inference-only exports.
    pub train: Option<TrainConfig>,
    pub epoch: u64,
    pub step: u64,
    pub rng: Option<RngState>,
    pub optimizer_steps: Option<(u64, u64)>,
}

impl CheckpointMeta {
    pub fn inference(network: &NetworkConfig) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            network: network.clone(),
            train: None,
            epoch: 0,
            step: 0,
            rng: None,
            optimizer_steps: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    /// Parameters only, for serving or evaluation.
    pub fn from_networks(nets: &Networks) -> Result<Self> {
        let tensors = nets
            .all_params()
            .into_iter()
            .map(|(name, var)| Ok((name, var.as_tensor().copy()?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            meta: CheckpointMeta::inference(&nets.config),
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([
            (FORMAT_KEY.to_string(), FORMAT_TAG.to_string()),
            (META_KEY.to_string(), meta),
        ]);
        let mut entries: Vec<(&String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k, t.contiguous()?)))
            .collect::<Result<_>>()?;
        entries.sort_by(|a, b| a.0.cmp(b.0));
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(entries, Some(info), &tmp)
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no header metadata", path.display())))?;
        match info.get(FORMAT_KEY) {
            Some(tag) if tag == FORMAT_TAG => {}
            Some(tag) => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported format {tag}, expected {FORMAT_TAG}",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing format tag", path.display()))),
        }
        let meta: CheckpointMeta = serde_json::from_str(
            info.get(META_KEY)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?,
        )
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        Ok(Self { meta, tensors })
    }

    /// Rebuild the networks described by the header and load their parameters.
    pub fn networks(&self, dtype: DType, device: &Device) -> Result<Networks> {
        let nets = Networks::new(&self.meta.network, 0, dtype, device)?;
        let has_d = self.tensors.keys().any(|k| k.starts_with("discriminator."));
        nets.load_params(&self.tensors, has_d)?;
        Ok(nets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_round_trip_continues_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        for _ in 0..17 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn inference_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let nets = Networks::new(&NetworkConfig::micro(), 5, DType::F32, &Device::Cpu).unwrap();
        Checkpoint::from_networks(&nets).unwrap().save(&path).unwrap();
        let ck = Checkpoint::load(&path, &Device::Cpu).unwrap();
        assert_eq!(ck.meta.format, FORMAT_TAG);
        let loaded = ck.networks(DType::F32, &Device::Cpu).unwrap();
        for ((na, a), (nb, b)) in nets.all_params().iter().zip(loaded.all_params().iter()) {
            assert_eq!(na, nb);
            let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{na}");
        }
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        let t = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        candle_core::safetensors::save(&HashMap::from([("x", t)]), &path).unwrap();
        assert!(matches!(Checkpoint::load(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing"), &Device::Cpu),
            Err(Error::Io { .. })
        ));
    }
}
