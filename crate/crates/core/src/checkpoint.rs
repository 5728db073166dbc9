//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `FEASCKPT`, a little-endian `u32` schema
//! version, a `u64` header length, a JSON header (run config, epoch, step and
//! a tensor index) and finally every tensor as little-endian `f32`, in index
//! order. Optimizer momentum buffers are stored as `optim.momentum.<i>` in
//! the order of [`SiameseNet::online_params_mut`].

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::contrast::SiameseNet;
use crate::error::{Error, Result};
use crate::nn::NamedTensor;

pub const MAGIC: &[u8; 8] = b"FEASCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    global_step: usize,
    tensors: Vec<TensorIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    pub tensors: Vec<NamedTensor<f32>>,
}

fn momentum_name(i: usize) -> String {
    format!("optim.momentum.{i}")
}

impl Checkpoint {
    /// Snapshot of the network (both branches) and its optimizer buffers.
    pub fn capture(net: &mut SiameseNet<f32>, config: &TrainConfig, epoch: usize, global_step: usize) -> Self {
        let mut tensors = net.state();
        for (i, p) in net.online_params_mut().into_iter().enumerate() {
            tensors.push(NamedTensor {
                name: momentum_name(i),
                shape: p.shape.clone(),
                data: p.momentum.clone(),
            });
        }
        Self {
            config: config.clone(),
            epoch,
            global_step,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<f32>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the network described by the stored config and loads every
    /// parameter, buffer and momentum tensor.
    pub fn build_network(&self) -> Result<SiameseNet<f32>> {
        let c = &self.config;
        let mut net = SiameseNet::new(c.mode, &c.encoder, &c.head, c.suppressed_through_predictor, 0);
        let bad = |reason: String| Error::Validation(format!("checkpoint does not fit its config: {reason}"));
        let mut lookup = |name: &str, shape: &[usize]| -> std::result::Result<Vec<f32>, String> {
            let t = self.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if t.shape != shape {
                return Err(format!("{name} has shape {:?}, expected {:?}", t.shape, shape));
            }
            Ok(t.data.clone())
        };
        net.load_state(&mut lookup).map_err(bad)?;
        for (i, p) in net.online_params_mut().into_iter().enumerate() {
            let data = lookup(&momentum_name(i), &p.shape).map_err(bad)?;
            p.momentum = data;
        }
        Ok(net)
    }

    fn encode(&self) -> Vec<u8> {
        let mut offset = 0;
        let index = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorIndex {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            tensors: index,
        })
        .expect("checkpoint header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema version {version} (expected {SCHEMA_VERSION})"
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        let data = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let range = t
                .offset
                .checked_add(n)
                .and_then(|end| Some(t.offset.checked_mul(4)?..end.checked_mul(4)?));
            let raw = range
                .and_then(|r| data.get(r))
                .ok_or_else(|| format!("truncated data for tensor {}", t.name))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                data: values,
            });
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            global_step: header.global_step,
            tensors,
        })
    }

    /// Writes atomically: a sibling temp file is renamed over `path` and is
    /// removed again if anything fails.
    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            err(e.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn tiny_config(mode: Mode) -> TrainConfig {
        let mut c = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        c.encoder.channels = vec![4, 4];
        c.encoder.strides = vec![2, 1];
        c.head.projector_hidden = 8;
        c.head.embed_dim = 6;
        c.head.predictor_hidden = 4;
        c
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        for mode in [Mode::Simsiam, Mode::Byol] {
            let cfg = tiny_config(mode);
            let mut net = SiameseNet::<f32>::new(mode, &cfg.encoder, &cfg.head, true, 7);
            for (i, p) in net.online_params_mut().into_iter().enumerate() {
                p.momentum.iter_mut().for_each(|m| *m = i as f32 * 0.5);
            }
            let ck = Checkpoint::capture(&mut net, &cfg, 3, 42);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.ckpt");
            ck.save(&path).unwrap();
            assert!(!dir.path().join("a.ckpt.tmp").exists());
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let mut rebuilt = back.build_network().unwrap();
            assert_eq!(Checkpoint::capture(&mut rebuilt, &cfg, 3, 42), ck);
            if mode == Mode::Byol {
                assert!(back.get("target.encoder.0.conv.weight").is_some());
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint { path: p, reason }) => {
                assert_eq!(p, path);
                assert!(reason.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let cfg = tiny_config(Mode::Simsiam);
        let mut net = SiameseNet::<f32>::new(Mode::Simsiam, &cfg.encoder, &cfg.head, true, 1);
        let bytes = Checkpoint::capture(&mut net, &cfg, 0, 0).encode();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn failed_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Mode::Simsiam);
        let mut net = SiameseNet::<f32>::new(Mode::Simsiam, &cfg.encoder, &cfg.head, true, 1);
        let ck = Checkpoint::capture(&mut net, &cfg, 0, 0);
        // renaming a file over a non-empty directory fails after the temp write
        let target = dir.path().join("occupied");
        std::fs::create_dir(&target).unwrap();
        std::fs::write(target.join("x"), b"x").unwrap();
        assert!(matches!(ck.save(&target), Err(Error::Checkpoint { .. })));
        assert!(!dir.path().join("occupied.tmp").exists());
    }

    #[test]
    fn mismatched_config_is_a_validation_error() {
        let cfg = tiny_config(Mode::Simsiam);
        let mut net = SiameseNet::<f32>::new(Mode::Simsiam, &cfg.encoder, &cfg.head, true, 1);
        let mut ck = Checkpoint::capture(&mut net, &cfg, 0, 0);
        ck.config.head.embed_dim = 9;
        assert!(matches!(ck.build_network(), Err(Error::Validation(_))));
    }
}
