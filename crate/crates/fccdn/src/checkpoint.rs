//! Checkpoint archives.
//!
//! Layout: the 8-byte magic `FCCDNCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f32` data of every tensor in header order. The header
//! holds the network configuration, the normalization statistics, the
//! tensor index (canonical name and shape) and, for training snapshots, the
//! schedule counters. Optimizer moments are stored as tensors named
//! `optim.m/<param>` and `optim.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use fccdn_core::data::ChannelStats;
use fccdn_core::optim::{AdamW, AdamWConfig};
use fccdn_core::schedule::PlateauState;
use fccdn_core::training::TrainState;
use fccdn_core::{Network, NetworkConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 8] = b"FCCDNCKP";
pub const FORMAT_VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

/// Training-progress counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: u64,
    pub current_lr: f64,
    pub seed: u64,
    pub plateau: PlateauState,
    pub optimizer: AdamWConfig,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    #[serde(default)]
    stats: Option<ChannelStats>,
    #[serde(default)]
    train: Option<TrainMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub stats: Option<ChannelStats>,
    pub train: Option<TrainMeta>,
    /// Named tensors in storage order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Weights only.
    pub fn from_params(network: &NetworkConfig, stats: Option<&ChannelStats>, params: &ParamStore<f32>) -> Self {
        Self {
            network: network.clone(),
            stats: stats.cloned(),
            train: None,
            tensors: params
                .iter()
                .map(|(_, s, t)| (s.name.clone(), t.clone()))
                .collect(),
        }
    }

    /// Weights, optimizer moments and schedule counters.
    pub fn from_state(network: &NetworkConfig, stats: Option<&ChannelStats>, state: &TrainState<f32>) -> Self {
        let mut ck = Self::from_params(network, stats, &state.params);
        for (prefix, moments) in [(M_PREFIX, &state.optimizer.m), (V_PREFIX, &state.optimizer.v)] {
            for ((_, spec, _), m) in state.params.iter().zip(moments) {
                if let Some(m) = m {
                    ck.tensors.push((format!("{prefix}{}", spec.name), m.clone()));
                }
            }
        }
        ck.train = Some(TrainMeta {
            epoch: state.epoch,
            step: state.step,
            current_lr: state.current_lr,
            seed: state.seed,
            plateau: state.plateau,
            optimizer: state.optimizer.cfg,
            optimizer_step: state.optimizer.step,
        });
        ck
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            network: self.network.clone(),
            stats: self.stats.clone(),
            train: self.train.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + h.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Core(fccdn_core::Error::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            ))));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 4 {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[n * 4..];
            tensors.push((e.name, Tensor::from_vec(e.shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            network: header.network,
            stats: header.stats,
            train: header.train,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }

    /// The network weights, checked name by name and shape by shape against
    /// `net`.
    pub fn params(&self, net: &Network) -> Result<ParamStore<f32>> {
        let named: BTreeMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(M_PREFIX) && !n.starts_with(V_PREFIX))
            .cloned()
            .collect();
        Ok(ParamStore::from_named(&net.layout, named)?)
    }

    /// A resumable training state; fails for weight-only checkpoints.
    pub fn train_state(&self, net: &Network) -> Result<TrainState<f32>> {
        let meta = self.train.as_ref().ok_or_else(|| {
            Error::Core(fccdn_core::Error::Incompatible(
                "checkpoint holds weights only, not a training state".into(),
            ))
        })?;
        let params = self.params(net)?;
        let lookup: BTreeMap<&str, &Tensor<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut opt = AdamW::new(meta.optimizer, &params);
        opt.step = meta.optimizer_step;
        for (prefix, moments) in [(M_PREFIX, &mut opt.m), (V_PREFIX, &mut opt.v)] {
            for ((_, spec, p), slot) in params.iter().zip(moments.iter_mut()) {
                if slot.is_none() {
                    continue;
                }
                let name = format!("{prefix}{}", spec.name);
                let t = lookup.get(name.as_str()).ok_or_else(|| {
                    Error::Core(fccdn_core::Error::Incompatible(format!("missing tensor `{name}`")))
                })?;
                if t.shape() != p.shape() {
                    return Err(Error::Core(fccdn_core::Error::Incompatible(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.shape()
                    ))));
                }
                *slot = Some((*t).clone());
            }
        }
        Ok(TrainState {
            epoch: meta.epoch,
            step: meta.step,
            current_lr: meta.current_lr,
            plateau: meta.plateau,
            params,
            optimizer: opt,
            seed: meta.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fccdn_core::training::TrainConfig;

    fn net(m: f64) -> Network {
        Network::new(&NetworkConfig::fccdn(m)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let n = net(0.125);
        let mut state = TrainState::<f32>::new(&n, &TrainConfig::default()).unwrap();
        state.optimizer.step = 3;
        state.optimizer.m[0].as_mut().unwrap().data_mut()[0] = 0.25;
        state.plateau.best_score = Some(0.5);
        let ck = Checkpoint::from_state(&n.cfg, Some(&ChannelStats::identity(3)), &state);
        let a = ck.to_bytes();
        let back = Checkpoint::from_bytes(&a, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), a);
        assert_eq!(back.train_state(&n).unwrap(), state);
    }

    #[test]
    fn other_width_names_the_first_mismatch() {
        let a = net(0.125);
        let ck = Checkpoint::from_params(&a.cfg, None, &a.init_params(0));
        let err = ck.params(&net(0.25)).unwrap_err().to_string();
        let first = &a.layout.specs()[0].name;
        assert!(err.contains(&format!("`{first}`")), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let n = net(0.125);
        let bytes = Checkpoint::from_params(&n.cfg, None, &n.init_params(0)).to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", p).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(Checkpoint::from_bytes(&v, p).is_err());
    }

    #[test]
    fn weight_only_checkpoint_cannot_resume() {
        let n = net(0.125);
        let ck = Checkpoint::from_params(&n.cfg, None, &n.init_params(0));
        assert!(ck.train_state(&n).is_err());
    }
}
