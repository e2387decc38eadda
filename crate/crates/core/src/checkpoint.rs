//! Single-file checkpoints: magic, version, a JSON header, then row-major
//! little-endian `f32` arrays in header order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{NormStats, StftParams};
use crate::model::{EviMae, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"EVIMAECK";
pub const VERSION: u32 = 1;

const MOMENT_PREFIX: [&str; 2] = ["optimizer.m.", "optimizer.v."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub classes: usize,
    pub with_graph: bool,
}

/// Position of the data stream; every random draw is a function of these two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub stats: NormStats,
    /// Class names in label order; empty before finetuning.
    pub classes: Vec<String>,
    pub head: Option<HeadInfo>,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: Option<AdamConfig>,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub stats: NormStats,
    pub classes: Vec<String>,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub seed: u64,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    fn header(&self) -> Header {
        let model = &self.state.model;
        let mut tensors: Vec<TensorEntry> =
            model.params.iter().map(|(_, n, t)| TensorEntry { name: n.to_string(), shape: t.shape() }).collect();
        for prefix in MOMENT_PREFIX {
            tensors.extend(
                model.params.iter().map(|(_, n, t)| TensorEntry { name: format!("{prefix}{n}"), shape: t.shape() }),
            );
        }
        Header {
            version: VERSION,
            model: model.config.clone(),
            stats: self.stats.clone(),
            classes: self.classes.clone(),
            head: model.head.as_ref().map(|h| HeadInfo { classes: h.classes, with_graph: h.with_graph }),
            train: self.train.clone(),
            epoch: self.epoch,
            rng: RngState { seed: self.seed, step: self.state.step },
            optimizer: Some(self.state.adam.config.clone()),
            optimizer_step: self.state.adam.step,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut adam = self.state.adam.clone();
        adam.sync(&self.state.model.params);
        let header = serde_json::to_vec(&self.header())?;
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&tmp, e));
        write(MAGIC)?;
        write(&VERSION.to_le_bytes())?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        let arrays = self.state.model.params.iter().map(|(_, _, t)| t).chain(&adam.m).chain(&adam.v);
        for t in arrays {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            write(&buf)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(path, e))?;
        let data = bytes.split_off(20 + len);
        Ok((header, data))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = Self::read_header(path)?;
        let mut model = EviMae::new(header.model.clone(), 0)?;
        if let Some(h) = &header.head {
            model.add_head(h.classes, h.with_graph, 0)?;
        }
        let expected: usize = header.tensors.iter().map(|e| e.shape.0 * e.shape.1).sum();
        if data.len() != expected * 4 {
            return Err(corrupt(path, format!("expected {} data bytes, found {}", expected * 4, data.len())));
        }
        let mut adam = Adam::new(&model.params, header.optimizer.clone().unwrap_or_default());
        adam.step = header.optimizer_step;
        let mut offset = 0;
        let mut seen = 0;
        for e in &header.tensors {
            let n = e.shape.0 * e.shape.1;
            let values: Vec<f64> = data[offset * 4..(offset + n) * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            offset += n;
            let t = Tensor::from_vec(e.shape.0, e.shape.1, values);
            let moment = MOMENT_PREFIX.iter().position(|p| e.name.starts_with(p));
            match moment {
                None => {
                    model.params.assign(&e.name, t)?;
                    seen += 1;
                }
                Some(k) => {
                    let name = &e.name[MOMENT_PREFIX[k].len()..];
                    let id = model.params.id(name).ok_or_else(|| corrupt(path, format!("moment for unknown {name}")))?;
                    let slot = if k == 0 { &mut adam.m[id.0] } else { &mut adam.v[id.0] };
                    if slot.shape() != t.shape() {
                        return Err(corrupt(path, format!("moment shape mismatch for {name}")));
                    }
                    *slot = t;
                }
            }
        }
        if seen != model.params.len() {
            return Err(corrupt(path, format!("{} of {} parameters present", seen, model.params.len())));
        }
        Ok(Self {
            state: TrainState { model, adam, step: header.rng.step },
            stats: header.stats,
            classes: header.classes,
            train: header.train,
            epoch: header.epoch,
            seed: header.rng.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub stft: StftParams,
    pub stats: NormStats,
    pub devices: Vec<String>,
}

/// Standalone copy of the preprocessing parameters for audits.
pub fn write_preprocess_stats(path: &Path, config: &ModelConfig, stats: &NormStats) -> Result<()> {
    let doc = PreprocessStats { stft: config.stft.clone(), stats: stats.clone(), devices: config.devices.clone() };
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_sample};
    use crate::model::{MaskConfig, Sample};
    use crate::train::{pretrain, Phase};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 3,
            masks: MaskConfig { video_ratio: 0.5, ..MaskConfig::default() },
            ..TrainConfig::desk(Phase::Pretrain)
        }
    }

    fn checkpoint(state: TrainState) -> Checkpoint {
        Checkpoint {
            state,
            stats: NormStats { mean: [0.1, 0.2, 9.8], std: [1.0, 2.0, 0.5] },
            classes: vec!["a".into(), "b".into()],
            train: Some(tiny_cfg()),
            epoch: 1,
            seed: 0,
        }
    }

    #[test]
    fn round_trip_keeps_names_shapes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = EviMae::new(tiny_config(), 1).unwrap();
        model.add_head(2, true, 0).unwrap();
        let ck = checkpoint(TrainState::new(model));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stats, ck.stats);
        assert_eq!(back.classes, ck.classes);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.state.model.head.as_ref().unwrap().classes, 2);
        for ((_, na, a), (_, nb, b)) in ck.state.model.params.iter().zip(back.state.model.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.max_abs_diff(b) <= 1e-7 * a.data().iter().fold(1.0f64, |m, x| m.max(x.abs())));
        }
    }

    #[test]
    fn reload_reproduces_the_next_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let samples: Vec<Sample> = (0..3).map(|s| tiny_sample(&cfg, s)).collect();
        let tc = tiny_cfg();
        let mut state = TrainState::new(EviMae::new(cfg, 2).unwrap());
        pretrain(&mut state, &samples, &tc, Some(3), |_, _| Ok(())).unwrap();
        checkpoint(state.clone()).save(&path).unwrap();
        let next = pretrain(&mut state, &samples, &tc, Some(4), |_, _| Ok(())).unwrap();
        let mut reloaded = Checkpoint::load(&path).unwrap().state;
        assert_eq!(reloaded.step, 3);
        let again = pretrain(&mut reloaded, &samples, &tc, Some(4), |_, _| Ok(())).unwrap();
        assert_eq!(again[0].step, next[0].step);
        assert!((again[0].report.total - next[0].report.total).abs() < 1e-6);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("absent")), Err(Error::MissingFile(_))));
        let good = dir.path().join("good.ckpt");
        checkpoint(TrainState::new(EviMae::new(tiny_config(), 1).unwrap())).save(&good).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
