//! Single-file checkpoints: one JSON header line followed by a little-endian
//! `f64` payload. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::config::{Stage, TrainConfig};
use super::optim::AdamW;

pub const FORMAT: &str = "framedistill-checkpoint-v1";

/// Where the per-step random streams resume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    stage: Stage,
    step: usize,
    total_steps: usize,
    config_digest: String,
    teacher_digest: String,
    config: TrainConfig,
    rng: RngState,
    optimizer_step: u64,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed optimisation steps.
    pub step: usize,
    pub total_steps: usize,
    pub config_digest: String,
    pub teacher_digest: String,
    pub config: TrainConfig,
    pub rng: RngState,
    /// Model parameters by name.
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: AdamW,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            entries.push(Entry {
                name,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for (name, t) in &self.tensors {
            push(name.clone(), t.shape().to_vec(), t.data());
        }
        for (name, m) in &self.optimizer.m {
            push(format!("{M_PREFIX}{name}"), vec![m.len()], m);
        }
        for (name, v) in &self.optimizer.v {
            push(format!("{V_PREFIX}{name}"), vec![v.len()], v);
        }
        let header = Header {
            format: FORMAT.into(),
            stage: self.stage,
            step: self.step,
            total_steps: self.total_steps,
            config_digest: self.config_digest.clone(),
            teacher_digest: self.teacher_digest.clone(),
            config: self.config.clone(),
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.step,
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(payload.len() * 8);
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(fail(path, "missing header line"));
        }
        let header: Header =
            serde_json::from_slice(&line).map_err(|e| fail(path, format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(fail(path, format!("unknown format {:?}", header.format)));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(fail(path, "payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = BTreeMap::new();
        let mut optimizer = AdamW::new(header.config.optimizer_for(header.stage).clone());
        optimizer.step = header.optimizer_step;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| fail(path, format!("tensor {} runs past the payload", e.name)))?
                .to_vec();
            if let Some(name) = e.name.strip_prefix(M_PREFIX) {
                optimizer.m.insert(name.to_string(), data);
            } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
                optimizer.v.insert(name.to_string(), data);
            } else {
                tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            }
        }
        Ok(Self {
            stage: header.stage,
            step: header.step,
            total_steps: header.total_steps,
            config_digest: header.config_digest,
            teacher_digest: header.teacher_digest,
            config: header.config,
            rng: header.rng,
            tensors,
            optimizer,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.step == self.total_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::default();
        let mut optimizer = AdamW::new(cfg.teacher.optimizer.clone());
        optimizer.step = 3;
        optimizer.m.insert("a".into(), vec![0.1, -0.0, f64::MIN_POSITIVE]);
        optimizer.v.insert("a".into(), vec![1e-300, 2.0, 3.0]);
        Checkpoint {
            stage: Stage::Teacher,
            step: 3,
            total_steps: 10,
            config_digest: cfg.digest(),
            teacher_digest: cfg.teacher_digest(),
            config: cfg,
            rng: RngState { seed: 5, next_step: 3 },
            tensors: BTreeMap::from([
                ("a".to_string(), Tensor::new(vec![3], vec![1.0 / 3.0, -2.5, 1e-17]).unwrap()),
                ("b.c".to_string(), Tensor::new(vec![2, 1], vec![f64::MAX, -0.0]).unwrap()),
            ]),
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (name, t) in &ck.tensors {
            let bits: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            let back_bits: Vec<u64> = back.tensors[name].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
        assert_eq!(ck.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let bytes = sample().to_bytes().unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        fs::write(&path, b"{}").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
