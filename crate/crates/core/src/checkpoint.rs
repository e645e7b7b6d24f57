//! Self-describing binary checkpoint: magic, JSON header, raw tensor bytes.
//!
//! Layout: `SLCKPT\0\0`, u64 LE header length, UTF-8 JSON header, then every
//! tensor as little-endian f64 at the offset (in elements) recorded in the
//! header. Loading validates everything before building any state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SLCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 does not fit JSON numbers.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub step: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub opt_gen: OptimState,
    pub opt_disc: OptimState,
    pub tensors: Vec<TensorEntry>,
    /// sha256 of the tensor bytes.
    pub data_sha256: String,
}

/// Stored training state plus the run configuration it was produced with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bytes = hex::decode(&s.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
    let seed: [u8; 32] = bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn groups(state: &TrainState) -> [(&'static str, &BTreeMap<String, Tensor>); 4] {
    [
        ("gen.m/", &state.opt_gen.m),
        ("gen.v/", &state.opt_gen.v),
        ("disc.m/", &state.opt_disc.m),
        ("disc.v/", &state.opt_disc.v),
    ]
}

pub fn save_checkpoint(state: &TrainState, train: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset: data.len() / 8,
            len: t.data().len(),
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (n, t) in state.model.gen.iter() {
        push(format!("gen.param/{n}"), t, &mut tensors);
    }
    for (n, t) in state.model.disc.iter() {
        push(format!("disc.param/{n}"), t, &mut tensors);
    }
    for (prefix, map) in groups(state) {
        for (n, t) in map {
            push(format!("{prefix}{n}"), t, &mut tensors);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step: state.step,
        rng: rng_state(&state.rng),
        model: state.model.config.clone(),
        ablation: state.model.ablation,
        train: train.clone(),
        opt_gen: OptimState {
            config: state.opt_gen.config,
            step: state.opt_gen.step,
        },
        opt_disc: OptimState {
            config: state.opt_disc.config,
            step: state.opt_disc.step,
        },
        tensors,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Write to a sibling file first so an interrupted save never clobbers
    // the previous checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    // Check the version before the full schema so newer files give a clear error.
    let raw: serde_json::Value = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("header has no format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            found: found.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, &body[hlen..]))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (h, data) = read_header(&bytes)?;
    if data.len() % 8 != 0 {
        return Err(corrupt("tensor data is not a whole number of f64 values"));
    }
    if hex::encode(Sha256::digest(data)) != h.data_sha256 {
        return Err(corrupt("tensor data checksum mismatch"));
    }
    let n = data.len() / 8;
    let mut gen = ParamStore::new();
    let mut disc = ParamStore::new();
    let mut moments: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
    for e in &h.tensors {
        if e.dtype != "f64" {
            return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.shape.iter().product::<usize>() != e.len || e.offset.checked_add(e.len).map_or(true, |end| end > n) {
            return Err(corrupt(format!("{}: bad shape or extent", e.name)));
        }
        let vals = data[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), vals)?;
        let (group, name) = e.name.split_once('/').ok_or_else(|| corrupt(format!("bad tensor name {}", e.name)))?;
        match group {
            "gen.param" => gen.insert(name, t),
            "disc.param" => disc.insert(name, t),
            "gen.m" | "gen.v" | "disc.m" | "disc.v" => {
                moments.entry(group).or_default().insert(name.to_string(), t);
            }
            other => return Err(corrupt(format!("unknown tensor group {other}"))),
        }
    }
    h.model.validate()?;
    h.ablation.validate()?;
    let mut take = |k: &str| moments.remove(k).unwrap_or_default();
    let opt_gen = Adam {
        config: h.opt_gen.config,
        step: h.opt_gen.step,
        m: take("gen.m"),
        v: take("gen.v"),
    };
    let opt_disc = Adam {
        config: h.opt_disc.config,
        step: h.opt_disc.step,
        m: take("disc.m"),
        v: take("disc.v"),
    };
    let state = TrainState {
        model: Model {
            config: h.model,
            ablation: h.ablation,
            gen,
            disc,
        },
        opt_gen,
        opt_disc,
        step: h.step,
        rng: restore_rng(&h.rng)?,
    };
    Ok(Checkpoint { state, train: h.train })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_scene, PairedBatch, Pad};
    use crate::imaging::{canny_edges, CannyConfig};
    use crate::training::train;

    fn data() -> PairedBatch {
        let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..3 {
            let clean = synthetic_scene(40 + i, 16, 16);
            a.push(clean.tensor().map(|v| 0.25 * v + 0.01));
            c.push(canny_edges(&clean, &CannyConfig::default()).unwrap().into_tensor());
            b.push(clean.into_tensor());
        }
        PairedBatch {
            ids: vec!["a".into(), "b".into(), "c".into()],
            input: Tensor::stack_batch(&a).unwrap(),
            target: Tensor::stack_batch(&b).unwrap(),
            edges: Tensor::stack_batch(&c).unwrap(),
            pads: vec![Pad { bottom: 0, right: 0 }; 3],
        }
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr_main: 1e-3,
            lr_disc: 1e-3,
            seed: 3,
            ..Default::default()
        }
    }

    fn trained(steps: u64) -> TrainState {
        let c = cfg(steps);
        let mut st = TrainState::new(ModelConfig::tiny(), &c).unwrap();
        train(&mut st, &data(), &c, |_, _| Ok(())).unwrap();
        st
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let st = trained(2);
        save_checkpoint(&st, &cfg(2), &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.train, cfg(2));
        assert_eq!(back.state, st);
        for (n, t) in st.model.gen.iter() {
            let u = back.state.model.gen.get(n).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(!st.opt_gen.m.is_empty() && !st.opt_disc.v.is_empty());
    }

    #[test]
    fn header_is_self_describing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let st = trained(1);
        save_checkpoint(&st, &cfg(1), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let (h, _) = read_header(&bytes).unwrap();
        assert_eq!(h.format_version, FORMAT_VERSION);
        assert_eq!(h.step, 1);
        let total = st.model.gen.len() + st.model.disc.len();
        assert!(h.tensors.len() >= total);
        assert!(h.tensors.iter().all(|e| e.dtype == "f64" && e.shape.iter().product::<usize>() == e.len));
    }

    fn rewrite_header(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
        let bytes = fs::read(path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut v);
        let json = serde_json::to_vec(&v).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + hlen..]);
        fs::write(path, out).unwrap();
    }

    #[test]
    fn bumped_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&trained(1), &cfg(1), &p).unwrap();
        rewrite_header(&p, |v| v["format_version"] = (FORMAT_VERSION + 1).into());
        match load_checkpoint(&p) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, FORMAT_VERSION + 1);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&trained(1), &cfg(1), &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 1;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        fs::write(&p, b"definitely not").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        fs::write(&p, &good).unwrap();
        rewrite_header(&p, |v| v["tensors"][0]["len"] = 1_000_000_000u64.into());
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let d = data();
        let c20 = cfg(20);

        let mut full = TrainState::new(ModelConfig::tiny(), &c20).unwrap();
        let full_logs = train(&mut full, &d, &c20, |_, _| Ok(())).unwrap();

        let c10 = cfg(10);
        let mut half = TrainState::new(ModelConfig::tiny(), &c10).unwrap();
        train(&mut half, &d, &c10, |_, _| Ok(())).unwrap();
        save_checkpoint(&half, &c10, &p).unwrap();
        drop(half);
        let mut resumed = load_checkpoint(&p).unwrap().state;
        let tail = train(&mut resumed, &d, &c20, |_, _| Ok(())).unwrap();

        assert_eq!(tail.len(), 10);
        assert_eq!(&full_logs[10..], &tail[..]);
        assert_eq!(resumed, full);
    }
}
