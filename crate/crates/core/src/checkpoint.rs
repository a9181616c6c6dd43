//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SRETCKPT`, format version `u32`, SHA-256
//! digest of the model configuration, step/epoch/seed `u64`, the run
//! configuration as length-prefixed TOML, then every registry tensor as
//! `{name, kind, precision tag, rank, dims, raw values}`, then an optional
//! optimizer section holding the AdamW moments.

use std::fs;
use std::path::Path;

use crate::config::{config_digest, RunConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, SretModel};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{ParamKind, Tensor};
use crate::train::{AdamW, TrainState};

const MAGIC: &[u8; 8] = b"SRETCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A model, its run configuration and, optionally, where training stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub seed: u64,
    pub model: SretModel<T>,
    pub state: Option<TrainState<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn values<T: Scalar>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format(format!("length {n} too large")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    /// `count` values stored at precision `tag`, converted to `T`.
    fn values<T: Scalar>(&mut self, tag: u8, count: usize) -> Result<Vec<T>> {
        let precision = Precision::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
        let width = precision.byte_width();
        let raw = self.take(count.checked_mul(width).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks(width)
            .map(|c| match precision {
                _ if precision == T::PRECISION => T::read_le(c),
                Precision::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                Precision::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect())
    }
}

fn kind_tag(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

fn tag_kind(tag: u8) -> Result<ParamKind> {
    match tag {
        0 => Ok(ParamKind::Weight),
        1 => Ok(ParamKind::NoDecay),
        2 => Ok(ParamKind::Buffer),
        t => Err(Error::Format(format!("unknown parameter kind {t}"))),
    }
}

/// Serializes a model, its configuration and optional training state.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    if ckpt.model.net.config != ckpt.run.model {
        return Err(Error::Contract("model does not match the run configuration".into()));
    }
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.0.extend_from_slice(&config_digest(&ckpt.run.model)?);
    let (step, epoch) = ckpt.state.as_ref().map_or((0, 0), |s| (s.step, s.epoch as u64));
    w.u64(step);
    w.u64(epoch);
    w.u64(ckpt.seed);
    w.bytes(ckpt.run.to_toml()?.as_bytes());
    let store = &ckpt.model.store;
    w.u64(store.len() as u64);
    for (_, e) in store.entries() {
        w.u32(e.name.len() as u32);
        w.0.extend_from_slice(e.name.as_bytes());
        w.u8(kind_tag(e.kind));
        w.u8(T::PRECISION.tag());
        w.u32(e.value.rank() as u32);
        for &d in e.value.shape() {
            w.u64(d as u64);
        }
        w.values(&e.value);
    }
    match &ckpt.state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            let o = &s.optimizer;
            w.u64(o.step);
            for v in [o.beta1, o.beta2, o.eps, o.weight_decay] {
                w.f64(v);
            }
            for moments in [&o.first_moment, &o.second_moment] {
                for i in 0..store.len() {
                    match moments.get(i).and_then(Option::as_ref) {
                        Some(t) => {
                            w.u8(1);
                            w.u8(T::PRECISION.tag());
                            w.values(t);
                        }
                        None => w.u8(0),
                    }
                }
            }
        }
    }
    Ok(w.0)
}

/// Parses a checkpoint. When `expected` is given, its digest must match the
/// stored one.
pub fn decode<T: Scalar>(bytes: &[u8], expected: Option<&crate::model::ModelConfig>) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if let Some(cfg) = expected {
        if config_digest(cfg)? != digest {
            return Err(Error::Format("checkpoint was written for a different model configuration".into()));
        }
    }
    let (step, epoch, seed) = (r.u64()?, r.u64()?, r.u64()?);
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Format("configuration is not UTF-8".into()))?;
    let run = RunConfig::parse(text)?;
    if config_digest(&run.model)? != digest {
        return Err(Error::Format("embedded configuration does not match the header digest".into()));
    }
    let mut model = build_model::<T>(&run.model, 0)?;
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let kind = tag_kind(r.u8()?)?;
        let tag = r.u8()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let data = r.values::<T>(tag, n)?;
        tensors.push((name, kind, Tensor::new(&shape, data)?));
    }
    if tensors.iter().any(|(n, _, _)| n.starts_with("unrolled_head.")) {
        model.build_mixed_depth()?;
    }
    if tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model registry has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, kind, value)) in ids.into_iter().zip(tensors) {
        let entry = model.store.entry(id);
        if entry.name != name || entry.kind != kind {
            return Err(Error::Format(format!("tensor `{name}` does not match registry entry `{}`", entry.name)));
        }
        model.store.set(id, value)?;
    }
    let state = match r.u8()? {
        0 => None,
        1 => {
            let mut opt = AdamW::new(0.0);
            opt.step = r.u64()?;
            opt.beta1 = r.f64()?;
            opt.beta2 = r.f64()?;
            opt.eps = r.f64()?;
            opt.weight_decay = r.f64()?;
            let n = model.store.len();
            for slot in 0..2 {
                let mut moments = Vec::with_capacity(n);
                for i in 0..n {
                    let m = match r.u8()? {
                        0 => None,
                        _ => {
                            let tag = r.u8()?;
                            let shape = model.store.get(crate::tensor::ParamId(i)).shape().to_vec();
                            let len = shape.iter().product();
                            Some(Tensor::new(&shape, r.values::<T>(tag, len)?)?)
                        }
                    };
                    moments.push(m);
                }
                match slot {
                    0 => opt.first_moment = moments,
                    _ => opt.second_moment = moments,
                }
            }
            Some(TrainState {
                optimizer: opt,
                epoch: epoch as usize,
                step,
            })
        }
        t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { run, seed, model, state })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?, None)
}

/// Loads a checkpoint, requiring it to match `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &crate::model::ModelConfig) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;
    use crate::train::{train_loop, SynthDataset, TrainConfig};

    fn trained() -> Checkpoint<f32> {
        let mut run = RunConfig::from_preset("desk").unwrap();
        run.model.num_classes = 4;
        run.train = TrainConfig {
            epochs: 2,
            warmup_epochs: 0.0,
            mixed_depth: true,
            ..TrainConfig::default()
        };
        let mut model = build_model(&run.model, 3).unwrap();
        let synth = SynthDataset::new(0, 4, 32).unwrap();
        let (tr, ev) = (synth.generate(16, 0), synth.generate(8, 1));
        let mut state = TrainState::new(&run.train);
        train_loop(&mut model, &tr, &ev, &run.train, 3, None, &mut state, 1).unwrap();
        Checkpoint {
            run,
            seed: 3,
            model,
            state: Some(state),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = trained();
        let bytes = encode(&ck).unwrap();
        let back: Checkpoint<f32> = decode(&bytes, Some(&ck.run.model)).unwrap();
        assert_eq!(back.run, ck.run);
        assert_eq!(back.seed, 3);
        assert_eq!(back.state, ck.state);
        for ((_, a), (_, b)) in ck.model.store.entries().zip(back.model.store.entries()) {
            assert_eq!(a.name, b.name);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y, "{}", a.name);
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_config_and_damage_are_rejected() {
        let ck = trained();
        let bytes = encode(&ck).unwrap();
        let other = preset("desk").unwrap();
        assert!(matches!(decode::<f32>(&bytes, Some(&other)), Err(Error::Format(_))));
        for cut in [0, 7, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut], None), Err(Error::Format(_))), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad, None).is_err());
    }

    #[test]
    fn precision_is_converted_on_load() {
        let ck = trained();
        let wide: Checkpoint<f64> = decode(&encode(&ck).unwrap(), None).unwrap();
        let (a, b) = (ck.model.store.get(ck.model.net.head.weight), wide.model.store.get(wide.model.net.head.weight));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x as f64 == *y));
    }

    #[test]
    fn files_round_trip() {
        let ck = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f32> = load_checkpoint_for(&path, &ck.run.model).unwrap();
        assert_eq!(back.state, ck.state);
        assert!(load_checkpoint::<f32>(&dir.path().join("missing")).is_err());
    }
}
