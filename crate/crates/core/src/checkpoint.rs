//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `b"M3CS"`, version `u32`, tensor count `u32`, then per tensor
//! name length `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64` and the
//! data as `f32`; finally a `u64` byte length and a UTF-8 JSON block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::config::{FinetuneConfig, ModelConfig, PretrainConfig};
use crate::finetune::FinetuneModel;
use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::pretrain::{EmaState, M3csModel, Pretrainer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"M3CS";
pub const VERSION: u32 = 1;

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Named `f32` tensors plus a JSON metadata block.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Value,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrites every parameter of `store` from `prefix` entries.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}{}", store.name(id));
            let t = self.get(&key).ok_or_else(|| invalid(format!("checkpoint lacks tensor {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(invalid(format!("checkpoint tensor {key} has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape())));
            }
            store.assign(id, t.cast::<T>().data())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a checkpoint: bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, n)?).map_err(|_| invalid("tensor name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| {
                    let d = read_u64(r)?;
                    usize::try_from(d).map_err(|_| invalid(format!("dimension {d} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("tensor size overflows"))?;
            let bytes = read_bytes(r, numel.checked_mul(4).ok_or_else(|| invalid("tensor size overflows"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let n = read_u64(r)?;
        let n = usize::try_from(n).map_err(|_| invalid("metadata too large"))?;
        let meta = serde_json::from_slice(&read_bytes(r, n)?)?;
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| invalid(format!("length {n} does not fit in u32")))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(invalid("checkpoint truncated"));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Student, teacher encoder and optimizer moments, resumable.
pub fn pretrain_checkpoint<T: Scalar>(p: &Pretrainer<T>, extra: Value) -> Checkpoint {
    let mut ck = Checkpoint::new(json!({
        "kind": "pretrain",
        "model": p.model.config,
        "pretrain": p.config,
        "seed": p.seed,
        "step": p.step,
        "optimizer_step": p.optim.steps_taken(),
        "ema_momentum": p.ema.momentum,
        "run": extra,
    }));
    ck.push_store(STUDENT, &p.model.store);
    for &id in &p.ema.encoder_ids {
        ck.push(format!("{TEACHER}{}", p.ema.teacher.name(id)), p.ema.teacher.get(id));
    }
    for (id, name, _) in p.model.store.iter() {
        if let Some((m, v)) = p.optim.moments(id) {
            let shape = p.model.store.get(id).shape();
            ck.push(format!("{ADAM_M}{name}"), &Tensor::new(shape, m.to_vec()).expect("moment shape"));
            ck.push(format!("{ADAM_V}{name}"), &Tensor::new(shape, v.to_vec()).expect("moment shape"));
        }
    }
    ck
}

fn meta_field<D: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<D> {
    let v = meta.get(key).cloned().ok_or_else(|| invalid(format!("checkpoint metadata lacks {key}")))?;
    Ok(serde_json::from_value(v)?)
}

pub fn checkpoint_kind(ck: &Checkpoint) -> Result<String> {
    meta_field(&ck.meta, "kind")
}

/// Model configuration recorded in a checkpoint.
pub fn checkpoint_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    meta_field(&ck.meta, "model")
}

/// Student parameters of a pretraining checkpoint, as a model.
pub fn load_pretrained_model<T: Scalar>(ck: &Checkpoint) -> Result<M3csModel<T>> {
    let config = checkpoint_model_config(ck)?;
    let mut model = M3csModel::new(&config, &mut crate::rng::seeded(0))?;
    ck.load_store(STUDENT, &mut model.store)?;
    Ok(model)
}

/// Rebuilds a pretrainer exactly as it was saved.
pub fn restore_pretrainer<T: Scalar>(ck: &Checkpoint) -> Result<Pretrainer<T>> {
    if checkpoint_kind(ck)? != "pretrain" {
        return Err(invalid("not a pretraining checkpoint"));
    }
    let model = load_pretrained_model::<T>(ck)?;
    let config: PretrainConfig = meta_field(&ck.meta, "pretrain")?;
    let mut p = Pretrainer::new(model, config, meta_field(&ck.meta, "seed")?)?;
    p.step = meta_field(&ck.meta, "step")?;
    let mut ema = EmaState::new(&p.model, p.config.ema_start, p.config.ema_end);
    for &id in &ema.encoder_ids.clone() {
        let key = format!("{TEACHER}{}", ema.teacher.name(id));
        let t = ck.get(&key).ok_or_else(|| invalid(format!("checkpoint lacks tensor {key}")))?;
        ema.teacher.assign(id, t.cast::<T>().data())?;
    }
    ema.momentum = meta_field(&ck.meta, "ema_momentum")?;
    p.ema = ema;
    let moments = p
        .model
        .store
        .iter()
        .map(|(_, name, _)| {
            let m = ck.get(&format!("{ADAM_M}{name}"))?;
            let v = ck.get(&format!("{ADAM_V}{name}"))?;
            Some((m.cast::<T>().into_data(), v.cast::<T>().into_data()))
        })
        .collect();
    let mut optim = AdamW::new(p.config.weight_decay);
    optim.restore(meta_field(&ck.meta, "optimizer_step")?, moments);
    p.optim = optim;
    Ok(p)
}

/// Classifier weights with everything needed to rebuild the model.
pub fn finetune_checkpoint<T: Scalar>(model: &FinetuneModel<T>, config: &FinetuneConfig, class_names: &[String], extra: Value) -> Checkpoint {
    let mut ck = Checkpoint::new(json!({
        "kind": "finetune",
        "model": model.config,
        "finetune": config,
        "classes": class_names,
        "run": extra,
    }));
    ck.push_store(STUDENT, &model.store);
    ck
}

/// Classifier and its class names from a fine-tuning checkpoint.
pub fn load_finetune_model<T: Scalar>(ck: &Checkpoint) -> Result<(FinetuneModel<T>, Vec<String>)> {
    if checkpoint_kind(ck)? != "finetune" {
        return Err(invalid("not a fine-tuning checkpoint"));
    }
    let config = checkpoint_model_config(ck)?;
    let ft: FinetuneConfig = meta_field(&ck.meta, "finetune")?;
    let classes: Vec<String> = meta_field(&ck.meta, "classes")?;
    let mut model = FinetuneModel::new(&config, &ft, classes.len(), &mut crate::rng::seeded(0))?;
    ck.load_store(STUDENT, &mut model.store)?;
    Ok((model, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"kind": "test", "n": 3}));
        ck.push("a", &Tensor::<f32>::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-7]).unwrap());
        ck.push("b/c", &Tensor::<f32>::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"M3CS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'a');
        assert_eq!(u32::from_le_bytes(buf[17..21].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 2);
    }

    #[test]
    fn unknown_version_is_refused() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_and_bad_magic_fail() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
