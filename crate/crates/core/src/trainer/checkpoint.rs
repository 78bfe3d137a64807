//! Checkpoint envelope:
//!
//! ```text
//! "CKP1" | u32 version | u32 n | n bytes of JSON metadata
//!        | u32 count | count × (u32 name_len | name | u32 rows | u32 cols | rows·cols f64)
//! ```
//!
//! All integers and floats are little-endian. Tensor order is fixed, so equal
//! states serialize to equal bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, EpochRecord, TrainState, Variant};
use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::prompt::{AttentionParams, ClassPrompts, FrozenEncoder, ModelConfig, PromptBank, Trainable};
use crate::transport::SolverConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    classifier: ClassifierConfig,
    solver: SolverConfig,
    variant: Variant,
    classes: Vec<String>,
    use_attention: bool,
    trainable: Trainable,
    train_classes: Vec<usize>,
    epoch: usize,
    optimizer_steps: u64,
    history: Vec<EpochRecord>,
}

fn named_tensors(state: &TrainState) -> Vec<(String, Mat)> {
    let bank_tensors = state.bank.tensors();
    let mut out: Vec<(String, Mat)> = bank_tensors.iter().map(|(_, n, m)| (n.clone(), (*m).clone())).collect();
    for (i, c) in state.bank.classes.iter().enumerate() {
        out.push((format!("word.{i}"), Mat::new(1, c.word.len(), c.word.clone()).expect("finite word")));
    }
    out.push(("encoder.projection".into(), state.encoder.projection.clone()));
    out.push((
        "encoder.bias".into(),
        Mat::new(1, state.encoder.bias.len(), state.encoder.bias.clone()).expect("finite bias"),
    ));
    for (k, (_, name, _)) in bank_tensors.iter().enumerate() {
        out.push((format!("adam.first.{name}"), state.optimizer.first[k].clone()));
        out.push((format!("adam.second.{name}"), state.optimizer.second[k].clone()));
    }
    out
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::InvalidArgument("checkpoint field exceeds 32 bits".into()))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Metadata {
        model: state.bank.config.clone(),
        classifier: state.classifier.clone(),
        solver: state.solver,
        variant: state.variant,
        classes: state.bank.classes.iter().map(|c| c.name.clone()).collect(),
        use_attention: state.bank.use_attention,
        trainable: state.bank.trainable,
        train_classes: state.train_classes.clone(),
        epoch: state.epoch,
        optimizer_steps: state.optimizer.steps,
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let tensors = named_tensors(state);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, tensors.len())?;
    for (name, m) in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptFile(self.path.to_path_buf()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let corrupt = || Error::CorruptFile(path.to_path_buf());
    if bytes.len() < 4 {
        return Err(corrupt());
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::NotCheckpoint(path.to_path_buf()));
    }
    let mut r = Reader { bytes, at: 4, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.len()?;
    let meta: Metadata = serde_json::from_slice(r.take(n)?).map_err(|_| corrupt())?;
    let count = r.len()?;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt())?;
        let (rows, cols) = (r.len()?, r.len()?);
        let size = rows.checked_mul(cols).and_then(|x| x.checked_mul(8)).ok_or_else(corrupt)?;
        let data: Vec<f64> =
            r.take(size)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Mat::new(rows, cols, data).map_err(|_| Error::InvalidPayload(path.to_path_buf()))?;
        tensors.insert(name, m);
    }
    if r.at != bytes.len() {
        return Err(corrupt());
    }
    let mut get = |name: &str| tensors.remove(name).ok_or_else(corrupt);

    let shared = (0..meta.model.shared_prompts).map(|k| get(&format!("shared.{k}"))).collect::<Result<_>>()?;
    let attention =
        AttentionParams { query: get("attention.query")?, key: get("attention.key")?, value: get("attention.value")? };
    let mut classes = Vec::with_capacity(meta.classes.len());
    for (i, name) in meta.classes.iter().enumerate() {
        let context = (0..meta.model.class_prompts).map(|k| get(&format!("class.{i}.{k}"))).collect::<Result<_>>()?;
        classes.push(ClassPrompts { name: name.clone(), word: get(&format!("word.{i}"))?.into_vec(), context });
    }
    let encoder = FrozenEncoder { projection: get("encoder.projection")?, bias: get("encoder.bias")?.into_vec() };
    let bank = PromptBank {
        config: meta.model,
        shared,
        classes,
        attention,
        use_attention: meta.use_attention,
        trainable: meta.trainable,
    };
    let names: Vec<String> = bank.tensors().into_iter().map(|(_, n, _)| n).collect();
    let mut optimizer = Adam { first: Vec::new(), second: Vec::new(), steps: meta.optimizer_steps };
    for name in &names {
        optimizer.first.push(get(&format!("adam.first.{name}"))?);
        optimizer.second.push(get(&format!("adam.second.{name}"))?);
    }
    if !tensors.is_empty() {
        return Err(corrupt());
    }
    Ok(TrainState {
        bank,
        encoder,
        optimizer,
        classifier: meta.classifier,
        solver: meta.solver,
        variant: meta.variant,
        train_classes: meta.train_classes,
        epoch: meta.epoch,
        history: meta.history,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path)?, path)
}
