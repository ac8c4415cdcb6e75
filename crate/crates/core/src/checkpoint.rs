//! Binary checkpoints of the full training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CGEL"  u32 version
//! u32 header_len   header_len bytes of JSON (config, step, momentum,
//!                  temperatures, centers, RNG position)
//! u32 tensor_count
//!   per tensor: u16 name_len, name, u8 dtype (2 = f64), u8 rank,
//!               rank × u64 dims, row-major data
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{Parameters, Sgd};
use crate::tensor::Tensor;
use crate::train::{Network, TrainConfig, TrainerState};
use crate::vit::ViTParams;

pub const MAGIC: &[u8; 4] = b"CGEL";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 2;

/// Position of the per-step random stream: step `s` draws from
/// `ChaCha8(seed)` on stream `s` from word 0, so the step alone pins it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub step: u64,
    pub ema_momentum: f64,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub class_center: Vec<f64>,
    pub patch_center: Vec<f64>,
    pub rng: RngState,
}

/// A named tensor as stored on disk; `dims` may contain zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

fn stored(name: String, t: &Tensor) -> StoredTensor {
    StoredTensor {
        name,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        data: t.data().to_vec(),
    }
}

pub fn encode(header: &CheckpointHeader, tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::Internal(format!("header serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    out.extend((tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Internal(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Internal(format!("tensor rank too high: {}", t.name)))?;
        if t.dims.iter().product::<u64>() != t.data.len() as u64 {
            return Err(Error::Internal(format!(
                "tensor {} has {} values for dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        out.extend(name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F64);
        out.push(rank);
        for d in &t.dims {
            out.extend(d.to_le_bytes());
        }
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<StoredTensor>)> {
    if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Data("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("non-utf8 tensor name".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Data(format!(
                "tensor {name}: unsupported dtype code {dtype}"
            )));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("tensor {name}: dims overflow")))?;
        let raw = r.take(
            usize::try_from(n)
                .ok()
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Data(format!("tensor {name}: too large")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(StoredTensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after the tensor table",
            body.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

fn header_of(state: &TrainerState) -> CheckpointHeader {
    let c = &state.config;
    CheckpointHeader {
        config: c.clone(),
        step: state.step,
        ema_momentum: c.ema_momentum,
        tau_teacher: c.tau_teacher,
        tau_student: c.tau_student,
        class_center: state.class_center.data().to_vec(),
        patch_center: state.patch_center.data().to_vec(),
        rng: RngState {
            seed: c.seed,
            stream: state.step,
            word_pos: 0,
        },
    }
}

pub fn state_to_bytes(state: &TrainerState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    state
        .student
        .visit(&mut |n, t| tensors.push(stored(format!("student.{n}"), t)));
    state
        .teacher
        .visit(&mut |n, t| tensors.push(stored(format!("teacher.{n}"), t)));
    for (i, v) in state.optimizer.velocity().iter().enumerate() {
        tensors.push(StoredTensor {
            name: format!("optim.velocity.{i}"),
            dims: vec![v.len() as u64],
            data: v.clone(),
        });
    }
    encode(&header_of(state), &tensors)
}

fn fill(
    net: &mut Network,
    prefix: &str,
    table: &mut std::collections::HashMap<String, StoredTensor>,
) -> Result<()> {
    let mut err = None;
    net.visit_mut(&mut |n, t| {
        let key = format!("{prefix}.{n}");
        match table.remove(&key) {
            Some(s)
                if s.dims
                    .iter()
                    .map(|&d| d as usize)
                    .eq(t.shape().iter().copied()) =>
            {
                t.data_mut().copy_from_slice(&s.data)
            }
            Some(s) => {
                err.get_or_insert(Error::Data(format!(
                    "tensor {key} has dims {:?}, expected {:?}",
                    s.dims,
                    t.shape()
                )));
            }
            None => {
                err.get_or_insert(Error::Data(format!("checkpoint lacks tensor {key}")));
            }
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainerState> {
    let (h, tensors) = decode(bytes)?;
    let config = h.config;
    config.validate()?;
    let mut table: std::collections::HashMap<String, StoredTensor> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut student = Network::zeros(config.vit, config.head)?;
    let mut teacher = Network::zeros(config.vit, config.head)?;
    fill(&mut student, "student", &mut table)?;
    fill(&mut teacher, "teacher", &mut table)?;
    student.set_requires_grad(true);
    let mut velocity = Vec::new();
    while let Some(v) = table.remove(&format!("optim.velocity.{}", velocity.len())) {
        velocity.push(v.data);
    }
    if !table.is_empty() {
        let mut extra: Vec<_> = table.into_keys().collect();
        extra.sort();
        return Err(Error::Data(format!(
            "unexpected tensors in checkpoint: {extra:?}"
        )));
    }
    let k = config.head.prototypes;
    if h.class_center.len() != k || h.patch_center.len() != k {
        return Err(Error::Data(format!("center vectors must have {k} entries")));
    }
    if h.rng
        != (RngState {
            seed: config.seed,
            stream: h.step,
            word_pos: 0,
        })
    {
        return Err(Error::Data(format!(
            "inconsistent RNG position {:?} for step {}",
            h.rng, h.step
        )));
    }
    let mut optimizer = Sgd::new(config.lr, config.momentum)?;
    optimizer.set_velocity(velocity);
    Ok(TrainerState {
        student,
        teacher,
        optimizer,
        class_center: Tensor::new(vec![k], h.class_center)?,
        patch_center: Tensor::new(vec![k], h.patch_center)?,
        step: h.step,
        config,
    })
}

pub fn save(state: &TrainerState, path: &Path) -> Result<()> {
    let bytes = state_to_bytes(state)?;
    // Write beside the target and rename, so readers never see a partial file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainerState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// The teacher backbone of a checkpoint, the network used for evaluation.
pub fn load_backbone(path: &Path) -> Result<ViTParams> {
    Ok(load(path)?.teacher.backbone)
}
