use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{put_f32s, put_u32, read_file, write_atomic, Reader};
use crate::agent::QNetwork;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Sequential, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLVZ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Agent,
    Generator,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Agent => 1,
            ModelKind::Generator => 2,
        }
    }

    fn producer(self) -> &'static str {
        match self {
            ModelKind::Agent => "train-agent",
            ModelKind::Generator => "train-generator",
        }
    }
}

/// Kind tag, JSON architecture descriptor and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub architecture: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new<A: Serialize>(kind: ModelKind, architecture: &A, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let architecture = serde_json::to_string(architecture).map_err(|e| Error::input(format!("architecture: {e}")))?;
        Ok(Self { kind, architecture, tensors })
    }

    pub fn architecture<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_str(&self.architecture).map_err(|e| Error::Format { offset: 9, msg: format!("architecture descriptor: {e}") })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.push(self.kind.tag());
        put_u32(&mut out, self.architecture.len() as u32);
        out.extend_from_slice(self.architecture.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        out
    }

    /// Parses a checkpoint, requiring the given kind.
    pub fn from_bytes(bytes: &[u8], want: ModelKind) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})") });
        }
        let tag = r.u8()?;
        let kind = match tag {
            1 => ModelKind::Agent,
            2 => ModelKind::Generator,
            t => return r.fail(format!("unknown model kind tag {t}")),
        };
        if kind != want {
            return Err(Error::Format { offset: r.offset() - 1, msg: format!("checkpoint holds a {kind:?} model, expected {want:?}") });
        }
        let len = r.u32()? as usize;
        let architecture = std::str::from_utf8(r.bytes(len)?)
            .map_err(|e| Error::Format { offset: r.offset(), msg: format!("architecture is not UTF-8: {e}") })?
            .to_owned();
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(nlen)?)
                .map_err(|e| Error::Format { offset: r.offset(), msg: format!("tensor name is not UTF-8: {e}") })?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return r.fail(format!("tensor `{name}` has rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n > 0 => n,
                _ => return r.fail(format!("tensor `{name}` has invalid shape {shape:?}")),
            };
            let data = r.f32s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self { kind, architecture, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, want: ModelKind) -> Result<Self> {
        Self::from_bytes(&read_file(path, want.producer())?, want)
    }
}

/// Rebuilds a [`Sequential`] from tensors whose names start with `prefix`.
pub(crate) fn sequential_from(ck: &Checkpoint, specs: Vec<LayerSpec>, prefix: &str) -> Result<Sequential> {
    let mut ts = ck.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.clone());
    let net = Sequential::from_specs_and_tensors(specs, &mut ts)
        .map_err(|e| Error::Format { offset: 0, msg: format!("tensor table does not match architecture: {e}") })?;
    if ts.next().is_some() {
        return Err(Error::Format { offset: 0, msg: format!("extra `{prefix}` tensors in checkpoint") });
    }
    Ok(net)
}

pub(crate) fn check_names(ck: &Checkpoint, expected: &[(String, &Tensor)]) -> Result<()> {
    let names: Vec<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
    let want: Vec<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if names != want {
        return Err(Error::Format { offset: 0, msg: format!("tensor names {names:?} do not match architecture {want:?}") });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentArch {
    input: [usize; 3],
    actions: usize,
    layers: Vec<LayerSpec>,
}

pub fn agent_checkpoint(net: &QNetwork) -> Result<Checkpoint> {
    let arch = AgentArch { input: net.input_shape(), actions: net.action_count(), layers: net.network().specs() };
    let tensors = net.network().named_tensors("q.").into_iter().map(|(n, t)| (n, t.clone())).collect();
    Checkpoint::new(ModelKind::Agent, &arch, tensors)
}

pub fn agent_from_checkpoint(ck: &Checkpoint) -> Result<QNetwork> {
    let arch: AgentArch = ck.architecture()?;
    let net = sequential_from(ck, arch.layers, "q.")?;
    check_names(ck, &net.named_tensors("q."))?;
    QNetwork::from_sequential(net, arch.input, arch.actions)
        .map_err(|e| Error::Format { offset: 0, msg: format!("agent architecture: {e}") })
}

pub fn save_agent(net: &QNetwork, path: &Path) -> Result<()> {
    agent_checkpoint(net)?.save(path)
}

pub fn load_agent(path: &Path) -> Result<QNetwork> {
    agent_from_checkpoint(&Checkpoint::load(path, ModelKind::Agent)?)
}
