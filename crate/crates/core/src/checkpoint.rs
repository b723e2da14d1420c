//! Binary checkpoint container.
//!
//! Layout (little endian): magic, format version, config text, seed,
//! counters, kind, architecture text, auxiliary cell, parameters by name,
//! stem running statistics, frozen masks, optimizer buffers, and a SHA-256
//! of everything before it. Values are stored as `f64` bit patterns, so
//! both `f32` and `f64` networks round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::arch::{Architecture, Network};
use crate::config::RunConfig;
use crate::error::{Result, SnasError};
use crate::optim::OptimState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNASCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Supernet with searchable α, β and ψ.
    Search,
    /// Single-branch network of a decoded architecture.
    Model,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub seed: u64,
    pub kind: CheckpointKind,
    /// Present for [`CheckpointKind::Model`].
    pub arch: Option<Architecture>,
    pub aux_cell: Option<usize>,
    pub net: Network<T>,
    pub state: OptimState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn search(config: RunConfig, seed: u64, net: Network<T>, state: OptimState<T>) -> Self {
        Checkpoint {
            config,
            seed,
            kind: CheckpointKind::Search,
            arch: None,
            aux_cell: None,
            net,
            state,
        }
    }

    pub fn model(
        config: RunConfig,
        seed: u64,
        arch: Architecture,
        net: Network<T>,
        state: OptimState<T>,
    ) -> Self {
        let aux_cell = net.aux.as_ref().map(|a| a.after_cell);
        Checkpoint {
            config,
            seed,
            kind: CheckpointKind::Model,
            arch: Some(arch),
            aux_cell,
            net,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(FORMAT_VERSION)?;
        put_str(&mut w, &self.config.to_toml()?)?;
        w.write_u64::<LE>(self.seed)?;
        w.write_u64::<LE>(self.state.epoch)?;
        w.write_u64::<LE>(self.state.iteration)?;
        w.write_u64::<LE>(self.state.arch_steps)?;
        w.write_u8(match self.kind {
            CheckpointKind::Search => 0,
            CheckpointKind::Model => 1,
        })?;
        put_str(
            &mut w,
            &self
                .arch
                .as_ref()
                .map(ToString::to_string)
                .unwrap_or_default(),
        )?;
        w.write_u64::<LE>(self.aux_cell.map_or(0, |k| k as u64))?;

        w.write_u64::<LE>(self.net.params.len() as u64)?;
        for (_, p) in self.net.params.iter() {
            put_str(&mut w, &p.name)?;
            w.write_u64::<LE>(p.value.shape().len() as u64)?;
            for &d in p.value.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            put_values(&mut w, p.value.data())?;
        }
        put_values(&mut w, &self.net.stem.running_mean)?;
        put_values(&mut w, &self.net.stem.running_var)?;
        w.write_u64::<LE>(self.net.frozen_masks.len() as u64)?;
        for (name, mask) in &self.net.frozen_masks {
            put_str(&mut w, name)?;
            w.write_u64::<LE>(mask.len() as u64)?;
            w.extend(mask.iter().map(|&b| u8::from(b)));
        }
        for buffers in [
            &self.state.momentum,
            &self.state.first_moment,
            &self.state.second_moment,
        ] {
            w.write_u64::<LE>(buffers.len() as u64)?;
            for (name, v) in buffers {
                put_str(&mut w, name)?;
                put_values(&mut w, v)?;
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 4;
        if bytes.len() < header + DIGEST_LEN {
            return Err(SnasError::Integrity(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(SnasError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(SnasError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(SnasError::Integrity(
                "checksum mismatch (truncated or corrupted file)".into(),
            ));
        }
        let mut r = Cursor::new(&body[header..]);
        let corrupt =
            |e: std::io::Error| SnasError::Integrity(format!("unexpected end of data: {e}"));

        let config = RunConfig::from_toml(&get_str(&mut r)?)?;
        let seed = r.read_u64::<LE>().map_err(corrupt)?;
        let epoch = r.read_u64::<LE>().map_err(corrupt)?;
        let iteration = r.read_u64::<LE>().map_err(corrupt)?;
        let arch_steps = r.read_u64::<LE>().map_err(corrupt)?;
        let kind = match r.read_u8().map_err(corrupt)? {
            0 => CheckpointKind::Search,
            1 => CheckpointKind::Model,
            k => return Err(SnasError::Format(format!("unknown checkpoint kind {k}"))),
        };
        let arch_text = get_str(&mut r)?;
        let aux_cell = match r.read_u64::<LE>().map_err(corrupt)? {
            0 => None,
            k => Some(k as usize),
        };

        let profile = config.backbone()?;
        // initial values are overwritten below; the generator only sizes tensors
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut net, arch) = match kind {
            CheckpointKind::Search => (Network::supernet(&profile, &config.space, &mut rng)?, None),
            CheckpointKind::Model => {
                let arch: Architecture = arch_text.parse()?;
                (
                    Network::decoded(&profile, &config.space, &arch, aux_cell, &mut rng)?,
                    Some(arch),
                )
            }
        };

        let count = r.read_u64::<LE>().map_err(corrupt)? as usize;
        if count != net.params.len() {
            return Err(SnasError::Format(format!(
                "checkpoint holds {count} tensors, network has {}",
                net.params.len()
            )));
        }
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let ndim = r.read_u64::<LE>().map_err(corrupt)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(corrupt))
                .collect::<Result<Vec<_>>>()?;
            let data = get_values::<T>(&mut r)?;
            let id = net
                .params
                .find(&name)
                .ok_or_else(|| SnasError::Format(format!("unknown tensor {name}")))?;
            if net.params.value(id).shape() != shape.as_slice() {
                return Err(SnasError::Format(format!(
                    "tensor {name} has shape {shape:?}"
                )));
            }
            *net.params.value_mut(id) = Tensor::new(shape, data)?;
        }
        net.stem.running_mean = get_values(&mut r)?;
        net.stem.running_var = get_values(&mut r)?;
        let masks = r.read_u64::<LE>().map_err(corrupt)? as usize;
        for _ in 0..masks {
            let name = get_str(&mut r)?;
            let len = r.read_u64::<LE>().map_err(corrupt)? as usize;
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw).map_err(corrupt)?;
            net.frozen_masks
                .insert(name, raw.into_iter().map(|b| b != 0).collect());
        }
        let mut maps: Vec<BTreeMap<String, Vec<T>>> = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.read_u64::<LE>().map_err(corrupt)? as usize;
            let mut m = BTreeMap::new();
            for _ in 0..n {
                let name = get_str(&mut r)?;
                m.insert(name, get_values(&mut r)?);
            }
            maps.push(m);
        }
        if (r.position() as usize) != body.len() - header {
            return Err(SnasError::Format(
                "trailing bytes after optimizer state".into(),
            ));
        }
        let second_moment = maps.pop().unwrap_or_default();
        let first_moment = maps.pop().unwrap_or_default();
        let momentum = maps.pop().unwrap_or_default();
        let state = OptimState {
            momentum,
            first_moment,
            second_moment,
            arch_steps,
            iteration,
            epoch,
        };
        Ok(Checkpoint {
            config,
            seed,
            kind,
            arch,
            aux_cell,
            net,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    w.write_u64::<LE>(s.len() as u64)?;
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_values<T: Scalar>(w: &mut Vec<u8>, v: &[T]) -> Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    for x in v {
        w.write_u64::<LE>(x.as_f64().to_bits())?;
    }
    Ok(())
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u64::<LE>()? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if len > left {
        return Err(SnasError::Integrity(format!(
            "string of {len} bytes exceeds remaining {left}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| SnasError::Format(e.to_string()))
}

fn get_values<T: Scalar>(r: &mut Cursor<&[u8]>) -> Result<Vec<T>> {
    let len = r.read_u64::<LE>()? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if len > left / 8 {
        return Err(SnasError::Integrity(format!(
            "{len} values exceed remaining {left} bytes"
        )));
    }
    (0..len)
        .map(|_| Ok(T::lit(f64::from_bits(r.read_u64::<LE>()?))))
        .collect()
}
