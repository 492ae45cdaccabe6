//! Binary training checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    8 bytes  "GEDICKPT"
//! version  u32      1
//! count    u64      number of sections
//! section  name (u64 length + utf-8), payload (u64 length + bytes), repeated
//! crc32    u32      over every preceding byte
//! ```
//!
//! Sections, in write order:
//!
//! * `config`: the effective training configuration as TOML.
//! * `tensors`: u64 count, then per tensor its name, u64 rank, u64 dims and
//!   f64 values. Names are `param.*`, `buffer.*`, `adam.m.*` and `adam.v.*`,
//!   the suffix being the model's parameter or buffer name.
//! * `adam`: u64 step counter.
//! * `replay`: u64 capacity, dim, head, state count, then the f64 states.
//! * `batcher`: u64 unit, units per batch, position, order length, order.
//! * `rng`: 32 seed bytes, u64 stream, u128 word position.
//! * `progress`: u64 completed stage-1 and stage-2 iterations.
//!
//! Floats are stored as raw bits, so a load restores the run bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::binio::{Cursor, PutBytes};
use crate::error::{Error, Result};
use crate::model::{GediModel, ModelConfig};
use crate::optim::AdamState;
use crate::rng::{self, RngSnapshot};
use crate::sampling::ReplayBuffer;
use crate::tensor::Tensor;
use crate::train::{Batcher, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"GEDICKPT";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 7] = [
    "config", "tensors", "adam", "replay", "batcher", "rng", "progress",
];

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn to_bytes(tr: &Trainer) -> Vec<u8> {
    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
    sections.push(("config", tr.config.to_toml().into_bytes()));

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let names: Vec<String> = tr
        .model
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    tensors.extend(
        tr.model
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("param.{n}"), t)),
    );
    tensors.extend(
        tr.model
            .named_buffers()
            .into_iter()
            .map(|(n, t)| (format!("buffer.{n}"), t)),
    );
    tensors.extend(
        names
            .iter()
            .zip(&tr.adam.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t)),
    );
    tensors.extend(
        names
            .iter()
            .zip(&tr.adam.v)
            .map(|(n, t)| (format!("adam.v.{n}"), t)),
    );
    let mut buf = Vec::new();
    buf.put_u64(tensors.len() as u64);
    for (name, t) in &tensors {
        buf.put_str(name);
        buf.put_u64(t.shape().len() as u64);
        for &d in t.shape() {
            buf.put_u64(d as u64);
        }
        buf.put_f64s(t.data());
    }
    sections.push(("tensors", buf));

    sections.push(("adam", tr.adam.step.to_le_bytes().to_vec()));

    let (capacity, dim, head, states) = tr.buffer.to_parts();
    let mut buf = Vec::new();
    for v in [capacity, dim, head, states.len() / dim] {
        buf.put_u64(v as u64);
    }
    buf.put_f64s(states);
    sections.push(("replay", buf));

    let b = &tr.batcher;
    let mut buf = Vec::new();
    for v in [b.unit, b.units_per_batch, b.pos, b.order.len()] {
        buf.put_u64(v as u64);
    }
    for &u in &b.order {
        buf.put_u64(u as u64);
    }
    sections.push(("batcher", buf));

    let snap = rng::snapshot(&tr.rng);
    let mut buf = snap.seed.to_vec();
    buf.put_u64(snap.stream);
    buf.extend(snap.word_pos.to_le_bytes());
    sections.push(("rng", buf));

    let mut buf = Vec::new();
    buf.put_u64(tr.done[0] as u64);
    buf.put_u64(tr.done[1] as u64);
    sections.push(("progress", buf));

    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.put_u64(sections.len() as u64);
    for (name, payload) in &sections {
        out.put_str(name);
        out.put_u64(payload.len() as u64);
        out.extend(payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

pub fn save(tr: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(tr))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint only if it was written for `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Trainer> {
    let tr = load(path)?;
    if &tr.config.model != expected {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match the requested model {:?}",
            tr.config.model, expected
        )));
    }
    Ok(tr)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(format_err(bytes.len(), "file too short for a checkpoint"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(
            8,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(format_err(
            body.len(),
            "checksum mismatch (truncated or corrupted)",
        ));
    }

    let mut c = Cursor::new(body);
    c.take(12)?;
    let count = c.u64()?;
    let mut sections: BTreeMap<&str, (usize, &[u8])> = BTreeMap::new();
    for _ in 0..count {
        let at = c.pos;
        let name = c.str()?;
        if !SECTIONS.contains(&name) {
            return Err(format_err(at, format!("unknown section `{name}`")));
        }
        let n = c.len(1)?;
        let start = c.pos;
        if sections.insert(name, (start, c.take(n)?)).is_some() {
            return Err(format_err(at, format!("duplicate section `{name}`")));
        }
    }
    if c.remaining() != 0 {
        return Err(format_err(c.pos, "trailing bytes after the last section"));
    }
    let section = |name: &str| -> Result<(usize, Cursor<'_>)> {
        let (start, bytes) = sections
            .get(name)
            .ok_or_else(|| format_err(body.len(), format!("missing section `{name}`")))?;
        Ok((*start, Cursor::new(bytes)))
    };
    // Offsets in errors raised below are relative to the section start.
    let rebase = |start: usize, e: Error| match e {
        Error::Format { offset, detail } => Error::Format {
            offset: offset + start as u64,
            detail,
        },
        other => other,
    };

    let (_, mut c) = section("config")?;
    let text = std::str::from_utf8(c.take(c.remaining())?)
        .map_err(|_| format_err(0, "config is not utf-8"))?;
    let config = TrainConfig::from_toml(text)?;
    config.validate()?;

    let (start, mut c) = section("tensors")?;
    let mut tensors = BTreeMap::new();
    let mut read_tensors = |c: &mut Cursor| -> Result<()> {
        let n = c.u64()?;
        for _ in 0..n {
            let name = c.str()?.to_string();
            let rank = c.len(8)?;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l.checked_mul(8).is_some_and(|b| b <= c.remaining()));
            let len = len.ok_or_else(|| {
                format_err(c.pos, format!("tensor `{name}` overruns its section"))
            })?;
            let data = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(())
    };
    read_tensors(&mut c).map_err(|e| rebase(start, e))?;

    let mut model = GediModel::new(config.model.clone(), &mut rng::seeded(0))?;
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor `{name}`")))
    };
    let param_names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let buffer_names: Vec<String> = model.named_buffers().into_iter().map(|(n, _)| n).collect();
    for n in param_names.iter() {
        model.load_named(n, take(format!("param.{n}"))?)?;
    }
    for n in buffer_names.iter() {
        model.load_named(n, take(format!("buffer.{n}"))?)?;
    }
    let mut adam = AdamState::new(config.adam, model.params());
    for (i, n) in param_names.iter().enumerate() {
        for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
            let t = take(format!("adam.{kind}.{n}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Contract(format!(
                    "adam.{kind}.{n} has the wrong shape"
                )));
            }
            *slot = t;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Contract(format!(
            "checkpoint has unexpected tensor `{extra}`"
        )));
    }

    let (start, mut c) = section("adam")?;
    adam.step = c.u64().map_err(|e| rebase(start, e))?;

    let (start, mut c) = section("replay")?;
    let buffer = (|| {
        let capacity = c.u64()? as usize;
        let dim = c.u64()? as usize;
        let head = c.u64()? as usize;
        let count = c.len(8)?;
        let states = count
            .checked_mul(dim)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= c.remaining()))
            .ok_or_else(|| format_err(c.pos, "replay states overrun their section"))?;
        let data = (0..states).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        ReplayBuffer::from_parts(capacity, dim, head, data)
    })()
    .map_err(|e| rebase(start, e))?;

    let (start, mut c) = section("batcher")?;
    let batcher = (|| {
        let unit = c.u64()? as usize;
        let units_per_batch = c.u64()? as usize;
        let pos = c.u64()? as usize;
        let n = c.len(8)?;
        let order = (0..n)
            .map(|_| c.u64().map(|u| u as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = vec![false; n];
        let valid = unit >= 1
            && units_per_batch >= 1
            && pos <= n
            && order
                .iter()
                .all(|&u| u < n && !std::mem::replace(&mut seen[u], true));
        if !valid {
            return Err(Error::Contract(
                "checkpoint batcher state is inconsistent".into(),
            ));
        }
        Ok(Batcher {
            unit,
            units_per_batch,
            order,
            pos,
        })
    })()
    .map_err(|e| rebase(start, e))?;

    let (start, mut c) = section("rng")?;
    let snap = (|| {
        Ok(RngSnapshot {
            seed: c.take(32)?.try_into().expect("32 bytes"),
            stream: c.u64()?,
            word_pos: c.u128()?,
        })
    })()
    .map_err(|e| rebase(start, e))?;

    let (start, mut c) = section("progress")?;
    let done = (|| Ok::<_, Error>([c.u64()? as usize, c.u64()? as usize]))()
        .map_err(|e| rebase(start, e))?;

    Ok(Trainer {
        config,
        model,
        adam,
        buffer,
        batcher,
        rng: rng::restore(&snap),
        done,
    })
}
