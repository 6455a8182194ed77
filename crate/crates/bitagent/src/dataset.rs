//! Dataset files.
//!
//! ```text
//! magic        8 bytes   "BTAGDATA"
//! version      u32       1
//! obs_dim      u32
//! act_dim      u32
//! episode_len  u32       transitions per episode (T)
//! count        u32       number of episodes
//! count x record:
//!   length       u64     bytes in the rest of the record
//!   embodiment   u32 byte length, then UTF-8
//!   task         u8      0 stand, 1 walk, 2 run
//!   observations f64 x (T + 1) * obs_dim
//!   actions      f64 x T * act_dim
//!   true_rewards f64 x T
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bitagent_core::toyworlds::{Dataset, EpisodeRecord, TaskId};

use crate::binio::{put_f64s, put_str, put_u32, put_u64, FormatResult, Reader};

pub const MAGIC: &[u8; 8] = b"BTAGDATA";
pub const VERSION: u32 = 1;

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let Some(first) = ds.episodes.first() else {
        bail!("refusing to write an empty dataset");
    };
    let t = first.len();
    if ds.episodes.iter().any(|e| e.len() != t) {
        bail!("dataset files need a uniform episode length");
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, first.obs_dim as u32);
    put_u32(&mut out, first.act_dim as u32);
    put_u32(&mut out, t as u32);
    put_u32(&mut out, ds.episodes.len() as u32);
    for ep in &ds.episodes {
        let mut rec = Vec::new();
        put_str(&mut rec, &ep.embodiment);
        rec.push(ep.task.index() as u8);
        put_f64s(&mut rec, &ep.observations);
        put_f64s(&mut rec, &ep.actions);
        put_f64s(&mut rec, &ep.true_rewards);
        put_u64(&mut out, rec.len() as u64);
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> FormatResult<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Reader::at(bytes, 0).fail("not a dataset file (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported dataset version {version}"));
    }
    let obs_dim = r.u32("obs_dim")? as usize;
    let act_dim = r.u32("act_dim")? as usize;
    let t = r.u32("episode_len")? as usize;
    let count = r.u32("count")? as usize;
    if obs_dim == 0 || act_dim == 0 || t == 0 {
        return r.fail("zero dimension in header");
    }
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u64("record length")? as usize;
        let start = r.offset();
        let embodiment = r.str("embodiment")?;
        let task = match r.u8("task")? {
            0 => TaskId::Stand,
            1 => TaskId::Walk,
            2 => TaskId::Run,
            k => return r.fail(format!("episode {i}: unknown task code {k}")),
        };
        let observations = r.f64s((t + 1) * obs_dim, "observations")?;
        let actions = r.f64s(t * act_dim, "actions")?;
        let true_rewards = r.f64s(t, "true rewards")?;
        if r.offset() - start != len {
            return r.fail(format!("episode {i}: record length {len} disagrees with its contents"));
        }
        let ep = EpisodeRecord {
            embodiment,
            task,
            obs_dim,
            act_dim,
            observations,
            actions,
            true_rewards,
        };
        if let Err(e) = ep.validate() {
            return Reader::at(bytes, start).fail(format!("episode {i}: {e}"));
        }
        episodes.push(ep);
    }
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    Dataset::new(episodes).or_else(|e| r.fail(e.to_string()))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(ds)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}

/// Reads a dataset and returns it with the raw bytes (for hashing).
pub fn load(path: &Path) -> Result<(Dataset, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| {
        format!(
            "no dataset at {} (run `bitagent collect` with the same config first)",
            path.display()
        )
    })?;
    let ds = decode(&bytes).with_context(|| format!("reading {}", path.display()))?;
    Ok((ds, bytes))
}
