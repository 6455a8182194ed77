//! Checkpoint files: a text manifest followed by the raw parameter payload.
//!
//! ```text
//! bitagent-checkpoint 1
//! fusion tamf|additive
//! dim <name> <value>                              one per model width
//! param <name> <rows> <cols> <offset> <frozen>    offset into the payload
//! payload <bytes>
//! <payload: little-endian f64 values, parameters back to back>
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use bitagent_core::model::{Agent, FusionKind, ModelDims};

use crate::binio::{put_f64s, FormatError, FormatResult, Reader};

const HEADER: &str = "bitagent-checkpoint 1";

/// Every model width by name, in a fixed order.
pub fn dim_fields(d: &ModelDims) -> [(&'static str, usize); 18] {
    [
        ("obs_dim", d.obs_dim),
        ("act_dim", d.act_dim),
        ("d_tau", d.d_tau),
        ("d_m", d.d_m),
        ("d_z", d.d_z),
        ("d_h", d.d_h),
        ("d_s", d.d_s),
        ("obs_embed", d.obs_embed),
        ("window", d.window),
        ("mllm_hidden", d.mllm_hidden),
        ("task_hidden", d.task_hidden),
        ("align_hidden", d.align_hidden),
        ("wm_head_hidden", d.wm_head_hidden),
        ("adapter_width", d.adapter_width),
        ("tamf_layers", d.tamf_layers),
        ("policy_hidden", d.policy_hidden),
        ("critic_hidden", d.critic_hidden),
        ("text_hidden", d.text_hidden),
    ]
}

/// Sets the width called `name`; false when no such width exists.
pub fn set_dim(d: &mut ModelDims, name: &str, v: usize) -> bool {
    let slot = match name {
        "obs_dim" => &mut d.obs_dim,
        "act_dim" => &mut d.act_dim,
        "d_tau" => &mut d.d_tau,
        "d_m" => &mut d.d_m,
        "d_z" => &mut d.d_z,
        "d_h" => &mut d.d_h,
        "d_s" => &mut d.d_s,
        "obs_embed" => &mut d.obs_embed,
        "window" => &mut d.window,
        "mllm_hidden" => &mut d.mllm_hidden,
        "task_hidden" => &mut d.task_hidden,
        "align_hidden" => &mut d.align_hidden,
        "wm_head_hidden" => &mut d.wm_head_hidden,
        "adapter_width" => &mut d.adapter_width,
        "tamf_layers" => &mut d.tamf_layers,
        "policy_hidden" => &mut d.policy_hidden,
        "critic_hidden" => &mut d.critic_hidden,
        "text_hidden" => &mut d.text_hidden,
        _ => return false,
    };
    *slot = v;
    true
}

pub fn fusion_name(k: FusionKind) -> &'static str {
    match k {
        FusionKind::Tamf => "tamf",
        FusionKind::Additive => "additive",
    }
}

/// One manifest line per parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub frozen: bool,
}

pub fn manifest(agent: &Agent) -> Vec<ManifestEntry> {
    let mut offset = 0;
    agent
        .store
        .iter()
        .map(|(_, p)| {
            let e = ManifestEntry {
                name: p.name.clone(),
                rows: p.rows,
                cols: p.cols,
                offset,
                frozen: p.frozen,
            };
            offset += p.rows * p.cols * 8;
            e
        })
        .collect()
}

pub fn encode(agent: &Agent) -> Vec<u8> {
    let mut head = String::new();
    head.push_str(HEADER);
    head.push('\n');
    head.push_str(&format!("fusion {}\n", fusion_name(agent.fusion_kind())));
    for (name, v) in dim_fields(&agent.dims) {
        head.push_str(&format!("dim {name} {v}\n"));
    }
    let entries = manifest(agent);
    for e in &entries {
        head.push_str(&format!(
            "param {} {} {} {} {}\n",
            e.name, e.rows, e.cols, e.offset, e.frozen as u8
        ));
    }
    let payload_len = agent.store.scalar_count() * 8;
    head.push_str(&format!("payload {payload_len}\n"));
    let mut out = head.into_bytes();
    for (_, p) in agent.store.iter() {
        put_f64s(&mut out, &p.values);
    }
    out
}

fn bad(offset: usize, what: impl Into<String>) -> FormatError {
    FormatError {
        what: what.into(),
        offset,
    }
}

/// Parsed manifest: header fields plus where the payload starts.
struct Parsed {
    fusion: FusionKind,
    dims: ModelDims,
    entries: Vec<ManifestEntry>,
    payload_start: usize,
    payload_len: usize,
}

fn parse_header(bytes: &[u8]) -> FormatResult<Parsed> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> FormatResult<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(start, "unterminated manifest line"))?;
        *pos = start + end + 1;
        line_no += 1;
        let s = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| bad(start, "manifest is not UTF-8"))?;
        Ok((start, s.to_string()))
    };
    let (_, first) = next_line(&mut pos)?;
    if first != HEADER {
        return Err(bad(0, "not a checkpoint (bad header line)"));
    }
    let mut fusion = None;
    let mut dims = ModelDims::new(1, 1);
    let mut seen_dims = 0;
    let mut entries = Vec::new();
    loop {
        let (at, line) = next_line(&mut pos)?;
        let f: Vec<&str> = line.split(' ').collect();
        match f.as_slice() {
            ["fusion", "tamf"] => fusion = Some(FusionKind::Tamf),
            ["fusion", "additive"] => fusion = Some(FusionKind::Additive),
            ["dim", name, v] => {
                let v = v.parse().map_err(|_| bad(at, format!("bad value for dim {name}")))?;
                if !set_dim(&mut dims, name, v) {
                    return Err(bad(at, format!("unknown dim `{name}`")));
                }
                seen_dims += 1;
            }
            ["param", name, rows, cols, offset, frozen] => {
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad(at, format!("bad number in entry for {name}")));
                entries.push(ManifestEntry {
                    name: name.to_string(),
                    rows: num(rows)?,
                    cols: num(cols)?,
                    offset: num(offset)?,
                    frozen: match *frozen {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(at, format!("bad frozen flag for {name}"))),
                    },
                });
            }
            ["payload", n] => {
                let payload_len = n.parse().map_err(|_| bad(at, "bad payload length"))?;
                let fusion = fusion.ok_or_else(|| bad(at, "manifest has no fusion line"))?;
                if seen_dims != dim_fields(&dims).len() {
                    return Err(bad(at, "manifest is missing model widths"));
                }
                return Ok(Parsed {
                    fusion,
                    dims,
                    entries,
                    payload_start: pos,
                    payload_len,
                });
            }
            _ => return Err(bad(at, format!("unrecognized manifest line `{line}`"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> FormatResult<Agent> {
    let p = parse_header(bytes)?;
    let actual = bytes.len() - p.payload_start;
    if actual != p.payload_len {
        return Err(bad(
            p.payload_start,
            format!("payload is {actual} bytes, manifest declares {}", p.payload_len),
        ));
    }
    let mut agent = Agent::new(p.dims, p.fusion, 0).map_err(|e| bad(0, e.to_string()))?;
    if p.entries.len() != agent.store.len() {
        return Err(bad(
            p.payload_start,
            format!(
                "manifest lists {} parameters, the model has {}",
                p.entries.len(),
                agent.store.len()
            ),
        ));
    }
    let ids: Vec<_> = agent.store.ids().collect();
    let mut expected_offset = 0;
    for (e, id) in p.entries.iter().zip(ids) {
        let param = agent.store.get_mut(id);
        if e.name != param.name {
            return Err(bad(
                p.payload_start + e.offset,
                format!("parameter `{}` found where `{}` was expected", e.name, param.name),
            ));
        }
        if (e.rows, e.cols) != (param.rows, param.cols) {
            return Err(bad(
                p.payload_start + e.offset,
                format!(
                    "parameter `{}` has shape [{}, {}], the model expects [{}, {}]",
                    e.name, e.rows, e.cols, param.rows, param.cols
                ),
            ));
        }
        if e.offset != expected_offset {
            return Err(bad(p.payload_start, format!("parameter `{}` has offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let mut r = Reader::at(bytes, p.payload_start + e.offset);
        param.values = r.f64s(e.rows * e.cols, &e.name)?;
        if let Some(i) = param.values.iter().position(|v| !v.is_finite()) {
            return Err(bad(p.payload_start + e.offset + 8 * i, format!("non-finite value in `{}`", e.name)));
        }
        param.frozen = e.frozen;
        expected_offset += e.rows * e.cols * 8;
    }
    if expected_offset != p.payload_len {
        return Err(bad(p.payload_start + expected_offset, "payload has unclaimed bytes"));
    }
    Ok(agent)
}

pub fn save(agent: &Agent, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, encode(agent)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Agent> {
    if !path.exists() {
        bail!("no checkpoint at {} (run `bitagent train` first or pass --checkpoint)", path.display());
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}
