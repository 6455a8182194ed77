//! The subcommands. Each takes a validated config and an output directory
//! and writes plain files under it:
//!
//! ```text
//! <out>/data/<embodiment>.bin        collect
//! <out>/references.tsv               reference returns cache
//! <out>/pretrain/                    checkpoint.ckpt, manifest.txt, metrics.csv, plots
//! <out>/train/                       same layout after both phases
//! <out>/eval/                        scores.csv, gates.svg, traces
//! <out>/ablate/<rung>/               per-rung checkpoints and manifests
//! <out>/ablate/scores_<rung>.csv
//! <out>/transfer/transfer.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bitagent_core::eval::{imagine_observations, policy_returns, References, ScoreRow, StepTrace};
use bitagent_core::experiment::{
    ablation_ladder, collect_for, score_agent, transfer_protocol, ExperimentConfig, ReferenceCache, Rung,
};
use bitagent_core::model::{Agent, PromptBook};
use bitagent_core::toyworlds::{Dataset, Embodiment, TaskId};
use bitagent_core::train::{MetricsRow, Trainer};

use crate::binio::sha256_hex;
use crate::checkpoint;
use crate::config::Config;
use crate::dataset;
use crate::manifest::RunManifest;
use crate::plots::{gate_trajectories, line_chart, observation_traces, reward_curves, Series};
use crate::prompts;
use crate::report::{score_csv, score_pretty, MetricsCsv};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const MANIFEST: &str = "manifest.txt";
pub const METRICS: &str = "metrics.csv";

/// Steps of real context before the open-loop prediction plot starts.
const IMAGINE_CONTEXT: usize = 5;

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn core(e: bitagent_core::Error) -> anyhow::Error {
    anyhow!("{e}")
}

pub fn data_path(out: &Path, embodiment: &str) -> PathBuf {
    out.join("data").join(format!("{embodiment}.bin"))
}

/// Collects (or reloads, when an identical file exists) the offline data
/// of every training embodiment.
pub fn collect(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let e = &cfg.experiment;
    e.validate().map_err(core)?;
    let mut paths = Vec::new();
    for name in &e.embodiments_train {
        let ds = collect_for(e, name).map_err(core)?;
        let path = data_path(out, name);
        dataset::save(&ds, &path)?;
        eprintln!("collected {} episodes for `{name}` -> {}", ds.len(), path.display());
        paths.push(path);
    }
    Ok(paths)
}

/// The merged training data plus each file's bytes for the manifest.
/// Missing files are collected first.
fn training_data(cfg: &Config, out: &Path) -> Result<(Dataset, Vec<(String, Vec<u8>)>)> {
    let e = &cfg.experiment;
    let mut merged: Option<Dataset> = None;
    let mut hashes = Vec::new();
    for name in &e.embodiments_train {
        let path = data_path(out, name);
        if !path.exists() {
            let ds = collect_for(e, name).map_err(core)?;
            dataset::save(&ds, &path)?;
            eprintln!("collected {} episodes for `{name}` -> {}", ds.len(), path.display());
        }
        let (ds, bytes) = dataset::load(&path)?;
        if ds.obs_dim() != e.dims.obs_dim || ds.act_dim() != e.dims.act_dim {
            bail!("{} does not match the configured model dimensions", path.display());
        }
        hashes.push((name.clone(), bytes));
        merged = Some(match merged {
            None => ds,
            Some(m) => m.merge(ds).map_err(core)?,
        });
    }
    let ds = merged.ok_or_else(|| anyhow!("no training embodiments configured"))?;
    Ok((ds.filter_tasks(&e.tasks), hashes))
}

fn reference_fingerprint(e: &ExperimentConfig) -> String {
    let env = &e.env;
    let key = format!(
        "{:?}|{}|{}|{}|{}|{}|{}",
        e.eval_seed_list(),
        e.eval_episodes,
        env.episode_len,
        env.noise_std,
        env.init_velocity,
        env.init_posture,
        crate::manifest::CODE_VERSION
    );
    sha256_hex(key.as_bytes())
}

/// Loads `references.tsv` when it was written for the same evaluation
/// settings; otherwise starts empty.
pub fn load_references(e: &ExperimentConfig, out: &Path) -> Result<ReferenceCache> {
    let mut cache = ReferenceCache::default();
    let Ok(text) = fs::read_to_string(out.join("references.tsv")) else {
        return Ok(cache);
    };
    let mut lines = text.lines();
    if lines.next() != Some(&format!("# {}", reference_fingerprint(e))) {
        return Ok(cache);
    }
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let [emb, task, random, expert] = f[..] else {
            bail!("references.tsv line {}: expected four fields", i + 2);
        };
        let task: TaskId = task.parse().map_err(core)?;
        let r = References {
            random: random.parse().context("random reference")?,
            expert: expert.parse().context("expert reference")?,
        };
        cache.insert(emb, task, r).map_err(core)?;
    }
    Ok(cache)
}

pub fn save_references(e: &ExperimentConfig, out: &Path, cache: &ReferenceCache) -> Result<()> {
    let mut s = format!("# {}\n", reference_fingerprint(e));
    for (emb, task, r) in cache.entries() {
        let _ = writeln!(s, "{emb}\t{task}\t{}\t{}", r.random, r.expert);
    }
    write(&out.join("references.tsv"), s)
}

fn prompt_book(cfg: &Config) -> Result<PromptBook> {
    prompts::load(cfg.prompts.as_deref())
}

/// Mean normalized score over the configured tasks on the first evaluation
/// embodiment; logged alongside the training metrics.
fn progress_score(
    e: &ExperimentConfig,
    agent: &Agent,
    book: &PromptBook,
    refs: &mut ReferenceCache,
) -> bitagent_core::Result<f64> {
    let rows = score_agent(e, agent, book, &e.embodiments_eval[0], "progress", refs)?;
    Ok(rows.iter().map(|r| r.normalized_mean).sum::<f64>() / rows.len() as f64)
}

fn run_manifest(cfg: &Config, agent: &Agent, hashes: &[(String, Vec<u8>)], phase: &str, steps: usize) -> RunManifest {
    let mut m = RunManifest::for_config(cfg);
    for (name, bytes) in hashes {
        m.set_dataset_hash(name, bytes);
    }
    m.set("phase", phase);
    m.set("steps", steps);
    m.set("param_count", agent.store.scalar_count());
    m.set("fusion", checkpoint::fusion_name(agent.fusion_kind()));
    m
}

fn write_run(dir: &Path, agent: &Agent, manifest: &RunManifest, metrics: &str, rows: &[MetricsRow]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint::save(agent, &dir.join(CHECKPOINT))?;
    manifest.save(&dir.join(MANIFEST))?;
    write(&dir.join(METRICS), metrics)?;
    write(&dir.join("reward_curves.svg"), reward_curves(rows))?;
    write(&dir.join("gates.svg"), gate_trajectories(rows))
}

/// Which part of the schedule a training command runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// World-model and joint objective only.
    Pretrain,
    /// Both phases, or the behavior phase alone when resuming a pretrained
    /// checkpoint.
    Train,
}

/// Trains and writes `<out>/pretrain` or `<out>/train`. Returns the run
/// directory.
pub fn train(cfg: &Config, out: &Path, stage: Stage, init: Option<&Path>) -> Result<PathBuf> {
    let e = &cfg.experiment;
    e.validate().map_err(core)?;
    let book = prompt_book(cfg)?;
    let (data, hashes) = training_data(cfg, out)?;
    let mut tc = e.train_config(e.rung, e.seed);
    if stage == Stage::Pretrain {
        tc.behavior_steps = 0;
    }
    let agent = match init {
        Some(p) => {
            let a = checkpoint::load(p)?;
            if a.dims != e.dims || a.fusion_kind() != e.rung.fusion() {
                bail!(
                    "{} was built for other model widths or fusion than the config's `{}` rung",
                    p.display(),
                    e.rung
                );
            }
            a
        }
        None => Agent::new(e.dims, e.rung.fusion(), e.seed).map_err(core)?,
    };
    let mut refs = load_references(e, out)?;
    let mut trainer = Trainer::new(agent, &data, &book, tc).map_err(core)?;
    if init.is_some() {
        trainer.skip_to(tc.pretrain_steps).map_err(core)?;
    }
    let layers = trainer.agent.gate_values(book.get(&e.embodiments_train[0], e.tasks[0])).map_err(core)?.len();
    let mut csv = MetricsCsv::new(&e.tasks, layers);
    let mut rows = Vec::new();
    trainer
        .run(|t, mut row| {
            row.eval_score = Some(progress_score(e, &t.agent, &book, &mut refs)?);
            eprintln!(
                "step {:>5} {:<8} total {:.4} score {:.3}",
                row.step,
                row.phase.to_string(),
                row.total,
                row.eval_score.unwrap_or(f64::NAN)
            );
            csv.push(&row);
            rows.push(row);
            Ok(())
        })
        .map_err(core)?;
    save_references(e, out, &refs)?;
    let agent = trainer.into_agent();
    let (name, steps) = match stage {
        Stage::Pretrain => ("pretrain", tc.pretrain_steps),
        Stage::Train => ("train", tc.total_steps()),
    };
    let dir = out.join(name);
    let manifest = run_manifest(cfg, &agent, &hashes, name, steps);
    write_run(&dir, &agent, &manifest, &csv.text, &rows)?;
    Ok(dir)
}

/// Options of the evaluate command.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub allow_dataset_mismatch: bool,
}

/// Scores a checkpoint on every evaluation embodiment and task and writes
/// `<out>/eval`. Fails when the checkpoint is missing, or when its manifest
/// records datasets that differ from the ones under `<out>/data` (unless
/// allowed).
pub fn evaluate(cfg: &Config, out: &Path, opts: &EvalOptions) -> Result<Vec<ScoreRow>> {
    let e = &cfg.experiment;
    e.validate().map_err(core)?;
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| out.join("train").join(CHECKPOINT));
    let agent = checkpoint::load(&ckpt)?;
    if agent.dims != e.dims {
        bail!("{} was built for other model widths than the config", ckpt.display());
    }
    let manifest_path = ckpt.with_file_name(MANIFEST);
    let manifest = if manifest_path.exists() {
        Some(RunManifest::load(&manifest_path)?)
    } else {
        None
    };
    if let Some(m) = &manifest {
        for name in &e.embodiments_train {
            let path = data_path(out, name);
            if let Ok(bytes) = fs::read(&path) {
                match m.check_dataset(name, &bytes) {
                    Err(err) if !opts.allow_dataset_mismatch => return Err(err),
                    Err(err) => eprintln!("warning: {err}"),
                    Ok(()) => {}
                }
            }
        }
    }
    let book = prompt_book(cfg)?;
    let mut refs = load_references(e, out)?;
    let label = manifest.as_ref().and_then(|m| m.get("rung")).unwrap_or(e.rung.as_str()).to_string();
    let dir = out.join("eval");
    let mut rows = Vec::new();
    for emb in &e.embodiments_eval {
        rows.extend(score_agent(e, &agent, &book, emb, &label, &mut refs).map_err(core)?);
        let preset = Embodiment::preset(emb).ok_or_else(|| anyhow!("unknown embodiment `{emb}`"))?;
        for &task in &e.tasks {
            let prompt = book.get(emb, task);
            let mut trace = Vec::new();
            policy_returns(&agent, prompt, &preset, task, 1, e.eval_seed_base, &e.env, Some(&mut trace))
                .map_err(core)?;
            let stem = format!("{emb}_{task}");
            write(&dir.join(format!("trace_{stem}.svg")), observation_traces(&trace, 2))?;
            write(&dir.join(format!("imagined_{stem}.svg")), imagined_chart(&agent, prompt, &trace)?)?;
        }
    }
    save_references(e, out, &refs)?;
    write(&dir.join("gates.svg"), gate_chart(&agent, &book, e)?)?;
    write(&dir.join("scores.csv"), score_csv(&rows))?;
    print!("{}", score_pretty(&rows));
    Ok(rows)
}

/// Real observations against open-loop predictions from the world model,
/// first two components.
fn imagined_chart(agent: &Agent, prompt: &str, trace: &[StepTrace]) -> Result<String> {
    if trace.len() < IMAGINE_CONTEXT + 1 {
        return Ok(line_chart("Imagined vs real", "t", &[]));
    }
    let obs: Vec<Vec<f64>> = trace.iter().map(|s| s.obs.clone()).collect();
    let acts: Vec<Vec<f64>> = trace[..trace.len() - 1].iter().map(|s| s.action.clone()).collect();
    let pred = imagine_observations(agent, prompt, &obs, &acts, IMAGINE_CONTEXT).map_err(core)?;
    let mut series = Vec::new();
    for d in 0..2.min(obs[0].len()) {
        series.push(Series {
            label: format!("real[{d}]"),
            points: obs.iter().enumerate().map(|(t, o)| (t as f64, o[d])).collect(),
            dashed: false,
        });
        series.push(Series {
            label: format!("imagined[{d}]"),
            points: pred
                .iter()
                .enumerate()
                .map(|(j, o)| ((IMAGINE_CONTEXT - 1 + j) as f64, o[d]))
                .collect(),
            dashed: true,
        });
    }
    Ok(line_chart("Imagined vs real", "t", &series))
}

/// Gate value against layer, one line per (embodiment, task) prompt.
fn gate_chart(agent: &Agent, book: &PromptBook, e: &ExperimentConfig) -> Result<String> {
    let mut series = Vec::new();
    for emb in &e.embodiments_eval {
        for &task in &e.tasks {
            let g = agent.gate_values(book.get(emb, task)).map_err(core)?;
            series.push(Series {
                label: format!("{emb}.{task}"),
                points: g.iter().enumerate().map(|(l, v)| (l as f64, *v)).collect(),
                dashed: false,
            });
        }
    }
    Ok(line_chart("Gate value per layer", "layer", &series))
}

fn rung_dir(rung: Rung) -> &'static str {
    match rung {
        Rung::Base => "base",
        Rung::Mllm => "mllm",
        Rung::Tamf => "tamf",
        Rung::Jbo => "jbo",
    }
}

/// Runs the ablation ladder and writes one score table per rung, plus the
/// last replicate's checkpoint and manifest per rung.
pub fn ablate(cfg: &Config, out: &Path) -> Result<Vec<(Rung, Vec<ScoreRow>)>> {
    let e = &cfg.experiment;
    e.validate().map_err(core)?;
    let book = prompt_book(cfg)?;
    let (data, hashes) = training_data(cfg, out)?;
    let mut refs = load_references(e, out)?;
    let dir = out.join("ablate");
    let mut failure = None;
    let tables = ablation_ladder(e, &data, &book, &mut refs, |rung, k, agent, rows| {
        eprintln!("{rung} replicate {k}: {:.3}", bitagent_core::experiment::table_mean(rows));
        let mut c = cfg.clone();
        c.experiment.rung = rung;
        c.experiment.seed = e.replicate_seed(k);
        let m = run_manifest(&c, agent, &hashes, "train", e.train.total_steps());
        let d = dir.join(rung_dir(rung));
        let res = fs::create_dir_all(&d)
            .map_err(anyhow::Error::from)
            .and_then(|_| checkpoint::save(agent, &d.join(CHECKPOINT)))
            .and_then(|_| m.save(&d.join(MANIFEST)));
        if let Err(err) = res {
            failure.get_or_insert(err);
        }
    })
    .map_err(core)?;
    if let Some(err) = failure {
        return Err(err);
    }
    save_references(e, out, &refs)?;
    for (rung, rows) in &tables {
        write(&dir.join(format!("scores_{}.csv", rung_dir(*rung))), score_csv(rows))?;
        print!("{}", score_pretty(rows));
    }
    Ok(tables)
}

/// Runs the transfer protocol and writes `<out>/transfer/transfer.csv`.
pub fn transfer(cfg: &Config, out: &Path) -> Result<bitagent_core::experiment::TransferTable> {
    let e = &cfg.experiment;
    e.validate().map_err(core)?;
    let book = prompt_book(cfg)?;
    let (data, _) = training_data(cfg, out)?;
    let mut refs = load_references(e, out)?;
    let table = transfer_protocol(e, &data, &book, &mut refs, |label, k, rows| {
        eprintln!("{label} replicate {k}: {:.3}", bitagent_core::experiment::table_mean(rows));
    })
    .map_err(core)?;
    save_references(e, out, &refs)?;
    write(&out.join("transfer").join("transfer.csv"), score_csv(table.rows()))?;
    print!("{}", score_pretty(table.rows()));
    Ok(table)
}
