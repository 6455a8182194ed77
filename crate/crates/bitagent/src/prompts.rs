//! Prompt tables: one `<embodiment>.<task><TAB><prompt>` per line.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bitagent_core::model::PromptBook;
use bitagent_core::toyworlds::{Embodiment, TaskId};

/// The table shipped in `assets/prompts.tsv`.
pub const DEFAULT_TABLE: &str = include_str!("../assets/prompts.tsv");

pub fn parse(text: &str) -> Result<PromptBook> {
    let mut book = PromptBook::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, prompt) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("line {}: expected `<embodiment>.<task>\\t<prompt>`", i + 1))?;
        let (emb, task) = key
            .split_once('.')
            .ok_or_else(|| anyhow!("line {}: key `{key}` is not `<embodiment>.<task>`", i + 1))?;
        if Embodiment::preset(emb).is_none() {
            bail!("line {}: unknown embodiment `{emb}`", i + 1);
        }
        let task: TaskId = task.parse().map_err(|e| anyhow!("line {}: {e}", i + 1))?;
        book.insert(emb, task, prompt.trim())
            .map_err(|e| anyhow!("line {}: {e}", i + 1))?;
    }
    book.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(book)
}

pub fn load(path: Option<&Path>) -> Result<PromptBook> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading prompts {}", p.display()))?;
            parse(&text).with_context(|| format!("in {}", p.display()))
        }
        None => parse(DEFAULT_TABLE),
    }
}
