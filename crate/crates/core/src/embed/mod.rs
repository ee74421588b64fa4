//! Semantic embeddings: providers, caching, persisted tables.

mod cache;
mod provider;
mod remote;
mod table;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

pub use cache::ContentCache;
pub use provider::{CountingProvider, EmbeddingProvider, MockProvider};
pub use remote::{RemoteConfig, RemoteProvider, API_KEY_ENV};
pub use table::SemanticEmbeddingTable;

use crate::error::{Error, Result};
use crate::kg_text::{PromptDocument, PromptKind};
use table::{is_binary_path, TextAppender};

/// Comprehends then embeds one prompt.
pub fn embed_prompt(provider: &dyn EmbeddingProvider, prompt: &PromptDocument) -> Result<Vec<f32>> {
    let text = provider.comprehend(prompt)?;
    if text.trim().is_empty() {
        return Err(Error::Provider(format!(
            "empty comprehension for {} {}",
            prompt.kind.as_str(),
            prompt.subject_id
        )));
    }
    let v = provider.embed_text(&text)?;
    if v.len() != provider.dim() {
        return Err(Error::Shape(format!(
            "provider returned {} components, expected {}",
            v.len(),
            provider.dim()
        )));
    }
    Ok(v)
}

/// Embeds every prompt without touching disk.
pub fn embed_all(
    provider: &dyn EmbeddingProvider,
    prompts: &[PromptDocument],
    n_items: usize,
    n_users: usize,
) -> Result<SemanticEmbeddingTable> {
    use rayon::prelude::*;
    let vectors: Vec<Vec<f32>> = prompts
        .par_iter()
        .map(|p| embed_prompt(provider, p))
        .collect::<Result<_>>()?;
    let mut table = SemanticEmbeddingTable::new(provider.dim(), provider.tag());
    for (p, v) in prompts.iter().zip(vectors) {
        table.insert(p.kind, p.subject_id, v)?;
    }
    table.ensure_complete(n_items, n_users)?;
    Ok(table)
}

fn progress_path(out: &Path) -> PathBuf {
    if is_binary_path(out) {
        out.with_extension("partial")
    } else {
        out.to_owned()
    }
}

/// Builds (or resumes) the table for `prompts`, appending each vector to
/// disk as soon as it is produced. Ids already on disk are not recomputed.
/// The finished table is rewritten to `out` in canonical order.
pub fn build_embedding_table(
    provider: &dyn EmbeddingProvider,
    prompts: &[PromptDocument],
    out: &Path,
    n_items: usize,
    n_users: usize,
    parallelism: usize,
) -> Result<SemanticEmbeddingTable> {
    let dim = provider.dim();
    let progress = progress_path(out);
    let existing_text = match std::fs::read(&progress) {
        Ok(bytes) => Some(String::from_utf8(bytes).map_err(|_| Error::parse(&progress, 0, "not UTF-8"))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&progress, e)),
    };
    let mut table = match &existing_text {
        Some(t) if !t.is_empty() => SemanticEmbeddingTable::from_text(t, &progress, true)?,
        _ if progress != out && out.exists() => SemanticEmbeddingTable::load(out)?,
        _ => SemanticEmbeddingTable::new(dim, provider.tag()),
    };
    if table.dim() != dim {
        return Err(Error::Config(format!(
            "{} holds dimension {}, provider produces {dim}; remove it to rebuild",
            progress.display(),
            table.dim()
        )));
    }
    table.provider_tag = provider.tag();

    let todo: Vec<&PromptDocument> = prompts
        .iter()
        .filter(|p| !table.contains(p.kind, p.subject_id))
        .collect();
    if !todo.is_empty() {
        log::info!("embedding {} of {} prompts", todo.len(), prompts.len());
        let seed_text = match &existing_text {
            Some(t) => Some(t.clone()),
            None if !table.is_empty() => Some(table.to_text()),
            None => None,
        };
        let mut appender = TextAppender::open(&progress, dim, seed_text.as_deref())?;
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = parallelism.clamp(1, todo.len());
        let (tx, rx) = mpsc::channel::<(PromptKind, u32, Result<Vec<f32>>)>();
        let mut first_err = None;
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, abort, todo) = (&next, &abort, &todo);
                s.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(p) = todo.get(i) else { break };
                    if tx.send((p.kind, p.subject_id, embed_prompt(provider, p))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // single writer
            for (kind, id, res) in rx {
                if first_err.is_some() {
                    continue;
                }
                let stored = res.and_then(|v| {
                    appender.append(kind, id, &v)?;
                    table.insert(kind, id, v)
                });
                if let Err(e) = stored {
                    abort.store(true, Ordering::SeqCst);
                    first_err = Some(e);
                }
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
    }

    table.ensure_complete(n_items, n_users)?;
    table.save(out)?;
    if progress != out {
        let _ = std::fs::remove_file(&progress);
    }
    Ok(table)
}

/// File mode: the table is supplied externally and must be complete.
pub fn load_embedding_file(path: &Path, n_items: usize, n_users: usize) -> Result<SemanticEmbeddingTable> {
    let table = SemanticEmbeddingTable::load(path)?;
    table.ensure_complete(n_items, n_users)?;
    Ok(table)
}
