use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::kg_text::PromptDocument;

/// A comprehension model paired with a text embedder.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider in cache keys and table metadata.
    fn tag(&self) -> String;

    fn dim(&self) -> usize;

    /// Turns a prompt into comprehension text.
    fn comprehend(&self, prompt: &PromptDocument) -> Result<String>;

    /// Embeds non-empty text into a `dim()`-vector.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Offline provider: comprehension is the prompt body itself and the
/// embedding is a signed feature hash of whitespace tokens, unit-normalized.
#[derive(Debug, Clone)]
pub struct MockProvider {
    dim: usize,
}

impl MockProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    /// Bucket and sign of one token.
    pub fn token_slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl EmbeddingProvider for MockProvider {
    fn tag(&self) -> String {
        format!("mock-fnv-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn comprehend(&self, prompt: &PromptDocument) -> Result<String> {
        Ok(prompt.body.clone())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        for tok in text.split_whitespace() {
            let (i, s) = self.token_slot(tok);
            acc[i] += s;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Provider(format!(
                "text {:?} hashes to the zero vector",
                text.chars().take(60).collect::<String>()
            )));
        }
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Wraps a provider and counts every call made through it.
pub struct CountingProvider<P> {
    inner: P,
    comprehend_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl<P: EmbeddingProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            comprehend_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    pub fn comprehend_calls(&self) -> usize {
        self.comprehend_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.comprehend_calls() + self.embed_calls()
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CountingProvider<P> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn comprehend(&self, prompt: &PromptDocument) -> Result<String> {
        self.comprehend_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.comprehend(prompt)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_text(text)
    }
}
