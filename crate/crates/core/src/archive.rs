//! Evaluation history and inspiration selection.
//!
//! The archive keeps every program ever proposed, MH rejects included.
//! Inspirations are the top-k distinct programs by reward, followed by the
//! programs whose embeddings lie farthest from the parent.

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::types::{Digest, KernelId, Program, RewardValue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub program: Program,
    pub reward: RewardValue,
    pub iteration: usize,
    /// `None` for initial particles.
    pub kernel: Option<KernelId>,
    pub accepted: bool,
    pub island_id: usize,
}

/// Maps a program to a fixed-length vector. Must be deterministic.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, program: &Program) -> Vec<f64>;
}

/// Hashed bag of character 3-grams, L2-normalised.
#[derive(Clone, Debug)]
pub struct NgramEmbedding {
    pub dimension: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

impl Default for NgramEmbedding {
    fn default() -> Self {
        NgramEmbedding {
            dimension: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl EmbeddingProvider for NgramEmbedding {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, program: &Program) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let chars: Vec<char> = program.source().chars().collect();
        let mut buf = [0u8; 12];
        let mut add = |gram: &[char]| {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(xxh3_64(&buf[..len]) % self.dimension as u64) as usize] += 1.0;
        };
        if chars.len() < 3 {
            add(&chars);
        } else {
            chars.windows(3).for_each(&mut add);
        }
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// `1 - cosine similarity`; zero vectors are at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Client for an external embedding service.
///
/// Sends `{"model": .., "input": <program text>}` and accepts either
/// `{"embedding": [..]}` or the OpenAI shape `{"data": [{"embedding": [..]}]}`.
/// Failures fall back to the zero vector.
pub struct HttpEmbeddingProvider {
    endpoint: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        dimension: usize,
        api_key: Option<String>,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        HttpEmbeddingProvider {
            endpoint: endpoint.into(),
            model: model.into(),
            dimension,
            api_key,
            client,
        }
    }

    fn request(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        let body: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        let arr = body
            .get("embedding")
            .or_else(|| body.pointer("/data/0/embedding"))
            .and_then(|v| v.as_array())
            .ok_or("missing embedding")?;
        let v: Vec<f64> = arr.iter().filter_map(|x| x.as_f64()).collect();
        if v.len() != self.dimension {
            return Err(format!("expected dimension {}, got {}", self.dimension, v.len()));
        }
        Ok(v)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, program: &Program) -> Vec<f64> {
        self.request(program.source()).unwrap_or_else(|e| {
            warn!("embedding request failed for {}: {e}", program.digest());
            vec![0.0; self.dimension]
        })
    }
}

struct Slot {
    entry: ArchiveEntry,
    embedding: OnceLock<Vec<f64>>,
}

/// Append-only history for one island.
pub struct Archive {
    slots: Vec<Slot>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl Default for Archive {
    fn default() -> Self {
        Archive::new()
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive::with_provider(Arc::new(NgramEmbedding::default()))
    }

    pub fn with_provider(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Archive {
            slots: Vec::new(),
            provider,
        }
    }

    pub fn record(&mut self, entry: ArchiveEntry) {
        self.slots.push(Slot {
            entry,
            embedding: OnceLock::new(),
        });
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ArchiveEntry> {
        self.slots.iter().map(|s| &s.entry)
    }

    /// First occurrence of each digest, in insertion order.
    pub fn deduplicated(&self) -> Vec<&ArchiveEntry> {
        let mut seen = HashSet::new();
        self.entries().filter(|e| seen.insert(e.program.digest())).collect()
    }

    fn embedding(&self, idx: usize) -> &[f64] {
        let slot = &self.slots[idx];
        slot.embedding.get_or_init(|| self.provider.embed(&slot.entry.program))
    }

    /// Up to `top_k` best distinct programs, then up to `diverse_m` of the
    /// remainder farthest (embedding distance) from `parent`. The parent's own
    /// digest is never returned.
    pub fn select_inspirations(&self, parent: &Program, top_k: usize, diverse_m: usize) -> Vec<(Program, RewardValue)> {
        let parent_digest = parent.digest();
        let mut seen: HashSet<Digest> = HashSet::new();
        seen.insert(parent_digest);
        let candidates: Vec<usize> = (0..self.slots.len())
            .filter(|&i| seen.insert(self.slots[i].entry.program.digest()))
            .collect();

        let mut by_reward = candidates.clone();
        by_reward.sort_by(|&a, &b| {
            let (ea, eb) = (&self.slots[a].entry, &self.slots[b].entry);
            eb.reward
                .value
                .total_cmp(&ea.reward.value)
                .then(ea.iteration.cmp(&eb.iteration))
                .then(a.cmp(&b))
        });
        let top: Vec<usize> = by_reward.into_iter().take(top_k).collect();

        let mut picked = top.clone();
        if diverse_m > 0 {
            let parent_embedding = self.provider.embed(parent);
            let mut rest: Vec<(usize, f64)> = candidates
                .iter()
                .copied()
                .filter(|i| !top.contains(i))
                .map(|i| (i, cosine_distance(&parent_embedding, self.embedding(i))))
                .collect();
            rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            picked.extend(rest.into_iter().take(diverse_m).map(|(i, _)| i));
        }

        picked
            .into_iter()
            .map(|i| {
                let e = &self.slots[i].entry;
                (e.program.clone(), e.reward)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(src: &str, reward: f64, iteration: usize) -> ArchiveEntry {
        ArchiveEntry {
            program: Program::new(src, "text").unwrap(),
            reward: RewardValue {
                value: reward,
                valid: true,
            },
            iteration,
            kernel: None,
            accepted: true,
            island_id: 0,
        }
    }

    /// Places programs on a 2-D unit circle keyed by their source text.
    struct Fixed;
    impl EmbeddingProvider for Fixed {
        fn dimension(&self) -> usize {
            2
        }
        fn embed(&self, p: &Program) -> Vec<f64> {
            // distance 1 - cos(theta) chosen to hit the requested values
            let d: f64 = match p.source() {
                "parent" => 0.0,
                "near" => 0.1,
                "far" => 0.9,
                "mid" => 0.5,
                _ => 0.0,
            };
            let theta = (1.0 - d).acos();
            vec![theta.cos(), theta.sin()]
        }
    }

    #[test]
    fn record_grows_archive() {
        let mut a = Archive::new();
        a.record(entry("x", 1.0, 0));
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn rejected_proposals_are_inspirations() {
        let mut a = Archive::new();
        let mut e = entry("rejected", 0.4, 1);
        e.accepted = false;
        a.record(e);
        let parent = Program::new("parent", "text").unwrap();
        let got = a.select_inspirations(&parent, 1, 0);
        assert_eq!(got[0].0.source(), "rejected");
    }

    #[test]
    fn duplicates_retained_but_deduplicated_view() {
        let mut a = Archive::new();
        a.record(entry("same", 1.0, 0));
        a.record(entry("same", 1.0, 1));
        assert_eq!(a.len(), 2);
        assert_eq!(a.deduplicated().len(), 1);
        let parent = Program::new("p", "text").unwrap();
        assert_eq!(a.select_inspirations(&parent, 5, 5).len(), 1);
    }

    #[test]
    fn empty_archive_yields_nothing() {
        let parent = Program::new("p", "text").unwrap();
        assert!(Archive::new().select_inspirations(&parent, 2, 2).is_empty());
    }

    #[test]
    fn top_k_excludes_parent() {
        let mut a = Archive::new();
        a.record(entry("A", 0.9, 0));
        a.record(entry("B", 0.5, 0));
        a.record(entry("parent", 0.7, 0));
        let parent = Program::new("parent", "text").unwrap();
        let got = a.select_inspirations(&parent, 1, 0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0.source(), "A");
    }

    #[test]
    fn diverse_pick_is_farthest() {
        let mut a = Archive::with_provider(Arc::new(Fixed));
        a.record(entry("near", 0.1, 0));
        a.record(entry("far", 0.2, 0));
        a.record(entry("mid", 0.3, 0));
        let parent = Program::new("parent", "text").unwrap();
        let got = a.select_inspirations(&parent, 0, 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0.source(), "far");
    }

    #[test]
    fn top_and_diverse_are_disjoint() {
        let mut a = Archive::with_provider(Arc::new(Fixed));
        a.record(entry("far", 0.9, 0));
        a.record(entry("mid", 0.1, 0));
        a.record(entry("near", 0.2, 0));
        let parent = Program::new("parent", "text").unwrap();
        let got: Vec<_> = a
            .select_inspirations(&parent, 1, 1)
            .into_iter()
            .map(|(p, _)| p.source().to_string())
            .collect();
        assert_eq!(got, vec!["far", "mid"]);
    }

    #[test]
    fn reward_ties_prefer_older() {
        let mut a = Archive::new();
        a.record(entry("young", 0.5, 3));
        a.record(entry("old", 0.5, 1));
        let parent = Program::new("p", "text").unwrap();
        assert_eq!(a.select_inspirations(&parent, 1, 0)[0].0.source(), "old");
    }

    #[test]
    fn ngram_embedding_is_normalized_and_deterministic() {
        let e = NgramEmbedding::default();
        let p = Program::new("def f(x):\n    return x * 2\n", "python").unwrap();
        let v = e.embed(&p);
        assert_eq!(v.len(), 256);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed(&p));
        assert!(cosine_distance(&v, &v).abs() < 1e-12);
        let short = e.embed(&Program::new("a", "t").unwrap());
        assert!((short.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn selection_invariants(rewards in prop::collection::vec(0u8..5, 0..25), top_k in 0usize..5, m in 0usize..5, parent_idx in 0usize..25) {
            let mut a = Archive::new();
            for (i, r) in rewards.iter().enumerate() {
                // programs repeat every 7 entries to exercise digest dedup
                a.record(entry(&format!("prog{}", i % 7), *r as f64, i));
            }
            let parent = Program::new(format!("prog{}", parent_idx % 9), "text").unwrap();
            let got = a.select_inspirations(&parent, top_k, m);
            prop_assert!(got.len() <= top_k + m);
            let digests: HashSet<_> = got.iter().map(|(p, _)| p.digest()).collect();
            prop_assert_eq!(digests.len(), got.len());
            prop_assert!(!digests.contains(&parent.digest()));
            let head: Vec<f64> = got.iter().take(top_k).map(|(_, r)| r.value).collect();
            prop_assert!(head.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
