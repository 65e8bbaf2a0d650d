//! Existence probes mirroring POPE's three negative-sampling regimes.

use super::{Dataset, QueryClass, QueryInstance, Scene};
use crate::protocol::{self, Marker};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeMode {
    Random,
    Popular,
    Adversarial,
}

impl std::fmt::Display for PopeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PopeMode::Random => write!(f, "random"),
            PopeMode::Popular => write!(f, "popular"),
            PopeMode::Adversarial => write!(f, "adversarial"),
        }
    }
}

/// Scene-level presence and co-occurrence statistics.
#[derive(Debug, Clone, Default)]
pub struct DatasetStats {
    pub n_scenes: usize,
    pub presence: BTreeMap<String, usize>,
    /// (a, b) -> number of scenes containing both.
    pub cooccur: BTreeMap<(String, String), usize>,
}

impl DatasetStats {
    pub fn compute(scenes: &[Scene]) -> Self {
        let mut stats = Self { n_scenes: scenes.len(), ..Self::default() };
        for scene in scenes {
            let shapes: Vec<&str> = scene.shape_set().into_iter().collect();
            for &a in &shapes {
                *stats.presence.entry(a.to_string()).or_default() += 1;
                for &b in &shapes {
                    if a != b {
                        *stats.cooccur.entry((a.to_string(), b.to_string())).or_default() += 1;
                    }
                }
            }
        }
        stats
    }

    /// Empirical P(b present | a present).
    pub fn conditional(&self, a: &str, b: &str) -> f64 {
        let na = self.presence.get(a).copied().unwrap_or(0);
        if na == 0 {
            return 0.0;
        }
        let nab = self.cooccur.get(&(a.to_string(), b.to_string())).copied().unwrap_or(0);
        nab as f64 / na as f64
    }
}

/// Builds balanced yes/no existence probes: one positive and (when an absent
/// shape exists) one mode-dependent negative per scene.
pub fn make_pope_probes(dataset: &Dataset, mode: PopeMode, rng: &mut ChaCha8Rng) -> Vec<QueryInstance> {
    let stats = DatasetStats::compute(&dataset.scenes);
    let vocab = &dataset.spec.shape_vocab;
    let mut probes = Vec::new();
    for scene in &dataset.scenes {
        let present: Vec<&str> = scene.shape_set().into_iter().collect();
        if present.is_empty() {
            continue;
        }
        let pos_shape = present[rng.random_range(0..present.len())];
        let target = scene.objects.iter().position(|o| o.shape == pos_shape).unwrap();
        probes.push(probe(scene, 0, pos_shape, Some(target)));

        let absent: Vec<&String> = vocab.iter().filter(|s| !present.contains(&s.as_str())).collect();
        if absent.is_empty() {
            continue;
        }
        let neg_shape: &str = match mode {
            PopeMode::Random => absent[rng.random_range(0..absent.len())],
            PopeMode::Popular => absent
                .iter()
                .max_by_key(|s| (stats.presence.get(s.as_str()).copied().unwrap_or(0), std::cmp::Reverse(s.as_str())))
                .unwrap(),
            PopeMode::Adversarial => {
                // absent shape with the highest co-occurrence with anything present
                let mut best: (&str, f64) = (absent[0], -1.0);
                for cand in &absent {
                    let score = present
                        .iter()
                        .map(|p| stats.conditional(p, cand))
                        .fold(0.0f64, f64::max);
                    if score > best.1 {
                        best = (cand, score);
                    }
                }
                best.0
            }
        };
        probes.push(probe(scene, 1, neg_shape, None));
    }
    probes
}

fn probe(scene: &Scene, slot: usize, shape: &str, target: Option<usize>) -> QueryInstance {
    let rejected = target.is_none();
    let answer = if rejected { "No ." } else { "Yes ." };
    let target_sequence = protocol::compose_target_text(rejected, false, None, answer);
    QueryInstance {
        scene_id: scene.id.clone(),
        // probe indices live far above the training-query range
        query_index: 10_000 + slot,
        query_text: format!("Is there a {shape} in this image ?"),
        class: if rejected { QueryClass::NegativeExistence } else { QueryClass::Existence },
        complexity: Marker::Simple,
        rejected,
        target,
        gt_bbox: target.map(|i| scene.objects[i].bbox),
        rationale_text: None,
        answer_text: answer.to_string(),
        target_sequence,
    }
}
