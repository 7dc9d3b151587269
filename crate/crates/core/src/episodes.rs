//! Episodic data model and N-way K-shot task sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Display;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Index of an image in its owning dataset.
pub type ExampleId = usize;

/// Class id → example ids. Iteration order is the sorted class id order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassIndex {
    classes: BTreeMap<String, Vec<ExampleId>>,
}

impl ClassIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: impl Into<String>, examples: Vec<ExampleId>) {
        self.classes.insert(class.into(), examples);
    }

    pub fn get(&self, class: &str) -> Option<&[ExampleId]> {
        self.classes.get(class).map(Vec::as_slice)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ExampleId])> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn n_examples(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }
}

impl FromIterator<(String, Vec<ExampleId>)> for ClassIndex {
    fn from_iter<I: IntoIterator<Item = (String, Vec<ExampleId>)>>(iter: I) -> Self {
        Self {
            classes: iter.into_iter().collect(),
        }
    }
}

fn default_queries() -> usize {
    15
}

/// Task shape: `n_way` classes, `k_shot` labelled and `q_per_class` query images per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_queries")]
    pub q_per_class: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_per_class: usize) -> Result<Self> {
        let spec = Self {
            n_way,
            k_shot,
            q_per_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidSpec(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::InvalidSpec("k_shot must be at least 1".into()));
        }
        if self.q_per_class < 1 {
            return Err(Error::InvalidSpec("q_per_class must be at least 1".into()));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.q_per_class
    }

    pub fn n_nodes(&self) -> usize {
        self.support_len() + self.query_len()
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.q_per_class
    }
}

/// One sampled task. Images stay in the dataset; entries are `(example id, episode label)`.
///
/// Node order everywhere downstream is `support` followed by `query`, each
/// sorted by label and then by draw position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<(ExampleId, usize)>,
    pub query: Vec<(ExampleId, usize)>,
    /// `class_map[label]` is the original dataset class id.
    pub class_map: Vec<String>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    pub fn node_examples(&self) -> Vec<ExampleId> {
        self.support.iter().chain(&self.query).map(|&(id, _)| id).collect()
    }

    /// Labels for every node; query labels are the held-out ground truth.
    pub fn node_labels(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|&(_, l)| l).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Checks the structural invariants against the spec the episode was drawn for.
    pub fn check(&self, spec: &EpisodeSpec) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.class_map.len() != spec.n_way {
            return fail(format!("class map has {} entries, expected {}", self.class_map.len(), spec.n_way));
        }
        if self.support.len() != spec.support_len() || self.query.len() != spec.query_len() {
            return fail("support/query sizes do not match spec".into());
        }
        let mut s_counts = vec![0usize; spec.n_way];
        let mut q_counts = vec![0usize; spec.n_way];
        for &(_, l) in &self.support {
            if l >= spec.n_way {
                return fail(format!("support label {l} out of range"));
            }
            s_counts[l] += 1;
        }
        for &(_, l) in &self.query {
            if l >= spec.n_way {
                return fail(format!("query label {l} out of range"));
            }
            q_counts[l] += 1;
        }
        if s_counts.iter().any(|&c| c != spec.k_shot) || q_counts.iter().any(|&c| c != spec.q_per_class) {
            return fail("per-label counts do not match spec".into());
        }
        let mut seen = HashSet::new();
        if !self.node_examples().into_iter().all(|id| seen.insert(id)) {
            return fail("duplicate example id in episode".into());
        }
        let distinct: HashSet<_> = self.class_map.iter().collect();
        if distinct.len() != self.class_map.len() {
            return fail("class map is not injective".into());
        }
        Ok(())
    }
}

/// Assigns episode labels `0..N` in order of first appearance.
///
/// Returns the label of every input position and the inverse map
/// (`class_map[label] = id`). Inputs are expected to be distinct.
pub fn remap_labels<T: Clone + Eq + Display>(dataset_class_ids: &[T]) -> Result<(Vec<usize>, Vec<T>)> {
    if dataset_class_ids.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "n_way must be at least 2, got {}",
            dataset_class_ids.len()
        )));
    }
    let mut class_map: Vec<T> = Vec::with_capacity(dataset_class_ids.len());
    let mut labels = Vec::with_capacity(dataset_class_ids.len());
    for id in dataset_class_ids {
        if class_map.contains(id) {
            return Err(Error::DegenerateEpisode(id.to_string()));
        }
        labels.push(class_map.len());
        class_map.push(id.clone());
    }
    Ok((labels, class_map))
}

/// Draws one episode.
///
/// Draw order: the `n_way` classes (uniformly, without replacement, from the
/// sorted class list), then for each chosen class in label order its
/// `k_shot + q_per_class` examples without replacement; the first `k_shot`
/// become support, the rest query.
pub fn sample_episode<R: Rng + ?Sized>(index: &ClassIndex, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    if index.n_classes() < spec.n_way {
        return Err(Error::TooFewClasses {
            needed: spec.n_way,
            available: index.n_classes(),
        });
    }
    if let Some((class, examples)) = index.iter().find(|(_, ex)| ex.len() < spec.per_class()) {
        return Err(Error::ClassTooSmall {
            class: class.to_string(),
            needed: spec.per_class(),
            available: examples.len(),
        });
    }
    let ids: Vec<&str> = index.class_ids().collect();
    let chosen: Vec<String> = index::sample(rng, ids.len(), spec.n_way)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect();
    let (labels, class_map) = remap_labels(&chosen)?;

    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    for (class, &label) in chosen.iter().zip(&labels) {
        let examples = index.get(class).expect("chosen from index");
        let picks = index::sample(rng, examples.len(), spec.per_class()).into_vec();
        support.extend(picks[..spec.k_shot].iter().map(|&i| (examples[i], label)));
        query.extend(picks[spec.k_shot..].iter().map(|&i| (examples[i], label)));
    }
    Ok(Episode {
        support,
        query,
        class_map,
    })
}

/// Episode stream over one seeded generator. Clone per worker with distinct seeds.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    spec: EpisodeSpec,
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(spec: EpisodeSpec, rng: ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, rng })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn next_episode(&mut self, index: &ClassIndex) -> Result<Episode> {
        sample_episode(index, &self.spec, &mut self.rng)
    }

    pub fn state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn restore(spec: EpisodeSpec, state: &RngState) -> Result<Self> {
        Self::new(spec, state.restore())
    }
}
