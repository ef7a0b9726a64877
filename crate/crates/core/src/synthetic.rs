//! Seeded synthetic persona worlds for tests, fixtures and benchmarks.
//!
//! Each category owns a disjoint vocabulary whose vectors cluster around a
//! random centroid. Posts mix words from their category's vocabulary with
//! filler words that point in unrelated random directions.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::{FeatureWeight, PersonaCategory};
use crate::embedding::{EmbeddingStore, Vector};
use crate::textproc::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub categories: usize,
    pub vocab_per_category: usize,
    pub filler_words: usize,
    pub features_per_category: usize,
    pub dimension: usize,
    /// Spread of words around their centroid, relative to the centroid norm.
    pub noise: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            categories: 5,
            vocab_per_category: 20,
            filler_words: 60,
            features_per_category: 10,
            dimension: 32,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub store: EmbeddingStore,
    pub categories: Vec<PersonaCategory>,
    /// Vocabulary per category, parallel to `categories`.
    pub vocab: Vec<Vec<String>>,
    pub filler: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPost {
    pub post_id: String,
    pub tokens: TokenSequence,
    pub gold: String,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

fn to_vector(v: &[f64]) -> Vector {
    Vector::new(v.iter().map(|&x| x as f32).collect()).expect("generated vectors are finite")
}

impl SyntheticWorld {
    /// Generated names: `c{i}w{j}` for category words, `filler{j}` for filler.
    pub fn generate(spec: &WorldSpec, seed: u64) -> Self {
        let labels: Vec<(String, String)> = (0..spec.categories)
            .map(|i| (format!("persona_{i}"), format!("Persona {i}")))
            .collect();
        let vocab = (0..spec.categories)
            .map(|i| (0..spec.vocab_per_category).map(|j| format!("c{i}w{j}")).collect())
            .collect();
        let filler = (0..spec.filler_words).map(|j| format!("filler{j}")).collect();
        Self::build(spec, &labels, vocab, filler, seed)
    }

    /// Builds a world over caller-supplied `(id, name)` labels and words.
    /// `spec.categories` and `spec.vocab_per_category` are taken from the inputs.
    pub fn build(
        spec: &WorldSpec,
        labels: &[(String, String)],
        vocab: Vec<Vec<String>>,
        filler: Vec<String>,
        seed: u64,
    ) -> Self {
        assert_eq!(labels.len(), vocab.len(), "one vocabulary per label");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = spec.dimension;
        let mut store = EmbeddingStore::new(dim);
        let mut categories = Vec::with_capacity(labels.len());
        for ((id, name), words) in labels.iter().zip(&vocab) {
            let centroid = unit(gaussian(&mut rng, dim));
            for w in words {
                let noise = unit(gaussian(&mut rng, dim));
                let v: Vec<f64> = centroid
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + spec.noise * n)
                    .collect();
                store.insert(w.clone(), to_vector(&v)).expect("dimension matches");
            }
            let features = words
                .iter()
                .take(spec.features_per_category.max(1))
                .map(|w| FeatureWeight::new(w.clone(), rng.random_range(0.5..2.0)))
                .collect();
            categories.push(PersonaCategory {
                category_id: id.clone(),
                name: name.clone(),
                description: format!("synthetic persona {name}"),
                features,
                demographic_note: String::new(),
                expected_share: None,
            });
        }
        for w in &filler {
            store
                .insert(w.clone(), to_vector(&unit(gaussian(&mut rng, dim))))
                .expect("dimension matches");
        }
        Self {
            store,
            categories,
            vocab,
            filler,
        }
    }

    /// `n` posts of `len` tokens; each token comes from the post's own
    /// category vocabulary with probability `own_share`, else from filler.
    /// Gold categories are drawn uniformly.
    pub fn posts(&self, n: usize, len: usize, own_share: f64, seed: u64) -> Vec<LabeledPost> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = rng.random_range(0..self.categories.len());
                let tokens: Vec<String> = (0..len)
                    .map(|_| {
                        let pool = if self.filler.is_empty() || rng.random_bool(own_share) {
                            &self.vocab[c]
                        } else {
                            &self.filler
                        };
                        pool.choose(&mut rng).expect("non-empty vocabulary").clone()
                    })
                    .collect();
                LabeledPost {
                    post_id: format!("s{i:06}"),
                    tokens: TokenSequence::new(tokens),
                    gold: self.categories[c].category_id.clone(),
                }
            })
            .collect()
    }
}
