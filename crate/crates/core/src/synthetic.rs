//! Synthetic candidate sets with a known answer, for smoke tests and benches.
//!
//! Each post embedding is drawn from N(0, 1)^d. Its gold question is the post
//! plus N(0, sigma^2) noise; the nine distractors are independent N(0, 1)
//! draws. The gold candidate sits at a uniformly random position.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{AnnotationSet, Candidate, CandidateSet, CANDIDATES_PER_POST};
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, EmbeddingVector, Role};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub posts: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub sets: Vec<CandidateSet>,
    pub store: EmbeddingStore,
    pub annotations: HashMap<String, AnnotationSet>,
    /// Filler post text whose whitespace token count varies per post.
    pub post_texts: HashMap<String, String>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.dim == 0 || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, spec.noise).expect("noise normal");
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..spec.dim).map(|_| unit.sample(rng) as f32).collect() };

    let mut entries = Vec::with_capacity(spec.posts * (1 + 2 * CANDIDATES_PER_POST));
    let mut sets = Vec::with_capacity(spec.posts);
    let mut annotations = HashMap::new();
    let mut post_texts = HashMap::new();
    for i in 0..spec.posts {
        let post_id = format!("s{i:06}");
        let post = draw(&mut rng);
        let gold = rng.random_range(0..CANDIDATES_PER_POST);
        let mut candidates = Vec::with_capacity(CANDIDATES_PER_POST);
        for j in 0..CANDIDATES_PER_POST {
            let cid = format!("{post_id}_{j}");
            let q = if j == gold {
                post.iter().map(|p| p + noise.sample(&mut rng) as f32).collect()
            } else {
                draw(&mut rng)
            };
            let a = draw(&mut rng);
            entries.push((Role::Question.key(&cid), EmbeddingVector::new(q)?));
            entries.push((Role::Answer.key(&cid), EmbeddingVector::new(a)?));
            candidates.push(Candidate {
                cid,
                question: format!("question {j} for {post_id}?"),
                answer: format!("answer {j}"),
                label: u8::from(j == gold),
            });
        }
        let gold_cid = candidates[gold].cid.clone();
        annotations.insert(
            post_id.clone(),
            AnnotationSet {
                post_id: post_id.clone(),
                best: [gold_cid.clone()].into(),
                valid: [gold_cid].into(),
            },
        );
        let len = rng.random_range(1..=320);
        post_texts.insert(post_id.clone(), vec!["w"; len].join(" "));
        entries.push((Role::Post.key(&post_id), EmbeddingVector::new(post)?));
        sets.push(CandidateSet { post_id, candidates });
    }
    let store = EmbeddingStore::from_entries(spec.dim, entries)?.with_provenance("synthetic");
    Ok(SyntheticData {
        sets,
        store,
        annotations,
        post_texts,
    })
}
