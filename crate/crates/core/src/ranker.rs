//! Feature assembly, candidate scoring and deterministic ranking.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, CandidateSet};
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::store::{EmbeddingLookup, Role};

/// Which texts feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Post and question.
    Pq,
    /// Post, question and the question's answer.
    Pqa,
}

impl Variant {
    pub fn texts(self) -> usize {
        match self {
            Variant::Pq => 2,
            Variant::Pqa => 3,
        }
    }

    pub fn uses_answer(self) -> bool {
        self == Variant::Pqa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Base,
    Large,
}

impl Encoder {
    pub fn dim(self) -> usize {
        match self {
            Encoder::Base => 768,
            Encoder::Large => 1024,
        }
    }
}

/// A named model variant: `pq`, `pqa`, `large-pq` or `large-pqa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelVariant {
    pub variant: Variant,
    pub encoder: Encoder,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            variant: Variant::Pq,
            encoder: Encoder::Base,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.encoder {
            Encoder::Base => "",
            Encoder::Large => "large-",
        };
        let v = match self.variant {
            Variant::Pq => "pq",
            Variant::Pqa => "pqa",
        };
        write!(f, "{prefix}{v}")
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (encoder, rest) = match s.strip_prefix("large-") {
            Some(rest) => (Encoder::Large, rest),
            None => (Encoder::Base, s),
        };
        let variant = match rest {
            "pq" => Variant::Pq,
            "pqa" => Variant::Pqa,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown variant {s:?} (expected pq, pqa, large-pq or large-pqa)"
                )))
            }
        };
        Ok(Self { variant, encoder })
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.to_string()
    }
}

/// Input layout for the classifier: `[P ‖ Q]` or `[P ‖ Q ‖ A]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub variant: Variant,
    pub encoder_dim: usize,
}

impl FeatureSpec {
    pub fn new(variant: Variant, encoder_dim: usize) -> Result<Self> {
        if encoder_dim == 0 {
            return Err(Error::InvalidArgument("encoder dim must be positive".into()));
        }
        Ok(Self { variant, encoder_dim })
    }

    pub fn for_model(model: ModelVariant) -> Self {
        Self {
            variant: model.variant,
            encoder_dim: model.encoder.dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.variant.texts() * self.encoder_dim
    }
}

/// Concatenates embeddings in the fixed order post, question, answer.
pub fn assemble_feature(spec: &FeatureSpec, post: &[f32], question: &[f32], answer: Option<&[f32]>) -> Result<Vec<f32>> {
    match (spec.variant, answer) {
        (Variant::Pq, Some(_)) => {
            return Err(Error::InvalidArgument("PQ features take no answer embedding".into()))
        }
        (Variant::Pqa, None) => {
            return Err(Error::InvalidArgument("PQA features need an answer embedding".into()))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(spec.input_dim());
    for (name, v) in [("post", Some(post)), ("question", Some(question)), ("answer", answer)] {
        let Some(v) = v else { continue };
        if v.len() != spec.encoder_dim {
            return Err(Error::dim(format!("{name} embedding"), spec.encoder_dim, v.len()));
        }
        out.extend_from_slice(v);
    }
    Ok(out)
}

/// Looks up the embeddings one candidate needs and concatenates them.
/// Answer embeddings are only read for PQA.
pub fn candidate_feature<S: EmbeddingLookup + ?Sized>(
    spec: &FeatureSpec,
    store: &S,
    post_id: &str,
    candidate: &Candidate,
) -> Result<Vec<f32>> {
    let post = store.lookup(&Role::Post.key(post_id))?;
    let question = store.lookup(&Role::Question.key(&candidate.cid))?;
    let answer = if spec.variant.uses_answer() {
        Some(store.lookup(&Role::Answer.key(&candidate.cid))?)
    } else {
        None
    };
    assemble_feature(spec, post, question, answer)
}

/// Feature rows for all candidates of `set`, widened to f64.
pub fn set_features<S: EmbeddingLookup + ?Sized>(spec: &FeatureSpec, store: &S, set: &CandidateSet) -> Result<Array2<f64>> {
    if store.dim() != spec.encoder_dim {
        return Err(Error::dim("embedding store", spec.encoder_dim, store.dim()));
    }
    let mut x = Array2::zeros((set.candidates.len(), spec.input_dim()));
    for (mut row, c) in x.rows_mut().into_iter().zip(&set.candidates) {
        let f = candidate_feature(spec, store, &set.post_id, c)?;
        row.iter_mut().zip(f).for_each(|(r, v)| *r = f64::from(v));
    }
    Ok(x)
}

/// Class-1 probability for every candidate, in input order, dropout off.
pub fn score_candidates<S: EmbeddingLookup + ?Sized>(
    model: &MlpModel,
    set: &CandidateSet,
    store: &S,
    spec: &FeatureSpec,
) -> Result<Vec<(String, f64)>> {
    if model.input_dim() != spec.input_dim() {
        return Err(Error::dim("model input", spec.input_dim(), model.input_dim()));
    }
    let x = set_features(spec, store, set)?;
    let probs = model.predict(x.view())?;
    Ok(set
        .candidates
        .iter()
        .zip(probs.rows())
        .map(|(c, p)| (c.cid.clone(), p[1]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub cid: String,
    pub score: f64,
    #[serde(skip)]
    pub original_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub post_id: String,
    #[serde(rename = "ranking")]
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn top(&self, k: usize) -> impl Iterator<Item = &str> {
        self.entries.iter().take(k).map(|e| e.cid.as_str())
    }
}

/// Stable descending sort by score; exact ties keep the original candidate order.
pub fn rank(post_id: impl Into<String>, scores: &[(String, f64)]) -> Result<RankedList> {
    if let Some((cid, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s} for candidate {cid}")));
    }
    let mut entries: Vec<RankedEntry> = scores
        .iter()
        .enumerate()
        .map(|(i, (cid, score))| RankedEntry {
            cid: cid.clone(),
            score: *score,
            original_index: i,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.original_index.cmp(&b.original_index)));
    Ok(RankedList {
        post_id: post_id.into(),
        entries,
    })
}

/// Scores and ranks every set; parallel over posts, output in input order.
pub fn rank_all<S: EmbeddingLookup + Sync + ?Sized>(
    model: &MlpModel,
    sets: &[CandidateSet],
    store: &S,
    spec: &FeatureSpec,
) -> Result<Vec<RankedList>> {
    sets.par_iter()
        .map(|set| rank(set.post_id.clone(), &score_candidates(model, set, store, spec)?))
        .collect()
}

pub fn write_rankings(path: impl AsRef<Path>, rankings: &[RankedList]) -> Result<()> {
    crate::data::write_jsonl(path.as_ref(), rankings)
}

/// Reads a ranked-output file, checking each ranking against its candidate
/// set and restoring the original candidate positions.
pub fn read_rankings(path: impl AsRef<Path>, sets: &[CandidateSet]) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let by_post: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.post_id.as_str(), s)).collect();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut list: RankedList = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let set = by_post.get(list.post_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("{}:{}: unknown post {}", path.display(), i + 1, list.post_id))
        })?;
        let mut seen = vec![false; set.candidates.len()];
        for e in &mut list.entries {
            let pos = set.candidates.iter().position(|c| c.cid == e.cid).ok_or_else(|| {
                Error::Validation(format!("{}:{}: unknown candidate {}", path.display(), i + 1, e.cid))
            })?;
            if std::mem::replace(&mut seen[pos], true) {
                return Err(Error::Validation(format!("{}:{}: candidate {} repeated", path.display(), i + 1, e.cid)));
            }
            e.original_index = pos;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation(format!(
                "{}:{}: ranking for {} is not a permutation of its candidates",
                path.display(),
                i + 1,
                list.post_id
            )));
        }
        out.push(list);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{EmbeddingStore, EmbeddingVector};
    use proptest::prelude::*;
    use std::sync::Mutex;

    fn scores(vals: &[f64]) -> Vec<(String, f64)> {
        vals.iter().enumerate().map(|(i, s)| (format!("c{i}"), *s)).collect()
    }

    fn order(list: &RankedList) -> Vec<usize> {
        list.entries.iter().map(|e| e.original_index).collect()
    }

    #[test]
    fn basis_vectors_land_in_place() {
        let spec = FeatureSpec::for_model(ModelVariant::default());
        let mut p = vec![0f32; 768];
        let mut q = vec![0f32; 768];
        p[0] = 1.0;
        q[1] = 1.0;
        let f = assemble_feature(&spec, &p, &q, None).unwrap();
        assert_eq!(f.len(), 1536);
        let ones: Vec<usize> = f.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![0, 768 + 1]);
    }

    #[test]
    fn variant_input_dims() {
        let dims: Vec<usize> = ["pq", "pqa", "large-pq", "large-pqa"]
            .iter()
            .map(|s| FeatureSpec::for_model(s.parse().unwrap()).input_dim())
            .collect();
        assert_eq!(dims, vec![1536, 2304, 2048, 3072]);
        assert!("medium-pq".parse::<ModelVariant>().is_err());
        assert_eq!("large-pqa".parse::<ModelVariant>().unwrap().to_string(), "large-pqa");
    }

    #[test]
    fn answer_contract() {
        let pq = FeatureSpec::new(Variant::Pq, 2).unwrap();
        let pqa = FeatureSpec::new(Variant::Pqa, 2).unwrap();
        let v = [1.0f32, 2.0];
        assert!(assemble_feature(&pq, &v, &v, Some(&v)).is_err());
        assert!(assemble_feature(&pqa, &v, &v, None).is_err());
        assert_eq!(assemble_feature(&pqa, &v, &v, Some(&[3.0, 4.0])).unwrap(), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(assemble_feature(&pq, &v, &[1.0], None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hand_sorted_toy() {
        assert_eq!(order(&rank("p", &scores(&[0.1, 0.9, 0.5])).unwrap()), vec![1, 2, 0]);
    }

    #[test]
    fn total_tie_keeps_order() {
        assert_eq!(order(&rank("p", &scores(&[0.5; 10])).unwrap()), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn perturbation_moves_only_within_tie_group() {
        let base = [0.9, 0.4, 0.4, 0.4, 0.2];
        let mut bumped = base;
        bumped[3] += 1e-9;
        assert_eq!(order(&rank("p", &scores(&base)).unwrap()), vec![0, 1, 2, 3, 4]);
        assert_eq!(order(&rank("p", &scores(&bumped)).unwrap()), vec![0, 3, 1, 2, 4]);
    }

    #[test]
    fn non_finite_score_rejected() {
        assert!(rank("p", &scores(&[0.1, f64::NAN])).is_err());
    }

    struct Recording<'a> {
        inner: &'a EmbeddingStore,
        seen: Mutex<Vec<String>>,
    }

    impl EmbeddingLookup for Recording<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }

        fn lookup(&self, key: &str) -> Result<&[f32]> {
            self.seen.lock().unwrap().push(key.to_string());
            self.inner.lookup(key)
        }
    }

    fn fixture(dim: usize) -> (CandidateSet, EmbeddingStore) {
        let set = CandidateSet {
            post_id: "p".into(),
            candidates: (0..10)
                .map(|j| Candidate {
                    cid: format!("c{j}"),
                    question: "q".into(),
                    answer: "a".into(),
                    label: u8::from(j == 0),
                })
                .collect(),
        };
        let mut entries = vec![(Role::Post.key("p"), EmbeddingVector::new(vec![1.0; dim]).unwrap())];
        for c in &set.candidates {
            for role in [Role::Question, Role::Answer] {
                let v = (0..dim).map(|i| (i + c.cid.len()) as f32 * 0.1).collect();
                entries.push((role.key(&c.cid), EmbeddingVector::new(v).unwrap()));
            }
        }
        (set, EmbeddingStore::from_entries(dim, entries).unwrap())
    }

    #[test]
    fn pq_never_reads_answers() {
        let (set, store) = fixture(3);
        let rec = Recording {
            inner: &store,
            seen: Mutex::new(Vec::new()),
        };
        let spec = FeatureSpec::new(Variant::Pq, 3).unwrap();
        let model = MlpModel::init(6, &[4], 0.4, 0).unwrap();
        score_candidates(&model, &set, &rec, &spec).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|k| !k.starts_with("A:")));

        let rec = Recording {
            inner: &store,
            seen: Mutex::new(Vec::new()),
        };
        let spec = FeatureSpec::new(Variant::Pqa, 3).unwrap();
        let model = MlpModel::init(9, &[4], 0.4, 0).unwrap();
        score_candidates(&model, &set, &rec, &spec).unwrap();
        // all N·3 keys touched
        let seen: std::collections::HashSet<_> = rec.seen.into_inner().unwrap().into_iter().collect();
        assert_eq!(seen.len(), 1 + 2 * 10);
    }

    #[test]
    fn zero_model_scores_half_and_is_repeatable() {
        let (set, store) = fixture(3);
        let spec = FeatureSpec::new(Variant::Pq, 3).unwrap();
        let model = MlpModel::zeros(6, &[4, 2], 0.4).unwrap();
        let s = score_candidates(&model, &set, &store, &spec).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|(_, v)| *v == 0.5));
        assert_eq!(s.iter().map(|(c, _)| c.as_str()).collect::<Vec<_>>()[3], "c3");

        let trained = MlpModel::init(6, &[4, 2], 0.4, 9).unwrap();
        let a = score_candidates(&trained, &set, &store, &spec).unwrap();
        let b = score_candidates(&trained, &set, &store, &spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.1.to_bits() == y.1.to_bits()));
    }

    #[test]
    fn missing_embedding_surfaces() {
        let (mut set, store) = fixture(3);
        set.candidates[4].cid = "nope".into();
        let spec = FeatureSpec::new(Variant::Pq, 3).unwrap();
        let model = MlpModel::zeros(6, &[4], 0.0).unwrap();
        let err = score_candidates(&model, &set, &store, &spec).unwrap_err();
        assert!(matches!(err, Error::MissingKey { .. }));
    }

    #[test]
    fn rankings_file_round_trip() {
        let (set, store) = fixture(3);
        let spec = FeatureSpec::new(Variant::Pq, 3).unwrap();
        let model = MlpModel::init(6, &[4], 0.0, 1).unwrap();
        let lists = rank_all(&model, std::slice::from_ref(&set), &store, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_rankings(&p, &lists).unwrap();
        assert_eq!(read_rankings(&p, &[set]).unwrap(), lists);
    }

    proptest! {
        #[test]
        fn ranking_is_a_permutation_and_monotone_invariant(vals in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let a = rank("p", &scores(&vals)).unwrap();
            let mut idx = order(&a);
            idx.sort();
            prop_assert_eq!(idx, (0..vals.len()).collect::<Vec<_>>());
            prop_assert!(a.entries.windows(2).all(|w| w[0].score >= w[1].score));
            let transformed: Vec<f64> = vals.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let b = rank("p", &scores(&transformed)).unwrap();
            prop_assert_eq!(order(&a), order(&b));
        }
    }
}
