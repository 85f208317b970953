//! Precision@k against the Best/Valid gold sets, and the post-length
//! breakdown of rank-1 hits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{count_tokens, AnnotationSet, Regime};
use crate::error::{Error, Result};
use crate::ranker::RankedList;

/// Largest cutoff accepted by [`precision_at_k`].
pub const MAX_K: usize = 10;
/// Cutoffs reported in [`PrecisionReport`].
pub const REPORTED_K: std::ops::RangeInclusive<usize> = 1..=5;

/// How posts with an empty gold set enter the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyGold {
    /// Leave them out of the mean and count them separately.
    #[default]
    Skip,
    /// Average them in as zero precision.
    Zero,
}

impl FromStr for EmptyGold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(Self::Skip),
            "zero" => Ok(Self::Zero),
            other => Err(Error::InvalidArgument(format!("unknown empty-gold policy {other:?}"))),
        }
    }
}

impl fmt::Display for EmptyGold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Skip => "skip",
            Self::Zero => "zero",
        })
    }
}

/// `|top-k ∩ gold| / k`
pub fn precision_at_k(ranking: &RankedList, gold: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 || k > MAX_K {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={MAX_K}")));
    }
    let hits = ranking.top(k).filter(|cid| gold.contains(*cid)).count();
    Ok(hits as f64 / k as f64)
}

/// Mean P@1..P@5 over posts, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub model: String,
    pub regime: Regime,
    pub p_at: BTreeMap<String, f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl PrecisionReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.p_at.get(&k.to_string()).copied()
    }
}

type Paired<'a> = Vec<(&'a RankedList, &'a BTreeSet<String>)>;

/// Rankings paired with their gold sets, sorted by post id so that
/// aggregation does not depend on input order.
fn paired<'a>(
    rankings: &'a [RankedList],
    annotations: &'a HashMap<String, AnnotationSet>,
    regime: Regime,
    policy: EmptyGold,
) -> Result<(Paired<'a>, usize)> {
    let mut pairs = Vec::with_capacity(rankings.len());
    let mut skipped = 0;
    for r in rankings {
        let ann = annotations
            .get(&r.post_id)
            .ok_or_else(|| Error::Validation(format!("no annotation for ranked post {}", r.post_id)))?;
        let gold = ann.gold(regime);
        if gold.is_empty() && policy == EmptyGold::Skip {
            skipped += 1;
            continue;
        }
        pairs.push((r, gold));
    }
    pairs.sort_by(|a, b| a.0.post_id.cmp(&b.0.post_id));
    if pairs.windows(2).any(|w| w[0].0.post_id == w[1].0.post_id) {
        return Err(Error::Validation("a post is ranked more than once".into()));
    }
    Ok((pairs, skipped))
}

pub fn evaluate(
    rankings: &[RankedList],
    annotations: &HashMap<String, AnnotationSet>,
    regime: Regime,
    policy: EmptyGold,
    model: &str,
) -> Result<PrecisionReport> {
    let (pairs, skipped) = paired(rankings, annotations, regime, policy)?;
    let mut p_at = BTreeMap::new();
    for k in REPORTED_K {
        let mut sum = 0.0;
        for (r, gold) in &pairs {
            sum += precision_at_k(r, gold, k)?;
        }
        let mean = if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 };
        p_at.insert(k.to_string(), mean * 100.0);
    }
    Ok(PrecisionReport {
        model: model.to_string(),
        regime,
        p_at,
        evaluated: pairs.len(),
        skipped,
    })
}

/// Inclusive token-length ranges; the last bucket is open-ended.
pub const BUCKETS: [(usize, Option<usize>, &str); 6] = [
    (1, Some(40), "1-40"),
    (41, Some(80), "41-80"),
    (81, Some(120), "81-120"),
    (121, Some(160), "121-160"),
    (161, Some(200), "161-200"),
    (201, None, "201-300+"),
];

/// Index into [`BUCKETS`]; zero-length posts fall in the first bucket.
pub fn bucket_index(tokens: usize) -> usize {
    BUCKETS
        .iter()
        .position(|(_, hi, _)| hi.is_none_or(|hi| tokens <= hi))
        .expect("last bucket is open")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub post_count: usize,
    pub correct_at_1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketReport {
    pub model: String,
    pub regime: Regime,
    /// How post length was measured.
    pub length_unit: String,
    pub buckets: Vec<Bucket>,
    pub evaluated: usize,
}

/// Counts, per post-length bucket, the posts whose rank-1 candidate is gold.
pub fn bucket_by_length(
    rankings: &[RankedList],
    annotations: &HashMap<String, AnnotationSet>,
    post_texts: &HashMap<String, String>,
    regime: Regime,
    policy: EmptyGold,
    model: &str,
) -> Result<BucketReport> {
    let (pairs, _) = paired(rankings, annotations, regime, policy)?;
    let mut buckets: Vec<Bucket> = BUCKETS
        .iter()
        .map(|(_, _, label)| Bucket {
            label: label.to_string(),
            post_count: 0,
            correct_at_1: 0,
        })
        .collect();
    for (r, gold) in &pairs {
        let text = post_texts
            .get(&r.post_id)
            .ok_or_else(|| Error::Validation(format!("no post text for {}", r.post_id)))?;
        let b = &mut buckets[bucket_index(count_tokens(text))];
        b.post_count += 1;
        if r.top(1).next().is_some_and(|cid| gold.contains(cid)) {
            b.correct_at_1 += 1;
        }
    }
    Ok(BucketReport {
        model: model.to_string(),
        regime,
        length_unit: "whitespace_tokens".into(),
        buckets,
        evaluated: pairs.len(),
    })
}

/// One row of a bucket CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub total: usize,
    pub correct: usize,
    pub model: String,
    pub regime: Regime,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn bucket_csv_name(regime: Regime) -> String {
    format!("buckets_{regime}.csv")
}

/// Writes `metrics.jsonl` (one line per precision report) and one
/// `buckets_<regime>.csv` per regime present in `buckets`. Returns the paths
/// written.
pub fn emit_report(precision: &[PrecisionReport], buckets: &[BucketReport], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if precision.is_empty() && buckets.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    if !precision.is_empty() {
        let path = dir.join(METRICS_FILE);
        crate::data::write_jsonl(&path, precision)?;
        written.push(path);
    }

    let mut by_regime: BTreeMap<Regime, Vec<&BucketReport>> = BTreeMap::new();
    for b in buckets {
        by_regime.entry(b.regime).or_default().push(b);
    }
    for (regime, reports) in by_regime {
        let path = dir.join(bucket_csv_name(regime));
        let io_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(io_err)?;
        for report in reports {
            for b in &report.buckets {
                w.serialize(BucketRow {
                    bucket: b.label.clone(),
                    total: b.post_count,
                    correct: b.correct_at_1,
                    model: report.model.clone(),
                    regime,
                })
                .map_err(io_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<PrecisionReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_bucket_csv(path: impl AsRef<Path>) -> Result<Vec<BucketRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::rank;
    use proptest::prelude::*;

    fn ranked(post: &str, order: &[&str]) -> RankedList {
        let n = order.len();
        let scores: Vec<(String, f64)> = order
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), (n - i) as f64 / (n + 1) as f64))
            .collect();
        rank(post, &scores).unwrap()
    }

    fn ten(post: &str) -> RankedList {
        let ids: Vec<String> = (0..10).map(|j| format!("c{j}")).collect();
        ranked(post, &ids.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn gold(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn ann(post: &str, best: &[&str], valid: &[&str]) -> (String, AnnotationSet) {
        (
            post.to_string(),
            AnnotationSet {
                post_id: post.into(),
                best: gold(best),
                valid: gold(valid),
            },
        )
    }

    #[test]
    fn precision_examples() {
        let r = ten("p");
        assert_eq!(precision_at_k(&r, &gold(&["c0"]), 1).unwrap(), 1.0);
        // c2 at rank 3, c7 at rank 8; place c7 at rank 9 explicitly
        let r2 = ranked("p", &["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c8", "c7", "c9"]);
        assert_eq!(precision_at_k(&r2, &gold(&["c2", "c7"]), 5).unwrap(), 0.2);
        assert_eq!(precision_at_k(&r, &BTreeSet::new(), 3).unwrap(), 0.0);
        assert!(precision_at_k(&r, &gold(&["c0"]), 0).is_err());
        assert!(precision_at_k(&r, &gold(&["c0"]), 11).is_err());
    }

    #[test]
    fn all_gold_is_perfect() {
        let r = ten("p");
        let all: Vec<String> = (0..10).map(|j| format!("c{j}")).collect();
        let g: BTreeSet<String> = all.into_iter().collect();
        for k in 1..=10 {
            assert_eq!(precision_at_k(&r, &g, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn two_post_average() {
        let rankings = vec![ten("a"), ten("b")];
        let anns: HashMap<_, _> = [ann("a", &["c0"], &["c0"]), ann("b", &["c5"], &["c5"])].into_iter().collect();
        let r = evaluate(&rankings, &anns, Regime::Best, EmptyGold::Skip, "m").unwrap();
        assert_eq!(r.at(1), Some(50.0));
        assert_eq!(r.evaluated, 2);
    }

    #[test]
    fn empty_gold_policies() {
        let rankings = vec![ten("a"), ten("b")];
        let anns: HashMap<_, _> = [ann("a", &["c0"], &["c0"]), ann("b", &["c1"], &[])].into_iter().collect();
        let skip = evaluate(&rankings, &anns, Regime::Valid, EmptyGold::Skip, "m").unwrap();
        assert_eq!((skip.evaluated, skip.skipped, skip.at(1)), (1, 1, Some(100.0)));
        let zero = evaluate(&rankings, &anns, Regime::Valid, EmptyGold::Zero, "m").unwrap();
        assert_eq!((zero.evaluated, zero.skipped, zero.at(1)), (2, 0, Some(50.0)));
    }

    #[test]
    fn missing_annotation_is_an_error() {
        let anns: HashMap<_, _> = [ann("a", &["c0"], &["c0"])].into_iter().collect();
        assert!(evaluate(&[ten("zz")], &anns, Regime::Best, EmptyGold::Skip, "m").is_err());
    }

    #[test]
    fn bucket_assignment() {
        assert_eq!(bucket_index(0), 0);
        assert_eq!(bucket_index(40), 0);
        assert_eq!(bucket_index(41), 1);
        assert_eq!(bucket_index(200), 4);
        assert_eq!(bucket_index(201), 5);
        assert_eq!(bucket_index(5000), 5);

        // lengths 10, 100, 250 with gold at rank 1, 2, 1
        let rankings = vec![ten("a"), ten("b"), ten("c")];
        let anns: HashMap<_, _> = [
            ann("a", &["c0"], &["c0"]),
            ann("b", &["c1"], &["c1"]),
            ann("c", &["c0"], &["c0"]),
        ]
        .into_iter()
        .collect();
        let words = |n: usize| vec!["w"; n].join(" ");
        let texts: HashMap<_, _> = [("a", 10), ("b", 100), ("c", 250)]
            .into_iter()
            .map(|(p, n)| (p.to_string(), words(n)))
            .collect();
        let rep = bucket_by_length(&rankings, &anns, &texts, Regime::Valid, EmptyGold::Skip, "m").unwrap();
        let counts: Vec<(usize, usize)> = rep.buckets.iter().map(|b| (b.post_count, b.correct_at_1)).collect();
        assert_eq!(counts, vec![(1, 1), (0, 0), (1, 0), (0, 0), (0, 0), (1, 1)]);
        assert_eq!(rep.buckets.iter().map(|b| b.post_count).sum::<usize>(), rep.evaluated);
    }

    #[test]
    fn report_files_round_trip() {
        let rankings = vec![ten("a"), ten("b")];
        let anns: HashMap<_, _> = [ann("a", &["c0"], &["c0", "c3"]), ann("b", &["c2"], &["c2"])].into_iter().collect();
        let texts: HashMap<_, _> = [("a".to_string(), "x y".to_string()), ("b".to_string(), "z".to_string())].into();
        let mut prec = Vec::new();
        let mut buckets = Vec::new();
        for regime in Regime::ALL {
            prec.push(evaluate(&rankings, &anns, regime, EmptyGold::Skip, "SBERT-PQ").unwrap());
            buckets.push(bucket_by_length(&rankings, &anns, &texts, regime, EmptyGold::Skip, "SBERT-PQ").unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&prec, &buckets, dir.path()).unwrap();
        assert_eq!(written.len(), 3);
        assert_eq!(read_metrics(dir.path().join(METRICS_FILE)).unwrap(), prec);
        for report in &buckets {
            let rows = read_bucket_csv(dir.path().join(bucket_csv_name(report.regime))).unwrap();
            let back: Vec<(String, usize, usize)> = rows.into_iter().map(|r| (r.bucket, r.total, r.correct)).collect();
            let mem: Vec<(String, usize, usize)> = report
                .buckets
                .iter()
                .map(|b| (b.label.clone(), b.post_count, b.correct_at_1))
                .collect();
            assert_eq!(back, mem);
        }
        let header = fs::read_to_string(dir.path().join("buckets_best.csv")).unwrap();
        assert!(header.starts_with("bucket,total,correct,model,regime\n"));
        assert!(emit_report(&[], &[], dir.path()).unwrap_err().to_string().contains("nothing to report"));
    }

    fn brute_force(order: &[usize], gold: &[bool], k: usize) -> f64 {
        let mut hits = 0;
        for (pos, cand) in order.iter().enumerate() {
            if pos < k && gold[*cand] {
                hits += 1;
            }
        }
        hits as f64 / k as f64
    }

    proptest! {
        #[test]
        fn matches_brute_force(perm in Just((0..10).collect::<Vec<usize>>()).prop_shuffle(), gold_mask in proptest::collection::vec(any::<bool>(), 10), k in 1usize..=10) {
            let names: Vec<String> = perm.iter().map(|c| format!("c{c}")).collect();
            let r = ranked("p", &names.iter().map(String::as_str).collect::<Vec<_>>());
            let g: BTreeSet<String> = (0..10).filter(|c| gold_mask[*c]).map(|c| format!("c{c}")).collect();
            prop_assert_eq!(precision_at_k(&r, &g, k).unwrap(), brute_force(&perm, &gold_mask, k));
        }

        #[test]
        fn evaluate_ignores_post_order(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rankings: Vec<RankedList> = (0..6).map(|i| ten(&format!("p{i}"))).collect();
            let anns: HashMap<_, _> = (0..6).map(|i| ann(&format!("p{i}"), &[&format!("c{}", i % 4)], &["c1", "c2"])).collect();
            let a = evaluate(&rankings, &anns, Regime::Best, EmptyGold::Skip, "m").unwrap();
            rankings.shuffle(&mut rng);
            let b = evaluate(&rankings, &anns, Regime::Best, EmptyGold::Skip, "m").unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
