//! Dataset model: (post, question, answer) triples, ten-candidate sets and
//! aggregated Best/Valid annotations, all stored as JSONL.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// Candidates per post.
pub const CANDIDATES_PER_POST: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleRecord {
    pub post_id: String,
    pub post: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub cid: String,
    pub question: String,
    pub answer: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub post_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn contains(&self, cid: &str) -> bool {
        self.candidates.iter().any(|c| c.cid == cid)
    }

    /// Candidate ids carrying label 1.
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .filter(|c| c.label == 1)
            .map(|c| c.cid.as_str())
    }
}

/// Aggregated gold sets for one test post. `best` is the union of the
/// annotators' single best picks, `valid` the intersection of their valid
/// picks; both arrive already aggregated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub post_id: String,
    pub best: BTreeSet<String>,
    pub valid: BTreeSet<String>,
}

impl AnnotationSet {
    pub fn gold(&self, regime: Regime) -> &BTreeSet<String> {
        match regime {
            Regime::Best => &self.best,
            Regime::Valid => &self.valid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Best,
    Valid,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Best, Regime::Valid];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Best => "best",
            Regime::Valid => "valid",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Regime::Best),
            "valid" => Ok(Regime::Valid),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Train and validation sets carry exactly one positive: the post's own question.
    pub fn requires_single_positive(self) -> bool {
        matches!(self, Split::Train | Split::Validation)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "tune" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Option<Split>,
    pub kind: String,
    pub record_count: usize,
    pub file_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_gold_posts: Vec<String>,
}

/// Parsed records plus the manifest describing the file they came from.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub manifest: SplitManifest,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<(usize, T)>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "byte-order mark not allowed".into(),
        });
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        let line = 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: "invalid UTF-8".into(),
        }
    })?;

    let mut out = Vec::new();
    for (idx, line) in text.split('\n').enumerate() {
        let lineno = idx + 1;
        if line.ends_with('\r') {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "CRLF line ending".into(),
            });
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        out.push((lineno, record));
    }
    Ok((out, digest))
}

/// Writes one JSON object per line, LF-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("in-memory serialization");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn invalid(path: &Path, line: usize, message: impl fmt::Display) -> Error {
    Error::Validation(format!("{}:{line}: {message}", path.display()))
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<Loaded<TripleRecord>> {
    let path = path.as_ref();
    let (rows, digest) = read_jsonl::<TripleRecord>(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut records = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if r.post_id.is_empty() {
            return Err(invalid(path, line, "empty post_id"));
        }
        if r.post.is_empty() {
            return Err(invalid(path, line, format!("post {} has empty text", r.post_id)));
        }
        if r.question.is_empty() {
            return Err(invalid(path, line, format!("post {} has empty question", r.post_id)));
        }
        if !seen.insert(r.post_id.clone()) {
            return Err(invalid(path, line, format!("duplicate post_id {}", r.post_id)));
        }
        records.push(r);
    }
    let manifest = SplitManifest {
        split: None,
        kind: "triples".into(),
        record_count: records.len(),
        file_digest: digest,
        empty_gold_posts: Vec::new(),
    };
    Ok(Loaded { records, manifest })
}

fn validate_set(set: &CandidateSet, split: Split) -> std::result::Result<(), String> {
    if set.post_id.is_empty() {
        return Err("empty post_id".into());
    }
    if set.candidates.len() != CANDIDATES_PER_POST {
        return Err(format!(
            "post {}: expected {CANDIDATES_PER_POST} candidates, found {}",
            set.post_id,
            set.candidates.len()
        ));
    }
    let mut cids = HashSet::new();
    for c in &set.candidates {
        if c.cid.is_empty() {
            return Err(format!("post {}: empty cid", set.post_id));
        }
        if !cids.insert(c.cid.as_str()) {
            return Err(format!("post {}: duplicate cid {}", set.post_id, c.cid));
        }
        if c.label > 1 {
            return Err(format!("post {}: cid {} has label {}", set.post_id, c.cid, c.label));
        }
        if c.question.is_empty() {
            return Err(format!("post {}: cid {} has empty question", set.post_id, c.cid));
        }
    }
    if split.requires_single_positive() {
        let positives = set.positives().count();
        if positives != 1 {
            return Err(format!(
                "post {}: {split} split needs exactly one label-1 candidate, found {positives}",
                set.post_id
            ));
        }
    }
    Ok(())
}

pub fn load_candidate_sets(path: impl AsRef<Path>, split: Split) -> Result<Loaded<CandidateSet>> {
    let path = path.as_ref();
    let (rows, digest) = read_jsonl::<CandidateSet>(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut records = Vec::with_capacity(rows.len());
    for (line, set) in rows {
        validate_set(&set, split).map_err(|m| invalid(path, line, m))?;
        if !seen.insert(set.post_id.clone()) {
            return Err(invalid(path, line, format!("duplicate post_id {}", set.post_id)));
        }
        records.push(set);
    }
    let manifest = SplitManifest {
        split: Some(split),
        kind: "candidates".into(),
        record_count: records.len(),
        file_digest: digest,
        empty_gold_posts: Vec::new(),
    };
    Ok(Loaded { records, manifest })
}

/// Loads aggregated annotations keyed by post id. Posts whose Valid
/// intersection (or Best union) is empty are accepted and listed in the
/// manifest. Membership against candidate lists is checked by
/// [`cross_validate`].
pub fn load_annotations(path: impl AsRef<Path>) -> Result<(HashMap<String, AnnotationSet>, SplitManifest)> {
    let path = path.as_ref();
    let (rows, digest) = read_jsonl::<AnnotationSet>(path)?;
    let mut map = HashMap::with_capacity(rows.len());
    let mut empty = Vec::new();
    for (line, ann) in rows {
        if ann.post_id.is_empty() {
            return Err(invalid(path, line, "empty post_id"));
        }
        if ann.best.is_empty() || ann.valid.is_empty() {
            empty.push(ann.post_id.clone());
        }
        if map.contains_key(&ann.post_id) {
            return Err(invalid(path, line, format!("duplicate post_id {}", ann.post_id)));
        }
        map.insert(ann.post_id.clone(), ann);
    }
    let manifest = SplitManifest {
        split: Some(Split::Test),
        kind: "annotations".into(),
        record_count: map.len(),
        file_digest: digest,
        empty_gold_posts: empty,
    };
    Ok((map, manifest))
}

/// Checks that every annotated post exists among `sets` and that every gold
/// id names one of that post's candidates.
pub fn cross_validate(annotations: &HashMap<String, AnnotationSet>, sets: &[CandidateSet]) -> Result<()> {
    let by_post: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.post_id.as_str(), s)).collect();
    let mut ids: Vec<&String> = annotations.keys().collect();
    ids.sort();
    for id in ids {
        let ann = &annotations[id];
        let set = by_post
            .get(id.as_str())
            .ok_or_else(|| Error::Validation(format!("annotated post {id} has no candidate set")))?;
        for (name, gold) in [("best", &ann.best), ("valid", &ann.valid)] {
            if let Some(bad) = gold.iter().find(|cid| !set.contains(cid)) {
                return Err(Error::Validation(format!(
                    "post {id}: {name} gold id {bad} is not among its candidates"
                )));
            }
        }
    }
    Ok(())
}

/// Post length used for the error-analysis buckets: whitespace-delimited tokens.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Converts the original tab-separated release into JSONL records.
///
/// `post_data` rows are `postid<TAB>title<TAB>post`; `qa_data` rows are
/// `postid<TAB>q1..q10<TAB>a1..a10`, where `q1`/`a1` belong to the post itself.
/// A header row starting with `postid` is skipped. When `ids` is given only
/// those posts are emitted, in `ids` order; otherwise `qa_data` order is used.
pub fn convert_tsv(
    post_data: &str,
    qa_data: &str,
    ids: Option<&[String]>,
) -> Result<(Vec<TripleRecord>, Vec<CandidateSet>)> {
    fn data_rows(text: &str) -> Vec<(usize, Vec<&str>)> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with("postid"))
            .map(|(i, l)| (i + 1, l.split('\t').collect::<Vec<_>>()))
            .collect()
    }

    let mut posts = HashMap::new();
    for (line, cols) in data_rows(post_data) {
        if cols.len() != 3 {
            return Err(Error::Validation(format!(
                "post_data line {line}: expected 3 columns, found {}",
                cols.len()
            )));
        }
        let text = format!("{} {}", cols[1].trim(), cols[2].trim());
        posts.insert(cols[0].to_string(), text.trim().to_string());
    }

    let mut qa = Vec::new();
    for (line, cols) in data_rows(qa_data) {
        let want = 1 + 2 * CANDIDATES_PER_POST;
        if cols.len() != want {
            return Err(Error::Validation(format!(
                "qa_data line {line}: expected {want} columns, found {}",
                cols.len()
            )));
        }
        qa.push(cols.into_iter().map(str::to_string).collect::<Vec<_>>());
    }
    let qa_by_id: HashMap<&str, &Vec<String>> = qa.iter().map(|c| (c[0].as_str(), c)).collect();
    let order: Vec<&str> = match ids {
        Some(ids) => ids.iter().map(String::as_str).collect(),
        None => qa.iter().map(|c| c[0].as_str()).collect(),
    };

    let mut triples = Vec::with_capacity(order.len());
    let mut sets = Vec::with_capacity(order.len());
    for id in order {
        let cols = qa_by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("post {id} missing from qa_data")))?;
        let post = posts
            .get(id)
            .ok_or_else(|| Error::Validation(format!("post {id} missing from post_data")))?;
        let candidates = (0..CANDIDATES_PER_POST)
            .map(|j| Candidate {
                cid: format!("{id}_{j}"),
                question: cols[1 + j].clone(),
                answer: cols[1 + CANDIDATES_PER_POST + j].clone(),
                label: u8::from(j == 0),
            })
            .collect::<Vec<_>>();
        triples.push(TripleRecord {
            post_id: id.to_string(),
            post: post.clone(),
            question: candidates[0].question.clone(),
            answer: candidates[0].answer.clone(),
        });
        sets.push(CandidateSet {
            post_id: id.to_string(),
            candidates,
        });
    }
    Ok((triples, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body).unwrap();
        p
    }

    pub(crate) fn synthetic_set(post: &str, positive: Option<usize>) -> CandidateSet {
        CandidateSet {
            post_id: post.into(),
            candidates: (0..10)
                .map(|j| Candidate {
                    cid: format!("{post}-c{j}"),
                    question: format!("question {j}?"),
                    answer: if j % 3 == 0 { String::new() } else { format!("answer {j}") },
                    label: u8::from(positive == Some(j)),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_triples_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.jsonl", b"");
        let loaded = load_triples(&p).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.manifest.record_count, 0);
    }

    #[test]
    fn three_line_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<TripleRecord> = (0..3)
            .map(|i| TripleRecord {
                post_id: format!("p{i}"),
                post: format!("post \"{i}\"\twith tab"),
                question: format!("q{i} ünïcode?"),
                answer: if i == 1 { String::new() } else { format!("a{i}") },
            })
            .collect();
        let p = dir.path().join("t.jsonl");
        write_jsonl(&p, &records).unwrap();
        let loaded = load_triples(&p).unwrap();
        assert_eq!(loaded.records, records);
        assert_eq!(loaded.manifest.record_count, 3);
        assert_eq!(loaded.manifest.file_digest, sha256_hex(&fs::read(&p).unwrap()));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "t.jsonl",
            b"{\"post_id\":\"a\",\"post\":\"x\",\"question\":\"q\",\"answer\":\"\"}\n{not json}\n",
        );
        match load_triples(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_post_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = b"{\"post_id\":\"a\",\"post\":\"x\",\"question\":\"q\",\"answer\":\"\"}\n";
        let p = write(&dir, "t.jsonl", &[&line[..], &line[..]].concat());
        let err = load_triples(&p).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("duplicate post_id a"));
    }

    #[test]
    fn bom_and_crlf_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = b"{\"post_id\":\"a\",\"post\":\"x\",\"question\":\"q\",\"answer\":\"\"}";
        let p = write(&dir, "bom.jsonl", &[&[0xEF, 0xBB, 0xBF][..], &line[..]].concat());
        assert!(load_triples(&p).unwrap_err().to_string().contains("byte-order mark"));
        let p = write(&dir, "crlf.jsonl", &[&line[..], b"\r\n"].concat());
        assert!(load_triples(&p).unwrap_err().to_string().contains("CRLF"));
    }

    #[test]
    fn minimal_valid_candidate_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_jsonl(&p, &[synthetic_set("p0", Some(0))]).unwrap();
        let loaded = load_candidate_sets(&p, Split::Train).unwrap();
        assert_eq!(loaded.records.len(), 1);
        let set = &loaded.records[0];
        assert_eq!(set.candidates.len(), 10);
        assert_eq!(set.candidates.iter().map(|c| c.label as usize).sum::<usize>(), 1);
        assert_eq!(set.candidates[0].label, 1);
    }

    #[test]
    fn nine_candidates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = synthetic_set("p0", Some(0));
        set.candidates.pop();
        let p = dir.path().join("c.jsonl");
        write_jsonl(&p, &[set]).unwrap();
        let err = load_candidate_sets(&p, Split::Test).unwrap_err();
        assert!(err.to_string().contains("expected 10 candidates"), "{err}");
    }

    #[test]
    fn train_split_positive_count_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_jsonl(&p, &[synthetic_set("p0", None)]).unwrap();
        assert!(load_candidate_sets(&p, Split::Train).is_err());
        // test split carries no label contract
        assert!(load_candidate_sets(&p, Split::Test).is_ok());

        let mut two = synthetic_set("p1", Some(0));
        two.candidates[5].label = 1;
        write_jsonl(&p, &[two]).unwrap();
        assert!(load_candidate_sets(&p, Split::Validation).is_err());
    }

    #[test]
    fn duplicate_questions_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = synthetic_set("p0", Some(2));
        for c in &mut set.candidates {
            c.question = "same question?".into();
        }
        let p = dir.path().join("c.jsonl");
        write_jsonl(&p, &[set]).unwrap();
        assert!(load_candidate_sets(&p, Split::Train).is_ok());
    }

    #[test]
    fn annotations_membership_and_empty_gold() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.jsonl",
            b"{\"post_id\":\"p0\",\"best\":[\"p0-c3\"],\"valid\":[\"p0-c3\",\"p0-c4\"]}\n\
              {\"post_id\":\"p1\",\"best\":[\"p1-c0\"],\"valid\":[]}\n",
        );
        let (map, manifest) = load_annotations(&p).unwrap();
        assert_eq!(map.len(), 2);
        assert!(map["p0"].best.contains("p0-c3"));
        assert!(!map["p0"].best.contains("p0-c1"));
        assert_eq!(manifest.empty_gold_posts, vec!["p1".to_string()]);

        let sets = vec![synthetic_set("p0", None), synthetic_set("p1", None)];
        cross_validate(&map, &sets).unwrap();

        let p = write(&dir, "bad.jsonl", b"{\"post_id\":\"p0\",\"best\":[\"zz\"],\"valid\":[]}\n");
        let (bad, _) = load_annotations(&p).unwrap();
        let err = cross_validate(&bad, &sets).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn token_counts() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("how do I mount this drive"), 6);
        assert_eq!(count_tokens("a  b\tc\n"), 3);
    }

    #[test]
    fn tsv_conversion() {
        let posts = "postid\ttitle\tpost\n7\tMount fails\tmy usb drive will not mount\n";
        let qs: Vec<String> = (1..=10).map(|i| format!("q{i}")).collect();
        let an: Vec<String> = (1..=10).map(|i| format!("a{i}")).collect();
        let qa = format!("7\t{}\t{}\n", qs.join("\t"), an.join("\t"));
        let (triples, sets) = convert_tsv(posts, &qa, None).unwrap();
        assert_eq!(triples[0].post, "Mount fails my usb drive will not mount");
        assert_eq!(triples[0].question, "q1");
        assert_eq!(sets[0].candidates[0].label, 1);
        assert_eq!(sets[0].positives().count(), 1);
        assert_eq!(sets[0].candidates[9].answer, "a10");
        assert!(convert_tsv(posts, &qa, Some(&["8".to_string()])).is_err());
    }

    proptest! {
        #[test]
        fn text_fields_survive_write_and_load(
            texts in proptest::collection::vec(("\\PC{1,40}", "\\PC{1,40}", "\\PC{0,40}"), 1..8)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let records: Vec<TripleRecord> = texts
                .into_iter()
                .enumerate()
                .map(|(i, (p, q, a))| TripleRecord { post_id: format!("id{i}"), post: p, question: q, answer: a })
                .collect();
            let path = dir.path().join("t.jsonl");
            write_jsonl(&path, &records).unwrap();
            let first = load_triples(&path).unwrap().records;
            prop_assert_eq!(&first, &records);
            prop_assert_eq!(load_triples(&path).unwrap().records, first);
        }

        #[test]
        fn token_count_is_additive(a in "\\PC{0,30}", b in "\\PC{0,30}") {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let joined = format!("{a} {b}");
            prop_assert_eq!(count_tokens(&joined), count_tokens(&a) + count_tokens(&b));
        }
    }
}
