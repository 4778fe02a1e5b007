//! Passages, queries and relevance labels: JSONL/TSV loading with
//! line-numbered validation, and a seeded synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize, TokenSequence};
use crate::error::{Error, Result};
use crate::graphbuild::GraphText;

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.tsv";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

/// Positive passages per query, both by corpus index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<usize, BTreeSet<usize>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: usize, passage: usize) {
        self.0.entry(query).or_default().insert(passage);
    }

    pub fn positives(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.0
            .get(&query)
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    pub fn is_positive(&self, query: usize, passage: usize) -> bool {
        self.0.get(&query).is_some_and(|s| s.contains(&passage))
    }

    pub fn num_positives(&self, query: usize) -> usize {
        self.0.get(&query).map_or(0, BTreeSet::len)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .flat_map(|(&q, ps)| ps.iter().map(move |&p| (q, p)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub passage_ids: Vec<String>,
    pub passages: Vec<String>,
    pub query_ids: Vec<String>,
    pub queries: Vec<String>,
    pub splits: Vec<Split>,
    pub qrels: Qrels,
}

/// What the loader had to discard.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_train_queries: usize,
}

/// Token ids for every query and passage of a corpus.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub queries: Vec<TokenSequence>,
    pub passages: Vec<TokenSequence>,
}

impl TokenizedCorpus {
    pub fn text(&self) -> GraphText<'_> {
        GraphText {
            queries: &self.queries,
            passages: &self.passages,
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, TextRecord)>> {
    let name = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(&name, i + 1, format!("bad JSON record: {e}")))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

impl Corpus {
    pub fn num_passages(&self) -> usize {
        self.passages.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn queries_in(&self, split: Split) -> Vec<usize> {
        (0..self.queries.len())
            .filter(|&q| self.splits[q] == split)
            .collect()
    }

    pub fn train_queries(&self) -> Vec<usize> {
        self.queries_in(Split::Train)
    }

    pub fn test_queries(&self) -> Vec<usize> {
        self.queries_in(Split::Test)
    }

    pub fn passage_index(&self) -> HashMap<&str, usize> {
        self.passage_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    pub fn query_index(&self) -> HashMap<&str, usize> {
        self.query_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Qrels keyed by external ids, as consumed by evaluation.
    pub fn qrels_by_name(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (q, p) in self.qrels.pairs() {
            out.entry(self.query_ids[q].clone())
                .or_default()
                .insert(self.passage_ids[p].clone());
        }
        out
    }

    pub fn tokenize(&self, vocab: usize) -> Result<TokenizedCorpus> {
        let tok = |ids: &[String], texts: &[String], what: &str| -> Result<Vec<TokenSequence>> {
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    tokenize(t, vocab)
                        .map_err(|e| Error::data(what, i + 1, format!("{}: {e}", ids[i])))
                })
                .collect()
        };
        Ok(TokenizedCorpus {
            queries: tok(&self.query_ids, &self.queries, QUERIES_FILE)?,
            passages: tok(&self.passage_ids, &self.passages, PASSAGES_FILE)?,
        })
    }

    /// Loads `passages.jsonl`, `queries.jsonl` and `qrels.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<(Self, LoadReport)> {
        let mut passage_ids = Vec::new();
        let mut passages = Vec::new();
        let mut seen = HashMap::new();
        let ppath = dir.join(PASSAGES_FILE);
        for (line, rec) in read_records(&ppath)? {
            if let Some(first) = seen.insert(rec.id.clone(), line) {
                return Err(Error::data(
                    ppath.display().to_string(),
                    line,
                    format!(
                        "duplicate passage id {:?} (first seen on line {first})",
                        rec.id
                    ),
                ));
            }
            passage_ids.push(rec.id);
            passages.push(rec.text);
        }

        let mut query_ids = Vec::new();
        let mut queries = Vec::new();
        let mut splits = Vec::new();
        let mut qseen = HashMap::new();
        let qpath = dir.join(QUERIES_FILE);
        for (line, rec) in read_records(&qpath)? {
            if let Some(first) = qseen.insert(rec.id.clone(), line) {
                return Err(Error::data(
                    qpath.display().to_string(),
                    line,
                    format!(
                        "duplicate query id {:?} (first seen on line {first})",
                        rec.id
                    ),
                ));
            }
            query_ids.push(rec.id);
            queries.push(rec.text);
            splits.push(rec.split.unwrap_or_default());
        }

        let pindex: HashMap<&str, usize> = passage_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let qindex: HashMap<&str, usize> = query_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let rpath = dir.join(QRELS_FILE);
        let rname = rpath.display().to_string();
        let mut qrels = Qrels::new();
        for (i, line) in BufReader::new(File::open(&rpath)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::data(
                    &rname,
                    i + 1,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            }
            let rel: i64 = fields[3].trim().parse().map_err(|_| {
                Error::data(&rname, i + 1, format!("bad relevance {:?}", fields[3]))
            })?;
            let q = *qindex.get(fields[0]).ok_or_else(|| {
                Error::data(&rname, i + 1, format!("unknown query id {:?}", fields[0]))
            })?;
            let p = *pindex.get(fields[2]).ok_or_else(|| {
                Error::data(&rname, i + 1, format!("unknown passage id {:?}", fields[2]))
            })?;
            if rel > 0 {
                qrels.insert(q, p);
            }
        }
        let corpus = Corpus {
            passage_ids,
            passages,
            query_ids,
            queries,
            splits,
            qrels,
        };
        Ok(corpus.drop_unlabeled_train_queries())
    }

    /// Removes training queries without any positive passage.
    pub fn drop_unlabeled_train_queries(self) -> (Self, LoadReport) {
        let keep: Vec<usize> = (0..self.queries.len())
            .filter(|&q| self.splits[q] != Split::Train || self.qrels.num_positives(q) > 0)
            .collect();
        let dropped = self.queries.len() - keep.len();
        if dropped == 0 {
            return (self, LoadReport::default());
        }
        log::warn!("dropping {dropped} training queries without a labeled positive");
        let mut qrels = Qrels::new();
        for (new, &old) in keep.iter().enumerate() {
            for p in self.qrels.positives(old) {
                qrels.insert(new, p);
            }
        }
        let corpus = Corpus {
            query_ids: keep.iter().map(|&q| self.query_ids[q].clone()).collect(),
            queries: keep.iter().map(|&q| self.queries[q].clone()).collect(),
            splits: keep.iter().map(|&q| self.splits[q]).collect(),
            passage_ids: self.passage_ids,
            passages: self.passages,
            qrels,
        };
        (
            corpus,
            LoadReport {
                dropped_train_queries: dropped,
            },
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(PASSAGES_FILE))?);
        for (id, text) in self.passage_ids.iter().zip(&self.passages) {
            let rec = TextRecord {
                id: id.clone(),
                text: text.clone(),
                split: None,
            };
            writeln!(
                w,
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            )?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(QUERIES_FILE))?);
        for ((id, text), split) in self.query_ids.iter().zip(&self.queries).zip(&self.splits) {
            let rec = TextRecord {
                id: id.clone(),
                text: text.clone(),
                split: Some(*split),
            };
            writeln!(
                w,
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            )?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(QRELS_FILE))?);
        for (q, p) in self.qrels.pairs() {
            writeln!(w, "{}\t0\t{}\t1", self.query_ids[q], self.passage_ids[p])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Knobs of [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub passages: usize,
    pub train_queries: usize,
    pub dev_queries: usize,
    pub test_queries: usize,
    pub vocab: usize,
    /// Probability that a sampled query token is replaced by a random word.
    pub noise: f64,
    pub topics: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            passages: 2000,
            train_queries: 400,
            dev_queries: 0,
            test_queries: 100,
            vocab: 2000,
            noise: 0.2,
            topics: 40,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Topical random corpus. Each passage draws most tokens from one topic's
/// slice of the vocabulary and the rest from a shared general slice; each
/// query samples 3–6 token positions of its source passage, replacing each
/// token with a random word at the noise rate.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    if cfg.passages < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 passages, got {}",
            cfg.passages
        )));
    }
    if cfg.vocab < 50 {
        return Err(Error::InvalidArgument(format!(
            "need a vocabulary of at least 50, got {}",
            cfg.vocab
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must lie in [0,1], got {}",
            cfg.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let general = (cfg.vocab / 10).max(5);
    let topics = cfg.topics.clamp(1, (cfg.vocab - general) / 5);
    let per_topic = (cfg.vocab - general) / topics;

    let mut passage_tokens: Vec<Vec<usize>> = Vec::with_capacity(cfg.passages);
    for _ in 0..cfg.passages {
        let topic = rng.gen_range(0..topics);
        let len = rng.gen_range(20..=40);
        let toks = (0..len)
            .map(|_| {
                if rng.gen_bool(0.8) {
                    general + topic * per_topic + rng.gen_range(0..per_topic)
                } else {
                    rng.gen_range(0..general)
                }
            })
            .collect();
        passage_tokens.push(toks);
    }
    let join = |toks: &[usize]| toks.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ");

    let mut corpus = Corpus {
        passage_ids: (0..cfg.passages).map(|i| format!("p{i:05}")).collect(),
        passages: passage_tokens.iter().map(|t| join(t)).collect(),
        query_ids: Vec::new(),
        queries: Vec::new(),
        splits: Vec::new(),
        qrels: Qrels::new(),
    };
    let plan = [
        (Split::Train, cfg.train_queries),
        (Split::Dev, cfg.dev_queries),
        (Split::Test, cfg.test_queries),
    ];
    for (split, count) in plan {
        for _ in 0..count {
            let source = rng.gen_range(0..cfg.passages);
            let len = rng.gen_range(3..=6usize);
            let picked: Vec<usize> = passage_tokens[source]
                .choose_multiple(&mut rng, len)
                .map(|&t| {
                    if cfg.noise > 0.0 && rng.gen_bool(cfg.noise) {
                        rng.gen_range(0..cfg.vocab)
                    } else {
                        t
                    }
                })
                .collect();
            let q = corpus.queries.len();
            corpus.query_ids.push(format!("q{q:05}"));
            corpus.queries.push(join(&picked));
            corpus.splits.push(split);
            corpus.qrels.insert(q, source);
        }
    }
    Ok(corpus)
}

/// Mean fraction of each query's distinct tokens found in its positive passage.
pub fn mean_query_overlap(corpus: &Corpus) -> f64 {
    let words = |s: &str| {
        s.split_whitespace()
            .map(str::to_owned)
            .collect::<BTreeSet<_>>()
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for (q, p) in corpus.qrels.pairs() {
        let qw = words(&corpus.queries[q]);
        let pw = words(&corpus.passages[p]);
        total += qw.intersection(&pw).count() as f64 / qw.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
