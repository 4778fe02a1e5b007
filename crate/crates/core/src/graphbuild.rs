//! Query-passage graph construction and the per-epoch masked split.
//!
//! Every graph query is connected to its top-`k` passages under the dual
//! encoder; every node additionally carries a self-loop. Each edge,
//! self-loops included, stores a cross-encoder feature.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    cross_encode, CrossEncoderParams, DualEncoder, Embedding, EncoderParams, TokenSequence,
};
use crate::error::{Error, Result};
use crate::numkit::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Query(usize),
    Passage(usize),
}

/// Ordered pair of endpoints. Query-passage edges are keyed query first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey(pub NodeId, pub NodeId);

impl EdgeKey {
    pub fn query_passage(q: usize, p: usize) -> Self {
        EdgeKey(NodeId::Query(q), NodeId::Passage(p))
    }

    pub fn query_loop(q: usize) -> Self {
        EdgeKey(NodeId::Query(q), NodeId::Query(q))
    }

    pub fn passage_loop(p: usize) -> Self {
        EdgeKey(NodeId::Passage(p), NodeId::Passage(p))
    }
}

/// Exact maximum-inner-product search. Scores descend; equal scores are
/// ordered by ascending passage index.
pub fn brute_force_topk<E: AsRef<[f64]>>(
    query: &[f64],
    passages: &[E],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if passages.is_empty() {
        return Err(Error::InvalidArgument("empty passage collection".into()));
    }
    let mut scored = Vec::with_capacity(passages.len());
    for (id, p) in passages.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != query.len() {
            return Err(Error::shape("brute_force_topk", query.len(), p.len()));
        }
        scored.push((id, dot(query, p)));
    }
    let k = k.min(scored.len());
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

/// Immutable bipartite graph over a subset of queries and all passages.
#[derive(Debug, Clone)]
pub struct QueryPassageGraph {
    num_passages: usize,
    /// `P_i`: retrieved passages with scores, in rank order.
    retrieved: BTreeMap<usize, Vec<(usize, f64)>>,
    /// `Q_p`: queries whose retrieval contains the passage, ascending.
    retrieving: Vec<Vec<usize>>,
    features: HashMap<EdgeKey, Embedding>,
}

impl QueryPassageGraph {
    pub fn num_queries(&self) -> usize {
        self.retrieved.len()
    }

    pub fn num_passages(&self) -> usize {
        self.num_passages
    }

    pub fn num_nodes(&self) -> usize {
        self.num_queries() + self.num_passages
    }

    pub fn num_pq_edges(&self) -> usize {
        self.retrieved.values().map(Vec::len).sum()
    }

    /// Query-passage edges plus one self-loop per node.
    pub fn num_edges(&self) -> usize {
        self.num_pq_edges() + self.num_nodes()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.retrieved.keys().copied()
    }

    pub fn contains_query(&self, q: usize) -> bool {
        self.retrieved.contains_key(&q)
    }

    /// `P_i` for a graph query; empty for queries outside the graph.
    pub fn retrieved(&self, q: usize) -> &[(usize, f64)] {
        self.retrieved.get(&q).map_or(&[], Vec::as_slice)
    }

    /// `Q_p` for a passage.
    pub fn retrieving(&self, p: usize) -> &[usize] {
        &self.retrieving[p]
    }

    pub fn has_edge(&self, q: usize, p: usize) -> bool {
        self.retrieved(q).iter().any(|&(pp, _)| pp == p)
    }

    pub fn edge_feature(&self, key: &EdgeKey) -> Option<&Embedding> {
        self.features.get(key)
    }

    pub fn num_edge_features(&self) -> usize {
        self.features.len()
    }

    pub(crate) fn feature(&self, key: EdgeKey) -> &Embedding {
        self.features
            .get(&key)
            .unwrap_or_else(|| panic!("graph invariant violated: no feature for {key:?}"))
    }

    /// Writes `q_id \t p_id \t score` lines ordered by query, then rank.
    pub fn export_tsv<W: Write>(
        &self,
        mut out: W,
        query_names: &[String],
        passage_names: &[String],
    ) -> Result<()> {
        for (&q, list) in &self.retrieved {
            for &(p, score) in list {
                writeln!(out, "{}\t{}\t{}", query_names[q], passage_names[p], score)?;
            }
        }
        Ok(())
    }
}

/// Tokenized text for every query and passage, indexed by id.
#[derive(Debug, Clone, Copy)]
pub struct GraphText<'a> {
    pub queries: &'a [TokenSequence],
    pub passages: &'a [TokenSequence],
}

/// Builds the graph, encoding passages with `dual` first.
pub fn build_graph(
    graph_queries: &[usize],
    text: GraphText<'_>,
    dual: &DualEncoder,
    cross: &CrossEncoderParams,
    k: usize,
) -> Result<QueryPassageGraph> {
    let passage_embs = text
        .passages
        .iter()
        .map(|p| dual.encode_passage(p))
        .collect::<Result<Vec<_>>>()?;
    build_graph_with_embeddings(graph_queries, text, &dual.query, &passage_embs, cross, k)
}

/// Builds the graph against precomputed passage embeddings.
pub fn build_graph_with_embeddings(
    graph_queries: &[usize],
    text: GraphText<'_>,
    query_encoder: &EncoderParams,
    passage_embs: &[Embedding],
    cross: &CrossEncoderParams,
    k: usize,
) -> Result<QueryPassageGraph> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let m = text.passages.len();
    if m == 0 || passage_embs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a graph over an empty passage set".into(),
        ));
    }
    if passage_embs.len() != m {
        return Err(Error::shape(
            "build_graph passage embeddings",
            m,
            passage_embs.len(),
        ));
    }
    let mut retrieved = BTreeMap::new();
    let mut retrieving = vec![Vec::new(); m];
    let mut features = HashMap::new();
    for &q in graph_queries {
        let q_tokens = text
            .queries
            .get(q)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query id {q}")))?;
        if retrieved.contains_key(&q) {
            continue;
        }
        let h_q = crate::encoders::encode(q_tokens, query_encoder)?;
        let top = brute_force_topk(&h_q, passage_embs, k)?;
        for &(p, _) in &top {
            retrieving[p].push(q);
            features.insert(
                EdgeKey::query_passage(q, p),
                cross_encode(q_tokens, &text.passages[p], cross)?,
            );
        }
        features.insert(
            EdgeKey::query_loop(q),
            cross_encode(q_tokens, q_tokens, cross)?,
        );
        retrieved.insert(q, top);
    }
    for (p, tokens) in text.passages.iter().enumerate() {
        features.insert(
            EdgeKey::passage_loop(p),
            cross_encode(tokens, tokens, cross)?,
        );
    }
    for list in &mut retrieving {
        list.sort_unstable();
    }
    Ok(QueryPassageGraph {
        num_passages: m,
        retrieved,
        retrieving,
        features,
    })
}

/// Subgraph keeping only the listed graph queries, their edges and all passages.
pub fn restrict_queries(graph: &QueryPassageGraph, keep: &[usize]) -> QueryPassageGraph {
    let keep: BTreeSet<usize> = keep
        .iter()
        .copied()
        .filter(|q| graph.contains_query(*q))
        .collect();
    let mut out = graph.clone();
    out.retrieved.retain(|q, _| keep.contains(q));
    for list in &mut out.retrieving {
        list.retain(|q| keep.contains(q));
    }
    out.features.retain(|key, _| match key.0 {
        NodeId::Query(q) => keep.contains(&q),
        NodeId::Passage(_) => true,
    });
    out
}

/// Removes every labeled `(query, positive)` edge present in the graph.
pub fn drop_positive_edges(
    graph: &QueryPassageGraph,
    qrels: &[(usize, usize)],
) -> QueryPassageGraph {
    let mut out = graph.clone();
    for &(q, p) in qrels {
        let Some(list) = out.retrieved.get_mut(&q) else {
            continue;
        };
        let before = list.len();
        list.retain(|&(pp, _)| pp != p);
        if list.len() != before {
            out.retrieving[p].retain(|&qq| qq != q);
            out.features.remove(&EdgeKey::query_passage(q, p));
        }
    }
    out
}

/// One epoch's partition of the training queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSplit {
    /// Queries used as graph nodes, ascending.
    pub graph_queries: Vec<usize>,
    /// Queries trained on this epoch, in shuffled order.
    pub train_queries: Vec<usize>,
    pub beta: f64,
    pub seed: u64,
}

/// Number of masked (trained) queries for `n` queries at ratio `beta`.
pub fn masked_count(n: usize, beta: f64) -> usize {
    ((beta * n as f64).round() as usize).clamp(1, n - 1)
}

/// Seeded uniform partition into graph queries and trained queries.
pub fn split_masked(query_ids: &[usize], beta: f64, seed: u64) -> Result<EpochSplit> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "masked ratio must lie in (0,1), got {beta}"
        )));
    }
    if query_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "masked split needs at least 2 queries, got {}",
            query_ids.len()
        )));
    }
    let mut shuffled = query_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = masked_count(shuffled.len(), beta);
    let mut graph_queries = shuffled.split_off(n_train);
    graph_queries.sort_unstable();
    Ok(EpochSplit {
        graph_queries,
        train_queries: shuffled,
        beta,
        seed,
    })
}
