//! Offline passage index of fused embeddings, exact search, run files and
//! MRR / recall evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::encoders::{CrossEncoderParams, DualEncoder, Embedding, TokenSequence};
use crate::error::{Error, Result};
use crate::gnncore::{
    fuse_passage, fuse_passage_forward, fuse_query, fuse_query_forward, FusionMode, GnnParams,
};
use crate::graphbuild::{
    brute_force_topk, build_graph, build_graph_with_embeddings, EdgeKey, GraphText,
    QueryPassageGraph,
};
use crate::numkit::dot;
use crate::persist::{index_from_bytes, index_to_bytes, Fingerprint};
use crate::trainer::encode_passages;

/// Final model pieces needed at inference time.
#[derive(Debug, Clone, Copy)]
pub struct InferenceModel<'a> {
    pub dual: &'a DualEncoder,
    pub cross: &'a CrossEncoderParams,
    pub gnn: &'a GnnParams,
    pub mode: FusionMode,
    pub k: usize,
}

/// Graph over all training queries with fresh node features.
#[derive(Debug, Clone)]
pub struct InferenceGraph {
    pub graph: QueryPassageGraph,
    pub passages: Vec<Embedding>,
    /// `h'_q` per graph query (raw `h_q` in one-layer mode).
    pub fused_queries: BTreeMap<usize, Embedding>,
}

impl InferenceGraph {
    pub fn build(
        text: GraphText<'_>,
        graph_queries: &[usize],
        model: InferenceModel<'_>,
    ) -> Result<Self> {
        let passages = encode_passages(model.dual, text.passages)?;
        let graph = build_graph_with_embeddings(
            graph_queries,
            text,
            &model.dual.query,
            &passages,
            model.cross,
            model.k,
        )?;
        let mut fused_queries = BTreeMap::new();
        for q in graph.query_ids() {
            let h_q = model.dual.encode_query(&text.queries[q])?;
            let out = if model.mode.one_layer {
                h_q
            } else {
                let list = graph.retrieved(q);
                let mut nbrs: Vec<&[f64]> =
                    list.iter().map(|&(p, _)| passages[p].as_slice()).collect();
                let mut edges: Vec<&[f64]> = list
                    .iter()
                    .map(|&(p, _)| graph.feature(EdgeKey::query_passage(q, p)).as_slice())
                    .collect();
                nbrs.push(&h_q);
                edges.push(graph.feature(EdgeKey::query_loop(q)));
                fuse_query_forward(&h_q, &nbrs, &edges, model.gnn, model.mode.edge_features)?
                    .output()
                    .clone()
            };
            fused_queries.insert(q, out);
        }
        Ok(Self {
            graph,
            passages,
            fused_queries,
        })
    }

    fn layer2_inputs(&self, p: usize) -> (Vec<&[f64]>, Vec<&[f64]>) {
        let qs = self.graph.retrieving(p);
        let mut nbrs: Vec<&[f64]> = qs
            .iter()
            .map(|q| self.fused_queries[q].as_slice())
            .collect();
        let mut edges: Vec<&[f64]> = qs
            .iter()
            .map(|&q| self.graph.feature(EdgeKey::query_passage(q, p)).as_slice())
            .collect();
        nbrs.push(&self.passages[p]);
        edges.push(self.graph.feature(EdgeKey::passage_loop(p)));
        (nbrs, edges)
    }

    pub fn fused_passage(&self, p: usize, gnn: &GnnParams, mode: FusionMode) -> Result<Embedding> {
        let (nbrs, edges) = self.layer2_inputs(p);
        Ok(
            fuse_passage_forward(&self.passages[p], &nbrs, &edges, gnn, mode)?
                .output()
                .clone(),
        )
    }

    /// Second-layer attention of passage `p`, averaged over heads, as
    /// `(neighbor query or None for the self-loop, weight)`.
    pub fn passage_attention(
        &self,
        p: usize,
        gnn: &GnnParams,
        mode: FusionMode,
    ) -> Result<Vec<(Option<usize>, f64)>> {
        let (nbrs, edges) = self.layer2_inputs(p);
        let fusion = fuse_passage_forward(&self.passages[p], &nbrs, &edges, gnn, mode)?;
        let Some(layer) = fusion.layer() else {
            return Ok(vec![(None, 1.0)]);
        };
        let ids = self
            .graph
            .retrieving(p)
            .iter()
            .map(|&q| Some(q))
            .chain([None]);
        Ok(ids.zip(layer.mean_weights()).collect())
    }
}

/// Fused passage embeddings tagged with the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    dim: usize,
    fingerprint: Fingerprint,
    rows: Vec<Embedding>,
}

impl PassageIndex {
    pub fn new(dim: usize, fingerprint: Fingerprint, rows: Vec<Embedding>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape("passage index row", dim, bad.len()));
        }
        Ok(Self {
            dim,
            fingerprint,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn rows(&self) -> &[Embedding] {
        &self.rows
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        index_to_bytes(self.dim, &self.fingerprint, &self.rows)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dim, fingerprint, rows) = index_from_bytes(bytes)?;
        Self::new(dim, fingerprint, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Encodes every passage and fuses it with the graph of all training
/// queries. Identity fusion stores the raw passage embeddings.
pub fn precompute_passage_index(
    text: GraphText<'_>,
    train_queries: &[usize],
    model: InferenceModel<'_>,
    fingerprint: Fingerprint,
) -> Result<PassageIndex> {
    model.mode.validate()?;
    let dim = model.dual.dim();
    if model.mode.is_identity() {
        return PassageIndex::new(
            dim,
            fingerprint,
            encode_passages(model.dual, text.passages)?,
        );
    }
    let g = InferenceGraph::build(text, train_queries, model)?;
    let rows = (0..text.passages.len())
        .map(|p| g.fused_passage(p, model.gnn, model.mode))
        .collect::<Result<Vec<_>>>()?;
    PassageIndex::new(dim, fingerprint, rows)
}

/// Scores of one query against every passage, recomputing the graph, the
/// node features and every fused embedding from scratch.
pub fn on_the_fly_scores(
    query: &TokenSequence,
    text: GraphText<'_>,
    train_queries: &[usize],
    model: InferenceModel<'_>,
) -> Result<Vec<f64>> {
    let h = model.dual.encode_query(query)?;
    let mut scores = Vec::with_capacity(text.passages.len());
    if model.mode.is_identity() {
        for p in text.passages {
            scores.push(dot(&h, &model.dual.encode_passage(p)?));
        }
        return Ok(scores);
    }
    let graph = build_graph(train_queries, text, model.dual, model.cross, model.k)?;
    let feature = |key: EdgeKey| {
        graph
            .edge_feature(&key)
            .cloned()
            .expect("graph stores every edge feature")
    };
    for (p, tokens) in text.passages.iter().enumerate() {
        let h_p = model.dual.encode_passage(tokens)?;
        let mut nbrs = Vec::new();
        let mut edges = Vec::new();
        for &q in graph.retrieving(p) {
            let h_q = model.dual.encode_query(&text.queries[q])?;
            let fused = if model.mode.one_layer {
                h_q
            } else {
                let mut qn = Vec::new();
                let mut qe = Vec::new();
                for &(pp, _) in graph.retrieved(q) {
                    qn.push(model.dual.encode_passage(&text.passages[pp])?);
                    qe.push(feature(EdgeKey::query_passage(q, pp)));
                }
                qn.push(h_q.clone());
                qe.push(feature(EdgeKey::query_loop(q)));
                fuse_query(&h_q, &qn, &qe, model.gnn, model.mode)?
            };
            nbrs.push(fused);
            edges.push(feature(EdgeKey::query_passage(q, p)));
        }
        nbrs.push(h_p.clone());
        edges.push(feature(EdgeKey::passage_loop(p)));
        scores.push(dot(
            &h,
            &fuse_passage(&h_p, &nbrs, &edges, model.gnn, model.mode)?,
        ));
    }
    Ok(scores)
}

/// Exact top-`cutoff` search. Fails with a stale-index error when the index
/// was built by a different model.
pub fn search(
    query: &TokenSequence,
    index: &PassageIndex,
    dual: &DualEncoder,
    expected: &Fingerprint,
    cutoff: usize,
) -> Result<Vec<(usize, f64)>> {
    if index.fingerprint() != expected {
        return Err(Error::StaleIndex);
    }
    if index.is_empty() {
        return Err(Error::InvalidArgument("empty index".into()));
    }
    let h = dual.encode_query(query)?;
    brute_force_topk(&h, index.rows(), cutoff)
}

/// Ranked lists keyed by query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    pub cutoff: usize,
    pub lists: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    pub fn new(cutoff: usize) -> Self {
        Self {
            cutoff,
            lists: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, ranked: Vec<(String, f64)>) {
        self.lists.insert(query.into(), ranked);
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// `qid Q0 pid rank score tag`, ranks from 1.
    pub fn write_trec<W: Write>(&self, mut out: W, tag: &str) -> Result<()> {
        for (q, list) in &self.lists {
            for (rank, (p, score)) in list.iter().enumerate() {
                writeln!(out, "{q} Q0 {p} {} {score} {tag}", rank + 1)?;
            }
        }
        Ok(())
    }

    pub fn read_trec<R: BufRead>(input: R, source_name: &str) -> Result<Self> {
        let mut raw: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::data(
                    source_name,
                    i + 1,
                    format!("expected 6 fields, got {}", f.len()),
                ));
            }
            let rank: usize = f[3]
                .parse()
                .map_err(|_| Error::data(source_name, i + 1, format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .map_err(|_| Error::data(source_name, i + 1, format!("bad score {:?}", f[4])))?;
            raw.entry(f[0].to_string())
                .or_default()
                .push((rank, f[2].to_string(), score));
        }
        let mut run = Self::new(0);
        for (q, mut list) in raw {
            list.sort_by_key(|e| e.0);
            run.cutoff = run.cutoff.max(list.len());
            run.insert(q, list.into_iter().map(|(_, p, s)| (p, s)).collect());
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mrr_cutoff: usize,
    pub mrr: f64,
    /// `(k, R@k)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub queries: usize,
    /// Run queries without any relevant passage.
    pub skipped: usize,
}

impl Metrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|e| e.0 == k).map(|e| e.1)
    }
}

/// MRR@c and R@k with the per-query count of relevant passages as the
/// recall denominator.
pub fn evaluate(
    run: &RetrievalRun,
    qrels: &BTreeMap<String, BTreeSet<String>>,
    mrr_cutoff: usize,
    recall_cutoffs: &[usize],
) -> Result<Metrics> {
    if run.is_empty() {
        return Err(Error::InvalidArgument("empty run".into()));
    }
    let mut mrr = 0.0;
    let mut recall = vec![0.0; recall_cutoffs.len()];
    let mut queries = 0;
    let mut skipped = 0;
    for (q, list) in &run.lists {
        let Some(rel) = qrels.get(q).filter(|r| !r.is_empty()) else {
            skipped += 1;
            continue;
        };
        queries += 1;
        if let Some(pos) = list
            .iter()
            .take(mrr_cutoff)
            .position(|(p, _)| rel.contains(p))
        {
            mrr += 1.0 / (pos + 1) as f64;
        }
        for (acc, &k) in recall.iter_mut().zip(recall_cutoffs) {
            let found = list.iter().take(k).filter(|(p, _)| rel.contains(p)).count();
            *acc += found as f64 / rel.len() as f64;
        }
    }
    if queries == 0 {
        return Err(Error::InvalidArgument(
            "no run query has a relevant passage".into(),
        ));
    }
    if skipped > 0 {
        log::warn!("evaluation skipped {skipped} queries without relevance labels");
    }
    let n = queries as f64;
    Ok(Metrics {
        mrr_cutoff,
        mrr: mrr / n,
        recall: recall_cutoffs
            .iter()
            .zip(recall)
            .map(|(&k, r)| (k, r / n))
            .collect(),
        queries,
        skipped,
    })
}

/// One row of the attention dump.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub query_id: String,
    pub weight: f64,
    pub is_labeled_positive: bool,
}

/// `query_id \t weight \t is_labeled_positive`, heaviest first.
pub fn write_attention<W: Write>(rows: &[AttentionRow], mut out: W) -> Result<()> {
    writeln!(out, "query_id\tweight\tis_labeled_positive")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}",
            r.query_id,
            r.weight,
            u8::from(r.is_labeled_positive)
        )?;
    }
    Ok(())
}

/// Sorts rows by weight descending, ties by query id.
pub fn sort_attention(rows: &mut [AttentionRow]) {
    rows.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
}
