//! Training stages: the cross-encoder surrogate, the dual encoder, hard
//! negative mining, and joint dual-encoder + GNN training over masked graphs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MgtMode, TrainConfig};
use crate::corpus::Qrels;
use crate::encoders::{
    contrastive_loss_grad, cross_score, encode, encode_backward, encode_with_cache,
    CrossEncoderParams, DualEncoder, Embedding, EncodeCache, EncoderParams, TokenSequence,
    TrainingTriple,
};
use crate::error::{Error, Result};
use crate::gnncore::{
    fuse_passage_backward, fuse_passage_forward, fuse_query_backward, fuse_query_forward,
    FusionMode, GnnParams, PassageFusion, QueryFusion,
};
use crate::graphbuild::{
    brute_force_topk, build_graph_with_embeddings, drop_positive_edges, restrict_queries,
    split_masked, EdgeKey, EpochSplit, GraphText, QueryPassageGraph,
};
use crate::numkit::{axpy, dot, ParamSet};

const TAG_SPLIT: u64 = 0x5350_4c49;
const TAG_BATCH: u64 = 0x4241_5443;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-purpose, per-epoch seed.
pub fn derive_seed(seed: u64, tag: u64, epoch: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag).wrapping_add(epoch))
}

/// Passage embeddings of the stage-1 model, frozen for a joint-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    passages: Vec<Embedding>,
    stale: bool,
}

impl EmbeddingCache {
    pub fn build(dual: &DualEncoder, passages: &[TokenSequence]) -> Result<Self> {
        Ok(Self {
            passages: passages
                .iter()
                .map(|p| dual.encode_passage(p))
                .collect::<Result<_>>()?,
            stale: false,
        })
    }

    pub fn get(&self, p: usize) -> &[f64] {
        &self.passages[p]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// True once the encoders that produced it have been updated.
    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn mark_stale(&mut self) {
        self.stale = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Per-step batch losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, step: usize, loss: f64) {
        log::debug!("epoch {epoch} step {step} loss {loss}");
        self.rows.push(LogRow { epoch, step, loss });
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch\tstep\tloss")?;
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{}", r.epoch, r.step, r.loss)?;
        }
        Ok(())
    }
}

/// Seeded shuffle of the triples, optionally restricted to the given
/// queries, cut into batches.
pub fn batch_schedule(
    triples: &[TrainingTriple],
    allowed: Option<&HashSet<usize>>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<TrainingTriple>> {
    let mut order: Vec<&TrainingTriple> = triples.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        TAG_BATCH,
        epoch as u64,
    )));
    let kept: Vec<TrainingTriple> = order
        .into_iter()
        .filter(|t| allowed.is_none_or(|a| a.contains(&t.query)))
        .copied()
        .collect();
    kept.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

/// Sorted, deduplicated positives and negatives of a batch.
pub fn batch_passages(batch: &[TrainingTriple]) -> Vec<usize> {
    let set: BTreeSet<usize> = batch
        .iter()
        .flat_map(|t| [t.positive, t.negative])
        .collect();
    set.into_iter().collect()
}

/// Sum over the batch of the contrastive loss of each query against every
/// batch passage; returns the loss and the gradients with respect to the
/// query embeddings and the scored passage embeddings.
fn in_batch_loss(
    batch: &[TrainingTriple],
    pb: &[usize],
    queries: &[&[f64]],
    passages: &[&[f64]],
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = queries.first().map_or(0, |q| q.len());
    let mut loss = 0.0;
    let mut g_q = vec![vec![0.0; d]; batch.len()];
    let mut g_p = vec![vec![0.0; d]; pb.len()];
    for (i, t) in batch.iter().enumerate() {
        let pos = pb
            .binary_search(&t.positive)
            .expect("positive is in the batch set");
        let scores: Vec<f64> = passages.iter().map(|p| dot(queries[i], p)).collect();
        let negs: Vec<f64> = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != pos)
            .map(|(_, &s)| s)
            .collect();
        let (l, d_pos, d_negs) = contrastive_loss_grad(scores[pos], &negs);
        loss += l;
        let mut neg_iter = d_negs.into_iter();
        for (j, p) in passages.iter().enumerate() {
            let g = if j == pos {
                d_pos
            } else {
                neg_iter.next().expect("one gradient per negative")
            };
            axpy(&mut g_q[i], g, p);
            axpy(&mut g_p[j], g, queries[i]);
        }
    }
    (loss, g_q, g_p)
}

fn encode_all(
    ids: impl Iterator<Item = usize>,
    texts: &[TokenSequence],
    params: &EncoderParams,
) -> Result<Vec<EncodeCache>> {
    ids.map(|i| encode_with_cache(&texts[i], params)).collect()
}

/// Stage-1 in-batch loss and, when `grads` is given, its gradient.
pub fn dual_batch_loss(
    batch: &[TrainingTriple],
    text: GraphText<'_>,
    dual: &DualEncoder,
    grads: Option<&mut DualEncoder>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let pb = batch_passages(batch);
    let q_caches = encode_all(batch.iter().map(|t| t.query), text.queries, &dual.query)?;
    let p_caches = encode_all(pb.iter().copied(), text.passages, &dual.passage)?;
    let qs: Vec<&[f64]> = q_caches.iter().map(|c| c.output().as_slice()).collect();
    let ps: Vec<&[f64]> = p_caches.iter().map(|c| c.output().as_slice()).collect();
    let (loss, g_q, g_p) = in_batch_loss(batch, &pb, &qs, &ps);
    if let Some(grads) = grads {
        for (c, g) in q_caches.iter().zip(&g_q) {
            encode_backward(c, &dual.query, g, &mut grads.query);
        }
        for (c, g) in p_caches.iter().zip(&g_p) {
            encode_backward(c, &dual.passage, g, &mut grads.passage);
        }
    }
    Ok(loss)
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite loss {loss} at step {step}");
        Err(Error::Divergence { step, loss })
    }
}

/// Plain mini-batch SGD on the in-batch contrastive loss.
pub fn train_dual_encoder(
    init: DualEncoder,
    triples: &[TrainingTriple],
    text: GraphText<'_>,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(DualEncoder, TrainLog)> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no training triples".into()));
    }
    let schedule: Vec<Vec<Vec<TrainingTriple>>> = (0..epochs)
        .map(|e| batch_schedule(triples, None, batch_size, seed, e))
        .collect();
    train_dual_on_batches(init, &schedule, text, lr)
}

/// Stage-1 training on an explicit per-epoch batch schedule.
pub fn train_dual_on_batches(
    mut dual: DualEncoder,
    schedule: &[Vec<Vec<TrainingTriple>>],
    text: GraphText<'_>,
    lr: f64,
) -> Result<(DualEncoder, TrainLog)> {
    let mut log = TrainLog::default();
    let mut global = 0;
    for (epoch, batches) in schedule.iter().enumerate() {
        for (step, batch) in batches.iter().enumerate() {
            let mut grads = dual.zeros_like();
            let loss = dual_batch_loss(batch, text, &dual, Some(&mut grads))?;
            check_finite(loss, global)?;
            dual.apply_gradient(&grads, lr);
            log.push(epoch, step, loss);
            global += 1;
        }
        if let Some(mean) = log.epoch_mean(epoch) {
            log::info!("dual epoch {epoch}: mean loss {mean:.5}");
        }
    }
    Ok((dual, log))
}

/// One uniformly drawn non-positive passage per labeled pair.
pub fn random_negative_triples<R: Rng + ?Sized>(
    queries: &[usize],
    qrels: &Qrels,
    num_passages: usize,
    rng: &mut R,
) -> Result<Vec<TrainingTriple>> {
    let mut out = Vec::new();
    for &q in queries {
        if qrels.num_positives(q) >= num_passages {
            continue;
        }
        for p in qrels.positives(q) {
            let neg = loop {
                let cand = rng.gen_range(0..num_passages);
                if !qrels.is_positive(q, cand) {
                    break cand;
                }
            };
            out.push(TrainingTriple::new(q, p, neg)?);
        }
    }
    Ok(out)
}

/// Fits the cross-encoder surrogate so that positive pairs outscore random
/// negatives, then freezes it.
pub fn fit_cross_encoder<R: Rng + ?Sized>(
    queries: &[usize],
    qrels: &Qrels,
    text: GraphText<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(CrossEncoderParams, TrainLog)> {
    let m = text.passages.len();
    let mut params = EncoderParams::random(cfg.vocab, cfg.dim, rng);
    let mut pairs: Vec<(usize, usize)> = queries
        .iter()
        .flat_map(|&q| qrels.positives(q).map(move |p| (q, p)))
        .filter(|&(q, _)| qrels.num_positives(q) < m)
        .collect();
    let mut log = TrainLog::default();
    let mut global = 0;
    for epoch in 0..cfg.ce_epochs {
        pairs.shuffle(rng);
        for (step, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for &(q, p) in chunk {
                let mut cands = vec![p];
                while cands.len() <= cfg.ce_negatives {
                    let c = rng.gen_range(0..m);
                    if !qrels.is_positive(q, c) {
                        cands.push(c);
                    }
                }
                let pair_caches: Vec<EncodeCache> = cands
                    .iter()
                    .map(|&c| encode_with_cache(&text.queries[q].pair(&text.passages[c]), &params))
                    .collect::<Result<_>>()?;
                let scores: Vec<f64> = pair_caches
                    .iter()
                    .map(|c| c.output().iter().sum())
                    .collect();
                let (l, d_pos, d_negs) = contrastive_loss_grad(scores[0], &scores[1..]);
                loss += l;
                for (c, g) in pair_caches.iter().zip(std::iter::once(d_pos).chain(d_negs)) {
                    encode_backward(c, &params, &vec![g; cfg.dim], &mut grads);
                }
            }
            check_finite(loss, global)?;
            params.sgd_step(&grads, cfg.lr_ce);
            log.push(epoch, step, loss);
            global += 1;
        }
    }
    let mut cross = CrossEncoderParams::new(params);
    cross.freeze();
    Ok((cross, log))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningStats {
    pub triples: usize,
    pub skipped_no_positive: usize,
    pub fallbacks: usize,
}

/// Linear-interpolation percentile of `xs` (0 ≤ `pct` ≤ 100).
pub fn percentile(xs: &[f64], pct: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = pct.clamp(0.0, 100.0) / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Retrieves `k_mine` candidates per query with the dual encoder and picks
/// the highest-ranked non-positive whose cross-encoder score falls below the
/// `tau`-th percentile of the candidates' scores. Without such a candidate
/// the lowest-scored non-positive candidate is used, and failing that the
/// best-ranked non-positive passage overall.
pub fn denoise_and_mine(
    queries: &[usize],
    text: GraphText<'_>,
    dual: &DualEncoder,
    cross: &CrossEncoderParams,
    qrels: &Qrels,
    k_mine: usize,
    tau: f64,
) -> Result<(Vec<TrainingTriple>, MiningStats)> {
    if !cross.frozen {
        return Err(Error::InvalidArgument(
            "mining requires a frozen cross-encoder".into(),
        ));
    }
    if k_mine < 2 {
        return Err(Error::InvalidArgument(format!(
            "k_mine must be at least 2, got {k_mine}"
        )));
    }
    let passage_embs: Vec<Embedding> = text
        .passages
        .iter()
        .map(|p| dual.encode_passage(p))
        .collect::<Result<_>>()?;
    let mut stats = MiningStats::default();
    let mut triples = Vec::new();
    for &q in queries {
        if qrels.num_positives(q) == 0 {
            stats.skipped_no_positive += 1;
            continue;
        }
        let h_q = dual.encode_query(&text.queries[q])?;
        let cands = brute_force_topk(&h_q, &passage_embs, k_mine)?;
        let scores: Vec<f64> = cands
            .iter()
            .map(|&(p, _)| cross_score(&text.queries[q], &text.passages[p], cross))
            .collect::<Result<_>>()?;
        let threshold = percentile(&scores, tau);
        let chosen = cands
            .iter()
            .zip(&scores)
            .find(|(&(p, _), &s)| !qrels.is_positive(q, p) && s < threshold)
            .map(|(&(p, _), _)| p);
        let negative = match chosen {
            Some(p) => p,
            None => {
                stats.fallbacks += 1;
                let lowest = cands
                    .iter()
                    .zip(&scores)
                    .filter(|(&(p, _), _)| !qrels.is_positive(q, p))
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(&(p, _), _)| p);
                match lowest {
                    Some(p) => p,
                    None => {
                        let all = brute_force_topk(&h_q, &passage_embs, passage_embs.len())?;
                        match all.iter().find(|&&(p, _)| !qrels.is_positive(q, p)) {
                            Some(&(p, _)) => p,
                            None => {
                                stats.skipped_no_positive += 1;
                                continue;
                            }
                        }
                    }
                }
            }
        };
        for p in qrels.positives(q) {
            triples.push(TrainingTriple::new(q, p, negative)?);
        }
    }
    stats.triples = triples.len();
    if stats.skipped_no_positive > 0 {
        log::warn!("mining skipped {} queries", stats.skipped_no_positive);
    }
    Ok((triples, stats))
}

/// Inputs of a joint batch that stay fixed while parameters change.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext<'a> {
    pub text: GraphText<'a>,
    pub graph: &'a QueryPassageGraph,
    pub cache: &'a EmbeddingCache,
    pub mode: FusionMode,
}

/// Gradients of the joint loss for every trainable group.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    pub dual: DualEncoder,
    pub gnn: GnnParams,
}

struct QueryNode {
    cache: EncodeCache,
    fusion: Option<QueryFusion>,
}

impl QueryNode {
    fn fused(&self) -> &[f64] {
        match &self.fusion {
            Some(f) => f.output(),
            None => self.cache.output(),
        }
    }
}

fn layer1_inputs<'c>(
    q: usize,
    own: &'c [f64],
    ctx: &BatchContext<'c>,
) -> (Vec<&'c [f64]>, Vec<&'c [f64]>) {
    let retrieved = ctx.graph.retrieved(q);
    let mut nbrs: Vec<&[f64]> = retrieved.iter().map(|&(p, _)| ctx.cache.get(p)).collect();
    let mut edges: Vec<&[f64]> = retrieved
        .iter()
        .map(|&(p, _)| ctx.graph.feature(EdgeKey::query_passage(q, p)).as_slice())
        .collect();
    nbrs.push(own);
    edges.push(ctx.graph.feature(EdgeKey::query_loop(q)));
    (nbrs, edges)
}

fn layer2_inputs<'c>(
    p: usize,
    own: &'c [f64],
    nodes: &'c BTreeMap<usize, QueryNode>,
    ctx: &BatchContext<'c>,
) -> (Vec<&'c [f64]>, Vec<&'c [f64]>) {
    let qs = ctx.graph.retrieving(p);
    let mut nbrs: Vec<&[f64]> = qs.iter().map(|q| nodes[q].fused()).collect();
    let mut edges: Vec<&[f64]> = qs
        .iter()
        .map(|&q| ctx.graph.feature(EdgeKey::query_passage(q, p)).as_slice())
        .collect();
    nbrs.push(own);
    edges.push(ctx.graph.feature(EdgeKey::passage_loop(p)));
    (nbrs, edges)
}

/// Joint loss: every query of the batch scores every batch passage through
/// its graph-fused embedding `h'_p`. Neighbor queries are re-encoded; their
/// passage neighbors come from the cache and receive no gradient.
pub fn batch_loss(
    batch: &[TrainingTriple],
    ctx: &BatchContext<'_>,
    dual: &DualEncoder,
    gnn: &GnnParams,
) -> Result<(f64, JointGrads)> {
    let mut grads = JointGrads {
        dual: dual.zeros_like(),
        gnn: gnn.zeros_like(),
    };
    let loss = joint_loss_impl(batch, ctx, dual, gnn, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Forward-only [`batch_loss`].
pub fn batch_loss_value(
    batch: &[TrainingTriple],
    ctx: &BatchContext<'_>,
    dual: &DualEncoder,
    gnn: &GnnParams,
) -> Result<f64> {
    joint_loss_impl(batch, ctx, dual, gnn, None)
}

fn joint_loss_impl(
    batch: &[TrainingTriple],
    ctx: &BatchContext<'_>,
    dual: &DualEncoder,
    gnn: &GnnParams,
    grads: Option<&mut JointGrads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    ctx.mode.validate()?;
    let text = ctx.text;
    let pb = batch_passages(batch);
    let q_caches = encode_all(batch.iter().map(|t| t.query), text.queries, &dual.query)?;
    let p_caches = encode_all(pb.iter().copied(), text.passages, &dual.passage)?;

    let mut nodes: BTreeMap<usize, QueryNode> = BTreeMap::new();
    let mut fusions: Vec<Option<PassageFusion>> = Vec::with_capacity(pb.len());
    if !ctx.mode.is_identity() {
        for &p in &pb {
            for &q in ctx.graph.retrieving(p) {
                if let std::collections::btree_map::Entry::Vacant(slot) = nodes.entry(q) {
                    slot.insert(QueryNode {
                        cache: encode_with_cache(&text.queries[q], &dual.query)?,
                        fusion: None,
                    });
                }
            }
        }
        if !ctx.mode.one_layer {
            let mut fused = Vec::with_capacity(nodes.len());
            for (&q, node) in &nodes {
                let (nbrs, edges) = layer1_inputs(q, node.cache.output(), ctx);
                fused.push(fuse_query_forward(
                    node.cache.output(),
                    &nbrs,
                    &edges,
                    gnn,
                    ctx.mode.edge_features,
                )?);
            }
            for (node, f) in nodes.values_mut().zip(fused) {
                node.fusion = Some(f);
            }
        }
        for (&p, c) in pb.iter().zip(&p_caches) {
            let (nbrs, edges) = layer2_inputs(p, c.output(), &nodes, ctx);
            fusions.push(Some(fuse_passage_forward(
                c.output(),
                &nbrs,
                &edges,
                gnn,
                ctx.mode,
            )?));
        }
    } else {
        fusions.resize_with(pb.len(), || None);
    }

    let qs: Vec<&[f64]> = q_caches.iter().map(|c| c.output().as_slice()).collect();
    let ps: Vec<&[f64]> = fusions
        .iter()
        .zip(&p_caches)
        .map(|(f, c)| match f {
            Some(f) => f.output().as_slice(),
            None => c.output().as_slice(),
        })
        .collect();
    let (loss, g_q, g_final) = in_batch_loss(batch, &pb, &qs, &ps);
    let Some(grads) = grads else {
        return Ok(loss);
    };

    for (c, g) in q_caches.iter().zip(&g_q) {
        encode_backward(c, &dual.query, g, &mut grads.dual.query);
    }
    let d = dual.dim();
    let mut g_fused: BTreeMap<usize, Vec<f64>> = nodes.keys().map(|&q| (q, vec![0.0; d])).collect();
    for ((&p, c), (fusion, g_out)) in pb.iter().zip(&p_caches).zip(fusions.iter().zip(&g_final)) {
        let g_h_p = match fusion {
            None => g_out.clone(),
            Some(f) => {
                let (nbrs, edges) = layer2_inputs(p, c.output(), &nodes, ctx);
                let (mut g_h_p, g_nbrs) = fuse_passage_backward(
                    gnn,
                    &mut grads.gnn,
                    f,
                    c.output(),
                    &nbrs,
                    &edges,
                    g_out,
                    ctx.mode,
                );
                let (own, others) = g_nbrs.split_last().expect("self-loop is always present");
                axpy(&mut g_h_p, 1.0, own);
                for (q, g) in ctx.graph.retrieving(p).iter().zip(others) {
                    axpy(g_fused.get_mut(q).expect("neighbor node exists"), 1.0, g);
                }
                g_h_p
            }
        };
        encode_backward(c, &dual.passage, &g_h_p, &mut grads.dual.passage);
    }
    for (&q, node) in &nodes {
        let g = &g_fused[&q];
        let g_h_q = match &node.fusion {
            None => g.clone(),
            Some(f) => {
                let (nbrs, edges) = layer1_inputs(q, node.cache.output(), ctx);
                let (mut g_center, g_nbrs) = fuse_query_backward(
                    gnn,
                    &mut grads.gnn,
                    f,
                    node.cache.output(),
                    &nbrs,
                    &edges,
                    g,
                    ctx.mode.edge_features,
                );
                // Passage neighbors are cached features; only the self-loop
                // entry carries gradient back to the encoder.
                axpy(
                    &mut g_center,
                    1.0,
                    g_nbrs.last().expect("self-loop is always present"),
                );
                g_center
            }
        };
        encode_backward(&node.cache, &dual.query, &g_h_q, &mut grads.dual.query);
    }
    Ok(loss)
}

/// Graph queries and trained queries of one joint-training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub graph_queries: Vec<usize>,
    pub trained_queries: Vec<usize>,
    pub split: Option<EpochSplit>,
    pub graph_edges: usize,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub dual: DualEncoder,
    pub gnn: GnnParams,
    pub log: TrainLog,
    pub epochs: Vec<EpochRecord>,
    pub schedule: Vec<Vec<Vec<TrainingTriple>>>,
    pub cache: EmbeddingCache,
}

/// Joint training of the dual encoder and the GNN starting from the stage-1
/// model. The retrieval edges are computed once with the stage-1 model; in
/// `mgt` mode each epoch keeps only the graph queries of a fresh masked split
/// and trains on the rest.
#[allow(clippy::too_many_arguments)]
pub fn joint_train(
    text: GraphText<'_>,
    train_queries: &[usize],
    triples: &[TrainingTriple],
    qrels: &Qrels,
    dual: DualEncoder,
    cross: &CrossEncoderParams,
    gnn: GnnParams,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &DualEncoder, &GnnParams) -> Result<()>,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if !cross.frozen {
        return Err(Error::InvalidArgument(
            "joint training requires a frozen cross-encoder".into(),
        ));
    }
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no training triples".into()));
    }
    let mut dual = dual;
    let mut gnn = gnn;
    let mut cache = EmbeddingCache::build(&dual, text.passages)?;
    let full = build_graph_with_embeddings(
        train_queries,
        text,
        &dual.query,
        cache.embeddings(),
        cross,
        cfg.k,
    )?;
    let dropped = match cfg.mgt {
        MgtMode::DropEdges => {
            let pairs: Vec<(usize, usize)> = train_queries
                .iter()
                .flat_map(|&q| qrels.positives(q).map(move |p| (q, p)))
                .collect();
            Some(drop_positive_edges(&full, &pairs))
        }
        _ => None,
    };

    let mut log = TrainLog::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut schedule = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let (graph, allowed, split) = match cfg.mgt {
            MgtMode::Mgt => {
                let split = split_masked(
                    train_queries,
                    cfg.beta,
                    derive_seed(cfg.seed, TAG_SPLIT, epoch as u64),
                )?;
                let graph = restrict_queries(&full, &split.graph_queries);
                let allowed: HashSet<usize> = split.train_queries.iter().copied().collect();
                (graph, Some(allowed), Some(split))
            }
            MgtMode::DropEdges => (dropped.clone().expect("built above"), None, None),
            MgtMode::None => (full.clone(), None, None),
        };
        let batches = batch_schedule(triples, allowed.as_ref(), cfg.batch_size, cfg.seed, epoch);
        let ctx = BatchContext {
            text,
            graph: &graph,
            cache: &cache,
            mode: cfg.fusion,
        };
        let mut trained = BTreeSet::new();
        for (step, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_loss(batch, &ctx, &dual, &gnn)?;
            check_finite(loss, global)?;
            dual.apply_gradient(&grads.dual, cfg.lr_dual);
            gnn.sgd_step(&grads.gnn, cfg.lr_gnn);
            if !dual.all_finite() || !gnn.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {global}")));
            }
            trained.extend(batch.iter().map(|t| t.query));
            log.push(epoch, step, loss);
            global += 1;
        }
        if let Some(mean) = log.epoch_mean(epoch) {
            log::info!(
                "joint epoch {epoch}: {} batches, mean loss {mean:.5}",
                batches.len()
            );
        }
        epochs.push(EpochRecord {
            epoch,
            graph_queries: graph.query_ids().collect(),
            trained_queries: trained.into_iter().collect(),
            split,
            graph_edges: graph.num_edges(),
        });
        schedule.push(batches);
        on_epoch(epoch, &dual, &gnn)?;
    }
    cache.mark_stale();
    Ok(JointOutcome {
        dual,
        gnn,
        log,
        epochs,
        schedule,
        cache,
    })
}

/// Encodes every passage with the passage tower.
pub fn encode_passages(dual: &DualEncoder, passages: &[TokenSequence]) -> Result<Vec<Embedding>> {
    passages.iter().map(|p| encode(p, &dual.passage)).collect()
}
