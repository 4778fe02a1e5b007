//! The full training and evaluation flow on a corpus.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::config::TrainConfig;
use crate::corpus::{Corpus, TokenizedCorpus};
use crate::encoders::{DualEncoder, TrainingTriple};
use crate::error::{Error, Result};
use crate::gnncore::{FusionMode, GnnParams};
use crate::persist::{Fingerprint, Model};
use crate::retrieval::{
    evaluate, precompute_passage_index, search, sort_attention, AttentionRow, InferenceGraph,
    InferenceModel, Metrics, PassageIndex, RetrievalRun,
};
use crate::trainer::{
    denoise_and_mine, derive_seed, fit_cross_encoder, joint_train, random_negative_triples,
    train_dual_encoder, JointOutcome, MiningStats, TrainLog,
};

const TAG_STAGE1A: u64 = 0x3141;
const TAG_STAGE1B: u64 = 0x3142;

pub const MRR_CUTOFF: usize = 10;
pub const RECALL_CUTOFFS: [usize; 4] = [1, 5, 20, 100];

/// Output of the cross-encoder, warm-up, mining and stage-1 steps.
#[derive(Debug, Clone)]
pub struct Stage1 {
    /// `dual` is the stage-1 model; `cross` is frozen.
    pub model: Model,
    pub warmup: DualEncoder,
    pub triples: Vec<TrainingTriple>,
    pub mining: MiningStats,
    pub cross_log: TrainLog,
    pub warmup_log: TrainLog,
    pub stage1_log: TrainLog,
}

/// Fits the cross-encoder, warms up a dual encoder on random negatives,
/// mines hard negatives with both, and trains the stage-1 dual encoder on
/// the mined triples.
pub fn run_stage1(corpus: &Corpus, tok: &TokenizedCorpus, cfg: &TrainConfig) -> Result<Stage1> {
    let mut model = Model::init(cfg.clone())?;
    let train = corpus.train_queries();
    let text = tok.text();
    let (cross, cross_log) = fit_cross_encoder(&train, &corpus.qrels, text, cfg, &mut model.rng)?;
    model.cross = cross;

    let random =
        random_negative_triples(&train, &corpus.qrels, corpus.num_passages(), &mut model.rng)?;
    let (warmup, warmup_log) = train_dual_encoder(
        model.dual.clone(),
        &random,
        text,
        cfg.lr_stage1,
        cfg.stage1_epochs,
        cfg.batch_size,
        derive_seed(cfg.seed, TAG_STAGE1A, 0),
    )?;
    let (triples, mining) = denoise_and_mine(
        &train,
        text,
        &warmup,
        &model.cross,
        &corpus.qrels,
        cfg.k_mine,
        cfg.tau,
    )?;
    log::info!(
        "mined {} triples ({} fallbacks, {} skipped)",
        mining.triples,
        mining.fallbacks,
        mining.skipped_no_positive
    );
    let (dual, stage1_log) = train_dual_encoder(
        warmup.clone(),
        &triples,
        text,
        cfg.lr_stage1,
        cfg.stage1_epochs,
        cfg.batch_size,
        derive_seed(cfg.seed, TAG_STAGE1B, 0),
    )?;
    model.dual = dual;
    Ok(Stage1 {
        model,
        warmup,
        triples,
        mining,
        cross_log,
        warmup_log,
        stage1_log,
    })
}

/// Joint training from a stage-1 model; the returned model carries the
/// trained dual encoder and GNN.
pub fn run_joint(
    corpus: &Corpus,
    tok: &TokenizedCorpus,
    stage1: &Stage1,
    on_epoch: &mut dyn FnMut(usize, &DualEncoder, &GnnParams) -> Result<()>,
) -> Result<(Model, JointOutcome)> {
    let cfg = &stage1.model.config;
    let out = joint_train(
        tok.text(),
        &corpus.train_queries(),
        &stage1.triples,
        &corpus.qrels,
        stage1.model.dual.clone(),
        &stage1.model.cross,
        stage1.model.gnn.clone(),
        cfg,
        on_epoch,
    )?;
    let mut model = stage1.model.clone();
    model.dual = out.dual.clone();
    model.gnn = out.gnn.clone();
    Ok((model, out))
}

/// Index stamped with `fingerprint`, normally `model.fingerprint()`.
pub fn build_index(
    corpus: &Corpus,
    tok: &TokenizedCorpus,
    model: &Model,
    mode: FusionMode,
    fingerprint: Fingerprint,
) -> Result<PassageIndex> {
    precompute_passage_index(
        tok.text(),
        &corpus.train_queries(),
        InferenceModel {
            dual: &model.dual,
            cross: &model.cross,
            gnn: &model.gnn,
            mode,
            k: model.config.k,
        },
        fingerprint,
    )
}

/// Ranks the passages for each of `queries`.
pub fn run_queries(
    corpus: &Corpus,
    tok: &TokenizedCorpus,
    queries: &[usize],
    index: &PassageIndex,
    dual: &DualEncoder,
    fingerprint: &Fingerprint,
    cutoff: usize,
) -> Result<RetrievalRun> {
    let mut run = RetrievalRun::new(cutoff);
    for &q in queries {
        let top = search(&tok.queries[q], index, dual, fingerprint, cutoff)?;
        run.insert(
            corpus.query_ids[q].clone(),
            top.into_iter()
                .map(|(p, s)| (corpus.passage_ids[p].clone(), s))
                .collect(),
        );
    }
    Ok(run)
}

/// Indexes with `mode`, ranks the test queries and scores the run.
pub fn evaluate_model(
    corpus: &Corpus,
    tok: &TokenizedCorpus,
    model: &Model,
    mode: FusionMode,
) -> Result<Metrics> {
    let index = build_index(corpus, tok, model, mode, model.fingerprint())?;
    let cutoff = RECALL_CUTOFFS
        .iter()
        .copied()
        .max()
        .unwrap_or(MRR_CUTOFF)
        .max(MRR_CUTOFF);
    let run = run_queries(
        corpus,
        tok,
        &corpus.test_queries(),
        &index,
        &model.dual,
        &model.fingerprint(),
        cutoff,
    )?;
    evaluate(&run, &corpus.qrels_by_name(), MRR_CUTOFF, &RECALL_CUTOFFS)
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub stage1: Stage1,
    pub model: Model,
    pub joint: JointOutcome,
    /// Stage-1 dual encoder, raw passage embeddings.
    pub baseline: Metrics,
    /// Jointly trained model with graph-fused passage embeddings.
    pub gnn: Metrics,
}

pub fn run_end_to_end(corpus: &Corpus, cfg: &TrainConfig) -> Result<EndToEnd> {
    let tok = corpus.tokenize(cfg.vocab)?;
    let stage1 = run_stage1(corpus, &tok, cfg)?;
    let baseline = evaluate_model(corpus, &tok, &stage1.model, FusionMode::identity())?;
    let (model, joint) = run_joint(corpus, &tok, &stage1, &mut |_, _, _| Ok(()))?;
    let gnn = evaluate_model(corpus, &tok, &model, cfg.fusion)?;
    log::info!(
        "R@5 baseline {:.4} gnn {:.4}; MRR@10 baseline {:.4} gnn {:.4}",
        baseline.recall_at(5).unwrap_or(0.0),
        gnn.recall_at(5).unwrap_or(0.0),
        baseline.mrr,
        gnn.mrr
    );
    Ok(EndToEnd {
        stage1,
        model,
        joint,
        baseline,
        gnn,
    })
}

/// Writes `query_id \t positive_id \t negative_id` lines.
pub fn write_triples<W: Write>(
    corpus: &Corpus,
    triples: &[TrainingTriple],
    mut out: W,
) -> Result<()> {
    writeln!(out, "query_id\tpositive_id\tnegative_id")?;
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}",
            corpus.query_ids[t.query],
            corpus.passage_ids[t.positive],
            corpus.passage_ids[t.negative]
        )?;
    }
    Ok(())
}

pub fn read_triples<R: BufRead>(
    corpus: &Corpus,
    input: R,
    source_name: &str,
) -> Result<Vec<TrainingTriple>> {
    let queries = corpus.query_index();
    let passages = corpus.passage_index();
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("query_id")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data {
                source_name: source_name.into(),
                line: line_no,
                message: format!("expected 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let lookup = |map: &HashMap<&str, usize>, id: &str, what: &str| {
            map.get(id).copied().ok_or_else(|| Error::Data {
                source_name: source_name.into(),
                line: line_no,
                message: format!("unknown {what} id {id:?}"),
            })
        };
        out.push(TrainingTriple::new(
            lookup(&queries, cols[0], "query")?,
            lookup(&passages, cols[1], "passage")?,
            lookup(&passages, cols[2], "passage")?,
        )?);
    }
    Ok(out)
}

/// Attention of passage `p` over its neighbors in the inference graph,
/// heaviest first. The self-loop appears as `self`.
pub fn attention_rows(
    corpus: &Corpus,
    tok: &TokenizedCorpus,
    model: &Model,
    p: usize,
) -> Result<Vec<AttentionRow>> {
    if p >= corpus.num_passages() {
        return Err(Error::InvalidArgument(format!(
            "passage index {p} out of range"
        )));
    }
    let inference = InferenceModel {
        dual: &model.dual,
        cross: &model.cross,
        gnn: &model.gnn,
        mode: model.config.fusion,
        k: model.config.k,
    };
    let graph = InferenceGraph::build(tok.text(), &corpus.train_queries(), inference)?;
    let mut rows: Vec<AttentionRow> = graph
        .passage_attention(p, &model.gnn, model.config.fusion)?
        .into_iter()
        .map(|(q, weight)| match q {
            Some(q) => AttentionRow {
                query_id: corpus.query_ids[q].clone(),
                weight,
                is_labeled_positive: corpus.qrels.is_positive(q, p),
            },
            None => AttentionRow {
                query_id: "self".into(),
                weight,
                is_labeled_positive: false,
            },
        })
        .collect();
    sort_attention(&mut rows);
    Ok(rows)
}
