use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gnn_encoder::config::TrainConfig;
use gnn_encoder::corpus::{gen_synthetic, mean_query_overlap, Corpus, SyntheticConfig};
use gnn_encoder::gnncore::FusionMode;
use gnn_encoder::gradcheck::{run_grad_check, GradCheckSpec};
use gnn_encoder::persist::{fingerprint_hex, Fingerprint, Model};
use gnn_encoder::pipeline::{
    attention_rows, build_index, evaluate_model, read_triples, run_joint, run_queries, run_stage1,
    write_triples, Stage1, MRR_CUTOFF, RECALL_CUTOFFS,
};
use gnn_encoder::retrieval::{evaluate, write_attention, PassageIndex, RetrievalRun};
use gnn_encoder::trainer::{denoise_and_mine, joint_train, TrainLog};
use gnn_encoder::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "gnnenc",
    version,
    about = "Dense retrieval with a graph-attention passage encoder"
)]
struct Cli {
    /// key=value config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact written.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra config override, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    GenData {
        #[arg(long, default_value_t = 2000)]
        passages: usize,
        #[arg(long, default_value_t = 400)]
        train_queries: usize,
        #[arg(long, default_value_t = 0)]
        dev_queries: usize,
        #[arg(long, default_value_t = 100)]
        test_queries: usize,
        #[arg(long, default_value_t = 2000)]
        words: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 40)]
        topics: usize,
    },
    /// Fit the cross-encoder, mine negatives and train the stage-1 dual encoder.
    TrainDual {
        #[arg(long)]
        data: PathBuf,
    },
    /// Mine denoised hard negatives with a checkpoint's encoders.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Joint training of the dual encoder and the GNN.
    TrainJoint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        triples: PathBuf,
    },
    /// Precompute the passage index.
    BuildIndex {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Raw passage embeddings, no graph fusion.
        #[arg(long)]
        identity: bool,
    },
    /// Rank passages for one query text or for every query of a split.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 100)]
        top: usize,
    },
    /// Score a TREC run against the corpus qrels.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = MRR_CUTOFF)]
        mrr_cutoff: usize,
        #[arg(long, value_delimiter = ',', default_values_t = RECALL_CUTOFFS)]
        recall: Vec<usize>,
    },
    /// Attention of one passage over its neighbor queries.
    DumpAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        passage: String,
    },
    /// Retrain and evaluate over a grid of k or masked ratio values.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 6)]
        queries: usize,
        #[arg(long, default_value_t = 20)]
        passages: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    K,
    Beta,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if matches!(e, Error::InvalidArgument(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Defaults, then the config file, then `--set`, then `--seed`.
fn resolve_config(cli: &Cli, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &cli.config {
        let text = at(path, std::fs::read_to_string(path).map_err(Error::from))?;
        cfg.apply_text(&text)?;
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint with run-time overrides applied; shape-defining keys must
/// stay as saved.
fn load_model(cli: &Cli, path: &Path) -> Result<(Model, Fingerprint)> {
    let mut model = at(path, Model::load(path))?;
    let fingerprint = model.fingerprint();
    let cfg = resolve_config(cli, model.config.clone())?;
    let saved = &model.config;
    if (cfg.dim, cfg.vocab, cfg.heads, cfg.tied)
        != (saved.dim, saved.vocab, saved.heads, saved.tied)
    {
        return Err(Error::InvalidArgument(
            "dim, vocab, heads and tied are fixed by the checkpoint".into(),
        ));
    }
    model.config = cfg;
    Ok((model, fingerprint))
}

/// Names the file in I/O failures.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data {
            source_name: path.display().to_string(),
            line: 0,
            message: io.to_string(),
        },
        other => other,
    })
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let (corpus, report) = at(dir, Corpus::load(dir))?;
    if report.dropped_train_queries > 0 {
        log::warn!(
            "dropped {} training queries without positives",
            report.dropped_train_queries
        );
    }
    Ok(corpus)
}

fn create(cli: &Cli, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(&cli.out)?;
    Ok(BufWriter::new(File::create(cli.out.join(name))?))
}

fn save_log(cli: &Cli, name: &str, log: &TrainLog) -> Result<()> {
    let mut w = create(cli, name)?;
    log.write_tsv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            passages,
            train_queries,
            dev_queries,
            test_queries,
            words,
            noise,
            topics,
        } => {
            let cfg = resolve_config(cli, TrainConfig::default())?;
            let synth = SyntheticConfig {
                passages: *passages,
                train_queries: *train_queries,
                dev_queries: *dev_queries,
                test_queries: *test_queries,
                vocab: *words,
                noise: *noise,
                topics: *topics,
            };
            let corpus = gen_synthetic(&synth, cfg.seed)?;
            corpus.save(&cli.out)?;
            println!(
                "wrote {} passages and {} queries to {} (mean query overlap {:.4})",
                corpus.num_passages(),
                corpus.num_queries(),
                cli.out.display(),
                mean_query_overlap(&corpus)
            );
        }
        Command::TrainDual { data } => {
            let cfg = resolve_config(cli, TrainConfig::default())?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(cfg.vocab)?;
            let stage1 = run_stage1(&corpus, &tok, &cfg)?;
            std::fs::create_dir_all(&cli.out)?;
            stage1.model.save(&cli.out.join("stage1.gdck"))?;
            let mut w = create(cli, "triples.tsv")?;
            write_triples(&corpus, &stage1.triples, &mut w)?;
            w.flush()?;
            save_log(cli, "cross_log.tsv", &stage1.cross_log)?;
            save_log(cli, "warmup_log.tsv", &stage1.warmup_log)?;
            save_log(cli, "stage1_log.tsv", &stage1.stage1_log)?;
            println!(
                "stage 1 done: {} triples ({} fallbacks, {} skipped); fingerprint {}",
                stage1.mining.triples,
                stage1.mining.fallbacks,
                stage1.mining.skipped_no_positive,
                fingerprint_hex(&stage1.model.fingerprint())
            );
        }
        Command::Mine { data, model } => {
            let (model, _) = load_model(cli, model)?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(model.config.vocab)?;
            let (triples, stats) = denoise_and_mine(
                &corpus.train_queries(),
                tok.text(),
                &model.dual,
                &model.cross,
                &corpus.qrels,
                model.config.k_mine,
                model.config.tau,
            )?;
            let mut w = create(cli, "triples.tsv")?;
            write_triples(&corpus, &triples, &mut w)?;
            w.flush()?;
            println!(
                "mined {} triples ({} fallbacks, {} skipped)",
                stats.triples, stats.fallbacks, stats.skipped_no_positive
            );
        }
        Command::TrainJoint {
            data,
            model,
            triples,
        } => {
            let (model, _) = load_model(cli, model)?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(model.config.vocab)?;
            let file = at(triples, File::open(triples).map_err(Error::from))?;
            let triples = read_triples(
                &corpus,
                BufReader::new(file),
                &triples.display().to_string(),
            )?;
            std::fs::create_dir_all(&cli.out)?;
            let mut snapshot = model.clone();
            let out = joint_train(
                tok.text(),
                &corpus.train_queries(),
                &triples,
                &corpus.qrels,
                model.dual.clone(),
                &model.cross,
                model.gnn.clone(),
                &model.config,
                &mut |epoch, dual, gnn| {
                    snapshot.dual = dual.clone();
                    snapshot.gnn = gnn.clone();
                    snapshot.save(&cli.out.join(format!("joint-epoch{epoch}.gdck")))
                },
            )?;
            let mut trained = model.clone();
            trained.dual = out.dual;
            trained.gnn = out.gnn;
            trained.save(&cli.out.join("joint.gdck"))?;
            save_log(cli, "train_log.tsv", &out.log)?;
            for e in &out.epochs {
                println!(
                    "epoch {}: {} graph queries, {} trained, {} edges, mean loss {:.6}",
                    e.epoch,
                    e.graph_queries.len(),
                    e.trained_queries.len(),
                    e.graph_edges,
                    out.log.epoch_mean(e.epoch).unwrap_or(f64::NAN)
                );
            }
            println!("fingerprint {}", fingerprint_hex(&trained.fingerprint()));
        }
        Command::BuildIndex {
            data,
            model,
            identity,
        } => {
            let (model, fingerprint) = load_model(cli, model)?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(model.config.vocab)?;
            let mode = if *identity {
                FusionMode::identity()
            } else {
                model.config.fusion
            };
            let index = build_index(&corpus, &tok, &model, mode, fingerprint)?;
            std::fs::create_dir_all(&cli.out)?;
            index.save(&cli.out.join("index.gdix"))?;
            println!("indexed {} passages (d = {})", index.len(), index.dim());
        }
        Command::Search {
            data,
            model,
            index,
            query,
            split,
            top,
        } => {
            let (model, fingerprint) = load_model(cli, model)?;
            let mut corpus = load_corpus(data)?;
            let index = at(index, PassageIndex::load(index))?;
            let queries = match query {
                Some(text) => {
                    corpus.query_ids.push("query".into());
                    corpus.queries.push(text.clone());
                    corpus.splits.push(Default::default());
                    vec![corpus.num_queries() - 1]
                }
                None => corpus.queries_in(match split {
                    SplitArg::Train => gnn_encoder::corpus::Split::Train,
                    SplitArg::Dev => gnn_encoder::corpus::Split::Dev,
                    SplitArg::Test => gnn_encoder::corpus::Split::Test,
                }),
            };
            let tok = corpus.tokenize(model.config.vocab)?;
            let run = run_queries(
                &corpus,
                &tok,
                &queries,
                &index,
                &model.dual,
                &fingerprint,
                *top,
            )?;
            if query.is_some() {
                run.write_trec(io::stdout().lock(), "gnnenc")?;
            } else {
                let mut w = create(cli, "run.trec")?;
                run.write_trec(&mut w, "gnnenc")?;
                w.flush()?;
                println!(
                    "ranked {} queries into {}",
                    queries.len(),
                    cli.out.join("run.trec").display()
                );
            }
        }
        Command::Eval {
            data,
            run,
            mrr_cutoff,
            recall,
        } => {
            let corpus = load_corpus(data)?;
            let name = run.display().to_string();
            let file = at(run, File::open(run).map_err(Error::from))?;
            let run = RetrievalRun::read_trec(BufReader::new(file), &name)?;
            let m = evaluate(&run, &corpus.qrels_by_name(), *mrr_cutoff, recall)?;
            println!("MRR@{}\t{:.6}", m.mrr_cutoff, m.mrr);
            for (k, r) in &m.recall {
                println!("R@{k}\t{r:.6}");
            }
            println!("queries\t{}", m.queries);
        }
        Command::DumpAttn {
            data,
            model,
            passage,
        } => {
            let (model, _) = load_model(cli, model)?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(model.config.vocab)?;
            let p = *corpus
                .passage_index()
                .get(passage.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown passage id {passage:?}")))?;
            let rows = attention_rows(&corpus, &tok, &model, p)?;
            write_attention(&rows, io::stdout().lock())?;
            let mut w = create(cli, &format!("attention-{passage}.tsv"))?;
            write_attention(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Sweep {
            data,
            param,
            values,
        } => {
            let cfg = resolve_config(cli, TrainConfig::default())?;
            let corpus = load_corpus(data)?;
            let tok = corpus.tokenize(cfg.vocab)?;
            let stage1 = run_stage1(&corpus, &tok, &cfg)?;
            let name = match param {
                SweepParam::K => "k",
                SweepParam::Beta => "beta",
            };
            let mut header = format!("{name}\tMRR@{MRR_CUTOFF}");
            for k in RECALL_CUTOFFS {
                header.push_str(&format!("\tR@{k}"));
            }
            println!("{header}");
            let mut lines = vec![header];
            for &v in values {
                let mut point = Stage1 {
                    model: stage1.model.clone(),
                    ..stage1.clone()
                };
                point.model.config.set(name, &v.to_string())?;
                point.model.config.validate()?;
                let (model, _) = run_joint(&corpus, &tok, &point, &mut |_, _, _| Ok(()))?;
                let m = evaluate_model(&corpus, &tok, &model, model.config.fusion)?;
                let mut line = format!("{v}\t{:.6}", m.mrr);
                for (_, r) in &m.recall {
                    line.push_str(&format!("\t{r:.6}"));
                }
                println!("{line}");
                lines.push(line);
            }
            let mut w = create(cli, &format!("sweep-{name}.tsv"))?;
            for l in &lines {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
        Command::GradCheck {
            dim,
            heads,
            queries,
            passages,
            k,
        } => {
            let cfg = resolve_config(cli, TrainConfig::default())?;
            let spec = GradCheckSpec {
                dim: *dim,
                heads: *heads,
                queries: *queries,
                passages: *passages,
                k: *k,
                mode: cfg.fusion,
                seed: cfg.seed,
                ..GradCheckSpec::default()
            };
            let out = run_grad_check(&spec)?;
            println!(
                "instance seed {}\ndual loss: max rel err {:.3e} over {} params\njoint loss: max rel err {:.3e} over {} params",
                out.seed, out.dual.max_rel_error, out.dual.checked, out.joint.max_rel_error, out.joint.checked
            );
            if !out.pass() {
                eprintln!("error: gradient check failed at tolerance {}", spec.tol);
                std::process::exit(i32::from(EXIT_NUMERIC));
            }
            println!("pass");
        }
    }
    Ok(())
}
