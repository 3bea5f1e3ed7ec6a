//! The `genrank` command line.
//!
//! Every subcommand validates its flags before reading or writing any file.
//! Exit status is 0 on success, 1 on a runtime or data error and 2 on a usage
//! error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bm25::{bm25_search, build_bm25, mine_negatives, Bm25Params, MinedNegatives};
use crate::corpus::{
    load_corpus, load_embeddings, load_qrels, load_queries, load_run, save_embeddings, write_corpus, write_qrels,
    write_queries, write_run, Collection, EmbeddingMatrix, Query, RunFile,
};
use crate::decoder::{decode_atomic, decode_beam, BeamConfig, PruneBy, RankBy};
use crate::dense::{flat_search, tree_search, RankedList};
use crate::encoder::{EncoderParams, DEFAULT_DIM, DEFAULT_FEATURES, DEFAULT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_metric, Metric};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{bm25_teacher_margins, FreeEmbeddingTable, Model, TrainConfig, TrainMode, Trainer, TrainingData};
use crate::tree::{build_tree, SemanticTree};
use crate::verify;

const EXIT_OK: i32 = 0;
const EXIT_RUNTIME: i32 = 1;
const EXIT_USAGE: i32 = 2;

/// Seed offset for the free embedding table, so it does not share a stream
/// with the encoder initialization.
const TABLE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Parser)]
#[command(name = "genrank", version, about = "Generative and dense retrieval toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "GENRANK_SEED", default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode a corpus into an embedding file.
    Encode(EncodeArgs),
    /// Build a hierarchical k-means tree over embeddings.
    BuildTree(BuildTreeArgs),
    /// Retrieve for a query file and write a TREC run.
    Search(SearchArgs),
    /// Train encoder parameters.
    Train(TrainArgs),
    /// Mine BM25 hard negatives.
    MineNegatives(MineArgs),
    /// Score a run against qrels.
    Eval(EvalArgs),
    /// Run the seeded equivalence checks.
    Verify(VerifyArgs),
    /// Write a synthetic retrieval task.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct EncoderArgs {
    /// Trained parameters; a seeded random encoder is used when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FEATURES)]
    features: usize,
    #[arg(long)]
    dim: Option<usize>,
    /// L2-normalize encoder outputs (random encoder only).
    #[arg(long)]
    normalize: bool,
}

impl EncoderArgs {
    fn validate(&self) -> Result<()> {
        if self.features == 0 || self.dim == Some(0) {
            return Err(Error::arg("--features and --dim must be positive"));
        }
        Ok(())
    }

    fn load(&self, seed: u64, fallback_dim: Option<usize>) -> Result<EncoderParams> {
        match &self.params {
            Some(path) => {
                let params = EncoderParams::load(path)?;
                if let Some(d) = fallback_dim.filter(|&d| d != params.dim()) {
                    return Err(Error::arg(format!(
                        "encoder output dim {} does not match embeddings dim {d}",
                        params.dim()
                    )));
                }
                Ok(params)
            }
            None => {
                let dim = self.dim.or(fallback_dim).unwrap_or(DEFAULT_DIM);
                EncoderParams::random(self.features, dim, DEFAULT_INIT_SCALE, self.normalize, seed)
            }
        }
    }
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Args)]
struct BuildTreeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Branching factor C.
    #[arg(long, short = 'c', default_value_t = 10)]
    branching: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SearchMode {
    Flat,
    Tree,
    Atomic,
    Beam,
    Bm25,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PruneArg {
    CumulativeLogprob,
    StepLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RankArg {
    CumulativeLogprob,
    LeafDot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Bm25Preset {
    Default,
    NqTuned,
}

impl Bm25Preset {
    fn params(self) -> Bm25Params {
        match self {
            Bm25Preset::Default => Bm25Params::DEFAULT,
            Bm25Preset::NqTuned => Bm25Params::NQ_TUNED,
        }
    }
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, value_enum)]
    mode: SearchMode,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Document embeddings (all modes except bm25).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Tree JSON (tree and beam modes).
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Corpus (bm25 mode).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    nprobe: usize,
    #[arg(long, default_value_t = 1)]
    beam_width: usize,
    #[arg(long, value_enum, default_value = "cumulative-logprob")]
    prune_by: PruneArg,
    #[arg(long, value_enum, default_value = "cumulative-logprob")]
    rank_by: RankArg,
    #[arg(long, value_enum, default_value = "default")]
    bm25_preset: Bm25Preset,
    /// Run tag; defaults to `genrank-<mode>`.
    #[arg(long)]
    tag: Option<String>,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    TiedContrastive,
    TiedMarginmse,
    FreeDsi,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TiedContrastive => TrainMode::TiedContrastive,
            ModeArg::TiedMarginmse => TrainMode::TiedMarginMse,
            ModeArg::FreeDsi => TrainMode::FreeDsi,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Training pairs in qrels format; judged pairs with grade > 0 are used.
    #[arg(long)]
    pairs: PathBuf,
    /// Mined negatives TSV.
    #[arg(long)]
    negatives: Option<PathBuf>,
    /// Teacher margins TSV (query_id, doc_id, margin) for tied-marginmse;
    /// BM25 margins are used when absent.
    #[arg(long)]
    teacher_margins: Option<PathBuf>,
    /// Output encoder parameters.
    #[arg(long)]
    out: PathBuf,
    /// Output free embedding table (free-dsi), as an embeddings file.
    #[arg(long)]
    table_out: Option<PathBuf>,
    /// Per-step loss log.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Initial encoder parameters; a seeded random encoder otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tied-contrastive")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    negatives_per_query: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    multitask_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_FEATURES)]
    features: usize,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long)]
    normalize: bool,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 4)]
    per_query: usize,
    #[arg(long, value_enum, default_value = "default")]
    bm25_preset: Bm25Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Recall,
    Mrr,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Also print one line per query.
    #[arg(long)]
    per_query: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Instances per check, overriding each check's default.
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long, default_value_t = 500)]
    train_queries: usize,
    #[arg(long, default_value_t = 100)]
    test_queries: usize,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = validate(&cli.command) {
        eprintln!("genrank: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command, cli.seed) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("genrank: {e}");
            EXIT_RUNTIME
        }
    }
}

fn require(flag: &str, value: &Option<PathBuf>, mode: &str) -> Result<()> {
    if value.is_none() {
        return Err(Error::arg(format!("{mode} needs --{flag}")));
    }
    Ok(())
}

fn validate(command: &Command) -> Result<()> {
    match command {
        Command::Encode(a) => a.encoder.validate(),
        Command::BuildTree(a) => {
            if a.branching < 2 {
                return Err(Error::arg("--branching must be >= 2"));
            }
            Ok(())
        }
        Command::Search(a) => {
            a.encoder.validate()?;
            if a.k < 1 || a.nprobe < 1 || a.beam_width < 1 {
                return Err(Error::arg("--k, --nprobe and --beam-width must be >= 1"));
            }
            if let Some(tag) = &a.tag {
                if tag.is_empty() || tag.chars().any(char::is_whitespace) {
                    return Err(Error::arg("--tag must be one non-empty word"));
                }
            }
            match a.mode {
                SearchMode::Bm25 => require("corpus", &a.corpus, "bm25 search"),
                SearchMode::Flat | SearchMode::Atomic => require("embeddings", &a.embeddings, "dense search"),
                SearchMode::Tree | SearchMode::Beam => {
                    require("embeddings", &a.embeddings, "tree search")?;
                    require("tree", &a.tree, "tree search")
                }
            }
        }
        Command::Train(a) => {
            train_config(a, 0).validate()?;
            if a.features == 0 || a.dim == 0 {
                return Err(Error::arg("--features and --dim must be positive"));
            }
            if a.negatives_per_query > 0 && a.negatives.is_none() && a.mode != ModeArg::FreeDsi {
                log::info!("no --negatives file; only in-batch negatives are used");
            }
            if a.mode == ModeArg::TiedMarginmse && a.negatives.is_none() {
                return Err(Error::arg("tied-marginmse needs --negatives"));
            }
            Ok(())
        }
        Command::MineNegatives(a) => {
            if a.top_k < 1 || a.per_query > a.top_k {
                return Err(Error::arg("--top-k must be >= 1 and >= --per-query"));
            }
            Ok(())
        }
        Command::Eval(a) => {
            if a.k < 1 {
                return Err(Error::arg("--k must be >= 1"));
            }
            Ok(())
        }
        Command::Verify(a) => {
            if a.instances == Some(0) {
                return Err(Error::arg("--instances must be >= 1"));
            }
            Ok(())
        }
        Command::Synth(a) => {
            if a.train_queries + a.test_queries > a.docs || a.train_queries == 0 {
                return Err(Error::arg("need 0 < train queries and train + test queries <= docs"));
            }
            Ok(())
        }
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: a.mode.into(),
        learning_rate: a.learning_rate,
        steps: a.steps,
        batch_size: a.batch_size,
        negatives_per_query: a.negatives_per_query,
        temperature: a.temperature,
        multitask_ratio: a.multitask_ratio,
        seed,
    }
}

fn execute(command: Command, seed: u64) -> Result<i32> {
    match command {
        Command::Encode(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let params = a.encoder.load(seed, None)?;
            save_embeddings(&params.encode_collection(&corpus)?, &a.out)?;
        }
        Command::BuildTree(a) => {
            let matrix = load_embeddings(&a.embeddings)?;
            build_tree(&matrix, a.branching, seed)?.save(&a.out)?;
        }
        Command::Search(a) => search(a, seed)?,
        Command::Train(a) => train(a, seed)?,
        Command::MineNegatives(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let queries = load_queries(&a.queries)?;
            let qrels = load_qrels(&a.qrels)?;
            let index = build_bm25(&corpus, a.bm25_preset.params())?;
            mine_negatives(&index, &queries, &qrels, a.top_k, a.per_query)?.save(&a.out)?;
        }
        Command::Eval(a) => {
            let run = load_run(&a.run)?;
            let qrels = load_qrels(&a.qrels)?;
            let metric = match a.metric {
                MetricArg::Recall => Metric::Recall,
                MetricArg::Mrr => Metric::Mrr,
            };
            let report = evaluate_metric(&run, &qrels, metric, a.k)?;
            if a.per_query {
                print!("{}", report.per_query_lines());
            }
            println!("{}", report.summary_line());
        }
        Command::Verify(a) => {
            let reports = match a.instances {
                None => verify::run_all(seed),
                Some(n) => vec![
                    verify::check_atomic_flat(n, seed),
                    verify::check_greedy_nprobe1(n, seed),
                    verify::check_dense_equivalent_beam(n, seed),
                    verify::check_leaf_normalization(n, seed),
                    verify::check_tree_validity(n, seed),
                    verify::check_gradients(n, seed),
                    verify::check_bm25_brute_force(n, seed),
                ],
            };
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed()) {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Synth(a) => {
            let task = generate(&SynthConfig {
                n_docs: a.docs,
                n_train_queries: a.train_queries,
                n_test_queries: a.test_queries,
                seed,
                ..SynthConfig::default()
            })?;
            fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
            let dir = a.out_dir.as_path();
            write_corpus(&task.corpus, dir.join("corpus.jsonl"))?;
            write_queries(&task.train_queries, dir.join("train_queries.tsv"))?;
            write_qrels(&task.train_qrels, dir.join("train_qrels.txt"))?;
            write_queries(&task.test_queries, dir.join("test_queries.tsv"))?;
            write_qrels(&task.test_qrels, dir.join("test_qrels.txt"))?;
        }
    }
    Ok(EXIT_OK)
}

fn query_vectors(params: &EncoderParams, queries: &[Query]) -> Result<Vec<Vec<f32>>> {
    queries
        .iter()
        .map(|q| Ok(params.encode_text(&q.text)?.into_iter().map(|v| v as f32).collect()))
        .collect()
}

fn search(a: SearchArgs, seed: u64) -> Result<()> {
    let queries = load_queries(&a.queries)?;
    let tag = a.tag.clone().unwrap_or_else(|| {
        format!("genrank-{}", a.mode.to_possible_value().expect("no skipped variants").get_name())
    });
    let mut run = RunFile::new(tag);
    let push = |run: &mut RunFile, q: &Query, ranked: &RankedList| {
        run.push_ranked(q.query_id.clone(), ranked.hits.iter().map(|h| (h.doc_id.clone(), h.score)));
    };

    if a.mode == SearchMode::Bm25 {
        let corpus = load_corpus(a.corpus.as_ref().expect("validated"))?;
        let index = build_bm25(&corpus, a.bm25_preset.params())?;
        for q in &queries {
            push(&mut run, q, &bm25_search(&index, &q.text, a.k)?);
        }
        return write_run(&run, &a.out);
    }

    let matrix: EmbeddingMatrix = load_embeddings(a.embeddings.as_ref().expect("validated"))?;
    let tree = match &a.tree {
        Some(path) if matches!(a.mode, SearchMode::Tree | SearchMode::Beam) => Some(SemanticTree::load(path)?),
        _ => None,
    };
    let params = a.encoder.load(seed, Some(matrix.dim()))?;
    let vectors = query_vectors(&params, &queries)?;
    for (q, v) in queries.iter().zip(&vectors) {
        let ranked = match a.mode {
            SearchMode::Flat => flat_search(v, &matrix, a.k)?,
            // logits, not probabilities, so the run matches flat search
            SearchMode::Atomic => decode_atomic(v, &matrix, a.k)?.logit_ranking(),
            SearchMode::Tree => tree_search(v, tree.as_ref().expect("validated"), &matrix, a.nprobe, a.k)?.ranking,
            SearchMode::Beam => {
                let config = BeamConfig {
                    width: a.beam_width,
                    prune_by: match a.prune_by {
                        PruneArg::CumulativeLogprob => PruneBy::CumulativeLogprob,
                        PruneArg::StepLogit => PruneBy::StepLogit,
                    },
                    rank_by: match a.rank_by {
                        RankArg::CumulativeLogprob => RankBy::CumulativeLogprob,
                        RankArg::LeafDot => RankBy::LeafDot,
                    },
                };
                decode_beam(v, tree.as_ref().expect("validated"), &matrix, config, a.k)?.ranking(config.rank_by)
            }
            SearchMode::Bm25 => unreachable!("handled above"),
        };
        push(&mut run, q, &ranked);
    }
    write_run(&run, &a.out)
}

fn load_margins(path: &Path) -> Result<HashMap<(String, String), f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [q, d, m] = cols[..] else {
            return Err(Error::Format {
                line: Some(i + 1),
                message: "expected query_id, doc_id, margin".into(),
            });
        };
        let m: f64 = m.parse().map_err(|_| Error::Format {
            line: Some(i + 1),
            message: format!("bad margin {m:?}"),
        })?;
        out.insert((q.to_string(), d.to_string()), m);
    }
    Ok(out)
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let corpus: Collection = load_corpus(&a.corpus)?;
    let queries = load_queries(&a.queries)?;
    let pairs = load_qrels(&a.pairs)?.positive_pairs();
    let negatives = match &a.negatives {
        Some(path) => MinedNegatives::load(path)?.as_map(),
        None => HashMap::new(),
    };
    let config = train_config(&a, seed);
    let margins = match (config.mode, &a.teacher_margins) {
        (TrainMode::TiedMarginMse, Some(path)) => Some(load_margins(path)?),
        (TrainMode::TiedMarginMse, None) => {
            let index = build_bm25(&corpus, Bm25Params::DEFAULT)?;
            Some(bm25_teacher_margins(&index, &queries, &pairs, &negatives))
        }
        _ => None,
    };
    let encoder = match &a.init {
        Some(path) => EncoderParams::load(path)?,
        None => EncoderParams::random(a.features, a.dim, DEFAULT_INIT_SCALE, a.normalize, seed)?,
    };
    let model = if config.mode == TrainMode::FreeDsi {
        let ids = corpus.iter().map(|d| d.doc_id.clone()).collect();
        let table = FreeEmbeddingTable::random(ids, encoder.dim(), seed ^ TABLE_SEED_SALT)?;
        Model::free(encoder, table)
    } else {
        Model::tied(encoder)
    };
    let data = TrainingData {
        corpus: &corpus,
        queries: &queries,
        pairs: &pairs,
        negatives: &negatives,
        teacher_margins: margins.as_ref(),
    };
    let trainer = Trainer::new(data, config, model.encoder.features())?;
    let outcome = trainer.train(model)?;
    if let Some(path) = &a.loss_log {
        fs::write(path, outcome.loss_log()).map_err(|e| Error::io(path, e))?;
    }
    outcome.model.encoder.save(&a.out)?;
    if let (Some(path), Some(table)) = (&a.table_out, &outcome.model.table) {
        save_embeddings(&table.to_matrix()?, path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run_cli(std::iter::once("genrank").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(code(&["search", "--mode", "bogus"]), 2);
        assert_eq!(code(&["frobnicate"]), 2);
        assert_eq!(code(&["eval", "--run", "r", "--qrels", "q", "--metric", "mrr", "--k", "0"]), 2);
        assert_eq!(code(&["build-tree", "--embeddings", "e", "--out", "t", "-c", "1"]), 2);
        // tree mode without a tree is rejected before any file is read
        assert_eq!(code(&["search", "--mode", "tree", "--embeddings", "missing.bin", "--queries", "q", "--out", "o"]), 2);
    }

    #[test]
    fn missing_input_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.json");
        assert_eq!(code(&["build-tree", "--embeddings", "/nonexistent/e.bin", "--out", out.to_str().unwrap()]), 1);
        assert!(!out.exists());
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(code(&["--help"]), 0);
    }
}
