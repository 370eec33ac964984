//! Retrieval ranking, the standard metric set, and the command line.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataio::{load_dataset, synth_generate, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::scoring::{pair_score, similarity_matrix, ModelParams, ScoreMode};
use crate::trainer::{
    gradient_check, load_checkpoint, train, GradCheckConfig, TrainConfig,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// 1-based rank of `target` under descending score order with ties broken
/// by index: rank = 1 + #{j : s_j > s_t} + #{j < t : s_j = s_t}.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::InvalidArg(format!(
            "target {target} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let st = scores[target];
    let higher = scores.iter().filter(|&&s| s > st).count();
    let earlier_ties = scores[..target].iter().filter(|&&s| s == st).count();
    Ok(1 + higher + earlier_ties)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub rsum: f64,
    /// Median rank; mean of the two middles for even counts.
    pub mdr: f64,
    pub mnr: f64,
}

pub fn metrics(ranks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("metrics ranks"));
    }
    if ranks.iter().any(|&r| r == 0) {
        return Err(Error::InvalidArg("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let r1 = recall(1);
    let r5 = recall(5);
    let r10 = recall(10);
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let mdr = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    let mnr = ranks.iter().sum::<usize>() as f64 / n;
    Ok(RetrievalMetrics {
        r1,
        r5,
        r10,
        rsum: r1 + r5 + r10,
        mdr,
        mnr,
    })
}

/// Ranks of the diagonal in both directions: t2v reads rows, v2t columns.
pub fn directional_ranks(sim: &DenseMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
    let (r, c) = sim.shape();
    if r == 0 {
        return Err(Error::Empty("similarity matrix"));
    }
    if r != c {
        return Err(Error::shape(
            "directional_ranks",
            format!("similarity matrix {r}x{c} not square"),
        ));
    }
    let mut t2v = Vec::with_capacity(r);
    for i in 0..r {
        t2v.push(rank_of_target(sim.row(i), i)?);
    }
    let mut v2t = Vec::with_capacity(c);
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| sim.get(i, j)).collect();
        v2t.push(rank_of_target(&col, j)?);
    }
    Ok((t2v, v2t))
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metrics as reported: two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub rsum: f64,
    pub mdr: f64,
    pub mnr: f64,
}

impl From<&RetrievalMetrics> for MetricsJson {
    fn from(m: &RetrievalMetrics) -> MetricsJson {
        MetricsJson {
            r1: round2(m.r1),
            r5: round2(m.r5),
            r10: round2(m.r10),
            rsum: round2(m.rsum),
            mdr: round2(m.mdr),
            mnr: round2(m.mnr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t2v: MetricsJson,
    pub v2t: MetricsJson,
    pub pairs: usize,
    pub checkpoint: String,
    pub seed: u64,
}

/// Full pairwise evaluation of one split in eval mode (noise-free).
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    checkpoint: &str,
    seed: u64,
) -> Result<EvalReport> {
    let items = dataset.split_items(split);
    if items.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let texts: Vec<DenseMatrix> = items.iter().map(|it| it.text.clone()).collect();
    let videos: Vec<DenseMatrix> = items.iter().map(|it| it.video.clone()).collect();
    let sim = similarity_matrix(&texts, &videos, params, &mut ScoreMode::Eval)?;
    let (rt, rv) = directional_ranks(&sim)?;
    Ok(EvalReport {
        t2v: MetricsJson::from(&metrics(&rt)?),
        v2t: MetricsJson::from(&metrics(&rv)?),
        pairs: items.len(),
        checkpoint: checkpoint.to_string(),
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
}

/// Scores the query's text against every video in the manifest. Descending
/// score, ties by id. Linear in the corpus; desk scale only.
pub fn retrieve(
    params: &ModelParams,
    dataset: &Dataset,
    query_id: &str,
    topk: usize,
) -> Result<Vec<RetrievalHit>> {
    if topk == 0 {
        return Err(Error::InvalidArg("topk must be >= 1".into()));
    }
    let query = dataset
        .find(query_id)
        .ok_or_else(|| Error::InvalidArg(format!("query id `{query_id}` not in manifest")))?;
    let mut hits = Vec::with_capacity(dataset.items.len());
    for item in &dataset.items {
        let score = pair_score(&query.text, &item.video, params, &mut ScoreMode::Eval)?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score against `{}`", item.id)));
        }
        hits.push(RetrievalHit {
            id: item.id.clone(),
            score,
        });
    }
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.id.cmp(&b.id))
    });
    hits.truncate(topk);
    Ok(hits)
}

// ---------------------------------------------------------------------------
// Command line.

#[derive(Parser)]
#[command(name = "hypertvr", version, about = "Text-video retrieval on pair hypergraphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clustered-pair dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 12)]
        frames: usize,
    },
    /// Train on a manifest and keep the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config; `{}` uses every default.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Also write the JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Rank all videos for one query text.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        topk: usize,
    },
    /// Compare backward gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 54)]
        seed: u64,
    },
    /// Print a checkpoint's config and parameter table.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Exit codes: 0 success, 1 usage, 2 data or format error, 3 gradcheck
/// above tolerance.
pub fn cli_dispatch(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Synth {
            out,
            pairs,
            clusters,
            seed,
            noise,
            frames,
        } => {
            let mut spec = SynthSpec::new(pairs, clusters, seed);
            spec.noise = noise;
            spec.frames = frames;
            let manifest = synth_generate(&spec, &out)?;
            println!("{}", manifest.display());
            Ok(0)
        }
        Cmd::Train {
            manifest,
            config,
            out,
        } => {
            let config = TrainConfig::from_json_file(&config)?;
            let dataset = load_dataset(&manifest)?;
            let outcome = train(&dataset, &config, &out)?;
            println!(
                "best epoch {} (val metric {:.2})",
                outcome.best_epoch, outcome.best_metric
            );
            println!("{}", outcome.checkpoint_dir.display());
            Ok(0)
        }
        Cmd::Eval {
            ckpt,
            manifest,
            split,
            json,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&manifest)?;
            let report = evaluate(
                &ck.params,
                &dataset,
                split.into(),
                &ckpt.display().to_string(),
                ck.seed,
            )?;
            let body = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::InvalidArg(format!("serialize report: {e}")))?;
            println!("{body}");
            if let Some(path) = json {
                std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(0)
        }
        Cmd::Retrieve {
            ckpt,
            manifest,
            query_id,
            topk,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&manifest)?;
            let hits = retrieve(&ck.params, &dataset, &query_id, topk)?;
            for (i, hit) in hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}", i + 1, hit.id, hit.score);
            }
            Ok(0)
        }
        Cmd::Gradcheck { dim, seed } => {
            let cfg = GradCheckConfig {
                hidden_dim: dim,
                seed,
                ..GradCheckConfig::default()
            };
            let report = gradient_check(&cfg)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {})",
                report.max_rel_err, report.coords, report.worst
            );
            if report.max_rel_err < GRADCHECK_TOLERANCE {
                Ok(0)
            } else {
                Ok(3)
            }
        }
        Cmd::Inspect { ckpt } => {
            let ck = load_checkpoint(&ckpt)?;
            let config = serde_json::to_string_pretty(&ck.config)
                .map_err(|e| Error::InvalidArg(format!("serialize config: {e}")))?;
            println!("config: {config}");
            println!("seed: {}", ck.seed);
            println!("epoch: {}", ck.epoch);
            println!("best_metric: {:.4}", ck.best_metric);
            println!("parameters:");
            for name in ck.params.names() {
                let (r, c) = ck.params.tensor(&name).expect("named tensor").shape();
                println!("  {name}  {r}x{c}");
            }
            Ok(0)
        }
    }
}
