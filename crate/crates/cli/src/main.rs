mod manifest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use eqprove::model::{Model, ModelConfig};
use eqprove::oracle::{audit, dataset_stats, generate_dataset, stats_csv, Dataset, GenerationConfig};
use eqprove::search::{bench, bench_csv, parse_instances, solve_curve_csv, Algorithm, Outcome, SearchConfig};
use eqprove::trainer::{any_valid_accuracy, evaluate, metrics_csv, train, AdamConfig, TrainConfig, TrainError};
use eqprove::{check_certificate, parse, Expr, RewritePath, Verdict};

use manifest::{sibling, ManifestBuilder};

const EXIT_USAGE: u8 = 1;
const EXIT_NOT_FOUND: u8 = 2;
const EXIT_INVALID: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "eqprove", version)]
#[command(about = "Find and check rewrite proofs between arithmetic expressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a balanced dataset of expression pairs with exact distances.
    GenData(GenDataArgs),
    /// Train a Tree-LSTM model on a generated dataset.
    Train(TrainArgs),
    /// Report metrics of a model on a dataset file.
    Eval(EvalArgs),
    /// Search for a rewrite path between two expressions.
    Search(SearchArgs),
    /// Check a rewrite path certificate.
    Check(CheckArgs),
    /// Run several search algorithms over a file of instances.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 6)]
    max_distance: usize,
    #[arg(long, default_value_t = 100)]
    per_cell: usize,
    /// Source height range in edges, LO:HI.
    #[arg(long, default_value = "3:5", value_parser = parse_range)]
    #[serde(serialize_with = "ser_range")]
    height: RangeInclusive<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.05)]
    validation_ratio: f64,
    /// Re-verify every example with BFS before writing.
    #[arg(long)]
    audit: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    memory_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Clip the batch gradient to this L2 norm.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also report accuracy against every shortest first step (slow).
    #[arg(long)]
    any_valid: bool,
}

#[derive(Args, Debug, Serialize)]
struct SearchOptions {
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long, default_value_t = 2_000_000)]
    max_visited: usize,
}

impl SearchOptions {
    fn config(&self) -> Result<SearchConfig> {
        let timeout = match self.timeout {
            Some(t) if t.is_finite() && t >= 0.0 => Some(Duration::from_secs_f64(t)),
            Some(t) => bail!("invalid timeout {t}"),
            None => None,
        };
        let cfg = SearchConfig {
            alpha: self.alpha,
            batch_size: self.batch_size,
            timeout,
            max_visited: self.max_visited,
            trace: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "batch-nngs")]
    algo: String,
    #[command(flatten)]
    opts: SearchOptions,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    /// Write the found path here in the certificate format.
    #[arg(long)]
    emit_path: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CheckArgs {
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    #[arg(long)]
    path: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    instances: PathBuf,
    /// Comma-separated list of bfs, nngs, batch-nngs.
    #[arg(long, default_value = "bfs,nngs,batch-nngs")]
    algos: String,
    #[command(flatten)]
    opts: SearchOptions,
    /// Instances searched concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.trim().parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
    Ok(lo..=hi)
}

fn ser_range<S: serde::Serializer>(r: &RangeInclusive<usize>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}:{}", r.start(), r.end()))
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(EXIT_USAGE, e.into())
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_tsv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    ds.write_tsv(BufWriter::new(f))?;
    Ok(())
}

fn load_model(path: &Option<PathBuf>, algos: &[Algorithm]) -> Result<Option<Model>> {
    match path {
        Some(p) => Ok(Some(Model::load(p).with_context(|| format!("loading {}", p.display()))?)),
        None => {
            if let Some(a) = algos.iter().find(|a| a.needs_model()) {
                bail!("--model is required for {a}");
            }
            Ok(None)
        }
    }
}

fn config_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn gen_data(args: GenDataArgs) -> Result<(), Exit> {
    let cfg = GenerationConfig::new(args.max_distance, args.per_cell, args.height.clone(), args.seed);
    let mut manifest = ManifestBuilder::new("gen-data", config_json(&args)).seed(args.seed);
    let (ds, report) = generate_dataset(&cfg)?;
    for c in &report.short_cells {
        eprintln!(
            "warning: cell (distance {}, {}) has {} of {} examples",
            c.distance, c.first, c.produced, args.per_cell
        );
    }
    if args.audit {
        let bad = audit(&ds);
        if !bad.is_empty() {
            return Err(Exit(EXIT_USAGE, anyhow::anyhow!("audit failed for {} examples", bad.len())));
        }
        eprintln!("audit: {} examples exact", ds.len());
    }
    let splits = ds.split_balanced(args.train_ratio, args.validation_ratio);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let names = ["train", "validation", "test"];
    for (name, split) in names.iter().zip(&splits) {
        let p = args.out.join(format!("{name}.tsv"));
        write_dataset(split, &p)?;
        manifest.output(p);
    }
    let columns: Vec<(&str, _)> = names.iter().copied().zip(splits.iter().map(dataset_stats)).collect();
    let stats = args.out.join("stats.csv");
    fs::write(&stats, stats_csv(&columns))?;
    manifest.output(stats);
    manifest.write(&args.out.join("manifest.json"))?;
    println!(
        "{} examples ({} train, {} validation, {} test) from {} sources",
        ds.len(),
        splits[0].len(),
        splits[1].len(),
        splits[2].len(),
        report.sources_explored
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), Exit> {
    let train_set = read_dataset(&args.data.join("train.tsv"))?;
    let validation = read_dataset(&args.data.join("validation.tsv"))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        seed: args.seed,
        shuffle: true,
        clip_norm: args.clip_norm,
    };
    let mut model = Model::init(ModelConfig::new(args.memory_dim), args.seed)?;
    let mut manifest = ManifestBuilder::new("train", config_json(&args))
        .seed(args.seed)
        .input(&args.data);
    let metrics_path = sibling(&args.out, "metrics.csv");
    let result = train(&train_set, &validation, &cfg, &mut model, &mut |rows| {
        for r in rows {
            eprintln!(
                "epoch {} {}: mae {:.4} accuracy {:.4} dmse {:.4} dce {:.4}",
                r.epoch, r.split, r.mae, r.accuracy, r.discounted_mse, r.discounted_ce
            );
        }
    });
    let rows = match result {
        Ok(rows) => rows,
        Err(TrainError::NonFinite { epoch, last_good }) => {
            let p = sibling(&args.out, "last-good.nng");
            last_good.save(&p)?;
            return Err(Exit(
                EXIT_USAGE,
                anyhow::anyhow!("training diverged in epoch {epoch}; last good model saved to {}", p.display()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    model.save(&args.out)?;
    fs::write(&metrics_path, metrics_csv(&rows))?;
    manifest.output(&args.out);
    manifest.output(&metrics_path);
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), Exit> {
    let model = Model::load(&args.model)?;
    let ds = read_dataset(&args.data)?;
    let ev = evaluate(&ds, &model, 0, "eval")?;
    println!(
        "n {} mae {:.4} accuracy {:.4} dmse {:.4} dce {:.4}",
        ds.len(),
        ev.row.mae,
        ev.row.accuracy,
        ev.row.discounted_mse,
        ev.row.discounted_ce
    );
    println!("distance,count,mae,accuracy");
    for d in &ev.per_distance {
        println!("{},{},{:.4},{:.4}", d.distance, d.count, d.mae, d.accuracy);
    }
    if args.any_valid {
        println!("any-valid accuracy {:.4}", any_valid_accuracy(&ds, &model)?);
    }
    Ok(())
}

fn parse_expr(what: &str, text: &str) -> Result<Expr> {
    parse(text).with_context(|| format!("{what} {text:?}"))
}

fn search_cmd(args: SearchArgs) -> Result<(), Exit> {
    let algo: Algorithm = args.algo.parse()?;
    let cfg = args.opts.config()?;
    let source = parse_expr("source", &args.source)?;
    let target = parse_expr("target", &args.target)?;
    let model = load_model(&args.model, &[algo])?;
    let r = algo.run(&source, &target, model.as_ref(), &cfg)?;
    let s = &r.stats;
    println!("outcome: {}", r.outcome.name());
    println!(
        "states_expanded: {}\nstates_generated: {}\nnn_batches: {}\nelapsed_ms: {:.3}",
        s.states_expanded,
        s.states_generated,
        s.nn_batches,
        s.elapsed.as_secs_f64() * 1e3
    );
    let Outcome::Found(path) = &r.outcome else {
        return Err(Exit(EXIT_NOT_FOUND, anyhow::anyhow!("no path found ({})", r.outcome.name())));
    };
    println!("path_len: {}", path.len());
    print!("{}", path.to_text());
    if let Some(p) = &args.emit_path {
        fs::write(p, path.to_text()).with_context(|| format!("writing {}", p.display()))?;
        let mut manifest = ManifestBuilder::new("search", config_json(&args));
        if let Some(m) = &args.model {
            manifest = manifest.input(m);
        }
        manifest.output(p);
        manifest.write(&sibling(p, "manifest.json"))?;
    }
    Ok(())
}

fn check_cmd(args: CheckArgs) -> Result<(), Exit> {
    let source = parse_expr("source", &args.source)?;
    let target = parse_expr("target", &args.target)?;
    let text = fs::read_to_string(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    let path = RewritePath::from_text(&text)?;
    let verdict = check_certificate(&source, &target, &path);
    println!("{verdict}");
    match verdict {
        Verdict::Valid => Ok(()),
        Verdict::Invalid(_) => Err(Exit(EXIT_INVALID, anyhow::anyhow!("certificate rejected"))),
    }
}

fn bench_cmd(args: BenchArgs) -> Result<(), Exit> {
    let algos = args
        .algos
        .split(',')
        .map(|a| a.trim().parse::<Algorithm>())
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = args.opts.config()?;
    let model = load_model(&args.model, &algos)?;
    let text = fs::read_to_string(&args.instances).with_context(|| format!("reading {}", args.instances.display()))?;
    let instances = parse_instances(&text)?;
    let mut manifest = ManifestBuilder::new("bench", config_json(&args)).input(&args.instances);
    if let Some(m) = &args.model {
        manifest = manifest.input(m);
    }
    let rows = bench(&instances, &algos, model.as_ref(), &cfg, args.jobs)?;
    if let Some(bad) = rows.iter().find(|r| matches!(r.verdict, Some(Verdict::Invalid(_)))) {
        return Err(Exit(
            EXIT_INVALID,
            anyhow::anyhow!("{} produced an invalid path on instance {}", bad.algorithm, bad.instance_id),
        ));
    }
    fs::write(&args.out, bench_csv(&rows)).with_context(|| format!("writing {}", args.out.display()))?;
    let curve = sibling(&args.out, "curve.csv");
    fs::write(&curve, solve_curve_csv(&rows, &algos))?;
    manifest.output(&args.out);
    manifest.output(&curve);
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    for a in &algos {
        let solved = rows
            .iter()
            .filter(|r| r.algorithm == *a && r.result.outcome.path().is_some())
            .count();
        println!("{a}: solved {solved}/{}", instances.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Check(a) => check_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
