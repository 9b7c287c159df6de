//! `clspool` command line: train, eval, synth, project and gradcheck.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::builder::PossibleValuesParser;
use clap::{Args, CommandFactory, Parser, Subcommand};
use clspool::analysis::project_dumps;
use clspool::checkpoint::{load_checkpoint, save_checkpoint};
use clspool::config::parse_kv;
use clspool::data::{load_jsonl, synth_generate, write_jsonl, Schema, SynthSpec};
use clspool::gradcheck::{run_suite, SEEDS};
use clspool::io::write_atomic;
use clspool::train::{
    cross_validated_train, encode_examples, evaluate, DumpRequest, Experiment, TaskShape,
    TrainConfig,
};
use clspool::{Error, PoolingKind};

const POOLINGS: [&str; 3] = ["last", "lstm", "attention"];
const SCHEMAS: [&str; 2] = ["absa", "nli"];

#[derive(Debug, Parser)]
#[command(
    name = "clspool",
    version,
    about = "Pooling heads over per-layer [CLS] vectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
enum Command {
    /// Cross-validated training; writes results.csv and one checkpoint per fold.
    Train(TrainArgs),
    /// Scores a checkpoint on a JSONL file.
    Eval(EvalArgs),
    /// Writes a synthetic pair-classification dataset.
    Synth(SynthArgs),
    /// PCA-projects layer dumps and scores their clusters.
    Project(ProjectArgs),
    /// Runs the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
struct TrainArgs {
    /// JSONL dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = PossibleValuesParser::new(SCHEMAS))]
    schema: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(POOLINGS))]
    pooling: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Default 10 for absa, 5 for nli.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// L2 coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// key=value file; keys are the long flag names. Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated epochs at which to dump per-layer [CLS] vectors.
    #[arg(long)]
    dump_epochs: Option<String>,
    /// Comma-separated 1-based layers to dump; all when omitted.
    #[arg(long)]
    dump_layers: Option<String>,
    /// Fold whose held-out examples are dumped.
    #[arg(long)]
    dump_fold: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "absa", value_parser = PossibleValuesParser::new(SCHEMAS))]
    schema: String,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Longer sentences that name every aspect.
    #[arg(long)]
    verbose_task: bool,
    #[arg(long, default_value = "absa", value_parser = PossibleValuesParser::new(SCHEMAS))]
    schema: String,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Directory of epoch{E}_layer{L}.csv dumps.
    #[arg(long)]
    dumps: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = SEEDS)]
    seeds: u64,
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on data or runtime errors, 2 on usage
/// and configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let rendered = e.render().to_string();
            if e.use_stderr() && !rendered.contains("Usage:") {
                eprintln!("\n{}", usage_for(args.get(1)));
            }
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Project(a) => project(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", usage_for(args.get(1)));
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Usage line of the subcommand named by `name`, or of the whole tool.
fn usage_for(name: Option<&OsString>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = name.and_then(|n| n.to_str()).and_then(|n| {
        cmd.find_subcommand_mut(n)
            .map(|c| c.render_usage().to_string())
    });
    sub.unwrap_or_else(|| Cli::command().render_usage().to_string())
}

/// Prefixes I/O errors with the path involved.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_schema(s: &str) -> clspool::Result<Schema> {
    s.parse()
}

fn parse_list(key: &str, s: &str) -> clspool::Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| config_err(format!("{key}: '{t}' is not a non-negative integer")))
        })
        .collect()
}

/// Fills unset fields of `args` from a config file.
fn merge_config(args: &mut TrainArgs, path: &Path) -> clspool::Result<()> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .map_err(at(path))?;
    let kv = parse_kv(&text)?;
    for (key, value) in kv {
        let key = key.replace('_', "-");
        let num = |what: &str| {
            config_err(format!(
                "config key '{key}': '{value}' is not a valid {what}"
            ))
        };
        match key.as_str() {
            "data" => {
                args.data.get_or_insert_with(|| value.clone().into());
            }
            "schema" => {
                if !SCHEMAS.contains(&value.as_str()) {
                    return Err(config_err(format!(
                        "config key 'schema': '{value}', expected absa or nli"
                    )));
                }
                args.schema.get_or_insert(value);
            }
            "pooling" => {
                value
                    .parse::<PoolingKind>()
                    .map_err(|e| config_err(e.to_string()))?;
                args.pooling.get_or_insert(value);
            }
            "folds" => set(&mut args.folds, value.parse().map_err(|_| num("integer"))?),
            "epochs" => set(&mut args.epochs, value.parse().map_err(|_| num("integer"))?),
            "lr" => set(&mut args.lr, value.parse().map_err(|_| num("number"))?),
            "seed" => set(&mut args.seed, value.parse().map_err(|_| num("integer"))?),
            "lambda" => set(&mut args.lambda, value.parse().map_err(|_| num("number"))?),
            "dropout" => set(&mut args.dropout, value.parse().map_err(|_| num("number"))?),
            "batch-size" => set(
                &mut args.batch_size,
                value.parse().map_err(|_| num("integer"))?,
            ),
            "out" => {
                args.out.get_or_insert_with(|| value.clone().into());
            }
            "dump-epochs" => set(&mut args.dump_epochs, value),
            "dump-layers" => set(&mut args.dump_layers, value),
            "dump-fold" => set(
                &mut args.dump_fold,
                value.parse().map_err(|_| num("integer"))?,
            ),
            "config" => return Err(config_err("config files cannot include other config files")),
            _ => return Err(config_err(format!("unknown config key '{key}'"))),
        }
    }
    Ok(())
}

fn set<T>(slot: &mut Option<T>, value: T) {
    if slot.is_none() {
        *slot = Some(value);
    }
}

fn train(mut args: TrainArgs) -> clspool::Result<i32> {
    if let Some(path) = args.config.clone() {
        merge_config(&mut args, &path)?;
    }
    let data_path = args
        .data
        .clone()
        .ok_or_else(|| config_err("train needs --data"))?;
    let schema_name = args.schema.clone().unwrap_or_else(|| "absa".into());
    let schema = parse_schema(&schema_name)?;
    let pooling_name = args.pooling.clone().unwrap_or_else(|| "lstm".into());
    let pooling: PoolingKind = pooling_name.parse()?;
    let task = match schema {
        Schema::Absa => TaskShape::Absa,
        Schema::Nli => TaskShape::Nli,
    };
    let mut cfg = TrainConfig::desk(task);
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("clspool-run"));

    let mut exp = Experiment::desk(pooling, cfg.clone());
    let dump_fold = args.dump_fold.unwrap_or(0);
    if dump_fold >= cfg.folds {
        return Err(config_err(format!(
            "dump-fold {dump_fold} but only {} folds",
            cfg.folds
        )));
    }
    if let Some(epochs) = &args.dump_epochs {
        let epochs = parse_list("dump-epochs", epochs)?;
        if let Some(&e) = epochs.iter().find(|&&e| e == 0 || e > cfg.epochs) {
            return Err(config_err(format!(
                "dump epoch {e} outside 1..={}",
                cfg.epochs
            )));
        }
        let layers = match &args.dump_layers {
            Some(l) => parse_list("dump-layers", l)?,
            None => Vec::new(),
        };
        exp.dump = Some(DumpRequest {
            dir: out.join("dumps"),
            fold: dump_fold,
            epochs,
            layers,
        });
    }

    let dataset = load_jsonl(&data_path, schema).map_err(at(&data_path))?;
    fs::create_dir_all(&out)?;
    if let Some(d) = &exp.dump {
        fs::create_dir_all(&d.dir)?;
    }
    let report = cross_validated_train(&dataset, &exp)?;
    write_atomic(&out.join("results.csv"), report.to_csv().as_bytes())?;
    for f in &report.folds {
        save_checkpoint(
            &out.join(format!("fold{}.ckpt", f.fold)),
            &f.model,
            &f.vocab,
        )?;
    }

    let mut resolved = String::new();
    let _ = writeln!(resolved, "data={}", data_path.display());
    let _ = writeln!(resolved, "schema={schema_name}");
    let _ = writeln!(resolved, "pooling={pooling}");
    let _ = writeln!(resolved, "folds={}", cfg.folds);
    let _ = writeln!(resolved, "epochs={}", cfg.epochs);
    let _ = writeln!(resolved, "lr={}", cfg.lr);
    let _ = writeln!(resolved, "seed={}", cfg.seed);
    let _ = writeln!(resolved, "lambda={}", cfg.lambda);
    let _ = writeln!(resolved, "dropout={}", cfg.dropout);
    let _ = writeln!(resolved, "batch-size={}", cfg.batch_size);
    if let Some(d) = &exp.dump {
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(resolved, "dump-epochs={}", join(&d.epochs));
        if !d.layers.is_empty() {
            let _ = writeln!(resolved, "dump-layers={}", join(&d.layers));
        }
        let _ = writeln!(resolved, "dump-fold={}", d.fold);
    }
    write_atomic(&out.join("config.txt"), resolved.as_bytes())?;

    println!(
        "{pooling}: {} folds, accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
        report.folds.len(),
        report.mean.accuracy,
        report.stddev.accuracy,
        report.mean.macro_f1,
        report.stddev.macro_f1
    );
    println!("wrote {}", out.join("results.csv").display());
    Ok(0)
}

fn eval(args: EvalArgs) -> clspool::Result<i32> {
    let schema = parse_schema(&args.schema)?;
    let (model, vocab) = load_checkpoint(&args.checkpoint).map_err(at(&args.checkpoint))?;
    let data = load_jsonl(&args.data, schema).map_err(at(&args.data))?;
    if let Some(bad) = data.iter().find(|e| e.label >= model.config.classes) {
        return Err(Error::Index {
            what: "label",
            index: bad.label,
            bound: model.config.classes,
        });
    }
    let encoded = encode_examples(&data, &vocab, model.config.encoder.max_len)?;
    let r = evaluate(&model, &encoded)?;
    let mut line = format!(
        "examples={} accuracy={} macro_f1={}",
        data.len(),
        r.accuracy,
        r.macro_f1
    );
    for (c, f) in r.per_class_f1.iter().enumerate() {
        let _ = write!(line, " f1_{c}={f}");
    }
    println!("{line}");
    Ok(0)
}

fn synth(args: SynthArgs) -> clspool::Result<i32> {
    let schema = parse_schema(&args.schema)?;
    let spec = if args.verbose_task {
        SynthSpec::verbose()
    } else {
        SynthSpec::default()
    };
    let data = synth_generate(args.n, args.classes, args.seed, &spec)?;
    write_jsonl(&args.out, &data, schema)?;
    println!("wrote {} examples to {}", data.len(), args.out.display());
    Ok(0)
}

fn project(args: ProjectArgs) -> clspool::Result<i32> {
    let summaries = project_dumps(&args.dumps, &args.out)?;
    println!("epoch,layer,cluster_score");
    for s in &summaries {
        println!("{},{},{:.4}", s.epoch, s.layer, s.score);
    }
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> clspool::Result<i32> {
    if args.seeds == 0 {
        return Err(config_err("--seeds must be at least 1"));
    }
    let results = run_suite(args.seeds)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {}: worst relative error {:.2e} over {} seeds",
            r.name, r.worst, r.seeds
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", results.len());
        return Ok(1);
    }
    Ok(0)
}
