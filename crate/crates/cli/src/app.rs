use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tagbert::model::{Fusion, GraphMode};
use tagbert::numerics::Scalar;
use tagbert::querydata::Splits;
use tagbert::traineval::Variant;

use crate::commands::{self, data_paths, read_records, require_files, require_parent};
use crate::config::{Precision, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "tagbert",
    version,
    about = "Keep/drop classification of query tokens with tag-graph attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic tagged corpus split into train/val/test
    GenData(GenDataArgs),
    /// Mine the static tag graph from a training set
    Mine(MineArgs),
    /// Train a model and write a checkpoint plus an epoch log
    Train(TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Label the tokens of one query
    Predict(PredictArgs),
    /// Train every variant under every seed and tabulate test metrics
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory for train.jsonl, val.jsonl, test.jsonl and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Count (`100`) or fraction (`0.5%`, `0.005`); default 0.5%
    #[arg(long)]
    pub min_support: Option<String>,
    /// Graph TSV to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelOverrides {
    /// Graph mode: static, dynamic or none
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<GraphMode>,
    /// Fusion: gated, mean, min or max
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory holding train.jsonl and val.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Static tag graph TSV (static mode only)
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log CSV; defaults to the checkpoint path with `.log.csv`
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL dataset to score
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.json and per_length.csv; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Whitespace-separated query tokens
    #[arg(long)]
    pub query: String,
    /// One tag per query token
    #[arg(long)]
    pub tags: String,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Static tag graph TSV; mined from the training set when omitted
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Directory for runs.csv and summary.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Shift every configured seed so the first equals this value
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated variants such as none,static-gated
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<Variant>>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

fn parse_mode(s: &str) -> Result<GraphMode, String> {
    match s {
        "static" => Ok(GraphMode::Static),
        "dynamic" => Ok(GraphMode::Dynamic),
        "none" => Ok(GraphMode::None),
        _ => Err(format!("unknown graph mode `{s}` (static, dynamic, none)")),
    }
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    match s {
        "gated" => Ok(Fusion::Gated),
        "mean" => Ok(Fusion::Mean),
        "min" => Ok(Fusion::Min),
        "max" => Ok(Fusion::Max),
        _ => Err(format!("unknown fusion `{s}` (gated, mean, min, max)")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.model.graph = m;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::from(e).at(format!("writing {}", path.display())))
}

/// Runs one command; informational lines go to `out`, warnings and
/// progress to `err`.
pub fn run(cli: Cli, out: &mut impl Write, err: &mut impl Write) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            if let Some(n) = a.records {
                cfg.synth.records = n;
            }
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            cfg.validate()?;
            let m = commands::gen_data(&cfg, &a.out)?;
            let _ = writeln!(
                out,
                "wrote {} records (train {}, val {}, test {}; seed {}) to {}",
                m.records,
                m.train,
                m.val,
                m.test,
                m.seed,
                a.out.display()
            );
            Ok(())
        }
        Command::Mine(a) => {
            let support = match &a.min_support {
                Some(s) => commands::parse_min_support(s)?,
                None => Default::default(),
            };
            support.resolve(1)?;
            require_files(&[&a.train])?;
            require_parent(&a.out)?;
            let records = read_records(&a.train)?;
            let (graph, echo) = commands::mine(&records, support).map_err(|e| e.at("mining"))?;
            let _ = writeln!(out, "{echo}");
            graph
                .write(&a.out)
                .map_err(|e| CliError::from(e).at(format!("writing {}", a.out.display())))?;
            let _ = writeln!(out, "{} edges written to {}", graph.num_edges(), a.out.display());
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            a.overrides.apply(&mut cfg);
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let [train_path, val_path, _] = data_paths(&a.data);
            require_files(&[&train_path, &val_path])?;
            if let Some(g) = &a.graph {
                require_files(&[g])?;
            }
            require_parent(&a.out)?;
            let log_path = a.log.clone().unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            require_parent(&log_path)?;
            let graph = commands::graph_for_mode(cfg.model.graph, a.graph.as_deref(), err)?;
            let train_set = read_records(&train_path)?;
            let val_set = read_records(&val_path)?;
            let report = match cfg.precision {
                Precision::F32 => commands::train_model::<f32>(&cfg, &train_set, &val_set, graph, &a.out)?,
                Precision::F64 => commands::train_model::<f64>(&cfg, &train_set, &val_set, graph, &a.out)?,
            };
            write_file(&log_path, report.log_csv().as_bytes())?;
            let best = &report.log[report.best_epoch];
            let _ = writeln!(
                out,
                "best epoch {} (val loss {:.4}, val token acc {:.4}); checkpoint {}; log {}",
                report.best_epoch,
                best.val_loss,
                best.val_token_acc,
                a.out.display(),
                log_path.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            require_files(&[&a.checkpoint, &a.data])?;
            if let Some(dir) = &a.out {
                fs::create_dir_all(dir).map_err(|e| CliError::from(e).at(format!("creating {}", dir.display())))?;
            }
            let records = read_records(&a.data)?;
            let report = match commands::checkpoint_precision(&a.checkpoint)? {
                Precision::F32 => eval_with::<f32>(&a, &records)?,
                Precision::F64 => eval_with::<f64>(&a, &records)?,
            };
            let json = serde_json::to_string_pretty(&report).expect("metrics serialize") + "\n";
            let csv = report.per_length_csv();
            match &a.out {
                Some(dir) => {
                    write_file(&dir.join("metrics.json"), json.as_bytes())?;
                    write_file(&dir.join("per_length.csv"), csv.as_bytes())?;
                    let _ = writeln!(
                        out,
                        "f1 {:.4} exact_match {:.4} token_acc {:.4} over {} queries; wrote {}",
                        report.f1,
                        report.exact_match,
                        report.token_acc,
                        report.queries,
                        dir.display()
                    );
                }
                None => {
                    let _ = write!(out, "{json}\n{csv}");
                }
            }
            Ok(())
        }
        Command::Predict(a) => {
            require_files(&[&a.checkpoint])?;
            let p = match commands::checkpoint_precision(&a.checkpoint)? {
                Precision::F32 => commands::predict(&commands::load_model::<f32>(&a.checkpoint)?, &a.query, &a.tags)?,
                Precision::F64 => commands::predict(&commands::load_model::<f64>(&a.checkpoint)?, &a.query, &a.tags)?,
            };
            if !p.unknown_tokens.is_empty() {
                let _ = writeln!(
                    err,
                    "warning: unknown tokens mapped to [UNK]: {}",
                    p.unknown_tokens.join(" ")
                );
            }
            if !p.unknown_tags.is_empty() {
                let _ = writeln!(
                    err,
                    "warning: unknown tags mapped to [UNK]: {}",
                    p.unknown_tags.join(" ")
                );
            }
            let _ = write!(out, "{}", p.render());
            Ok(())
        }
        Command::Compare(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            a.overrides.apply(&mut cfg);
            if let Some(s) = &a.seeds {
                cfg.seeds = s.clone();
            }
            if let Some(base) = a.seed {
                let first = cfg.seeds.first().copied().unwrap_or(0);
                cfg.seeds = cfg.seeds.iter().map(|s| s - first + base).collect();
            }
            if let Some(v) = &a.variants {
                cfg.variants = v.clone();
            }
            cfg.validate()?;
            let [train_path, val_path, test_path] = data_paths(&a.data);
            require_files(&[&train_path, &val_path, &test_path])?;
            if let Some(g) = &a.graph {
                require_files(&[g])?;
            }
            fs::create_dir_all(&a.out).map_err(|e| CliError::from(e).at(format!("creating {}", a.out.display())))?;
            let splits = Splits {
                train: read_records(&train_path)?,
                val: read_records(&val_path)?,
                test: read_records(&test_path)?,
            };
            let graph = match &a.graph {
                Some(p) => commands::read_graph(p)?,
                None => {
                    let (g, echo) = commands::mine(&splits.train, cfg.min_support).map_err(|e| e.at("mining"))?;
                    let _ = writeln!(err, "mined graph from training set: {echo}, {} edges", g.num_edges());
                    g
                }
            };
            let output = match cfg.precision {
                Precision::F32 => compare_with::<f32>(&cfg, &splits, &graph, err)?,
                Precision::F64 => compare_with::<f64>(&cfg, &splits, &graph, err)?,
            };
            write_file(&a.out.join("runs.csv"), output.runs_csv.as_bytes())?;
            write_file(&a.out.join("summary.csv"), output.summary_csv.as_bytes())?;
            let _ = write!(out, "{}", output.table);
            if !output.failures.is_empty() {
                let _ = writeln!(err, "warning: {} run(s) failed", output.failures.len());
            }
            Ok(())
        }
    }
}

fn eval_with<T>(
    a: &EvalArgs,
    records: &[tagbert::querydata::QueryRecord],
) -> Result<tagbert::traineval::MetricsReport, CliError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let model = commands::load_model::<T>(&a.checkpoint)?;
    commands::eval_model(&model, records, a.batch_size.max(1))
}

fn compare_with<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    graph: &tagbert::taggraph::TagGraph,
    err: &mut impl Write,
) -> Result<commands::CompareOutput, CliError> {
    commands::compare::<T>(cfg, splits, graph, |line| {
        let _ = writeln!(err, "{line}");
    })
}

/// Parses `args`, runs, and returns the process exit status.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out = io::stdout().lock();
    let mut err = io::stderr().lock();
    match run(cli, &mut out, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
