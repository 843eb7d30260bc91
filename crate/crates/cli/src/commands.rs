use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tagbert::model::{
    encode_tokens, load_checkpoint, save_checkpoint, ForwardOptions, GraphMode, Model, FORMAT_VERSION,
};
use tagbert::numerics::Scalar;
use tagbert::querydata::{
    build_vocab, generate_synthetic, read_dataset, split_records, write_dataset_to, QueryRecord, Splits, LABEL_DROP,
};
use tagbert::taggraph::{mine_tag_pairs, MinSupport, TagGraph};
use tagbert::traineval::{evaluate, run_experiment, train, ExperimentConfig, MetricsReport, TrainReport};

use crate::config::{Precision, RunConfig};
use crate::error::CliError;

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub records: usize,
    pub ratio: [u32; 3],
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes every `(path, bytes)` pair or none of them: each file goes to a
/// temporary sibling first and is renamed once all writes succeeded.
pub fn write_all_or_nothing(files: &[(PathBuf, Vec<u8>)]) -> Result<(), CliError> {
    let tmp = |p: &Path| {
        let mut name = p.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        p.with_file_name(name)
    };
    let mut written: Vec<PathBuf> = Vec::new();
    let mut result = Ok(());
    for (path, bytes) in files {
        let t = tmp(path);
        match fs::write(&t, bytes) {
            Ok(()) => written.push(t),
            Err(e) => {
                result = Err(CliError::from(e).at(format!("writing {}", path.display())));
                break;
            }
        }
    }
    if result.is_ok() {
        let mut done: Vec<&PathBuf> = Vec::new();
        for (path, _) in files {
            if let Err(e) = fs::rename(tmp(path), path) {
                result = Err(CliError::from(e).at(format!("writing {}", path.display())));
                for d in done {
                    let _ = fs::remove_file(d);
                }
                break;
            }
            done.push(path);
        }
    }
    if result.is_err() {
        for t in written {
            let _ = fs::remove_file(t);
        }
    }
    result
}

fn dataset_bytes(records: &[QueryRecord]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_dataset_to(records, &mut buf)?;
    Ok(buf)
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest, CliError> {
    let records = generate_synthetic(&cfg.synth).map_err(|e| CliError::from(e).at("generating records"))?;
    let splits = split_records(&records, cfg.split, cfg.synth.seed).map_err(|e| CliError::from(e).at("splitting"))?;
    let manifest = Manifest {
        seed: cfg.synth.seed,
        records: records.len(),
        ratio: cfg.split,
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
    };
    fs::create_dir_all(out_dir).map_err(|e| CliError::from(e).at(format!("creating {}", out_dir.display())))?;
    let mut files = Vec::new();
    for (name, part) in SPLIT_FILES.iter().zip([&splits.train, &splits.val, &splits.test]) {
        files.push((out_dir.join(name), dataset_bytes(part)?));
    }
    let mut m = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    m.push(b'\n');
    files.push((out_dir.join("manifest.json"), m));
    write_all_or_nothing(&files)?;
    Ok(manifest)
}

/// `100` is a count, `0.5%` or `0.005` a fraction of the corpus.
pub fn parse_min_support(s: &str) -> Result<MinSupport, CliError> {
    let bad = || CliError::usage(format!("invalid min support `{s}`"));
    if let Some(p) = s.strip_suffix('%') {
        let f: f64 = p.trim().parse().map_err(|_| bad())?;
        return Ok(MinSupport::Fraction(f / 100.0));
    }
    if let Ok(n) = s.parse::<usize>() {
        return Ok(MinSupport::Count(n));
    }
    let f: f64 = s.parse().map_err(|_| bad())?;
    if f >= 1.0 {
        return Err(bad());
    }
    Ok(MinSupport::Fraction(f))
}

pub fn describe_min_support(m: MinSupport, n: usize) -> Result<String, CliError> {
    let count = m.resolve(n)?;
    Ok(match m {
        MinSupport::Count(c) => format!("min_support = {c} queries"),
        MinSupport::Fraction(f) => format!("min_support = {}% of {n} queries = {count}", f * 100.0),
    })
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>, CliError> {
    read_dataset(path).map_err(|e| CliError::from(e).at(format!("reading {}", path.display())))
}

pub fn mine(records: &[QueryRecord], min_support: MinSupport) -> Result<(TagGraph, String), CliError> {
    if records.is_empty() {
        return Err(CliError::data("corpus is empty"));
    }
    let echo = describe_min_support(min_support, records.len())?;
    let graph = mine_tag_pairs(records, min_support.resolve(records.len())?)?;
    Ok((graph, echo))
}

pub fn read_graph(path: &Path) -> Result<TagGraph, CliError> {
    TagGraph::read(path).map_err(|e| CliError::from(e).at(format!("reading {}", path.display())))
}

pub fn data_paths(dir: &Path) -> [PathBuf; 3] {
    SPLIT_FILES.map(|f| dir.join(f))
}

pub fn require_files(paths: &[&Path]) -> Result<(), CliError> {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(CliError::data(format!("{} does not exist", p.display()))),
        None => Ok(()),
    }
}

/// Existing directory that will hold `path`.
pub fn require_parent(path: &Path) -> Result<(), CliError> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "output directory {} does not exist",
            parent.display()
        )))
    }
}

pub fn train_model<T>(
    cfg: &RunConfig,
    train_set: &[QueryRecord],
    val_set: &[QueryRecord],
    graph: Option<TagGraph>,
    checkpoint: &Path,
) -> Result<TrainReport, CliError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let vocab = build_vocab(train_set)?;
    let mut model = Model::<T>::new(cfg.model.clone(), vocab, graph, cfg.train.seed)?;
    let report = train(&mut model, &cfg.train, train_set, val_set)?;
    save_checkpoint(&model, checkpoint)
        .map_err(|e| CliError::from(e).at(format!("writing {}", checkpoint.display())))?;
    Ok(report)
}

#[derive(Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
}

/// Reads the precision recorded in a checkpoint.
pub fn checkpoint_precision(path: &Path) -> Result<Precision, CliError> {
    let at = |e: CliError| e.at(format!("loading checkpoint {}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| at(e.into()))?;
    let h: Header = serde_json::from_str(&text).map_err(|e| at(CliError::data(e.to_string())))?;
    if h.format_version != FORMAT_VERSION {
        return Err(at(CliError::data(format!(
            "checkpoint format version mismatch: file has {}, this build reads {FORMAT_VERSION}",
            h.format_version
        ))));
    }
    match h.scalar.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(at(CliError::data(format!("unknown parameter precision `{other}`")))),
    }
}

pub fn load_model<T>(path: &Path) -> Result<Model<T>, CliError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    load_checkpoint(path).map_err(|e| CliError::from(e).at(format!("loading checkpoint {}", path.display())))
}

pub fn eval_model<T: Scalar>(
    model: &Model<T>,
    records: &[QueryRecord],
    batch: usize,
) -> Result<MetricsReport, CliError> {
    if records.is_empty() {
        return Err(CliError::data("no records to evaluate"));
    }
    Ok(evaluate(model, records, batch)?)
}

pub struct Prediction {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub labels: Vec<u8>,
    pub unknown_tokens: Vec<String>,
    pub unknown_tags: Vec<String>,
}

impl Prediction {
    pub fn kept_phrase(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l != LABEL_DROP)
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for ((tok, tag), &l) in self.tokens.iter().zip(&self.tags).zip(&self.labels) {
            let label = if l == LABEL_DROP { "drop" } else { "keep" };
            s.push_str(&format!("{tok}\t{tag}\t{label}\n"));
        }
        s.push_str(&format!("kept: {}\n", self.kept_phrase()));
        s
    }
}

pub fn predict<T: Scalar>(model: &Model<T>, query: &str, tags: &str) -> Result<Prediction, CliError> {
    let tokens: Vec<String> = query.split_whitespace().map(String::from).collect();
    let tags: Vec<String> = tags.split_whitespace().map(String::from).collect();
    if tokens.is_empty() {
        return Err(CliError::usage("query is empty"));
    }
    if tokens.len() != tags.len() {
        return Err(CliError::usage(format!(
            "query has {} tokens but {} tags were given",
            tokens.len(),
            tags.len()
        )));
    }
    let unknown_tokens = tokens
        .iter()
        .filter(|t| !model.vocab.contains_token(t))
        .cloned()
        .collect();
    let unknown_tags = tags
        .iter()
        .filter(|t| model.vocab.tag_id_known(t).is_none())
        .cloned()
        .collect();
    let q = encode_tokens(&tokens, &tags, &model.vocab, model.config.max_len)?;
    let batch = model.batch(&[&q])?;
    let labels = model.predict_batch(&batch, ForwardOptions::default())?.remove(0);
    Ok(Prediction {
        tokens,
        tags,
        labels,
        unknown_tokens,
        unknown_tags,
    })
}

pub struct CompareOutput {
    pub runs_csv: String,
    pub summary_csv: String,
    pub table: String,
    pub failures: Vec<String>,
}

pub fn compare<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    graph: &TagGraph,
    mut progress: impl FnMut(&str),
) -> Result<CompareOutput, CliError> {
    let exp = ExperimentConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        variants: cfg.variants.clone(),
        seeds: cfg.seeds.clone(),
    };
    let mut failures = Vec::new();
    let c = run_experiment::<T>(&exp, splits, Some(graph), |r| match &r.outcome {
        Ok((m, rep)) => progress(&format!(
            "{} seed {}: token_acc {:.4} f1 {:.4} exact_match {:.4} (best epoch {})",
            r.variant.name(),
            r.seed,
            m.token_acc,
            m.f1,
            m.exact_match,
            rep.best_epoch
        )),
        Err(e) => {
            let msg = format!("{} seed {} failed: {e}", r.variant.name(), r.seed);
            progress(&msg);
            failures.push(msg);
        }
    })?;
    Ok(CompareOutput {
        runs_csv: c.runs_csv(),
        summary_csv: c.summary_csv(),
        table: c.table(),
        failures,
    })
}

/// Training-time graph for `mode`: required for static, dropped otherwise.
pub fn graph_for_mode(
    mode: GraphMode,
    graph: Option<&Path>,
    warn: &mut impl Write,
) -> Result<Option<TagGraph>, CliError> {
    match (mode, graph) {
        (GraphMode::Static, None) => Err(CliError::usage(
            "static graph mode needs --graph (build one with `tagbert mine`)",
        )),
        (GraphMode::Static, Some(p)) => Ok(Some(read_graph(p)?)),
        (other, Some(p)) => {
            let mode = if other == GraphMode::Dynamic { "dynamic" } else { "none" };
            let _ = writeln!(warn, "warning: graph mode is {mode}; ignoring --graph {}", p.display());
            Ok(None)
        }
        (_, None) => Ok(None),
    }
}
