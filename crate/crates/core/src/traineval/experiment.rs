use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_predictions, train, MetricsReport, TrainConfig, TrainEvalError, TrainReport};
use crate::model::{Fusion, GraphMode, Model, ModelConfig};
use crate::numerics::Scalar;
use crate::querydata::{build_vocab, QueryRecord, Splits};
use crate::taggraph::TagGraph;

/// A graph mode plus fusion, named like `none`, `static-gated`,
/// `dynamic-gated`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub graph: GraphMode,
    pub fusion: Fusion,
}

impl Variant {
    pub const fn new(graph: GraphMode, fusion: Fusion) -> Self {
        Self { graph, fusion }
    }

    pub const BASELINE: Variant = Variant::new(GraphMode::None, Fusion::Gated);

    pub fn defaults() -> Vec<Variant> {
        vec![
            Self::BASELINE,
            Self::new(GraphMode::Static, Fusion::Mean),
            Self::new(GraphMode::Static, Fusion::Gated),
            Self::new(GraphMode::Dynamic, Fusion::Gated),
        ]
    }

    pub fn is_baseline(&self) -> bool {
        self.graph == GraphMode::None
    }

    pub fn name(&self) -> String {
        let fusion = match self.fusion {
            Fusion::Gated => "gated",
            Fusion::Mean => "mean",
            Fusion::Min => "min",
            Fusion::Max => "max",
        };
        match self.graph {
            GraphMode::None => "none".into(),
            GraphMode::Static => format!("static-{fusion}"),
            GraphMode::Dynamic => format!("dynamic-{fusion}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainEvalError> {
        let bad = || TrainEvalError::InvalidConfig(format!("unknown variant `{s}`"));
        if s == "none" {
            return Ok(Self::BASELINE);
        }
        let (graph, fusion) = s.split_once('-').ok_or_else(bad)?;
        let graph = match graph {
            "static" => GraphMode::Static,
            "dynamic" => GraphMode::Dynamic,
            _ => return Err(bad()),
        };
        let fusion = match fusion {
            "gated" => Fusion::Gated,
            "mean" => Fusion::Mean,
            "min" => Fusion::Min,
            "max" => Fusion::Max,
            _ => return Err(bad()),
        };
        Ok(Self::new(graph, fusion))
    }

    /// `base` with this variant's graph mode and fusion.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            graph: self.graph,
            fusion: self.fusion,
            ..base.clone()
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = TrainEvalError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.name()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::defaults(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    /// Test metrics and training report, or the error that stopped the run.
    pub outcome: Result<(MetricsReport, TrainReport), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub runs: usize,
    pub f1: Stat,
    pub exact_match: Stat,
    pub token_acc: Stat,
    /// Percent improvement of the means over the baseline; `None` on the
    /// baseline row or when no baseline finished.
    pub improvement: Option<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

/// `100 * (x - base) / base`.
pub fn percent_improvement(x: f64, base: f64) -> f64 {
    100.0 * (x - base) / base
}

/// Trains one model on `splits.train`, selects on `splits.val` and scores
/// `splits.test`.
pub fn run_single<T: Scalar>(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &Splits,
    graph: Option<&TagGraph>,
) -> Result<(Model<T>, TrainReport, MetricsReport), TrainEvalError> {
    let vocab = build_vocab(&splits.train)?;
    let graph = match config.graph {
        GraphMode::Static => Some(
            graph
                .ok_or_else(|| TrainEvalError::InvalidConfig("static variant needs a tag graph".into()))?
                .clone(),
        ),
        _ => None,
    };
    let mut model = Model::<T>::new(config.clone(), vocab, graph, train_cfg.seed)?;
    let report = train(&mut model, train_cfg, &splits.train, &splits.val)?;
    let metrics = evaluate(&model, &splits.test, train_cfg.eval_batch_size)?;
    Ok((model, report, metrics))
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[QueryRecord],
    batch_size: usize,
) -> Result<MetricsReport, TrainEvalError> {
    let preds = model.predict(records, batch_size)?;
    evaluate_predictions(records, &preds)
}

/// Every variant under every seed. A run that fails is recorded and left
/// out of the summary; the others proceed. `progress` sees each result as
/// it completes.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    splits: &Splits,
    graph: Option<&TagGraph>,
    mut progress: impl FnMut(&RunResult),
) -> Result<Comparison, TrainEvalError> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainEvalError::InvalidConfig(
            "need at least one variant and one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    for variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let outcome = run_single::<T>(&variant.model_config(&cfg.model), &train_cfg, splits, graph)
                .map(|(_, report, metrics)| (metrics, report))
                .map_err(|e| e.to_string());
            let r = RunResult {
                variant: variant.clone(),
                seed,
                outcome,
            };
            progress(&r);
            runs.push(r);
        }
    }
    let summary = summarize(&cfg.variants, &runs);
    Ok(Comparison { runs, summary })
}

fn summarize(variants: &[Variant], runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = variants
        .iter()
        .filter_map(|v| {
            let ok: Vec<&MetricsReport> = runs
                .iter()
                .filter(|r| &r.variant == v)
                .filter_map(|r| r.outcome.as_ref().ok().map(|(m, _)| m))
                .collect();
            if ok.is_empty() {
                return None;
            }
            let col = |f: fn(&MetricsReport) -> f64| Stat::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            Some(SummaryRow {
                variant: v.clone(),
                runs: ok.len(),
                f1: col(|m| m.f1),
                exact_match: col(|m| m.exact_match),
                token_acc: col(|m| m.token_acc),
                improvement: None,
            })
        })
        .collect();
    if let Some(base) = rows.iter().find(|r| r.variant.is_baseline()).cloned() {
        for r in rows.iter_mut().filter(|r| !r.variant.is_baseline()) {
            r.improvement = Some([
                percent_improvement(r.f1.mean, base.f1.mean),
                percent_improvement(r.exact_match.mean, base.exact_match.mean),
                percent_improvement(r.token_acc.mean, base.token_acc.mean),
            ]);
        }
    }
    rows
}

impl Comparison {
    /// `variant,seed,f1,exact_match,token_acc`; failed runs show `nan`.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,f1,exact_match,token_acc\n");
        for r in &self.runs {
            match &r.outcome {
                Ok((m, _)) => writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6}",
                    r.variant.name(),
                    r.seed,
                    m.f1,
                    m.exact_match,
                    m.token_acc
                ),
                Err(_) => writeln!(s, "{},{},nan,nan,nan", r.variant.name(), r.seed),
            }
            .expect("writing to a String");
        }
        s
    }

    /// Means, deviations and percent improvements; `(-)` marks the
    /// baseline's improvement cells.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "variant,runs,f1_mean,f1_std,exact_match_mean,exact_match_std,token_acc_mean,token_acc_std,f1_imp,exact_match_imp,token_acc_imp\n",
        );
        for r in &self.summary {
            let imp = match r.improvement {
                Some([a, b, c]) => format!("{a:.2},{b:.2},{c:.2}"),
                None if r.variant.is_baseline() => "(-),(-),(-)".into(),
                None => ",,".into(),
            };
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{imp}",
                r.variant.name(),
                r.runs,
                r.f1.mean,
                r.f1.std,
                r.exact_match.mean,
                r.exact_match.std,
                r.token_acc.mean,
                r.token_acc.std
            )
            .expect("writing to a String");
        }
        s
    }

    /// Human-readable table: `mean (imp%)` per metric.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>16} {:>16} {:>16}\n",
            "variant", "f1", "exact_match", "token_acc"
        );
        for r in &self.summary {
            let cell = |st: &Stat, i: usize| match r.improvement {
                Some(imp) => format!("{:.3} ({:+.1})", st.mean, imp[i]),
                None => format!("{:.3} (-)", st.mean),
            };
            writeln!(
                s,
                "{:<16} {:>16} {:>16} {:>16}",
                r.variant.name(),
                cell(&r.f1, 0),
                cell(&r.exact_match, 1),
                cell(&r.token_acc, 2)
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn summary_for(&self, v: &Variant) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| &r.variant == v)
    }
}
