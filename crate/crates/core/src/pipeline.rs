//! Run configuration and end-to-end experiment drivers shared by the CLI
//! and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::data::{make_tasks, TaskDataset, TaskSuiteConfig};
use crate::diagnostics::{bias_report, BiasReport, Provenance};
use crate::error::{Error, Result};
use crate::merge::{
    adamerge, task_arithmetic, task_vector, ties_merge, weight_average, AdaMergeConfig,
    AdaMergeTrace, CoefficientMode, MergeCoefficients, TaskVector,
};
use crate::model::{
    accuracy_from_features, evaluate, finetune, pretrain, EncoderSpec, TaskHead, TrainConfig,
};
use crate::params::ParameterMap;
use crate::surgery::{
    self, surgery_objective, LossTrace, SurgeryBundle, SurgeryData, SurgeryTrainConfig,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergeMethod {
    #[serde(rename = "avg")]
    WeightAverage,
    #[serde(rename = "task-arith")]
    TaskArithmetic,
    #[serde(rename = "ties")]
    Ties,
    #[serde(rename = "adamerging")]
    AdaMerging,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::WeightAverage,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::AdaMerging,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            MergeMethod::WeightAverage => "avg",
            MergeMethod::TaskArithmetic => "task-arith",
            MergeMethod::Ties => "ties",
            MergeMethod::AdaMerging => "adamerging",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            MergeMethod::WeightAverage => "Weight Averaging",
            MergeMethod::TaskArithmetic => "Task Arithmetic",
            MergeMethod::Ties => "Ties-Merging",
            MergeMethod::AdaMerging => "AdaMerging",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.cli_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            feature_dim: 16,
            layers: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Task-vector scale for task arithmetic and TIES.
    pub lambda: f64,
    pub trim_fraction: f64,
    pub adamerging: AdaMergeConfig,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            lambda: 0.3,
            trim_fraction: 0.2,
            adamerging: AdaMergeConfig::default(),
        }
    }
}

/// Labels used to train the shared initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pretext {
    /// Union of all tasks' classes (`t·c + y`).
    JointClasses,
    /// Which task a sample came from.
    TaskIdentity,
    /// Classes of held-out auxiliary tasks drawn from the same family.
    Auxiliary,
}

/// Everything needed to reproduce a run. Serialized verbatim into every
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds aggregated by `report` and `reproduce`.
    pub seeds: Vec<u64>,
    pub suite: TaskSuiteConfig,
    pub model: ModelConfig,
    pub pretext: Pretext,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub merge: MergeConfig,
    pub surgery: SurgeryTrainConfig,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2],
            suite: TaskSuiteConfig::default(),
            model: ModelConfig::default(),
            pretext: Pretext::Auxiliary,
            pretrain: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                adam: AdamConfig::with_lr(3e-4),
                head_warmup: 1000,
                freeze_head: true,
                ..TrainConfig::default()
            },
            merge: MergeConfig::default(),
            surgery: SurgeryTrainConfig::default(),
            out: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::mlp(
            self.suite.input_dim,
            self.model.hidden_dim,
            self.model.feature_dim,
            self.model.layers,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.suite
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.encoder_spec().validate()?;
        if self.model.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !self.merge.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        if !(self.merge.trim_fraction > 0.0 && self.merge.trim_fraction <= 1.0) {
            return Err(Error::Config("trim_fraction must be in (0, 1]".into()));
        }
        if self.merge.adamerging.mode == CoefficientMode::Scalar {
            return Err(Error::Config(
                "adamerging mode must be task or layer".into(),
            ));
        }
        if self.merge.adamerging.batch_size == 0 {
            return Err(Error::Config(
                "adamerging batch size must be positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed grid is empty".into()));
        }
        self.surgery.validate()
    }
}

/// Datasets, shared initialization, fine-tuned encoders and heads for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub tasks: Vec<TaskDataset>,
    pub base: ParameterMap,
    pub finetuned: Vec<ParameterMap>,
    pub heads: Vec<TaskHead>,
}

/// Training sample for the shared initialization: the training splits of
/// `tasks` with labels chosen by `pretext`. Returns inputs, labels and the
/// number of classes.
pub fn pretraining_sample(
    tasks: &[TaskDataset],
    pretext: Pretext,
) -> Result<(Tensor, Vec<usize>, usize)> {
    let d = tasks[0].train.inputs.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for (t, task) in tasks.iter().enumerate() {
        data.extend_from_slice(task.train.inputs.data());
        match pretext {
            Pretext::TaskIdentity => labels.extend(std::iter::repeat_n(t, task.train.len())),
            _ => labels.extend(task.train.labels.iter().map(|&y| offset + y)),
        }
        offset += task.classes;
    }
    let classes = if pretext == Pretext::TaskIdentity {
        tasks.len()
    } else {
        offset
    };
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels, classes))
}

impl Prepared {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
        cfg.validate()?;
        let tasks = make_tasks(seed, &cfg.suite)?;
        Self::from_tasks(cfg, seed, tasks)
    }

    pub fn from_tasks(cfg: &RunConfig, seed: u64, tasks: Vec<TaskDataset>) -> Result<Prepared> {
        let spec = cfg.encoder_spec();
        let (x, y, classes) = match cfg.pretext {
            Pretext::Auxiliary => {
                // tasks T..2T of a doubled suite share the embedding but not the classes
                let doubled = TaskSuiteConfig {
                    tasks: 2 * cfg.suite.tasks,
                    ..cfg.suite.clone()
                };
                let extra = make_tasks(seed, &doubled)?.split_off(cfg.suite.tasks);
                pretraining_sample(&extra, cfg.pretext)?
            }
            p => pretraining_sample(&tasks, p)?,
        };
        let (base, _, _) = pretrain(&spec, &x, &y, classes, &cfg.pretrain, seed)?;
        let mut finetuned = Vec::with_capacity(tasks.len());
        let mut heads = Vec::with_capacity(tasks.len());
        for task in &tasks {
            let (theta, head, _) = finetune(
                &base,
                task.task,
                task.classes,
                &task.train,
                &cfg.finetune,
                seed,
            )?;
            finetuned.push(theta);
            heads.push(head);
        }
        Ok(Prepared {
            seed,
            tasks,
            base,
            finetuned,
            heads,
        })
    }

    pub fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.finetuned
            .iter()
            .enumerate()
            .map(|(t, theta)| task_vector(t, theta, &self.base))
            .collect()
    }

    /// Unlabeled test inputs, one matrix per task.
    pub fn test_inputs(&self) -> Vec<Tensor> {
        self.tasks.iter().map(|t| t.test.inputs.clone()).collect()
    }

    pub fn surgery_data<'a>(&'a self, inputs: &'a [Tensor]) -> SurgeryData<'a> {
        SurgeryData {
            individuals: &self.finetuned,
            inputs,
        }
    }

    /// Test accuracy of `encoder` on every task with the stored heads.
    pub fn accuracies(&self, encoder: &ParameterMap) -> Result<Vec<f64>> {
        self.tasks
            .iter()
            .zip(&self.heads)
            .map(|(task, head)| evaluate(encoder, head, &task.test))
            .collect()
    }

    pub fn individual_accuracies(&self) -> Result<Vec<f64>> {
        self.tasks
            .iter()
            .zip(&self.heads)
            .zip(&self.finetuned)
            .map(|((task, head), theta)| evaluate(theta, head, &task.test))
            .collect()
    }

    /// Test accuracy per task through a surgery bundle.
    pub fn bundle_accuracies(&self, bundle: &SurgeryBundle) -> Result<Vec<f64>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(t, task)| {
                let z = bundle.features(t, &task.test.inputs)?;
                accuracy_from_features(&z, &bundle.heads[t], &task.test.labels)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub method: MergeMethod,
    pub merged: ParameterMap,
    pub coefficients: Option<MergeCoefficients>,
    pub trace: Option<AdaMergeTrace>,
}

/// Runs one merge method over prepared artifacts.
pub fn merge_prepared(prepared: &Prepared, cfg: &MergeConfig) -> Result<MergeOutcome> {
    let vectors = prepared.task_vectors()?;
    let (merged, coefficients, trace) = match cfg.method {
        MergeMethod::WeightAverage => {
            let maps: Vec<&ParameterMap> = prepared.finetuned.iter().collect();
            (weight_average(&maps)?, None, None)
        }
        MergeMethod::TaskArithmetic => (
            task_arithmetic(&prepared.base, &vectors, cfg.lambda)?,
            None,
            None,
        ),
        MergeMethod::Ties => (
            ties_merge(&prepared.base, &vectors, cfg.lambda, cfg.trim_fraction)?,
            None,
            None,
        ),
        MergeMethod::AdaMerging => {
            let ada = AdaMergeConfig {
                seed: prepared.seed,
                ..cfg.adamerging.clone()
            };
            let layers = crate::merge::layer_groups(&prepared.base).len();
            let init = MergeCoefficients::uniform(ada.mode, vectors.len(), layers, ada.init);
            let (merged, coeffs, trace) = adamerge(
                &prepared.base,
                &vectors,
                &prepared.test_inputs(),
                &prepared.heads,
                init,
                &ada,
            )?;
            (merged, Some(coeffs), Some(trace))
        }
    };
    Ok(MergeOutcome {
        method: cfg.method,
        merged,
        coefficients,
        trace,
    })
}

/// Trains surgery adapters on top of a merged encoder using the test inputs.
pub fn run_surgery(
    prepared: &Prepared,
    merged: &ParameterMap,
    cfg: &SurgeryTrainConfig,
) -> Result<(SurgeryBundle, LossTrace)> {
    let cfg = SurgeryTrainConfig {
        seed: prepared.seed,
        ..cfg.clone()
    };
    let bundle = SurgeryBundle::new(merged.clone(), prepared.heads.clone(), cfg.rank, cfg.seed)?;
    let inputs = prepared.test_inputs();
    surgery::train(bundle, &prepared.surgery_data(&inputs), &cfg)
}

/// Accuracy and bias of one merged model, with or without surgery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: Vec<f64>,
    pub avg_accuracy: f64,
    pub bias: BiasReport,
}

pub fn evaluate_merged(
    prepared: &Prepared,
    method: MergeMethod,
    merged: &ParameterMap,
    bundle: Option<&SurgeryBundle>,
) -> Result<Evaluation> {
    let accuracy = match bundle {
        Some(b) => prepared.bundle_accuracies(b)?,
        None => prepared.accuracies(merged)?,
    };
    let avg_accuracy = mean(&accuracy);
    let bias = bias_report(
        merged,
        &prepared.finetuned,
        bundle,
        &prepared.test_inputs(),
        &Provenance {
            method: method.cli_name().into(),
            seed: prepared.seed,
        },
    )?;
    Ok(Evaluation {
        accuracy,
        avg_accuracy,
        bias,
    })
}

/// Results of every configured method, with and without surgery, for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrained: Vec<f64>,
    pub individual: Vec<f64>,
    pub methods: Vec<MethodResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: MergeMethod,
    pub without: Evaluation,
    pub with: Evaluation,
    pub initial_objective: f64,
    pub final_objective: f64,
}

pub fn run_seed(
    cfg: &RunConfig,
    prepared: &Prepared,
    methods: &[MergeMethod],
) -> Result<SeedResult> {
    let mut results = Vec::with_capacity(methods.len());
    let inputs = prepared.test_inputs();
    let data = prepared.surgery_data(&inputs);
    for &method in methods {
        let outcome = merge_prepared(
            prepared,
            &MergeConfig {
                method,
                ..cfg.merge.clone()
            },
        )?;
        let (bundle, _) = run_surgery(prepared, &outcome.merged, &cfg.surgery)?;
        let fresh = SurgeryBundle::new(
            outcome.merged.clone(),
            prepared.heads.clone(),
            cfg.surgery.rank,
            prepared.seed,
        )?;
        let loss = cfg.surgery.loss();
        results.push(MethodResult {
            method,
            without: evaluate_merged(prepared, method, &outcome.merged, None)?,
            with: evaluate_merged(prepared, method, &outcome.merged, Some(&bundle))?,
            initial_objective: surgery_objective(&fresh, &data, loss)?,
            final_objective: surgery_objective(&bundle, &data, loss)?,
        });
    }
    Ok(SeedResult {
        seed: prepared.seed,
        pretrained: prepared.accuracies(&prepared.base)?,
        individual: prepared.individual_accuracies()?,
        methods: results,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        Stat {
            mean: mean(values),
            std: std_dev(values),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub surgery: bool,
    pub per_task_accuracy: Vec<Stat>,
    pub avg_accuracy: Stat,
    pub mean_bias: Stat,
}

/// Seed-aggregated table in the layout of a methods × tasks accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    pub bias_reports: Vec<BiasReport>,
}

fn stats_by_task(per_seed: &[Vec<f64>]) -> Vec<Stat> {
    let tasks = per_seed.first().map_or(0, Vec::len);
    (0..tasks)
        .map(|t| Stat::of(&per_seed.iter().map(|s| s[t]).collect::<Vec<_>>()))
        .collect()
}

impl ExperimentSummary {
    pub fn from_seeds(results: &[SeedResult]) -> ExperimentSummary {
        let mut rows = Vec::new();
        let pretrained: Vec<Vec<f64>> = results.iter().map(|r| r.pretrained.clone()).collect();
        let individual: Vec<Vec<f64>> = results.iter().map(|r| r.individual.clone()).collect();
        for (name, acc) in [("pretrained", pretrained), ("individual", individual)] {
            rows.push(SummaryRow {
                method: name.into(),
                surgery: false,
                per_task_accuracy: stats_by_task(&acc),
                avg_accuracy: Stat::of(&acc.iter().map(|a| mean(a)).collect::<Vec<_>>()),
                mean_bias: Stat {
                    mean: 0.0,
                    std: 0.0,
                },
            });
        }
        let mut bias_reports = Vec::new();
        let methods: Vec<MergeMethod> = results
            .first()
            .map(|r| r.methods.iter().map(|m| m.method).collect())
            .unwrap_or_default();
        for (mi, method) in methods.iter().enumerate() {
            for surgery in [false, true] {
                let evals: Vec<&Evaluation> = results
                    .iter()
                    .map(|r| {
                        if surgery {
                            &r.methods[mi].with
                        } else {
                            &r.methods[mi].without
                        }
                    })
                    .collect();
                let acc: Vec<Vec<f64>> = evals.iter().map(|e| e.accuracy.clone()).collect();
                rows.push(SummaryRow {
                    method: method.cli_name().into(),
                    surgery,
                    per_task_accuracy: stats_by_task(&acc),
                    avg_accuracy: Stat::of(
                        &evals.iter().map(|e| e.avg_accuracy).collect::<Vec<_>>(),
                    ),
                    mean_bias: Stat::of(&evals.iter().map(|e| e.bias.mean).collect::<Vec<_>>()),
                });
                bias_reports.extend(evals.iter().map(|e| e.bias.clone()));
            }
        }
        ExperimentSummary {
            seeds: results.iter().map(|r| r.seed).collect(),
            rows,
            bias_reports,
        }
    }

    pub fn row(&self, method: MergeMethod, surgery: bool) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method.cli_name() && r.surgery == surgery)
    }

    /// Aligned plain-text table, accuracies in percent.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let tasks = self.rows.first().map_or(0, |r| r.per_task_accuracy.len());
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "seeds: {}   (mean over seeds; accuracy in %)",
            seeds.join(",")
        );
        let _ = write!(out, "{:<28}", "method");
        for t in 0..tasks {
            let _ = write!(out, "{:>7}", format!("T{t}"));
        }
        let _ = writeln!(out, "{:>8}{:>8}{:>10}", "avg", "±std", "bias");
        for row in &self.rows {
            let label = match row.method.as_str() {
                "pretrained" => "Pretrained".to_string(),
                "individual" => "Individual".to_string(),
                m => {
                    let name = MergeMethod::from_str(m)
                        .map_or(m.to_string(), |x| x.display_name().to_string());
                    if row.surgery {
                        format!("{name} w/ Surgery")
                    } else {
                        name.to_string()
                    }
                }
            };
            let _ = write!(out, "{label:<28}");
            for s in &row.per_task_accuracy {
                let _ = write!(out, "{:>7.1}", 100.0 * s.mean);
            }
            let _ = writeln!(
                out,
                "{:>8.1}{:>8.1}{:>10.4}",
                100.0 * row.avg_accuracy.mean,
                100.0 * row.avg_accuracy.std,
                row.mean_bias.mean
            );
        }
        out
    }
}

/// Named reproduction suites, each a scaled-down ablation with a trend check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    BiasOrdering,
    RankSweep,
    LossSweep,
    RatioSweep,
    OnlineSweep,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::BiasOrdering,
        Suite::RankSweep,
        Suite::LossSweep,
        Suite::RatioSweep,
        Suite::OnlineSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::BiasOrdering => "bias-ordering",
            Suite::RankSweep => "rank-sweep",
            Suite::LossSweep => "loss-sweep",
            Suite::RatioSweep => "ratio-sweep",
            Suite::OnlineSweep => "online-sweep",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

pub const RANK_GRID: [usize; 5] = [4, 8, 16, 32, 64];
pub const RATIO_GRID: [f64; 4] = [0.01, 0.05, 0.1, 1.0];
pub const ONLINE_GRID: [f64; 2] = [0.1, 0.5];
/// Relative slack allowed between adjacent ranks in the rank sweep.
pub const RANK_TOLERANCE: f64 = 0.02;

/// One measured point of a suite: `setting` names the swept value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitePoint {
    pub seed: u64,
    pub method: String,
    pub setting: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub points: Vec<SuitePoint>,
    pub verdicts: Vec<Verdict>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// Seed-averaged value of one (method, setting, metric) cell.
    pub fn averaged(&self, method: &str, setting: &str, metric: &str) -> f64 {
        let vals: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.method == method && p.setting == setting && p.metric == metric)
            .map(|p| p.value)
            .collect();
        mean(&vals)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,seed,method,setting,metric,value\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.suite, p.seed, p.method, p.setting, p.metric, p.value
            ));
        }
        out
    }
}

fn point(
    seed: u64,
    method: MergeMethod,
    setting: impl Into<String>,
    metric: &str,
    value: f64,
) -> SuitePoint {
    SuitePoint {
        seed,
        method: method.cli_name().into(),
        setting: setting.into(),
        metric: metric.into(),
        value,
    }
}

/// Runs the per-seed measurements of a suite for one prepared seed.
pub fn suite_points(cfg: &RunConfig, suite: Suite, prepared: &Prepared) -> Result<Vec<SuitePoint>> {
    let seed = prepared.seed;
    let inputs = prepared.test_inputs();
    let data = prepared.surgery_data(&inputs);
    let mut points = Vec::new();
    let merge_with = |method| {
        merge_prepared(
            prepared,
            &MergeConfig {
                method,
                ..cfg.merge.clone()
            },
        )
    };
    match suite {
        Suite::BiasOrdering => {
            for method in [
                MergeMethod::WeightAverage,
                MergeMethod::TaskArithmetic,
                MergeMethod::AdaMerging,
            ] {
                let outcome = merge_with(method)?;
                let eval = evaluate_merged(prepared, method, &outcome.merged, None)?;
                points.push(point(seed, method, "none", "bias", eval.bias.mean));
                points.push(point(seed, method, "none", "accuracy", eval.avg_accuracy));
            }
        }
        Suite::RankSweep => {
            let method = MergeMethod::TaskArithmetic;
            let outcome = merge_with(method)?;
            for rank in RANK_GRID {
                let scfg = SurgeryTrainConfig {
                    rank,
                    ..cfg.surgery.clone()
                };
                let (bundle, _) = run_surgery(prepared, &outcome.merged, &scfg)?;
                let obj = surgery_objective(&bundle, &data, scfg.loss())?;
                points.push(point(seed, method, format!("r={rank}"), "objective", obj));
                let acc = mean(&prepared.bundle_accuracies(&bundle)?);
                points.push(point(seed, method, format!("r={rank}"), "accuracy", acc));
            }
        }
        Suite::LossSweep => {
            let method = MergeMethod::TaskArithmetic;
            let outcome = merge_with(method)?;
            for kind in crate::loss::LossKind::ALL {
                let scfg = SurgeryTrainConfig {
                    loss: kind,
                    ..cfg.surgery.clone()
                };
                let fresh = SurgeryBundle::new(
                    outcome.merged.clone(),
                    prepared.heads.clone(),
                    scfg.rank,
                    seed,
                )?;
                let initial = surgery_objective(&fresh, &data, scfg.loss())?;
                let (bundle, _) = run_surgery(prepared, &outcome.merged, &scfg)?;
                let fin = surgery_objective(&bundle, &data, scfg.loss())?;
                let name = kind.cli_name();
                points.push(point(seed, method, name, "initial_loss", initial));
                points.push(point(seed, method, name, "final_loss", fin));
                // distance to the loss's lower bound, summed over tasks
                let floor = kind.lower_bound() * prepared.tasks.len() as f64;
                points.push(point(
                    seed,
                    method,
                    name,
                    "gap_ratio",
                    (fin - floor) / (initial - floor),
                ));
                points.push(point(
                    seed,
                    method,
                    name,
                    "accuracy",
                    mean(&prepared.bundle_accuracies(&bundle)?),
                ));
            }
        }
        Suite::RatioSweep | Suite::OnlineSweep => {
            let method = MergeMethod::TaskArithmetic;
            let outcome = merge_with(method)?;
            let (regime, grid): (surgery::Regime, &[f64]) = if suite == Suite::RatioSweep {
                (surgery::Regime::Offline, &RATIO_GRID)
            } else {
                (surgery::Regime::Online, &ONLINE_GRID)
            };
            let before = evaluate_merged(prepared, method, &outcome.merged, None)?;
            points.push(point(seed, method, "none", "bias", before.bias.mean));
            for &ratio in grid {
                let scfg = SurgeryTrainConfig {
                    data_ratio: ratio,
                    regime,
                    ..cfg.surgery.clone()
                };
                let (bundle, trace) = run_surgery(prepared, &outcome.merged, &scfg)?;
                let eval = evaluate_merged(prepared, method, &outcome.merged, Some(&bundle))?;
                let setting = format!("ratio={ratio}");
                points.push(point(seed, method, setting.clone(), "bias", eval.bias.mean));
                points.push(point(
                    seed,
                    method,
                    setting.clone(),
                    "accuracy",
                    eval.avg_accuracy,
                ));
                points.push(point(
                    seed,
                    method,
                    setting,
                    "consumed",
                    trace.consumed.iter().sum::<usize>() as f64,
                ));
            }
        }
    }
    Ok(points)
}

/// Applies the suite's trend checks to seed-aggregated points.
pub fn suite_verdicts(suite: Suite, points: &[SuitePoint]) -> Vec<Verdict> {
    let result = SuiteResult {
        suite: suite.name().into(),
        points: points.to_vec(),
        verdicts: Vec::new(),
    };
    let ta = MergeMethod::TaskArithmetic.cli_name();
    let mut verdicts = Vec::new();
    match suite {
        Suite::BiasOrdering => {
            let ada = result.averaged("adamerging", "none", "bias");
            let tav = result.averaged(ta, "none", "bias");
            let avg = result.averaged("avg", "none", "bias");
            verdicts.push(Verdict {
                check: "mean bias: adamerging <= task-arith <= avg".into(),
                passed: ada <= tav && tav <= avg,
                detail: format!("adamerging={ada:.5} task-arith={tav:.5} avg={avg:.5}"),
            });
        }
        Suite::RankSweep => {
            let objs: Vec<f64> = RANK_GRID
                .iter()
                .map(|r| result.averaged(ta, &format!("r={r}"), "objective"))
                .collect();
            let ok = objs
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + RANK_TOLERANCE));
            verdicts.push(Verdict {
                check: format!("objective non-increasing over ranks {RANK_GRID:?} (2% slack)"),
                passed: ok,
                detail: format!("{objs:.5?}"),
            });
        }
        Suite::LossSweep => {
            for kind in crate::loss::LossKind::ALL {
                let name = kind.cli_name();
                let per_seed: Vec<f64> = points
                    .iter()
                    .filter(|p| p.setting == name && p.metric == "gap_ratio")
                    .map(|p| p.value)
                    .collect();
                let worst = per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                verdicts.push(Verdict {
                    check: format!("{name}: final loss below 50% of initial on every seed"),
                    passed: !per_seed.is_empty() && worst < 0.5,
                    detail: format!("worst final/initial gap ratio {worst:.4}"),
                });
            }
        }
        Suite::RatioSweep => {
            let b = |r: f64| result.averaged(ta, &format!("ratio={r}"), "bias");
            let (b1, b10, b100) = (b(0.01), b(0.1), b(1.0));
            verdicts.push(Verdict {
                check: "offline bias: ratio 1.0 <= ratio 0.1 <= ratio 0.01".into(),
                passed: b100 <= b10 && b10 <= b1,
                detail: format!(
                    "0.01={b1:.5} 0.05={:.5} 0.1={b10:.5} 1.0={b100:.5}",
                    b(0.05)
                ),
            });
        }
        Suite::OnlineSweep => {
            let b = |r: f64| result.averaged(ta, &format!("ratio={r}"), "bias");
            let before = result.averaged(ta, "none", "bias");
            let (b10, b50) = (b(0.1), b(0.5));
            verdicts.push(Verdict {
                check: "online bias: 50% of stream <= 10% of stream".into(),
                passed: b50 <= b10,
                detail: format!("10%={b10:.5} 50%={b50:.5}"),
            });
            verdicts.push(Verdict {
                check: "online bias after training <= before".into(),
                passed: b10 <= before && b50 <= before,
                detail: format!("before={before:.5}"),
            });
        }
    }
    verdicts
}
