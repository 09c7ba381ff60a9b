//! The five subcommands. Each returns what it wrote so callers (and tests)
//! can inspect results without re-reading files.

use rayon::prelude::*;
use serde::Serialize;

use repsurgery::checkpoint;
use repsurgery::diagnostics::project_2d;
use repsurgery::merge::{layer_groups, CoefficientMode};
use repsurgery::model::extract_features;
use repsurgery::pipeline::{
    evaluate_merged, merge_prepared, run_surgery, suite_points, suite_verdicts, ExperimentSummary,
    MergeConfig, MergeMethod, MethodResult, Prepared, RunConfig, SeedResult, Suite, SuitePoint,
    SuiteResult,
};
use repsurgery::surgery::{surgery_objective, SurgeryBundle};
use repsurgery::Result;

use crate::artifacts::{
    self, cfg_for_seed, finalize_dir, write_json, write_text, Layout, Manifest,
};

/// Trains θ₀, the fine-tuned encoders and heads for `cfg.seed` and saves them.
pub fn prepare(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.out);
    log::info!(
        "preparing seed {} under {}",
        cfg.seed,
        layout.root.display()
    );
    let prepared = Prepared::build(cfg, cfg.seed)?;
    artifacts::save_prepared(&layout, cfg, &prepared)
}

#[derive(Serialize)]
struct MergeRecord<'a> {
    method: MergeMethod,
    seed: u64,
    #[serde(flatten)]
    hyper: &'a MergeConfig,
    final_entropy: Option<f64>,
}

#[derive(Serialize)]
struct CoefficientsFile {
    mode: CoefficientMode,
    /// Task-major; for layer mode `values[t][l]` follows `layers`.
    values: Vec<Vec<f64>>,
    layers: Vec<String>,
}

/// Merges the prepared models of `cfg.seed` with `cfg.merge.method`.
pub fn merge(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.out);
    let prepared = artifacts::load_prepared(&layout, cfg, cfg.seed)?;
    let outcome = merge_prepared(&prepared, &cfg.merge)?;
    let dir = layout.merge_dir(cfg.seed, outcome.method);
    artifacts::create_dir(&dir)?;
    checkpoint::save(&outcome.merged, layout.merged(cfg.seed, outcome.method))?;
    if let Some(c) = &outcome.coefficients {
        let per_task = c.values.len() / c.tasks.max(1);
        let groups = layer_groups(&prepared.base);
        write_json(
            &dir.join("coefficients.json"),
            &CoefficientsFile {
                mode: c.mode,
                values: c
                    .values
                    .chunks(per_task.max(1))
                    .map(<[f64]>::to_vec)
                    .collect(),
                layers: if c.mode == CoefficientMode::Layer {
                    groups
                } else {
                    Vec::new()
                },
            },
        )?;
    }
    if let Some(trace) = &outcome.trace {
        let mut csv = String::from("step,entropy\n");
        for (i, h) in trace.entropy.iter().enumerate() {
            csv.push_str(&format!("{i},{h}\n"));
        }
        write_text(&dir.join("entropy_trace.csv"), &csv)?;
    }
    write_json(
        &dir.join("merge.json"),
        &MergeRecord {
            method: outcome.method,
            seed: cfg.seed,
            hyper: &cfg.merge,
            final_entropy: outcome
                .trace
                .as_ref()
                .and_then(|t| t.entropy.last().copied()),
        },
    )?;
    finalize_dir(&dir, "merge", cfg)
}

#[derive(Serialize)]
struct SurgeryRecord {
    method: MergeMethod,
    seed: u64,
    rank: usize,
    params: usize,
    initial_objective: f64,
    final_objective: f64,
    consumed: Vec<usize>,
}

/// Trains surgery adapters on the merged model of `cfg.merge.method`.
pub fn surgery(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.out);
    let method = cfg.merge.method;
    let prepared = artifacts::load_prepared(&layout, cfg, cfg.seed)?;
    let merged = artifacts::load_merged(&layout, cfg.seed, method)?;
    let (bundle, trace) = run_surgery(&prepared, &merged, &cfg.surgery)?;
    let inputs = prepared.test_inputs();
    let data = prepared.surgery_data(&inputs);
    let fresh = SurgeryBundle::new(merged, prepared.heads.clone(), cfg.surgery.rank, cfg.seed)?;
    let dir = layout.surgery_dir(cfg.seed, method);
    artifacts::create_dir(&dir)?;
    checkpoint::save(
        &bundle.modules_to_params()?,
        layout.modules(cfg.seed, method),
    )?;
    trace.write_csv(dir.join("trace.csv"))?;
    write_json(
        &dir.join("surgery.json"),
        &SurgeryRecord {
            method,
            seed: cfg.seed,
            rank: bundle.rank(),
            params: bundle.modules.iter().map(|m| m.param_count()).sum(),
            initial_objective: surgery_objective(&fresh, &data, cfg.surgery.loss())?,
            final_objective: surgery_objective(&bundle, &data, cfg.surgery.loss())?,
            consumed: trace.consumed.clone(),
        },
    )?;
    finalize_dir(&dir, "surgery", cfg)
}

fn seed_result(layout: &Layout, cfg: &RunConfig, seed: u64) -> Result<SeedResult> {
    let prepared = artifacts::load_prepared(layout, cfg, seed)?;
    let inputs = prepared.test_inputs();
    let data = prepared.surgery_data(&inputs);
    let loss = cfg.surgery.loss();
    let mut methods = Vec::new();
    let mut bundles = Vec::new();
    for method in MergeMethod::ALL {
        let bundle = artifacts::load_bundle(layout, &prepared, method)?;
        let fresh = SurgeryBundle::new(
            bundle.merged.clone(),
            prepared.heads.clone(),
            bundle.rank(),
            seed,
        )?;
        methods.push(MethodResult {
            method,
            without: evaluate_merged(&prepared, method, &bundle.merged, None)?,
            with: evaluate_merged(&prepared, method, &bundle.merged, Some(&bundle))?,
            initial_objective: surgery_objective(&fresh, &data, loss)?,
            final_objective: surgery_objective(&bundle, &data, loss)?,
        });
        bundles.push((method.cli_name().to_string(), bundle));
    }
    write_projections(layout, &prepared, &bundles)?;
    Ok(SeedResult {
        seed,
        pretrained: prepared.accuracies(&prepared.base)?,
        individual: prepared.individual_accuracies()?,
        methods,
    })
}

fn write_projections(
    layout: &Layout,
    prepared: &Prepared,
    bundles: &[(String, SurgeryBundle)],
) -> Result<()> {
    let dir = layout.report_dir().join("projections");
    artifacts::create_dir(&dir)?;
    let individual: Vec<_> = prepared
        .tasks
        .iter()
        .zip(&prepared.finetuned)
        .map(|(task, theta)| extract_features(theta, &task.test.inputs))
        .collect::<Result<_>>()?;
    for (name, bundle) in bundles {
        for with in [false, true] {
            let pairs = prepared
                .tasks
                .iter()
                .zip(&individual)
                .map(|(task, ind)| {
                    let z = if with {
                        bundle.features(task.task, &task.test.inputs)?
                    } else {
                        extract_features(&bundle.merged, &task.test.inputs)?
                    };
                    Ok((z, ind.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let tag = if with {
                "with-surgery"
            } else {
                "without-surgery"
            };
            project_2d(&pairs)?
                .write_csv(dir.join(format!("{name}-{tag}-seed{}.csv", prepared.seed)))?;
        }
    }
    Ok(())
}

/// Aggregates every seed in `seeds` over all merge methods, with and without surgery.
pub fn report(cfg: &RunConfig, seeds: &[u64]) -> Result<ExperimentSummary> {
    let layout = Layout::new(&cfg.out);
    let mut missing = Vec::new();
    for &seed in seeds {
        missing.push(layout.base(seed));
        missing.push(layout.heads(seed));
        missing.extend((0..cfg.suite.tasks).map(|t| layout.finetuned(seed, t)));
        for m in MergeMethod::ALL {
            missing.push(layout.merged(seed, m));
            missing.push(layout.modules(seed, m));
        }
    }
    artifacts::require_files(&missing)?;
    let results = seeds
        .par_iter()
        .map(|&seed| seed_result(&layout, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let summary = ExperimentSummary::from_seeds(&results);
    let dir = layout.report_dir();
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("summary.txt"), &summary.to_text())?;
    for r in &results {
        for m in &r.methods {
            for (tag, eval) in [("without-surgery", &m.without), ("with-surgery", &m.with)] {
                let path = dir
                    .join("bias")
                    .join(format!("{}-{tag}-seed{}.json", m.method, r.seed));
                write_text(&path, &(eval.bias.to_json()? + "\n"))?;
            }
        }
    }
    let report_cfg = RunConfig {
        seeds: seeds.to_vec(),
        ..cfg.clone()
    };
    finalize_dir(&dir, "report", &report_cfg)?;
    Ok(summary)
}

/// Runs one reproduction suite over `cfg.seeds`. Per-seed points are
/// written even when a later seed fails.
pub fn reproduce(cfg: &RunConfig, suite: Suite) -> Result<SuiteResult> {
    let layout = Layout::new(&cfg.out);
    if cfg.seeds.len() < 3 {
        log::warn!(
            "trend checks expect at least 3 seeds, got {}",
            cfg.seeds.len()
        );
    }
    let outcomes: Vec<Result<Vec<SuitePoint>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let seed_cfg = cfg_for_seed(cfg, seed);
            let prepared = artifacts::load_or_prepare(&layout, &seed_cfg, seed)?;
            suite_points(&seed_cfg, suite, &prepared)
        })
        .collect();
    let mut result = SuiteResult {
        suite: suite.name().into(),
        ..Default::default()
    };
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(points) => result.points.extend(points),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let dir = layout.reproduce_dir(suite.name());
    write_text(&dir.join("points.csv"), &result.to_csv())?;
    if let Some(e) = first_error {
        return Err(e);
    }
    result.verdicts = suite_verdicts(suite, &result.points);
    write_json(&dir.join("verdicts.json"), &result.verdicts)?;
    finalize_dir(&dir, "reproduce", cfg)?;
    Ok(result)
}

/// Prints one line per verdict.
pub fn verdict_lines(result: &SuiteResult) -> Vec<String> {
    result
        .verdicts
        .iter()
        .map(|v| {
            format!(
                "[{}] {}: {} ({})",
                if v.passed { "PASS" } else { "FAIL" },
                result.suite,
                v.check,
                v.detail
            )
        })
        .collect()
}
