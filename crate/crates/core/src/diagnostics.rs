//! Representation-bias measurement and 2D projections of feature sets.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::extract_features;
use crate::params::{assert_compatible, ParameterMap};
use crate::surgery::SurgeryBundle;
use crate::tensor::Tensor;

/// Mean absolute elementwise difference between two aligned N×k feature
/// matrices, i.e. `‖Z_mtl − Z_ind‖₁ / (k·N)`.
pub fn representation_bias(z_merged: &Tensor, z_individual: &Tensor) -> Result<f64> {
    if z_merged.shape() != z_individual.shape() {
        return Err(Error::shape(
            "representation_bias",
            z_merged.shape(),
            z_individual.shape(),
        ));
    }
    if z_merged.is_empty() {
        return Err(Error::Degenerate(
            "representation bias over an empty batch".into(),
        ));
    }
    Ok(z_merged.l1_distance(z_individual)? / z_merged.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBias {
    pub task: usize,
    pub d: f64,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub method: String,
    pub surgery: bool,
    pub seed: u64,
    pub per_task: Vec<TaskBias>,
    pub mean: f64,
}

impl BiasReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Usage(e.to_string()))
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "representation bias  method={}  surgery={}  seed={}",
            self.method,
            if self.surgery { "on" } else { "off" },
            self.seed
        );
        let _ = writeln!(out, "{:>6}  {:>10}  {:>6}  {:>4}", "task", "d", "n", "k");
        for t in &self.per_task {
            let _ = writeln!(out, "{:>6}  {:>10.6}  {:>6}  {:>4}", t.task, t.d, t.n, t.k);
        }
        let _ = writeln!(out, "{:>6}  {:>10.6}", "mean", self.mean);
        out
    }
}

/// Where a bias report came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
}

/// Per-task bias between the merged model (optionally corrected by a
/// surgery bundle) and each individual model on the given inputs.
pub fn bias_report(
    merged: &ParameterMap,
    individuals: &[ParameterMap],
    bundle: Option<&SurgeryBundle>,
    inputs: &[Tensor],
    provenance: &Provenance,
) -> Result<BiasReport> {
    if inputs.len() != individuals.len() {
        return Err(Error::Usage(format!(
            "bias report: {} individual models but inputs for {} tasks",
            individuals.len(),
            inputs.len()
        )));
    }
    if let Some(b) = bundle {
        if b.tasks() != individuals.len() {
            return Err(Error::Usage(
                "surgery bundle task count differs from individual models".into(),
            ));
        }
        if b.merged.max_abs_diff(merged)? != 0.0 {
            return Err(Error::Usage(
                "surgery bundle was trained on a different merged model".into(),
            ));
        }
    }
    let mut maps = vec![merged];
    maps.extend(individuals.iter());
    assert_compatible(&maps)?;

    let mut per_task = Vec::with_capacity(inputs.len());
    for (t, (x, ind)) in inputs.iter().zip(individuals).enumerate() {
        if x.rows() == 0 {
            return Err(Error::Degenerate(format!("no inputs for task {t}")));
        }
        let z = extract_features(merged, x)?;
        let z = match bundle {
            Some(b) => b.modules[t].apply(&z)?,
            None => z,
        };
        let target = extract_features(ind, x)?;
        per_task.push(TaskBias {
            task: t,
            d: representation_bias(&z, &target)?,
            n: z.rows(),
            k: z.cols(),
        });
    }
    let mean = per_task.iter().map(|t| t.d).sum::<f64>() / per_task.len().max(1) as f64;
    Ok(BiasReport {
        method: provenance.method.clone(),
        surgery: bundle.is_some(),
        seed: provenance.seed,
        per_task,
        mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Merged,
    Individual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub task: usize,
    pub source: Source,
    pub x: f64,
    pub y: f64,
}

/// 2D PCA coordinates of merged and individual features, per task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionExport {
    pub points: Vec<ProjectedPoint>,
    /// Variance captured by each of the two components, per task.
    pub explained_variance: Vec<[f64; 2]>,
}

pub const PROJECTION_NOTE: &str =
    "2D coordinates from exact PCA (top-2 principal components fitted on the \
union of merged and individual features per task); used in place of a stochastic embedding";

/// Top-2 principal axes of the rows of `points` (each of length k).
/// Returns (mean, [axis1, axis2], [var1, var2]).
fn principal_axes(points: &[&[f32]], k: usize) -> Result<(Vec<f64>, [Vec<f64>; 2], [f64; 2])> {
    let n = points.len();
    if n < 3 || k < 2 {
        return Err(Error::Degenerate(format!(
            "projection needs at least 3 points and k >= 2, got {n} and {k}"
        )));
    }
    let mut mean = vec![0.0f64; k];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p.iter()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for p in points {
        for i in 0..k {
            let di = p[i] as f64 - mean[i];
            for j in i..k {
                cov[(i, j)] += di * (p[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = (0..k).map(|i| cov[(i, i)]).sum();
    if total <= 1e-12 {
        return Err(Error::Degenerate(
            "all points are identical; no principal direction".into(),
        ));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axis = |c: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // largest-magnitude loading positive; earliest index wins ties
        let mut big = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[big].abs() + 1e-12 {
                big = i;
            }
        }
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a, b) = (order[0], order[1]);
    Ok((
        mean,
        [axis(a), axis(b)],
        [eig.eigenvalues[a].max(0.0), eig.eigenvalues[b].max(0.0)],
    ))
}

/// Projects each task's merged and individual features onto the top two
/// principal components of their union.
pub fn project_2d(features: &[(Tensor, Tensor)]) -> Result<ProjectionExport> {
    let mut export = ProjectionExport::default();
    for (task, (merged, individual)) in features.iter().enumerate() {
        if merged.shape() != individual.shape() {
            return Err(Error::shape(
                "project_2d",
                merged.shape(),
                individual.shape(),
            ));
        }
        let k = merged.cols();
        let rows: Vec<&[f32]> = (0..merged.rows())
            .map(|i| merged.row(i))
            .chain((0..individual.rows()).map(|i| individual.row(i)))
            .collect();
        let (mean, axes, var) = principal_axes(&rows, k)?;
        export.explained_variance.push(var);
        for (i, row) in rows.iter().enumerate() {
            let coord = |axis: &[f64]| -> f64 {
                row.iter()
                    .zip(&mean)
                    .zip(axis)
                    .map(|((&v, m), a)| (v as f64 - m) * a)
                    .sum()
            };
            export.points.push(ProjectedPoint {
                task,
                source: if i < merged.rows() {
                    Source::Merged
                } else {
                    Source::Individual
                },
                x: coord(&axes[0]),
                y: coord(&axes[1]),
            });
        }
    }
    Ok(export)
}

impl ProjectionExport {
    /// CSV with columns `task, source, x, y`, preceded by a `#` comment line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "# {PROJECTION_NOTE}").map_err(io)?;
        writeln!(w, "task,source,x,y").map_err(io)?;
        for p in &self.points {
            let source = match p.source {
                Source::Merged => "merged",
                Source::Individual => "individual",
            };
            writeln!(w, "{},{},{},{}", p.task, source, p.x, p.y).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
