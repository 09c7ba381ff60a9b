//! Synthetic multi-task classification suites.
//!
//! All tasks draw inputs through one shared linear embedding of a
//! low-dimensional latent space, so a backbone trained on one task sees
//! the same input distribution family as every other task. Each task then
//! applies its own random rotation of the latent space and places its own
//! class clusters, which makes the per-task decision rules conflict.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub tasks: usize,
    pub input_dim: usize,
    /// Dimension of the shared latent space the clusters live in.
    pub latent_dim: usize,
    pub classes_per_task: usize,
    /// Gaussian blobs per class; more than one makes classes non-convex.
    pub clusters_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of blob centres in latent space.
    pub center_scale: f64,
    /// Within-blob standard deviation in latent space.
    pub cluster_std: f64,
    /// Isotropic noise added in input space.
    pub input_noise: f64,
    /// Standard deviation of the per-task input offset.
    pub task_offset: f64,
    /// Weight of the shared latent→input embedding in each task's input map;
    /// the remainder comes from a task-private embedding. 1.0 puts every
    /// task in the same subspace.
    pub shared_embedding: f64,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        TaskSuiteConfig {
            tasks: 8,
            input_dim: 32,
            latent_dim: 16,
            classes_per_task: 5,
            clusters_per_class: 2,
            train_per_class: 100,
            test_per_class: 100,
            center_scale: 1.0,
            cluster_std: 0.35,
            input_noise: 0.05,
            task_offset: 0.5,
            shared_embedding: 1.0,
        }
    }
}

impl TaskSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Degenerate(format!("task suite: {what}")));
        if self.tasks < 2 {
            return bad("need at least two tasks");
        }
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.classes_per_task < 2 {
            return bad("need at least two classes per task");
        }
        if self.clusters_per_class == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("every class needs clusters and samples in both splits");
        }
        if !(self.center_scale > 0.0
            && self.cluster_std >= 0.0
            && self.input_noise >= 0.0
            && self.task_offset >= 0.0)
        {
            return bad("scales must be non-negative and center_scale positive");
        }
        if !(0.0..=1.0).contains(&self.shared_embedding) {
            return bad("shared_embedding must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

/// One split of one task: an N×d input matrix with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            kind: self.kind,
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl TaskDataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    /// Writes one row per sample: input features, then the label.
    pub fn write_csv(&self, kind: SplitKind, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let split = self.split(kind);
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let d = split.inputs.cols();
        let header: Vec<String> = (0..d)
            .map(|j| format!("x{j}"))
            .chain(["label".to_string()])
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (i, label) in split.labels.iter().enumerate() {
            let mut line: Vec<String> = split.inputs.row(i).iter().map(|v| v.to_string()).collect();
            line.push(label.to_string());
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Derives an independent, reproducible RNG stream from a seed and labels.
pub fn stream_rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &l in labels {
        let mixed = rng.random::<u64>() ^ l.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        rng = ChaCha8Rng::seed_from_u64(mixed);
    }
    rng
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Random orthogonal n×n matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut q = gaussian_matrix(n, n, 1.0, rng);
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|c| q[i * n + c] * q[j * n + c]).sum();
                for c in 0..n {
                    q[i * n + c] -= dot * q[j * n + c];
                }
            }
            let norm: f64 = (0..n).map(|c| q[i * n + c].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for c in 0..n {
                q[i * n + c] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// Generates `cfg.tasks` classification tasks, deterministic per `seed`.
pub fn make_tasks(seed: u64, cfg: &TaskSuiteConfig) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    let (d, k) = (cfg.input_dim, cfg.latent_dim);
    let mut shared_rng = stream_rng(seed, &[0]);
    let embed = gaussian_matrix(d, k, 1.0 / (k as f64).sqrt(), &mut shared_rng);

    (0..cfg.tasks)
        .map(|t| {
            let mut rng = stream_rng(seed, &[1, t as u64]);
            let rotation = random_rotation(k, &mut rng);
            let private = gaussian_matrix(d, k, 1.0 / (k as f64).sqrt(), &mut rng);
            let (ws, wp) = (
                cfg.shared_embedding.sqrt(),
                (1.0 - cfg.shared_embedding).sqrt(),
            );
            let offset = gaussian_matrix(1, d, cfg.task_offset, &mut rng);
            let centers: Vec<Vec<f64>> = (0..cfg.classes_per_task * cfg.clusters_per_class)
                .map(|_| gaussian_matrix(1, k, cfg.center_scale, &mut rng))
                .collect();
            // latent → input map for this task: embed · rotation
            let mut mix = vec![0.0f64; d * k];
            for i in 0..d {
                for j in 0..k {
                    let shared: f64 = (0..k).map(|c| embed[i * k + c] * rotation[c * k + j]).sum();
                    mix[i * k + j] = ws * shared + wp * private[i * k + j];
                }
            }
            let within = Normal::new(0.0, cfg.cluster_std.max(0.0)).expect("valid std");
            let noise = Normal::new(0.0, cfg.input_noise.max(0.0)).expect("valid std");

            let draw = |per_class: usize, kind: SplitKind, rng: &mut ChaCha8Rng| -> Result<Split> {
                let mut rows = Vec::with_capacity(per_class * cfg.classes_per_task * d);
                let mut labels = Vec::with_capacity(per_class * cfg.classes_per_task);
                for i in 0..per_class {
                    for class in 0..cfg.classes_per_task {
                        let cluster = class * cfg.clusters_per_class + i % cfg.clusters_per_class;
                        let latent: Vec<f64> = centers[cluster]
                            .iter()
                            .map(|&c| c + within.sample(rng))
                            .collect();
                        for r in 0..d {
                            let v: f64 = (0..k).map(|j| mix[r * k + j] * latent[j]).sum::<f64>()
                                + offset[r]
                                + noise.sample(rng);
                            rows.push(v as f32);
                        }
                        labels.push(class);
                    }
                }
                Ok(Split {
                    kind,
                    inputs: Tensor::new(vec![labels.len(), d], rows)?,
                    labels,
                })
            };
            let train = draw(cfg.train_per_class, SplitKind::Train, &mut rng)?;
            let test = draw(cfg.test_per_class, SplitKind::Test, &mut rng)?;
            Ok(TaskDataset {
                task: t,
                classes: cfg.classes_per_task,
                train,
                test,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSuiteConfig {
        TaskSuiteConfig {
            tasks: 3,
            train_per_class: 4,
            test_per_class: 3,
            ..TaskSuiteConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            make_tasks(7, &small()).unwrap(),
            make_tasks(7, &small()).unwrap()
        );
        assert_ne!(
            make_tasks(7, &small()).unwrap(),
            make_tasks(8, &small()).unwrap()
        );
    }

    #[test]
    fn eight_tasks_by_default() {
        let cfg = TaskSuiteConfig {
            train_per_class: 2,
            test_per_class: 2,
            ..TaskSuiteConfig::default()
        };
        let tasks = make_tasks(0, &cfg).unwrap();
        assert_eq!(tasks.len(), 8);
        assert!(tasks.iter().enumerate().all(|(i, t)| t.task == i));
    }

    #[test]
    fn labels_in_range_and_every_class_present() {
        for task in make_tasks(1, &small()).unwrap() {
            for split in [&task.train, &task.test] {
                assert!(split.labels.iter().all(|&y| y < task.classes));
                for c in 0..task.classes {
                    assert!(split.labels.contains(&c));
                }
                assert_eq!(split.inputs.rows(), split.len());
                assert_eq!(split.inputs.cols(), 32);
            }
        }
    }

    #[test]
    fn single_task_rejected() {
        let cfg = TaskSuiteConfig {
            tasks: 1,
            ..small()
        };
        assert!(matches!(make_tasks(0, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = stream_rng(3, &[]);
        let n = 5;
        let q = random_rotation(n, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|c| q[i * n + c] * q[j * n + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let task = &make_tasks(0, &small()).unwrap()[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        task.write_csv(SplitKind::Test, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), task.test.len() + 1);
        assert!(lines[0].ends_with(",label"));
        assert_eq!(lines[1].split(',').count(), 33);
    }
}
