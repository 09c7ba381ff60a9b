//! Post-merge representation surgery.
//!
//! Each task owns a small adapter `Φ_t(z) = W_up · ReLU(W_down · zᵀ)` that
//! estimates the bias in the merged model's representation `z`. The
//! corrected representation is `ẑ = z − Φ_t(z)`. Adapters are trained
//! without labels: the target for `ẑ` is the individual fine-tuned model's
//! representation of the same input.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{permutation, stream_rng};
use crate::error::{Error, Result};
use crate::loss::{Loss, LossKind};
use crate::model::{extract_features, uniform, BatchSampler, TaskHead};
use crate::params::{assert_compatible, ModelMeta, ParameterMap};
use crate::tape::{ComputationTape, NodeId};
use crate::tensor::Tensor;

pub const SURGERY_KIND: &str = "surgery";

/// Parameters added by `tasks` adapters of rank `rank` on `k`-dimensional features.
pub fn surgery_param_count(feature_dim: usize, rank: usize, tasks: usize) -> Result<usize> {
    if feature_dim == 0 || rank == 0 || tasks == 0 {
        return Err(Error::Config(format!(
            "parameter count needs positive sizes, got k={feature_dim} r={rank} T={tasks}"
        )));
    }
    Ok(2 * feature_dim * rank * tasks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryModule {
    pub task: usize,
    /// r×k
    pub w_down: Tensor,
    /// k×r
    pub w_up: Tensor,
}

impl SurgeryModule {
    /// `W_down ~ U(±1/√k)`, `W_up = 0`, so the module starts as the identity correction.
    pub fn init(task: usize, feature_dim: usize, rank: usize, seed: u64) -> Result<Self> {
        surgery_param_count(feature_dim, rank, 1)?;
        let mut rng = stream_rng(seed, &[40, task as u64]);
        Ok(SurgeryModule {
            task,
            w_down: uniform(
                &[rank, feature_dim],
                1.0 / (feature_dim as f32).sqrt(),
                &mut rng,
            ),
            w_up: Tensor::zeros(&[feature_dim, rank]),
        })
    }

    pub fn from_weights(task: usize, w_down: Tensor, w_up: Tensor) -> Result<Self> {
        let (r, k) = (w_down.rows(), w_down.cols());
        if w_down.shape().len() != 2 || w_up.shape() != [k, r] {
            return Err(Error::shape("surgery module", w_down.shape(), w_up.shape()));
        }
        Ok(SurgeryModule { task, w_down, w_up })
    }

    pub fn rank(&self) -> usize {
        self.w_down.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_down.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }

    pub fn down_name(task: usize) -> String {
        format!("surgery/{task}/w_down")
    }

    pub fn up_name(task: usize) -> String {
        format!("surgery/{task}/w_up")
    }

    fn check_width(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.feature_dim() {
            return Err(Error::shape(
                "surgery",
                z.shape(),
                &[z.rows(), self.feature_dim()],
            ));
        }
        Ok(())
    }

    /// `Φ_t(z)` for an N×k batch, returned as N×k.
    pub fn adapter_forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z)?;
        let mut tape = ComputationTape::new();
        let nodes = AdapterNodes::record(&mut tape, self, false);
        let zn = tape.constant(z.clone());
        let phi = nodes.phi(&mut tape, zn)?;
        Ok(tape.value(phi).clone())
    }

    /// `ẑ = z − Φ_t(z)`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z)?;
        let mut tape = ComputationTape::new();
        let nodes = AdapterNodes::record(&mut tape, self, false);
        let zn = tape.constant(z.clone());
        let zhat = nodes.apply(&mut tape, zn)?;
        Ok(tape.value(zhat).clone())
    }
}

/// Adapter weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterNodes {
    pub w_down: NodeId,
    pub w_up: NodeId,
}

impl AdapterNodes {
    pub fn record(tape: &mut ComputationTape, module: &SurgeryModule, trainable: bool) -> Self {
        let (d, u) = (module.w_down.clone(), module.w_up.clone());
        if trainable {
            AdapterNodes {
                w_down: tape.leaf(d),
                w_up: tape.leaf(u),
            }
        } else {
            AdapterNodes {
                w_down: tape.constant(d),
                w_up: tape.constant(u),
            }
        }
    }

    /// Row form of `W_up · ReLU(W_down · zᵀ)`: `ReLU(z · W_downᵀ) · W_upᵀ`.
    pub fn phi(&self, tape: &mut ComputationTape, z: NodeId) -> Result<NodeId> {
        let down_t = tape.transpose(self.w_down)?;
        let h = tape.matmul(z, down_t)?;
        let h = tape.relu(h)?;
        let up_t = tape.transpose(self.w_up)?;
        tape.matmul(h, up_t)
    }

    pub fn apply(&self, tape: &mut ComputationTape, z: NodeId) -> Result<NodeId> {
        let phi = self.phi(tape, z)?;
        tape.sub(z, phi)
    }
}

/// A merged encoder with its per-task adapters and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryBundle {
    pub merged: ParameterMap,
    pub modules: Vec<SurgeryModule>,
    pub heads: Vec<TaskHead>,
}

impl SurgeryBundle {
    /// Fresh identity adapters for every head.
    pub fn new(merged: ParameterMap, heads: Vec<TaskHead>, rank: usize, seed: u64) -> Result<Self> {
        let k = merged.meta.feature_dim;
        let modules = heads
            .iter()
            .map(|h| SurgeryModule::init(h.task, k, rank, seed))
            .collect::<Result<Vec<_>>>()?;
        let bundle = SurgeryBundle {
            merged,
            modules,
            heads,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.len() != self.heads.len() {
            return Err(Error::Usage(format!(
                "bundle has {} modules but {} heads",
                self.modules.len(),
                self.heads.len()
            )));
        }
        if let Some(first) = self.modules.first() {
            if self.modules.iter().any(|m| m.rank() != first.rank()) {
                return Err(Error::Usage(
                    "all surgery modules in a bundle must share one rank".into(),
                ));
            }
            if first.feature_dim() != self.merged.meta.feature_dim {
                return Err(Error::shape(
                    "surgery bundle",
                    &[first.feature_dim()],
                    &[self.merged.meta.feature_dim],
                ));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.modules.first().map_or(0, SurgeryModule::rank)
    }

    pub fn tasks(&self) -> usize {
        self.modules.len()
    }

    /// Merged-model features for task `t`, with surgery applied.
    pub fn features(&self, task: usize, inputs: &Tensor) -> Result<Tensor> {
        let z = extract_features(&self.merged, inputs)?;
        self.modules[task].apply(&z)
    }

    /// Adapter weights as a checkpointable map (`surgery/{t}/w_down`, `surgery/{t}/w_up`).
    pub fn modules_to_params(&self) -> Result<ParameterMap> {
        let mut map = ParameterMap::new(ModelMeta {
            kind: SURGERY_KIND.into(),
            feature_dim: self.merged.meta.feature_dim,
            layers: self.modules.len(),
        });
        for m in &self.modules {
            map.insert(SurgeryModule::down_name(m.task), m.w_down.clone())?;
            map.insert(SurgeryModule::up_name(m.task), m.w_up.clone())?;
        }
        Ok(map)
    }

    pub fn modules_from_params(map: &ParameterMap) -> Result<Vec<SurgeryModule>> {
        if map.meta.kind != SURGERY_KIND {
            return Err(Error::Usage(format!(
                "expected a surgery checkpoint, found kind {:?}",
                map.meta.kind
            )));
        }
        (0..map.meta.layers)
            .map(|t| {
                SurgeryModule::from_weights(
                    t,
                    map.require(&SurgeryModule::down_name(t))?.clone(),
                    map.require(&SurgeryModule::up_name(t))?.clone(),
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Offline,
    Online,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Regime::Offline),
            "online" => Ok(Regime::Online),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Offline => "offline",
            Regime::Online => "online",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurgeryTrainConfig {
    pub loss: LossKind,
    pub smooth_l1_delta: f32,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub rank: usize,
    /// Fraction of each task's unlabeled inputs visible to training.
    pub data_ratio: f64,
    pub regime: Regime,
    pub seed: u64,
    /// Extract merged and individual features once instead of per batch.
    pub cache_features: bool,
}

impl Default for SurgeryTrainConfig {
    fn default() -> Self {
        SurgeryTrainConfig {
            loss: LossKind::L1,
            smooth_l1_delta: Loss::DEFAULT_SMOOTH_L1_DELTA,
            adam: AdamConfig::default(),
            iterations: 1000,
            batch_size: 16,
            rank: 16,
            data_ratio: 1.0,
            regime: Regime::Offline,
            seed: 0,
            cache_features: false,
        }
    }
}

impl SurgeryTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "surgery rank and batch size must be positive".into(),
            ));
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "data ratio must be in (0, 1], got {}",
                self.data_ratio
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(
                "surgery learning rate must be positive".into(),
            ));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return Err(Error::Config("smooth_l1 delta must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> Loss {
        Loss {
            kind: self.loss,
            smooth_l1_delta: self.smooth_l1_delta,
        }
    }
}

/// Indices visible at a given data ratio: the first `⌈ratio·N⌉` entries
/// of a seed-shuffled permutation, in that shuffled order.
pub fn visible_indices(n: usize, ratio: f64, seed: u64, task: usize) -> Vec<usize> {
    let keep = ((ratio * n as f64).ceil() as usize).min(n);
    let mut perm = permutation(n, &mut stream_rng(seed, &[50, task as u64]));
    perm.truncate(keep);
    perm
}

/// Per-iteration losses. `per_task[i][t]` is task `t`'s loss at iteration `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub per_task: Vec<Vec<f64>>,
    /// Samples consumed per task over the whole run.
    pub consumed: Vec<usize>,
}

impl LossTrace {
    pub fn mean(&self, iteration: usize) -> f64 {
        let row = &self.per_task[iteration];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn iterations(&self) -> usize {
        self.per_task.len()
    }

    /// CSV with columns `iteration, task_0, …, task_{T-1}, mean`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let tasks = self.per_task.first().map_or(self.consumed.len(), Vec::len);
        let mut header = vec!["iteration".to_string()];
        header.extend((0..tasks).map(|t| format!("task_{t}")));
        header.push("mean".into());
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (i, row) in self.per_task.iter().enumerate() {
            let mut line = vec![i.to_string()];
            line.extend(row.iter().map(|v| v.to_string()));
            line.push(self.mean(i).to_string());
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Frozen models and data the adapters are trained against.
pub struct SurgeryData<'a> {
    pub individuals: &'a [ParameterMap],
    /// Unlabeled inputs per task, N_t×d.
    pub inputs: &'a [Tensor],
}

impl SurgeryData<'_> {
    fn check(&self, bundle: &SurgeryBundle) -> Result<()> {
        bundle.validate()?;
        let t = bundle.tasks();
        if self.individuals.len() != t || self.inputs.len() != t {
            return Err(Error::Usage(format!(
                "surgery over {t} tasks got {} individual models and {} input sets",
                self.individuals.len(),
                self.inputs.len()
            )));
        }
        let mut maps = vec![&bundle.merged];
        maps.extend(self.individuals.iter());
        assert_compatible(&maps)
    }
}

/// Drops rows whose target has zero norm; only used for the cosine loss.
fn drop_zero_targets(z: Tensor, target: Tensor, task: usize) -> Result<(Tensor, Tensor)> {
    let keep: Vec<usize> = (0..target.rows())
        .filter(|&i| target.row(i).iter().any(|&v| v != 0.0))
        .collect();
    if keep.len() == target.rows() {
        return Ok((z, target));
    }
    warn!(
        "task {task}: skipping {} zero-norm target rows under neg_cosine",
        target.rows() - keep.len()
    );
    Ok((z.select_rows(&keep)?, target.select_rows(&keep)?))
}

/// One optimizer step on all modules given per-task (merged, target) feature batches.
fn joint_step(
    modules: &mut [SurgeryModule],
    adam: &mut AdamState,
    batches: Vec<Option<(Tensor, Tensor)>>,
    loss: Loss,
    iteration: usize,
) -> Result<Vec<f64>> {
    let mut tape = ComputationTape::new();
    let nodes: Vec<AdapterNodes> = modules
        .iter()
        .map(|m| AdapterNodes::record(&mut tape, m, true))
        .collect();
    let mut total: Option<NodeId> = None;
    let mut per_task = vec![0.0; modules.len()];
    for (t, batch) in batches.into_iter().enumerate() {
        let Some((z, target)) = batch else { continue };
        let (z, target) = if loss.kind == LossKind::NegCosine {
            drop_zero_targets(z, target, t)?
        } else {
            (z, target)
        };
        if z.rows() == 0 {
            continue;
        }
        let zn = tape.constant(z);
        let tn = tape.constant(target);
        let zhat = nodes[t].apply(&mut tape, zn)?;
        let l = tape
            .loss(loss, zhat, tn)
            .map_err(|e| diverged(e, iteration))?;
        per_task[t] = tape.value(l).item() as f64;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let Some(total) = total else {
        return Ok(per_task);
    };
    let grads = tape.backward(total)?;
    let grads: Vec<Tensor> = nodes
        .iter()
        .flat_map(|n| [grads.wrt(n.w_down), grads.wrt(n.w_up)])
        .collect();
    let mut params: Vec<Tensor> = modules
        .iter()
        .flat_map(|m| [m.w_down.clone(), m.w_up.clone()])
        .collect();
    adam.step(&mut params, &grads)
        .map_err(|e| diverged(e, iteration))?;
    for (m, pair) in modules.iter_mut().zip(params.chunks_exact(2)) {
        m.w_down = pair[0].clone();
        m.w_up = pair[1].clone();
    }
    Ok(per_task)
}

fn diverged(e: Error, iteration: usize) -> Error {
    if e.is_numerical() {
        Error::Divergence(format!("surgery iteration {iteration}: {e}"))
    } else {
        e
    }
}

fn new_adam(modules: &[SurgeryModule], cfg: &SurgeryTrainConfig) -> AdamState {
    let params: Vec<Tensor> = modules
        .iter()
        .flat_map(|m| [m.w_down.clone(), m.w_up.clone()])
        .collect();
    AdamState::new(cfg.adam, &params)
}

/// Source of (merged, individual) feature pairs for arbitrary row subsets.
struct FeatureSource<'a> {
    merged: &'a ParameterMap,
    data: &'a SurgeryData<'a>,
    cache: Option<Vec<(Tensor, Tensor)>>,
}

impl<'a> FeatureSource<'a> {
    fn new(merged: &'a ParameterMap, data: &'a SurgeryData<'a>, cache: bool) -> Result<Self> {
        let cache = if cache {
            Some(
                data.inputs
                    .iter()
                    .zip(data.individuals)
                    .map(|(x, ind)| Ok((extract_features(merged, x)?, extract_features(ind, x)?)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(FeatureSource {
            merged,
            data,
            cache,
        })
    }

    fn batch(&self, task: usize, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        match &self.cache {
            Some(c) => Ok((c[task].0.select_rows(idx)?, c[task].1.select_rows(idx)?)),
            None => {
                let x = self.data.inputs[task].select_rows(idx)?;
                Ok((
                    extract_features(self.merged, &x)?,
                    extract_features(&self.data.individuals[task], &x)?,
                ))
            }
        }
    }
}

/// Trains all adapters jointly on a fixed visible subset, cycling through
/// reshuffled epochs. One iteration draws one batch from every task and
/// takes a single Adam step on the summed loss.
pub fn train_offline(
    mut bundle: SurgeryBundle,
    data: &SurgeryData<'_>,
    cfg: &SurgeryTrainConfig,
) -> Result<(SurgeryBundle, LossTrace)> {
    cfg.validate()?;
    data.check(&bundle)?;
    let visible: Vec<Vec<usize>> = data
        .inputs
        .iter()
        .enumerate()
        .map(|(t, x)| visible_indices(x.rows(), cfg.data_ratio, cfg.seed, t))
        .collect();
    if let Some(t) = visible.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!(
            "task {t} has no visible samples after subsampling"
        )));
    }
    let source = FeatureSource::new(&bundle.merged, data, cfg.cache_features)?;
    let mut samplers: Vec<BatchSampler> = visible
        .iter()
        .enumerate()
        .map(|(t, v)| BatchSampler::new(v.len(), stream_rng(cfg.seed, &[51, t as u64])))
        .collect();
    let mut adam = new_adam(&bundle.modules, cfg);
    let mut trace = LossTrace {
        per_task: Vec::with_capacity(cfg.iterations),
        consumed: vec![0; bundle.tasks()],
    };
    for it in 0..cfg.iterations {
        let mut batches = Vec::with_capacity(bundle.tasks());
        for (t, sampler) in samplers.iter_mut().enumerate() {
            let idx: Vec<usize> = sampler
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|i| visible[t][i])
                .collect();
            trace.consumed[t] += idx.len();
            batches.push(Some(source.batch(t, &idx)?));
        }
        let losses = joint_step(&mut bundle.modules, &mut adam, batches, cfg.loss(), it)?;
        trace.per_task.push(losses);
    }
    Ok((bundle, trace))
}

/// Single pass over a stream with batch size 1: at step `i` every task
/// consumes its `i`-th visible sample, and no sample is revisited.
pub fn train_online(
    mut bundle: SurgeryBundle,
    data: &SurgeryData<'_>,
    cfg: &SurgeryTrainConfig,
) -> Result<(SurgeryBundle, LossTrace)> {
    cfg.validate()?;
    data.check(&bundle)?;
    let streams: Vec<Vec<usize>> = data
        .inputs
        .iter()
        .enumerate()
        .map(|(t, x)| visible_indices(x.rows(), cfg.data_ratio, cfg.seed, t))
        .collect();
    let steps = streams.iter().map(Vec::len).max().unwrap_or(0);
    let source = FeatureSource::new(&bundle.merged, data, cfg.cache_features)?;
    let mut adam = new_adam(&bundle.modules, cfg);
    let mut trace = LossTrace {
        per_task: Vec::with_capacity(steps),
        consumed: vec![0; bundle.tasks()],
    };
    for step in 0..steps {
        let mut batches = Vec::with_capacity(bundle.tasks());
        for (t, stream) in streams.iter().enumerate() {
            match stream.get(step) {
                Some(&i) => {
                    trace.consumed[t] += 1;
                    batches.push(Some(source.batch(t, &[i])?));
                }
                None => batches.push(None),
            }
        }
        let losses = joint_step(&mut bundle.modules, &mut adam, batches, cfg.loss(), step)?;
        trace.per_task.push(losses);
    }
    Ok((bundle, trace))
}

/// Dispatches on `cfg.regime`.
pub fn train(
    bundle: SurgeryBundle,
    data: &SurgeryData<'_>,
    cfg: &SurgeryTrainConfig,
) -> Result<(SurgeryBundle, LossTrace)> {
    match cfg.regime {
        Regime::Offline => train_offline(bundle, data, cfg),
        Regime::Online => train_online(bundle, data, cfg),
    }
}

/// Training objective summed over tasks, evaluated on every input row.
pub fn surgery_objective(
    bundle: &SurgeryBundle,
    data: &SurgeryData<'_>,
    loss: Loss,
) -> Result<f64> {
    data.check(bundle)?;
    let mut total = 0.0;
    for (t, (x, ind)) in data.inputs.iter().zip(data.individuals).enumerate() {
        let zhat = bundle.features(t, x)?;
        let target = extract_features(ind, x)?;
        total += loss.value(&zhat, &target)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn hand_module() -> SurgeryModule {
        SurgeryModule::from_weights(0, m(&[&[1.0, 0.0]]), m(&[&[1.0], &[-1.0]])).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(surgery_param_count(512, 16, 8).unwrap(), 131_072);
        assert_eq!(surgery_param_count(768, 16, 8).unwrap(), 196_608);
        assert_eq!(surgery_param_count(1, 1, 1).unwrap(), 2);
        assert!(surgery_param_count(16, 0, 8).is_err());
        let module = SurgeryModule::init(0, 16, 4, 0).unwrap();
        assert_eq!(module.param_count(), surgery_param_count(16, 4, 1).unwrap());
    }

    #[test]
    fn hand_adapter_case() {
        let module = hand_module();
        let z = m(&[&[2.0, 3.0]]);
        assert_eq!(module.adapter_forward(&z).unwrap().data(), &[2.0, -2.0]);
        assert_eq!(module.apply(&z).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn zero_input_and_zero_up_are_fixed_points() {
        let module = SurgeryModule::init(0, 4, 3, 1).unwrap();
        assert_eq!(
            module.adapter_forward(&Tensor::zeros(&[2, 4])).unwrap(),
            Tensor::zeros(&[2, 4])
        );
        let z = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 9.0, 8.0, -7.0, 6.0]).unwrap();
        assert_eq!(module.adapter_forward(&z).unwrap(), Tensor::zeros(&[2, 4]));
        assert!(module.apply(&z).unwrap().bit_eq(&z));
    }

    #[test]
    fn surgery_is_not_linear_across_relu_sign_change() {
        let module = hand_module();
        let a = m(&[&[2.0, 3.0]]);
        let b = m(&[&[-2.0, 1.0]]);
        let sum = a.add(&b).unwrap();
        let separate = module
            .apply(&a)
            .unwrap()
            .add(&module.apply(&b).unwrap())
            .unwrap();
        // ReLU(2) + ReLU(-2) = 2 but ReLU(0) = 0
        assert_eq!(separate.data(), &[-2.0, 6.0]);
        assert_eq!(module.apply(&sum).unwrap().data(), &[0.0, 4.0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(matches!(
            hand_module().apply(&Tensor::zeros(&[1, 3])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn visible_subset_size() {
        assert_eq!(visible_indices(100, 0.1, 0, 0).len(), 10);
        assert_eq!(visible_indices(100, 0.015, 0, 0).len(), 2);
        assert_eq!(visible_indices(7, 1.0, 0, 0).len(), 7);
        let a = visible_indices(50, 0.2, 3, 1);
        let b = visible_indices(50, 0.5, 3, 1);
        assert_eq!(a, b[..a.len()]);
    }

    #[test]
    fn config_validation() {
        let ok = SurgeryTrainConfig::default();
        ok.validate().unwrap();
        assert!(SurgeryTrainConfig {
            data_ratio: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SurgeryTrainConfig {
            data_ratio: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SurgeryTrainConfig { rank: 0, ..ok }.validate().is_err());
    }
}
