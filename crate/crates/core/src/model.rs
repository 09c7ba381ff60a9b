//! Shared ReLU encoder, per-task linear heads, and their training loops.
//!
//! Encoder parameters are stored as `encoder.{l}.weight` (in×out) and
//! `encoder.{l}.bias` for `l` in `0..L`. Hidden layers use ReLU; the last
//! layer is linear and its output is the representation fed to the heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{stream_rng, Split};
use crate::error::{Error, Result};
use crate::params::{ModelMeta, ParameterMap};
use crate::tape::{ComputationTape, NodeId};
use crate::tensor::Tensor;

pub const ENCODER_KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// `[d, h_1, ..., k]`; `L = widths.len() - 1` linear layers.
    pub widths: Vec<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::mlp(32, 64, 16, 3)
    }
}

impl EncoderSpec {
    /// `layers` linear maps: `d → hidden → … → hidden → k`.
    pub fn mlp(input_dim: usize, hidden: usize, feature_dim: usize, layers: usize) -> Self {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        widths.push(feature_dim);
        EncoderSpec { widths }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "invalid encoder widths {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(l: usize) -> String {
        format!("encoder.{l}.weight")
    }

    pub fn bias_name(l: usize) -> String {
        format!("encoder.{l}.bias")
    }

    /// Uniform(±1/√fan_in) initialization for weights and biases.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParameterMap> {
        self.validate()?;
        let mut map = ParameterMap::new(ModelMeta {
            kind: ENCODER_KIND.into(),
            feature_dim: self.feature_dim(),
            layers: self.layers(),
        });
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            map.insert(
                Self::weight_name(l),
                uniform(&[fan_in, fan_out], bound, rng),
            )?;
            map.insert(Self::bias_name(l), uniform(&[fan_out], bound, rng))?;
        }
        Ok(map)
    }

    /// Recovers the architecture from an encoder parameter map.
    pub fn from_params(params: &ParameterMap) -> Result<Self> {
        let layers = params.meta.layers;
        if layers == 0 {
            return Err(Error::Usage("parameter map declares zero layers".into()));
        }
        let mut widths = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            let w = params.require(&Self::weight_name(l))?;
            if w.shape().len() != 2 {
                return Err(Error::Usage(format!("layer {l} weight is not a matrix")));
            }
            if l == 0 {
                widths.push(w.shape()[0]);
            } else if widths[l] != w.shape()[0] {
                return Err(Error::shape("encoder", &[widths[l]], &[w.shape()[0]]));
            }
            widths.push(w.shape()[1]);
        }
        let spec = EncoderSpec { widths };
        if spec.feature_dim() != params.meta.feature_dim {
            return Err(Error::Usage(format!(
                "metadata feature_dim {} disagrees with last layer width {}",
                params.meta.feature_dim,
                spec.feature_dim()
            )));
        }
        Ok(spec)
    }
}

pub(crate) fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Encoder parameters recorded on a tape, one `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl EncoderNodes {
    pub fn record(
        tape: &mut ComputationTape,
        params: &ParameterMap,
        trainable: bool,
    ) -> Result<Self> {
        let spec = EncoderSpec::from_params(params)?;
        let mut layers = Vec::with_capacity(spec.layers());
        for l in 0..spec.layers() {
            let w = params.require(&EncoderSpec::weight_name(l))?.clone();
            let b = params.require(&EncoderSpec::bias_name(l))?.clone();
            layers.push(if trainable {
                (tape.leaf(w), tape.leaf(b))
            } else {
                (tape.constant(w), tape.constant(b))
            });
        }
        Ok(EncoderNodes { layers })
    }

    /// Forward pass producing the N×k representation.
    pub fn forward(&self, tape: &mut ComputationTape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Encoder output for `inputs` (N×d). Shares its forward code with training.
pub fn extract_features(params: &ParameterMap, inputs: &Tensor) -> Result<Tensor> {
    let spec = EncoderSpec::from_params(params)?;
    if inputs.shape().len() != 2 || inputs.cols() != spec.input_dim() {
        return Err(Error::shape(
            "extract_features",
            inputs.shape(),
            &[inputs.rows(), spec.input_dim()],
        ));
    }
    if inputs.rows() == 0 {
        return Ok(Tensor::zeros(&[0, spec.feature_dim()]));
    }
    let mut tape = ComputationTape::new();
    let enc = EncoderNodes::record(&mut tape, params, false)?;
    let x = tape.constant(inputs.clone());
    let z = enc.forward(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

/// Fixed temperature applied to normalized features before the head.
pub const LOGIT_SCALE: f32 = 10.0;

/// Linear classifier on the L2-normalized representation. The head sees only
/// the direction of each feature row, so logits are invariant to feature scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub task: usize,
    /// k×c
    pub weight: Tensor,
    /// c
    pub bias: Tensor,
}

impl TaskHead {
    pub fn init(task: usize, feature_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (feature_dim as f32).sqrt();
        TaskHead {
            task,
            weight: uniform(&[feature_dim, classes], bound, rng),
            bias: uniform(&[classes], bound, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        features
            .normalize_rows()?
            .scale(LOGIT_SCALE)?
            .matmul(&self.weight)?
            .add_row(&self.bias)
    }

    /// Records the head on a tape given nodes for features, weight and bias.
    pub fn record(
        tape: &mut ComputationTape,
        z: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let u = tape.normalize_rows(z)?;
        let u = tape.scale(u, LOGIT_SCALE)?;
        let logits = tape.matmul(u, weight)?;
        tape.add_row(logits, bias)
    }

    pub fn weight_name(task: usize) -> String {
        format!("head.{task}.weight")
    }

    pub fn bias_name(task: usize) -> String {
        format!("head.{task}.bias")
    }

    /// Packs heads into one map for checkpointing.
    pub fn to_params(heads: &[TaskHead]) -> Result<ParameterMap> {
        let mut map = ParameterMap::new(ModelMeta {
            kind: "heads".into(),
            feature_dim: heads.first().map_or(0, TaskHead::feature_dim),
            layers: heads.len(),
        });
        for h in heads {
            map.insert(Self::weight_name(h.task), h.weight.clone())?;
            map.insert(Self::bias_name(h.task), h.bias.clone())?;
        }
        Ok(map)
    }

    pub fn from_params(map: &ParameterMap) -> Result<Vec<TaskHead>> {
        (0..map.meta.layers)
            .map(|t| {
                Ok(TaskHead {
                    task: t,
                    weight: map.require(&Self::weight_name(t))?.clone(),
                    bias: map.require(&Self::bias_name(t))?.clone(),
                })
            })
            .collect()
    }
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose head prediction matches the label.
pub fn accuracy_from_features(features: &Tensor, head: &TaskHead, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Degenerate("accuracy over an empty split".into()));
    }
    let pred = argmax_rows(&head.logits(features)?);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate(params: &ParameterMap, head: &TaskHead, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Degenerate(
            "cannot evaluate on an empty split".into(),
        ));
    }
    accuracy_from_features(
        &extract_features(params, &split.inputs)?,
        head,
        &split.labels,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Head-only steps on frozen encoder features before joint training.
    pub head_warmup: usize,
    /// Keep the head fixed during joint training (encoder-only updates).
    pub freeze_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 32,
            adam: AdamConfig::default(),
            head_warmup: 0,
            freeze_head: false,
        }
    }
}

/// Cycles through shuffled epochs of `0..n`, yielding fixed-size batches.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss trace of a supervised run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

/// Supervised cross-entropy training of an encoder plus one linear head.
fn train_supervised(
    mut encoder: ParameterMap,
    mut head: TaskHead,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<(ParameterMap, TaskHead, TrainTrace)> {
    if cfg.steps == 0 {
        return Ok((encoder, head, TrainTrace::default()));
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("training on an empty sample".into()));
    }
    let mut sampler = BatchSampler::new(labels.len(), rng);
    if cfg.head_warmup > 0 {
        head = warm_up_head(&encoder, head, inputs, labels, cfg, &mut sampler)?;
    }
    let names: Vec<String> = encoder.names().map(str::to_string).collect();
    let mut params: Vec<Tensor> = encoder.iter().map(|(_, t)| t.clone()).collect();
    params.push(head.weight.clone());
    params.push(head.bias.clone());
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut trace = TrainTrace::default();

    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let mut tape = ComputationTape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let layers = leaves[..names.len()]
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let enc = EncoderNodes { layers };
        let x = tape.constant(inputs.select_rows(&idx)?);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let z = enc.forward(&mut tape, x)?;
        let logits = TaskHead::record(&mut tape, z, leaves[names.len()], leaves[names.len() + 1])?;
        let loss = tape
            .cross_entropy(logits, &batch_labels)
            .map_err(|e| divergence(e, step))?;
        trace.losses.push(tape.value(loss).item() as f64);
        let grads = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = leaves.iter().map(|&id| grads.wrt(id)).collect();
        if cfg.freeze_head {
            for g in &mut grads[names.len()..] {
                *g = Tensor::zeros(g.shape());
            }
        }
        adam.step(&mut params, &grads)
            .map_err(|e| divergence(e, step))?;
    }

    let head_bias = params.pop().expect("head bias");
    let head_weight = params.pop().expect("head weight");
    head.weight = head_weight;
    head.bias = head_bias;
    for (name, p) in names.iter().zip(params) {
        encoder.replace(name, p)?;
    }
    Ok((encoder, head, trace))
}

fn warm_up_head(
    encoder: &ParameterMap,
    head: TaskHead,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    sampler: &mut BatchSampler,
) -> Result<TaskHead> {
    let features = extract_features(encoder, inputs)?;
    let mut params = vec![head.weight.clone(), head.bias.clone()];
    let mut adam = AdamState::new(cfg.adam, &params);
    for step in 0..cfg.head_warmup {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = ComputationTape::new();
        let w = tape.leaf(params[0].clone());
        let b = tape.leaf(params[1].clone());
        let z = tape.constant(features.select_rows(&idx)?);
        let logits = TaskHead::record(&mut tape, z, w, b)?;
        let loss = tape
            .cross_entropy(logits, &batch_labels)
            .map_err(|e| divergence(e, step))?;
        let grads = tape.backward(loss)?;
        let grads = [grads.wrt(w), grads.wrt(b)];
        adam.step(&mut params, &grads)
            .map_err(|e| divergence(e, step))?;
    }
    let bias = params.pop().expect("head bias");
    let weight = params.pop().expect("head weight");
    Ok(TaskHead {
        weight,
        bias,
        ..head
    })
}

fn divergence(e: Error, step: usize) -> Error {
    if e.is_numerical() {
        Error::Divergence(format!("step {step}: {e}"))
    } else {
        e
    }
}

/// Trains the shared initialization on a mixed sample of all tasks.
///
/// `labels` index a throwaway head with `classes` outputs. Returns the
/// encoder (θ₀), the discarded head, and the loss trace.
pub fn pretrain(
    spec: &EncoderSpec,
    inputs: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParameterMap, TaskHead, TrainTrace)> {
    spec.validate()?;
    let mut rng = stream_rng(seed, &[10]);
    let encoder = spec.init(&mut rng)?;
    let head = TaskHead::init(usize::MAX, spec.feature_dim(), classes, &mut rng);
    train_supervised(encoder, head, inputs, labels, cfg, stream_rng(seed, &[11]))
}

/// Fine-tunes a copy of `base` together with a fresh head on one task's training split.
pub fn finetune(
    base: &ParameterMap,
    task: usize,
    classes: usize,
    train: &Split,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParameterMap, TaskHead, TrainTrace)> {
    let spec = EncoderSpec::from_params(base)?;
    if train.inputs.cols() != spec.input_dim() {
        return Err(Error::shape(
            "finetune",
            train.inputs.shape(),
            &[train.len(), spec.input_dim()],
        ));
    }
    let mut rng = stream_rng(seed, &[20, task as u64]);
    let head = TaskHead::init(task, spec.feature_dim(), classes, &mut rng);
    train_supervised(
        base.clone(),
        head,
        &train.inputs,
        &train.labels,
        cfg,
        stream_rng(seed, &[21, task as u64]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_tasks, SplitKind, TaskSuiteConfig};
    use crate::params::assert_compatible;

    fn tiny_suite() -> Vec<crate::data::TaskDataset> {
        make_tasks(
            0,
            &TaskSuiteConfig {
                tasks: 2,
                train_per_class: 20,
                test_per_class: 20,
                ..TaskSuiteConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn default_spec_shapes() {
        let spec = EncoderSpec::default();
        assert_eq!(spec.widths, vec![32, 64, 64, 16]);
        let p = spec.init(&mut stream_rng(0, &[])).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.meta.feature_dim, 16);
        assert_eq!(EncoderSpec::from_params(&p).unwrap(), spec);
    }

    #[test]
    fn empty_batch_gives_empty_features() {
        let p = EncoderSpec::default()
            .init(&mut stream_rng(0, &[]))
            .unwrap();
        let z = extract_features(&p, &Tensor::zeros(&[0, 32])).unwrap();
        assert_eq!(z.shape(), &[0, 16]);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let p = EncoderSpec::default()
            .init(&mut stream_rng(0, &[]))
            .unwrap();
        assert!(matches!(
            extract_features(&p, &Tensor::zeros(&[3, 31])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn features_are_row_independent() {
        let p = EncoderSpec::default()
            .init(&mut stream_rng(0, &[]))
            .unwrap();
        let x = tiny_suite()[0].test.inputs.clone();
        let full = extract_features(&p, &x).unwrap();
        let part = extract_features(&p, &x.select_rows(&[3, 0]).unwrap()).unwrap();
        assert_eq!(part.row(0), full.row(3));
        assert_eq!(part.row(1), full.row(0));
    }

    #[test]
    fn constant_head_on_single_class_split() {
        let mut head = TaskHead::init(0, 16, 3, &mut stream_rng(0, &[]));
        head.weight = Tensor::zeros(&[16, 3]);
        head.bias = Tensor::new(vec![3], vec![0.0, 5.0, 0.0]).unwrap();
        let z = Tensor::full(&[10, 16], 0.3);
        assert_eq!(accuracy_from_features(&z, &head, &[1; 10]).unwrap(), 1.0);
    }

    #[test]
    fn zero_steps_are_identity() {
        let tasks = tiny_suite();
        let spec = EncoderSpec::default();
        let (theta0, _, trace) = pretrain(
            &spec,
            &tasks[0].train.inputs,
            &tasks[0].train.labels,
            5,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(trace.losses.is_empty());
        assert!(theta0.bit_eq(&spec.init(&mut stream_rng(3, &[10])).unwrap()));
        let (theta1, _, _) = finetune(
            &theta0,
            0,
            5,
            &tasks[0].train,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(theta1.bit_eq(&theta0));
    }

    #[test]
    fn finetune_improves_and_preserves_architecture() {
        let tasks = tiny_suite();
        let spec = EncoderSpec::default();
        let cfg = TrainConfig {
            steps: 150,
            ..Default::default()
        };
        let (theta0, _, trace) = pretrain(
            &spec,
            &tasks[1].train.inputs,
            &tasks[1].train.labels,
            5,
            &cfg,
            1,
        )
        .unwrap();
        assert!(trace.losses.last().unwrap() < &trace.losses[0]);
        let (theta, head, _) = finetune(&theta0, 0, 5, &tasks[0].train, &cfg, 1).unwrap();
        assert_compatible(&[&theta0, &theta]).unwrap();
        let tuned = evaluate(&theta, &head, tasks[0].split(SplitKind::Train)).unwrap();
        let fresh = TaskHead::init(0, 16, 5, &mut stream_rng(99, &[]));
        let base = evaluate(&theta0, &fresh, tasks[0].split(SplitKind::Train)).unwrap();
        assert!(tuned > base, "{tuned} vs {base}");
        let (again, _, _) = finetune(&theta0, 0, 5, &tasks[0].train, &cfg, 1).unwrap();
        assert!(again.bit_eq(&theta));
    }

    #[test]
    fn heads_round_trip_through_params() {
        let heads: Vec<TaskHead> = (0..3)
            .map(|t| TaskHead::init(t, 4, 2, &mut stream_rng(t as u64, &[])))
            .collect();
        let back = TaskHead::from_params(&TaskHead::to_params(&heads).unwrap()).unwrap();
        assert_eq!(back, heads);
    }
}
