//! Weight-space merging of fine-tuned encoders that share one initialization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::model::{BatchSampler, EncoderNodes, EncoderSpec, TaskHead};
use crate::params::{assert_compatible, ParameterMap};
use crate::tape::ComputationTape;
use crate::tensor::Tensor;

/// `θ_t − θ₀` for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub task: usize,
    pub delta: ParameterMap,
}

pub fn task_vector(
    task: usize,
    finetuned: &ParameterMap,
    base: &ParameterMap,
) -> Result<TaskVector> {
    assert_compatible(&[finetuned, base])?;
    let delta = finetuned.try_map(|name, t| t.sub(base.require(name)?))?;
    Ok(TaskVector { task, delta })
}

fn check_vectors(base: &ParameterMap, vectors: &[TaskVector]) -> Result<()> {
    let mut maps = vec![base];
    maps.extend(vectors.iter().map(|v| &v.delta));
    assert_compatible(&maps)
}

/// Elementwise `base + Σ_j weights_j · tensors_j`, accumulated in `f64`.
fn weighted_sum(base: Option<&Tensor>, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let shape = base
        .or(terms.first().map(|t| t.1))
        .expect("at least one operand")
        .shape()
        .to_vec();
    let mut acc: Vec<f64> = match base {
        Some(b) => b.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; shape.iter().product()],
    };
    for (w, t) in terms {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += w * v as f64;
        }
    }
    Tensor::new(shape, acc.into_iter().map(|v| v as f32).collect())
}

/// Elementwise mean of compatible maps.
///
/// Each coordinate is summed in `f64` over its values sorted ascending, so
/// the result does not depend on the order of `maps`.
pub fn weight_average(maps: &[&ParameterMap]) -> Result<ParameterMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("weight_average needs at least one map".into()))?;
    assert_compatible(maps)?;
    let n = maps.len() as f64;
    first.try_map(|name, t| {
        let tensors: Vec<&Tensor> = maps.iter().map(|m| m.get(name).expect("checked")).collect();
        let mut vals = vec![0.0f64; tensors.len()];
        let data = (0..t.len())
            .map(|i| {
                for (v, x) in vals.iter_mut().zip(&tensors) {
                    *v = x.data()[i] as f64;
                }
                vals.sort_by(f64::total_cmp);
                (vals.iter().sum::<f64>() / n) as f32
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    })
}

/// `θ₀ + λ Σ_t τ_t`.
pub fn task_arithmetic(
    base: &ParameterMap,
    vectors: &[TaskVector],
    lambda: f64,
) -> Result<ParameterMap> {
    if !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    check_vectors(base, vectors)?;
    base.try_map(|name, b| {
        let terms: Vec<(f64, &Tensor)> = vectors
            .iter()
            .map(|v| (lambda, v.delta.get(name).expect("checked")))
            .collect();
        weighted_sum(Some(b), &terms)
    })
}

/// Which entries of a task vector survive trimming: the `ceil(fraction·n)`
/// largest magnitudes over the whole vector, earlier flat index first on ties.
fn trim_mask(vector: &TaskVector, fraction: f64) -> Vec<Vec<bool>> {
    let flat: Vec<f32> = vector
        .delta
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    let keep = ((fraction * flat.len() as f64).ceil() as usize).min(flat.len());
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; flat.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    let mut out = Vec::with_capacity(vector.delta.len());
    let mut offset = 0;
    for (_, t) in vector.delta.iter() {
        out.push(mask[offset..offset + t.len()].to_vec());
        offset += t.len();
    }
    out
}

/// TIES merging: trim each task vector, elect a sign per coordinate, then
/// average the surviving entries that agree with it. Result `θ₀ + λ·merged`.
pub fn ties_merge(
    base: &ParameterMap,
    vectors: &[TaskVector],
    lambda: f64,
    trim_fraction: f64,
) -> Result<ParameterMap> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "trim_fraction must be in (0, 1], got {trim_fraction}"
        )));
    }
    if !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    if vectors.is_empty() {
        return Err(Error::Usage(
            "ties_merge needs at least one task vector".into(),
        ));
    }
    check_vectors(base, vectors)?;
    let masks: Vec<Vec<Vec<bool>>> = vectors
        .iter()
        .map(|v| trim_mask(v, trim_fraction))
        .collect();

    let mut layer = 0;
    base.try_map(|name, b| {
        let deltas: Vec<&Tensor> = vectors
            .iter()
            .map(|v| v.delta.get(name).expect("checked"))
            .collect();
        let mut data = Vec::with_capacity(b.len());
        for i in 0..b.len() {
            let surviving = deltas
                .iter()
                .zip(&masks)
                .filter(|(_, m)| m[layer][i])
                .map(|(d, _)| d.data()[i] as f64)
                .filter(|&v| v != 0.0);
            let (mut pos, mut neg) = (0.0f64, 0.0f64);
            for v in surviving.clone() {
                if v > 0.0 {
                    pos += v;
                } else {
                    neg -= v;
                }
            }
            let positive = pos >= neg;
            let (sum, count) = surviving
                .filter(|&v| (v > 0.0) == positive)
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            let merged = if count == 0 { 0.0 } else { sum / count as f64 };
            data.push((b.data()[i] as f64 + lambda * merged) as f32);
        }
        layer += 1;
        Tensor::new(b.shape().to_vec(), data)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    Scalar,
    Task,
    Layer,
}

impl FromStr for CoefficientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(CoefficientMode::Scalar),
            "task" => Ok(CoefficientMode::Task),
            "layer" => Ok(CoefficientMode::Layer),
            other => Err(Error::Config(format!("unknown coefficient mode {other:?}"))),
        }
    }
}

impl fmt::Display for CoefficientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoefficientMode::Scalar => "scalar",
            CoefficientMode::Task => "task",
            CoefficientMode::Layer => "layer",
        })
    }
}

/// Merging coefficients. Layer-wise values are stored task-major:
/// `values[t * layers + l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    pub mode: CoefficientMode,
    pub values: Vec<f64>,
    #[serde(default)]
    pub tasks: usize,
    #[serde(default)]
    pub layers: usize,
    #[serde(default)]
    pub trainable: bool,
}

/// Layer groups of a parameter map: names sharing everything before the
/// last `.` (e.g. `encoder.0.weight` and `encoder.0.bias`) form one layer.
pub fn layer_groups(map: &ParameterMap) -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    for name in map.names() {
        let g = layer_key(name).to_string();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    groups
}

fn layer_key(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(head, _)| head)
}

impl MergeCoefficients {
    pub fn uniform(mode: CoefficientMode, tasks: usize, layers: usize, value: f64) -> Self {
        let n = match mode {
            CoefficientMode::Scalar => 1,
            CoefficientMode::Task => tasks,
            CoefficientMode::Layer => tasks * layers,
        };
        MergeCoefficients {
            mode,
            values: vec![value; n],
            tasks,
            layers,
            trainable: false,
        }
    }

    /// Expands task-wise values to an equivalent layer-wise set.
    pub fn to_layerwise(&self) -> Self {
        let values = (0..self.tasks)
            .flat_map(|t| (0..self.layers).map(move |l| (t, l)))
            .map(|(t, l)| self.value(t, l))
            .collect();
        MergeCoefficients {
            mode: CoefficientMode::Layer,
            values,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.mode {
            CoefficientMode::Scalar => 1,
            CoefficientMode::Task => self.tasks,
            CoefficientMode::Layer => self.tasks * self.layers,
        };
        if self.values.len() != want {
            return Err(Error::Config(format!(
                "{} coefficients need {want} values, got {}",
                self.mode,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("merge coefficients"));
        }
        Ok(())
    }

    /// Flat index of the coefficient scaling task `t` at layer `l`.
    pub fn index(&self, t: usize, l: usize) -> usize {
        match self.mode {
            CoefficientMode::Scalar => 0,
            CoefficientMode::Task => t,
            CoefficientMode::Layer => t * self.layers + l,
        }
    }

    pub fn value(&self, t: usize, l: usize) -> f64 {
        self.values[self.index(t, l)]
    }

    /// `θ₀ + Σ_t λ_t^l τ_t^l` for every layer `l`.
    pub fn apply(&self, base: &ParameterMap, vectors: &[TaskVector]) -> Result<ParameterMap> {
        check_vectors(base, vectors)?;
        let groups = layer_groups(base);
        if self.tasks != vectors.len() || self.layers != groups.len() {
            return Err(Error::Config(format!(
                "coefficients sized for {} tasks × {} layers, merging {} × {}",
                self.tasks,
                self.layers,
                vectors.len(),
                groups.len()
            )));
        }
        self.validate()?;
        base.try_map(|name, b| {
            let l = groups
                .iter()
                .position(|g| g == layer_key(name))
                .expect("group exists");
            let terms: Vec<(f64, &Tensor)> = vectors
                .iter()
                .enumerate()
                .map(|(t, v)| (self.value(t, l), v.delta.get(name).expect("checked")))
                .collect();
            weighted_sum(Some(b), &terms)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaMergeConfig {
    pub mode: CoefficientMode,
    pub steps: usize,
    pub init: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AdaMergeConfig {
    fn default() -> Self {
        AdaMergeConfig {
            mode: CoefficientMode::Layer,
            steps: 500,
            init: 0.3,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Entropy trace of an AdaMerging run: one mean value per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaMergeTrace {
    pub entropy: Vec<f64>,
}

/// Mean prediction entropy of the merged model over all tasks' inputs.
pub fn merged_entropy(merged: &ParameterMap, inputs: &[Tensor], heads: &[TaskHead]) -> Result<f64> {
    let mut total = 0.0;
    for (x, head) in inputs.iter().zip(heads) {
        let z = crate::model::extract_features(merged, x)?;
        total += crate::loss::prediction_entropy(&head.logits(&z)?)?.0;
    }
    Ok(total / inputs.len() as f64)
}

/// Learns merging coefficients by minimizing the prediction entropy of the
/// merged encoder on unlabeled inputs, each task scored through its own head.
pub fn adamerge(
    base: &ParameterMap,
    vectors: &[TaskVector],
    inputs: &[Tensor],
    heads: &[TaskHead],
    init: MergeCoefficients,
    cfg: &AdaMergeConfig,
) -> Result<(ParameterMap, MergeCoefficients, AdaMergeTrace)> {
    check_vectors(base, vectors)?;
    if inputs.len() != vectors.len() || heads.len() != vectors.len() {
        return Err(Error::Usage(format!(
            "adamerge: {} task vectors, {} input sets, {} heads",
            vectors.len(),
            inputs.len(),
            heads.len()
        )));
    }
    if let Some(t) = inputs.iter().position(Tensor::is_empty) {
        return Err(Error::Degenerate(format!(
            "no unlabeled inputs for task {t}"
        )));
    }
    let spec = EncoderSpec::from_params(base)?;
    let groups = layer_groups(base);
    let mut coeffs = init;
    coeffs.validate()?;

    let mut values = vec![Tensor::new(
        vec![coeffs.values.len()],
        coeffs.values.iter().map(|&v| v as f32).collect(),
    )?];
    let mut adam = AdamState::new(cfg.adam, &values);
    let mut samplers: Vec<BatchSampler> = inputs
        .iter()
        .enumerate()
        .map(|(t, x)| BatchSampler::new(x.rows(), stream_rng(cfg.seed, &[30, t as u64])))
        .collect();
    let mut trace = AdaMergeTrace::default();

    for step in 0..cfg.steps {
        let mut tape = ComputationTape::new();
        let c = tape.leaf(values[0].clone());
        let mut nodes = std::collections::HashMap::with_capacity(base.len());
        for (name, b) in base.iter() {
            let l = groups
                .iter()
                .position(|g| g == layer_key(name))
                .expect("group exists");
            let terms = vectors
                .iter()
                .enumerate()
                .map(|(t, v)| {
                    (
                        coeffs.index(t, l),
                        v.delta.get(name).expect("checked").clone(),
                    )
                })
                .collect();
            let b = tape.constant(b.clone());
            nodes.insert(name, tape.combine(b, c, terms)?);
        }
        let enc = EncoderNodes {
            layers: (0..spec.layers())
                .map(|l| {
                    (
                        nodes[EncoderSpec::weight_name(l).as_str()],
                        nodes[EncoderSpec::bias_name(l).as_str()],
                    )
                })
                .collect(),
        };
        let mut objective = None;
        for ((x, head), sampler) in inputs.iter().zip(heads).zip(&mut samplers) {
            let idx = sampler.next_batch(cfg.batch_size);
            let xb = tape.constant(x.select_rows(&idx)?);
            let z = enc.forward(&mut tape, xb)?;
            let w = tape.constant(head.weight.clone());
            let b = tape.constant(head.bias.clone());
            let logits = TaskHead::record(&mut tape, z, w, b)?;
            let h = tape.entropy(logits)?;
            objective = Some(match objective {
                None => h,
                Some(acc) => tape.add(acc, h)?,
            });
        }
        let objective = tape.scale(
            objective.expect("at least one task"),
            1.0 / inputs.len() as f32,
        )?;
        let value = tape.value(objective).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "adamerge entropy is {value} at step {step}"
            )));
        }
        trace.entropy.push(value);
        let grads = tape.backward(objective)?;
        adam.step(&mut values, &[grads.wrt(c)])
            .map_err(|e| Error::Divergence(format!("adamerge step {step}: {e}")))?;
    }

    coeffs.values = values[0].data().iter().map(|&v| v as f64).collect();
    coeffs.trainable = true;
    let merged = coeffs.apply(base, vectors)?;
    Ok((merged, coeffs, trace))
}
