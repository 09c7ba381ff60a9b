//! Checks tape gradients against central finite differences of independent f64
//! reference implementations. Each operation is checked on at least 100
//! random instances; instances within 1e-3 of a kink are redrawn.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repsurgery::loss::{Loss, LossKind};
use repsurgery::model::{EncoderNodes, EncoderSpec, TaskHead, LOGIT_SCALE};
use repsurgery::surgery::{AdapterNodes, SurgeryModule};
use repsurgery::tape::{ComputationTape, NodeId};
use repsurgery::tensor::NORM_EPS;
use repsurgery::{Result, Tensor};

pub const INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

type M = DMatrix<f64>;
type Build = Box<dyn Fn(&mut ComputationTape, &[NodeId]) -> Result<NodeId>>;
/// Returns the scalar value and the distance to the nearest non-differentiable point.
type Reference = Box<dyn Fn(&[M]) -> (f64, f64)>;

struct Case {
    leaves: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn to_m(t: &Tensor) -> M {
    let (r, c) = if t.shape().len() == 2 {
        (t.rows(), t.cols())
    } else {
        (1, t.len())
    };
    M::from_row_slice(
        r,
        c,
        &t.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / an.max(nn).max(1e-6)
}

/// Runs `INSTANCES` accepted cases and returns the worst relative error.
fn check(name: &str, seed: u64, mut generate: impl FnMut(&mut ChaCha8Rng) -> Case) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut drawn = 0;
    while accepted < INSTANCES {
        drawn += 1;
        assert!(
            drawn < 50 * INSTANCES,
            "{name}: too many instances near a kink"
        );
        let case = generate(&mut rng);
        let point: Vec<M> = case.leaves.iter().map(to_m).collect();
        let (_, margin) = (case.reference)(&point);
        if margin < KINK_MARGIN {
            continue;
        }
        // Tape values are computed at the f32 point itself.
        let mut tape = ComputationTape::new();
        let ids: Vec<NodeId> = case.leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (case.build)(&mut tape, &ids).unwrap();
        let grads = tape.backward(out).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (li, id) in ids.iter().enumerate() {
            let g = to_m(&grads.wrt(*id));
            for idx in 0..point[li].len() {
                analytic.push(g[idx]);
                let mut plus = point.clone();
                plus[li][idx] += STEP;
                let mut minus = point.clone();
                minus[li][idx] -= STEP;
                numeric
                    .push(((case.reference)(&plus).0 - (case.reference)(&minus).0) / (2.0 * STEP));
            }
        }
        worst = worst.max(rel_error(&analytic, &numeric));
        accepted += 1;
    }
    println!("{name}: worst relative error {worst:.2e} over {INSTANCES} instances");
    worst
}

/// A random linear functional `u·Y·v` used to reduce a matrix output to a scalar.
#[derive(Clone)]
struct Probe {
    u: Tensor,
    v: Tensor,
}

impl Probe {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        Probe {
            u: random(rng, &[1, rows], 1.0),
            v: random(rng, &[cols, 1], 1.0),
        }
    }

    fn record(&self, tape: &mut ComputationTape, y: NodeId) -> Result<NodeId> {
        let u = tape.constant(self.u.clone());
        let v = tape.constant(self.v.clone());
        let uy = tape.matmul(u, y)?;
        tape.matmul(uy, v)
    }

    fn reference(&self, y: &M) -> f64 {
        (to_m(&self.u) * y * to_m(&self.v))[(0, 0)]
    }
}

fn min_abs(m: &M) -> f64 {
    m.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()))
}

fn relu_ref(m: &M) -> M {
    m.map(|v| v.max(0.0))
}

fn normalize(m: &M) -> M {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        row /= n;
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn rows_of(m: &M) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn entropy_ref(logits: &M) -> f64 {
    let rows = rows_of(logits);
    rows.iter()
        .map(|r| -softmax_row(r).iter().map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / rows.len() as f64
}

fn loss_reference(kind: LossKind, p: &M, t: &M) -> (f64, f64) {
    let n = p.len() as f64;
    let d = p - t;
    match kind {
        LossKind::L1 => (d.iter().map(|v| v.abs()).sum::<f64>() / n, min_abs(&d)),
        LossKind::Mse => (d.iter().map(|v| v * v).sum::<f64>() / n, f64::INFINITY),
        LossKind::SmoothL1 => {
            let v = d
                .iter()
                .map(|v| {
                    if v.abs() < 1.0 {
                        0.5 * v * v
                    } else {
                        v.abs() - 0.5
                    }
                })
                .sum::<f64>()
                / n;
            let margin = d
                .iter()
                .fold(f64::INFINITY, |a, v| a.min((v.abs() - 1.0).abs()));
            (v, margin)
        }
        LossKind::NegCosine => {
            let v = p
                .row_iter()
                .zip(t.row_iter())
                .map(|(a, b)| -a.dot(&b) / (a.norm() * b.norm()))
                .sum::<f64>()
                / p.nrows() as f64;
            (v, f64::INFINITY)
        }
    }
}

pub fn matmul() -> f64 {
    check("matmul", 1, |rng| {
        let (n, k, m) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let probe = Probe::new(rng, n, m);
        let rp = probe.clone();
        Case {
            leaves: vec![random(rng, &[n, k], 1.0), random(rng, &[k, m], 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                probe.record(tape, y)
            }),
            reference: Box::new(move |x| (rp.reference(&(&x[0] * &x[1])), f64::INFINITY)),
        }
    })
}

pub fn relu() -> f64 {
    check("relu", 2, |rng| {
        let (n, m) = (rng.random_range(1..5), rng.random_range(1..6));
        let probe = Probe::new(rng, n, m);
        let rp = probe.clone();
        Case {
            leaves: vec![random(rng, &[n, m], 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.relu(ids[0])?;
                probe.record(tape, y)
            }),
            reference: Box::new(move |x| (rp.reference(&relu_ref(&x[0])), min_abs(&x[0]))),
        }
    })
}

fn loss_case(kind: LossKind, seed: u64) -> f64 {
    check(kind.cli_name(), seed, |rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        // Spread wide enough that smooth_l1 sees both branches.
        let target = random(rng, &[n, k], 2.0);
        let t_ref = to_m(&target);
        Case {
            leaves: vec![random(rng, &[n, k], 2.0)],
            build: Box::new(move |tape, ids| {
                let t = tape.constant(target.clone());
                tape.loss(Loss::new(kind), ids[0], t)
            }),
            reference: Box::new(move |x| loss_reference(kind, &x[0], &t_ref)),
        }
    })
}

pub fn l1() -> f64 {
    loss_case(LossKind::L1, 3)
}

pub fn mse() -> f64 {
    loss_case(LossKind::Mse, 4)
}

pub fn smooth_l1() -> f64 {
    loss_case(LossKind::SmoothL1, 5)
}

pub fn neg_cosine() -> f64 {
    loss_case(LossKind::NegCosine, 6)
}

pub fn adapter_forward() -> f64 {
    // Leaves: z (N×k), W_down (r×k), W_up (k×r), all trainable.
    check("adapter", 7, |rng| {
        let (n, k, r) = (
            rng.random_range(1..5),
            rng.random_range(2..7),
            rng.random_range(1..5),
        );
        let probe = Probe::new(rng, n, k);
        let rp = probe.clone();
        Case {
            leaves: vec![
                random(rng, &[n, k], 1.0),
                random(rng, &[r, k], 1.0),
                random(rng, &[k, r], 1.0),
            ],
            build: Box::new(move |tape, ids| {
                let nodes = AdapterNodes {
                    w_down: ids[1],
                    w_up: ids[2],
                };
                let zhat = nodes.apply(tape, ids[0])?;
                probe.record(tape, zhat)
            }),
            reference: Box::new(move |x| {
                let pre = &x[0] * x[1].transpose();
                let zhat = &x[0] - relu_ref(&pre) * x[2].transpose();
                (rp.reference(&zhat), min_abs(&pre))
            }),
        }
    })
}

pub fn surgery_objective() -> f64 {
    // The full training objective: L1 between adapted merged features and
    // individual features, differentiated w.r.t. both adapter matrices.
    check("surgery objective", 8, |rng| {
        let (n, k, r) = (
            rng.random_range(2..6),
            rng.random_range(2..7),
            rng.random_range(1..5),
        );
        let z = random(rng, &[n, k], 1.0);
        let target = random(rng, &[n, k], 1.0);
        let (z_ref, t_ref) = (to_m(&z), to_m(&target));
        let w_down = random(rng, &[r, k], 1.0);
        let w_up = random(rng, &[k, r], 1.0);
        SurgeryModule::from_weights(0, w_down.clone(), w_up.clone()).unwrap();
        Case {
            leaves: vec![w_down, w_up],
            build: Box::new(move |tape, ids| {
                let zn = tape.constant(z.clone());
                let t = tape.constant(target.clone());
                let zhat = AdapterNodes {
                    w_down: ids[0],
                    w_up: ids[1],
                }
                .apply(tape, zn)?;
                tape.loss(Loss::new(LossKind::L1), zhat, t)
            }),
            reference: Box::new(move |x| {
                let pre = &z_ref * x[0].transpose();
                let zhat = &z_ref - relu_ref(&pre) * x[1].transpose();
                let (v, m) = loss_reference(LossKind::L1, &zhat, &t_ref);
                (v, m.min(min_abs(&pre)))
            }),
        }
    })
}

pub fn entropy() -> f64 {
    check("entropy", 9, |rng| {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..7));
        Case {
            leaves: vec![random(rng, &[n, c], 3.0)],
            build: Box::new(|tape, ids| tape.entropy(ids[0])),
            reference: Box::new(|x| (entropy_ref(&x[0]), f64::INFINITY)),
        }
    })
}

pub fn cross_entropy() -> f64 {
    check("cross entropy", 10, |rng| {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..7));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let ref_labels = labels.clone();
        Case {
            leaves: vec![random(rng, &[n, c], 3.0)],
            build: Box::new(move |tape, ids| tape.cross_entropy(ids[0], &labels)),
            reference: Box::new(move |x| {
                let rows = rows_of(&x[0]);
                let v = rows
                    .iter()
                    .zip(&ref_labels)
                    .map(|(r, &y)| -softmax_row(r)[y].ln())
                    .sum::<f64>()
                    / rows.len() as f64;
                (v, f64::INFINITY)
            }),
        }
    })
}

pub fn normalize_rows() -> f64 {
    check("normalize rows", 11, |rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(1..7));
        let probe = Probe::new(rng, n, k);
        let rp = probe.clone();
        Case {
            leaves: vec![random(rng, &[n, k], 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.normalize_rows(ids[0])?;
                probe.record(tape, y)
            }),
            // Row norms near zero make the map ill-conditioned; keep them away from it.
            reference: Box::new(move |x| {
                let margin = x[0].row_iter().fold(f64::INFINITY, |a, r| a.min(r.norm()));
                (rp.reference(&normalize(&x[0])), margin * 10.0)
            }),
        }
    })
}

pub fn entropy_through_head() -> f64 {
    // The AdaMerging objective path: features → normalized head → entropy.
    check("head entropy", 12, |rng| {
        let (n, k, c) = (
            rng.random_range(1..5),
            rng.random_range(2..6),
            rng.random_range(2..6),
        );
        Case {
            leaves: vec![
                random(rng, &[n, k], 1.0),
                random(rng, &[k, c], 0.5),
                random(rng, &[c], 0.5),
            ],
            build: Box::new(|tape, ids| {
                let logits = TaskHead::record(tape, ids[0], ids[1], ids[2])?;
                tape.entropy(logits)
            }),
            reference: Box::new(|x| {
                let mut logits = normalize(&x[0]) * LOGIT_SCALE as f64 * &x[1];
                for mut row in logits.row_iter_mut() {
                    row += &x[2];
                }
                let margin = x[0].row_iter().fold(f64::INFINITY, |a, r| a.min(r.norm()));
                (entropy_ref(&logits), margin * 10.0)
            }),
        }
    })
}

pub fn encoder_forward() -> f64 {
    // Leaves: input batch, then (weight, bias) per layer of a 2-layer MLP.
    check("encoder", 13, |rng| {
        let spec = EncoderSpec::mlp(
            rng.random_range(2..5),
            rng.random_range(2..6),
            rng.random_range(2..5),
            2,
        );
        let n = rng.random_range(1..4);
        let params = spec.init(rng).unwrap();
        let x = random(rng, &[n, spec.input_dim()], 1.0);
        let probe = Probe::new(rng, n, spec.feature_dim());
        let rp = probe.clone();
        let mut leaves = vec![x];
        for l in 0..spec.layers() {
            leaves.push(
                params
                    .require(&EncoderSpec::weight_name(l))
                    .unwrap()
                    .clone(),
            );
            leaves.push(params.require(&EncoderSpec::bias_name(l)).unwrap().clone());
        }
        Case {
            leaves,
            build: Box::new(move |tape, ids| {
                let nodes = EncoderNodes {
                    layers: vec![(ids[1], ids[2]), (ids[3], ids[4])],
                };
                let z = nodes.forward(tape, ids[0])?;
                probe.record(tape, z)
            }),
            reference: Box::new(move |x| {
                let affine = |h: &M, w: &M, b: &M| {
                    let mut out = h * w;
                    for mut row in out.row_iter_mut() {
                        row += b;
                    }
                    out
                };
                let pre = affine(&x[0], &x[1], &x[2]);
                let z = affine(&relu_ref(&pre), &x[3], &x[4]);
                (rp.reference(&z), min_abs(&pre))
            }),
        }
    })
}

pub fn combine() -> f64 {
    // Leaves: base tensor and the coefficient vector.
    check("combine", 14, |rng| {
        let (n, m, terms) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..4),
        );
        let tensors: Vec<Tensor> = (0..terms).map(|_| random(rng, &[n, m], 1.0)).collect();
        let refs: Vec<M> = tensors.iter().map(to_m).collect();
        let probe = Probe::new(rng, n, m);
        let rp = probe.clone();
        Case {
            leaves: vec![random(rng, &[n, m], 1.0), random(rng, &[terms], 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.combine(
                    ids[0],
                    ids[1],
                    tensors.iter().cloned().enumerate().collect(),
                )?;
                probe.record(tape, y)
            }),
            reference: Box::new(move |x| {
                let mut y = x[0].clone();
                for (i, t) in refs.iter().enumerate() {
                    y += t * x[1][(0, i)];
                }
                (rp.reference(&y), f64::INFINITY)
            }),
        }
    })
}

/// Every check with a display name; each returns its worst relative error.
pub const ALL: &[(&str, fn() -> f64)] = &[
    ("matmul", matmul),
    ("relu", relu),
    ("l1", l1),
    ("mse", mse),
    ("smooth l1", smooth_l1),
    ("neg cosine", neg_cosine),
    ("adapter forward", adapter_forward),
    ("surgery objective", surgery_objective),
    ("entropy", entropy),
    ("cross entropy", cross_entropy),
    ("normalize rows", normalize_rows),
    ("entropy through head", entropy_through_head),
    ("encoder forward", encoder_forward),
    ("combine", combine),
];
