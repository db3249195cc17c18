//! Gradient-check catalogue shared by the autodiff tests and the acceptance
//! suite.

use boter_core::autodiff::{grad_check, Array, Graph, GraphError, Var};
use boter_core::kinematics::forward_kinematics_graph;
use boter_core::model::{joint_array, Bound};
use boter_core::{BoterModel, DhTable, JointAngles, MaskKind, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_joints, reference_forward, rng};

pub const SEEDS: u64 = 20;
pub const PRIMITIVE_EPS: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_EPS: f64 = 2e-4;
pub const MODEL_TOL: f64 = 1e-5;

pub type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, GraphError>>;

pub struct Case {
    pub name: &'static str,
    pub leaves: fn(&mut ChaCha8Rng) -> Vec<Array>,
    pub op: Op,
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks and poles stay out of reach of
/// the finite-difference probe.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// entry contributes a distinct cotangent.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, &g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.constant(w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn case(
    name: &'static str,
    leaves: fn(&mut ChaCha8Rng) -> Vec<Array>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var, GraphError> + 'static,
) -> Case {
    Case {
        name,
        leaves,
        op: Box::new(op),
    }
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Array> {
    vec![random(r, &[3, 4], -2.0, 2.0), away_from_zero(r, &[3, 4])]
}

fn broadcast_pair(r: &mut ChaCha8Rng) -> Vec<Array> {
    vec![random(r, &[2, 3, 4], -2.0, 2.0), away_from_zero(r, &[4])]
}

fn cube(r: &mut ChaCha8Rng) -> Vec<Array> {
    vec![random(r, &[2, 3, 4], -1.0, 1.0)]
}

fn scores(r: &mut ChaCha8Rng) -> Vec<Array> {
    vec![random(r, &[2, 3, 6, 6], -2.0, 2.0)]
}

/// Every differentiable primitive of the graph, each with an input
/// generator suited to its domain.
pub fn primitive_cases() -> Vec<Case> {
    let mut blocked = vec![false; 36];
    for (i, b) in blocked.iter_mut().enumerate() {
        *b = (i / 6) > 2 && (i % 6) < (i / 6) - 2;
    }
    vec![
        case("add", pair, |g, v| g.add(v[0], v[1])),
        case("sub", pair, |g, v| g.sub(v[0], v[1])),
        case("mul", pair, |g, v| g.mul(v[0], v[1])),
        case("div", pair, |g, v| g.div(v[0], v[1])),
        case("add_broadcast", broadcast_pair, |g, v| g.add(v[0], v[1])),
        case("mul_broadcast", broadcast_pair, |g, v| g.mul(v[0], v[1])),
        case("div_broadcast", broadcast_pair, |g, v| g.div(v[0], v[1])),
        case("sub_broadcast_lhs", broadcast_pair, |g, v| g.sub(v[1], v[0])),
        case("scale", |r| vec![random(r, &[5, 2], -2.0, 2.0)], |g, v| g.scale(v[0], -1.7)),
        case("div_scalar", |r| vec![random(r, &[5, 2], -2.0, 2.0)], |g, v| g.div_scalar(v[0], 3.1)),
        case(
            "matmul",
            |r| vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[3, 5], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "matmul_batched_lhs",
            |r| vec![random(r, &[2, 4, 3], -1.0, 1.0), random(r, &[3, 2], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "batch_matmul",
            |r| vec![random(r, &[2, 3, 4, 2], -1.0, 1.0), random(r, &[2, 3, 2, 4], -1.0, 1.0)],
            |g, v| g.batch_matmul(v[0], v[1]),
        ),
        case("transpose", cube, |g, v| g.transpose(v[0])),
        case("permute", cube, |g, v| g.permute(v[0], &[2, 0, 1])),
        case("reshape", cube, |g, v| g.reshape(v[0], &[6, 4])),
        case("narrow", cube, |g, v| g.narrow(v[0], 2, 1, 2)),
        case("repeat_last", |r| vec![random(r, &[3, 2], -1.0, 1.0)], |g, v| g.repeat_last(v[0], 4)),
        case(
            "concat",
            |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case("relu", |r| vec![away_from_zero(r, &[4, 3])], |g, v| g.relu(v[0])),
        case("exp", |r| vec![random(r, &[4, 3], -2.0, 2.0)], |g, v| g.exp(v[0])),
        case("log", |r| vec![random(r, &[4, 3], 0.2, 3.0)], |g, v| g.log(v[0])),
        case("sqrt", |r| vec![random(r, &[4, 3], 0.2, 3.0)], |g, v| g.sqrt(v[0])),
        case("sin", |r| vec![random(r, &[4, 3], -3.0, 3.0)], |g, v| g.sin(v[0])),
        case("cos", |r| vec![random(r, &[4, 3], -3.0, 3.0)], |g, v| g.cos(v[0])),
        case("square", |r| vec![random(r, &[4, 3], -2.0, 2.0)], |g, v| g.square(v[0])),
        case("sum_axis_0", cube, |g, v| g.sum_axis(v[0], 0)),
        case("sum_axis_2", cube, |g, v| g.sum_axis(v[0], 2)),
        case("sum", cube, |g, v| g.sum(v[0])),
        case("mean", cube, |g, v| g.mean(v[0])),
        case("max_axis", cube, |g, v| g.max_axis(v[0], 1)),
        case("max", cube, |g, v| g.max(v[0])),
        case("squared_norm", |r| vec![random(r, &[5, 3], -2.0, 2.0)], |g, v| g.squared_norm(v[0])),
        case("softmax", scores, |g, v| g.softmax_masked(v[0], &[])),
        case("softmax_masked", scores, move |g, v| g.softmax_masked(v[0], &blocked)),
        case("layer_norm", |r| vec![random(r, &[3, 2, 8], -2.0, 2.0)], |g, v| g.layer_norm(v[0], 1e-5)),
        case(
            "pairwise_sq_dist",
            |r| vec![random(r, &[6, 3], -5.0, 5.0)],
            |g, v| g.pairwise_sq_dist(v[0]),
        ),
    ]
}

/// Largest relative gradient error of `case` on one seeded input.
pub fn primitive_error(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = (case.leaves)(&mut rng);
    let report = grad_check(&leaves, PRIMITIVE_EPS, |g, v| {
        let y = (case.op)(g, v)?;
        project(g, y, seed)
    })
    .unwrap();
    assert!(report.checked > 0, "{}: nothing checked", case.name);
    report.max_rel_error
}

pub fn tiny(mask: MaskKind) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_layer: 2,
        n_head: 2,
        d_hidden: 5,
        mask,
        ..ModelConfig::default()
    }
}

/// UR5 in metres. Positions near unit scale keep the finite-difference
/// rounding floor well under the tolerance.
pub fn metre_table() -> DhTable {
    let mut t = DhTable::ur5();
    for row in &mut t.rows {
        row.d /= 1000.0;
        row.a /= 1000.0;
    }
    t
}

/// Joint batches whose every ReLU input sits clear of zero.
pub fn away_from_kinks(model: &BoterModel, seed: u64, n: usize) -> Vec<JointAngles> {
    let mut r = rng(seed);
    loop {
        let qs: Vec<JointAngles> = (0..n).map(|_| random_joints(&mut r)).collect();
        if qs.iter().all(|q| reference_forward(model, q).relu_margin > 5e-3) {
            return qs;
        }
    }
}

/// Largest relative gradient error of the full forward pass, taken with
/// respect to every parameter and the joint angles.
pub fn full_model_error(seed: u64) -> f64 {
    let model = BoterModel::with_table(tiny(MaskKind::Spi), "ur5_m", metre_table(), seed).unwrap();
    let qs = away_from_kinks(&model, 100 + seed, 3);
    let mut leaves: Vec<Array> = model.params().iter().map(|p| p.value.clone()).collect();
    leaves.push(joint_array(&qs));
    let count = model.params().len();
    let report = grad_check(&leaves, MODEL_EPS, |g, v| {
        let bound = Bound::from_vars(v[..count].to_vec());
        let theory = forward_kinematics_graph(g, model.table(), v[count]).unwrap();
        let trace = model.forward(g, &bound, v[count], theory).unwrap();
        let w = g.constant(Array::new(vec![3, 3], vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.6, -0.1, 0.2, 0.7])?)?;
        let s = g.mul(trace.prediction, w)?;
        g.sum(s)
    })
    .unwrap();
    report.max_rel_error
}
