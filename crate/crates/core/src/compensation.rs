//! Joint-angle compensation by gradient descent through a frozen model.
//!
//! For a desired tool position, the joint vector is the only free variable:
//! starting from the commanded angles, Adam drives the predicted position
//! onto the target. The change in angles is the compensation to send to the
//! controller.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::autodiff::{Array, Graph, GraphError, Var};
use crate::dataset::{ErrorWorld, SampleSet, Split};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics_graph, JointAngles, Position3, JOINTS};
use crate::model::{Bound, FrozenModel};
use crate::optim::{AdamConfig, AdamW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once the mean squared coordinate error drops below this (mm²).
    pub loss_threshold: f64,
    /// Solutions with any joint beyond ±this many degrees are flagged.
    pub joint_limit_deg: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_iterations: 500,
            loss_threshold: 1e-4,
            joint_limit_deg: 180.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.loss_threshold) || !positive(self.joint_limit_deg) {
            return Err(Error::Config("solver rates, thresholds and limits must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationResult {
    pub theta_initial_deg: [f64; JOINTS],
    pub theta_final_deg: [f64; JOINTS],
    pub delta_theta_deg: [f64; JOINTS],
    /// Optimizer steps taken.
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub within_limits: bool,
}

/// Mean squared coordinate error between the model prediction at `theta_rad`
/// and `target`, with its gradient when requested.
struct Objective<'a> {
    model: &'a FrozenModel,
    graph: Graph,
    target: Var,
    prefix: usize,
}

impl<'a> Objective<'a> {
    fn new(model: &'a FrozenModel, target: Position3) -> Result<(Self, Bound)> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph)?;
        let target = graph.constant(Array::new(vec![1, 3], target.to_array().to_vec())?)?;
        let prefix = graph.len();
        Ok((
            Self {
                model,
                graph,
                target,
                prefix,
            },
            bound,
        ))
    }

    fn eval(&mut self, bound: &Bound, theta_rad: &[f64]) -> Result<(f64, Array)> {
        let g = &mut self.graph;
        g.truncate(self.prefix);
        let q = g.trainable(Array::new(vec![1, JOINTS], theta_rad.to_vec())?)?;
        let theory = forward_kinematics_graph(g, self.model.table(), q)?;
        let trace = self.model.forward(g, bound, q, theory)?;
        let diff = g.sub(trace.prediction, self.target)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grad = grads.take(q).unwrap_or_else(|| Array::zeros(&[1, JOINTS]));
        Ok((value, grad))
    }
}

/// Solves for joint angles whose predicted position reaches `target`.
pub fn compensate(
    model: &FrozenModel,
    theta_initial_deg: [f64; JOINTS],
    target: Position3,
    cfg: &SolverConfig,
) -> Result<CompensationResult> {
    cfg.validate()?;
    if theta_initial_deg.iter().any(|t| !t.is_finite() || t.abs() > 180.0) {
        return Err(Error::InvalidInput(format!(
            "initial angles {theta_initial_deg:?} must lie within [-180, 180] degrees"
        )));
    }
    if !target.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("target position is not finite".into()));
    }
    let (mut objective, bound) = Objective::new(model, target)?;
    let mut theta = JointAngles::from_degrees(theta_initial_deg)?.0.to_vec();
    let mut opt = AdamW::new(AdamConfig::adam(cfg.learning_rate));
    let mut iterations = 0;
    let mut initial_loss = None;
    let final_loss = loop {
        let (loss, grad) = match objective.eval(&bound, &theta) {
            Err(Error::Graph(GraphError::NonFinite { .. })) => {
                return Err(Error::SolverDiverged { iteration: iterations })
            }
            other => other?,
        };
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::SolverDiverged { iteration: iterations });
        }
        initial_loss.get_or_insert(loss);
        if loss < cfg.loss_threshold || iterations == cfg.max_iterations {
            break loss;
        }
        opt.step(&mut [&mut theta], &[grad.data()]);
        iterations += 1;
    };
    let theta_final_deg: [f64; JOINTS] = std::array::from_fn(|i| theta[i].to_degrees());
    let delta_theta_deg = std::array::from_fn(|i| theta_final_deg[i] - theta_initial_deg[i]);
    Ok(CompensationResult {
        theta_initial_deg,
        theta_final_deg,
        delta_theta_deg,
        iterations,
        initial_loss: initial_loss.expect("evaluated at least once"),
        final_loss,
        converged: final_loss < cfg.loss_threshold,
        within_limits: theta_final_deg.iter().all(|t| t.abs() <= cfg.joint_limit_deg),
    })
}

/// Loss of `model` at `theta_deg` against `target`, as the solver defines it.
pub fn solver_loss(model: &FrozenModel, theta_deg: [f64; JOINTS], target: Position3) -> Result<f64> {
    let (mut objective, bound) = Objective::new(model, target)?;
    let theta = theta_deg.map(f64::to_radians);
    Ok(objective.eval(&bound, &theta)?.0)
}

/// A desired position and the commanded angles the solver starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub position: Position3,
    pub theta_initial_deg: [f64; JOINTS],
}

/// Picks `count` test samples with a seeded shuffle; each target is the
/// sample's nominal position and the start is its commanded angles.
pub fn select_targets(set: &SampleSet, count: usize, seed: u64) -> Result<Vec<Target>> {
    let mut test = set.indices(Split::Test);
    if test.len() < count {
        return Err(Error::InvalidInput(format!(
            "requested {count} targets but the test split has {}",
            test.len()
        )));
    }
    test.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(test[..count]
        .iter()
        .map(|&i| Target {
            position: set.samples[i].theoretical,
            theta_initial_deg: set.samples[i].theta_deg,
        })
        .collect())
}

/// Per-axis signed error of the true arm at `theta_deg` relative to `target`.
pub fn world_error(world: &ErrorWorld, theta_deg: [f64; JOINTS], target: Position3) -> Result<[f64; 3]> {
    let p = world.measure_exact(theta_deg)?;
    Ok([p.x - target.x, p.y - target.y, p.z - target.z])
}

/// Distance between where the true arm ends up with the compensated angles
/// and the target, without measurement noise.
pub fn verify_compensation(world: &ErrorWorld, result: &CompensationResult, target: Position3) -> Result<f64> {
    let e = world_error(world, result.theta_final_deg, target)?;
    Ok((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisSpread {
    /// Population standard deviation of the signed error.
    pub std: f64,
    /// Largest absolute error.
    pub max: f64,
    /// Smallest absolute error.
    pub min: f64,
}

pub fn axis_spread(errors: &[[f64; 3]]) -> [AxisSpread; 3] {
    let n = errors.len() as f64;
    std::array::from_fn(|k| {
        if errors.is_empty() {
            return AxisSpread::default();
        }
        let mean = errors.iter().map(|e| e[k]).sum::<f64>() / n;
        let var = errors.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / n;
        AxisSpread {
            std: var.sqrt(),
            max: errors.iter().map(|e| e[k].abs()).fold(0.0, f64::max),
            min: errors.iter().map(|e| e[k].abs()).fold(f64::INFINITY, f64::min),
        }
    })
}

/// Solver and verification outcome for a batch of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationSummary {
    pub targets: usize,
    pub converged: usize,
    pub mean_iterations: f64,
    pub mean_residual_before: f64,
    pub mean_residual_after: f64,
    pub before: [AxisSpread; 3],
    pub after: [AxisSpread; 3],
}

pub fn summarize(world: &ErrorWorld, targets: &[Target], results: &[CompensationResult]) -> Result<CompensationSummary> {
    if targets.len() != results.len() || targets.is_empty() {
        return Err(Error::InvalidInput("need one result per target".into()));
    }
    let mut before = Vec::with_capacity(targets.len());
    let mut after = Vec::with_capacity(targets.len());
    for (t, r) in targets.iter().zip(results) {
        before.push(world_error(world, t.theta_initial_deg, t.position)?);
        after.push(world_error(world, r.theta_final_deg, t.position)?);
    }
    let norm = |e: &[f64; 3]| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let n = targets.len() as f64;
    Ok(CompensationSummary {
        targets: targets.len(),
        converged: results.iter().filter(|r| r.converged).count(),
        mean_iterations: results.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        mean_residual_before: before.iter().map(norm).sum::<f64>() / n,
        mean_residual_after: after.iter().map(norm).sum::<f64>() / n,
        before: axis_spread(&before),
        after: axis_spread(&after),
    })
}

impl CompensationSummary {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "targets {}  converged {}  mean iterations {:.2}",
            self.targets, self.converged, self.mean_iterations
        );
        let _ = writeln!(
            out,
            "mean 3D residual (mm): before {:.6}  after {:.6}",
            self.mean_residual_before, self.mean_residual_after
        );
        out.push_str("State        Axis  Std(mm)     Max(mm)     Min(mm)\n");
        for (label, spread) in [("before", &self.before), ("after", &self.after)] {
            for (axis, s) in ["X", "Y", "Z"].iter().zip(spread) {
                let _ = writeln!(out, "{label:<12} {axis:<5} {:<11.6} {:<11.6} {:.6}", s.std, s.max, s.min);
            }
        }
        out
    }
}

pub const TARGET_HEADER: [&str; 9] = ["x_mm", "y_mm", "z_mm", "j1_deg", "j2_deg", "j3_deg", "j4_deg", "j5_deg", "j6_deg"];

pub fn targets_to_csv(targets: &[Target]) -> String {
    let mut out = TARGET_HEADER.join(",");
    out.push('\n');
    for t in targets {
        let cells: Vec<String> = t
            .position
            .to_array()
            .iter()
            .chain(&t.theta_initial_deg)
            .map(|v| v.to_string())
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_targets(targets: &[Target], path: &Path, prov: &Provenance) -> Result<()> {
    artifact::write_text(path, prov, &targets_to_csv(targets))
}

pub fn read_targets(path: &Path) -> Result<Vec<Target>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != TARGET_HEADER.len() {
            return Err(perr(
                line,
                format!("expected {} columns, found {}", TARGET_HEADER.len(), record.len()),
            ));
        }
        if k == 0 {
            if let Some((got, want)) = record.iter().zip(TARGET_HEADER).find(|(g, w)| g.trim() != *w) {
                return Err(perr(line, format!("expected column `{want}`, found `{got}`")));
            }
            continue;
        }
        let mut v = [0.0; 9];
        for (i, slot) in v.iter_mut().enumerate() {
            let cell = record[i].trim();
            *slot = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| perr(line, format!("column `{}`: `{cell}` is not a finite number", TARGET_HEADER[i])))?;
        }
        out.push(Target {
            position: Position3::from_slice(&v[..3]),
            theta_initial_deg: v[3..].try_into().expect("six"),
        });
    }
    Ok(out)
}

pub fn results_to_csv(results: &[CompensationResult]) -> String {
    let mut out = String::from(
        "dtheta1_deg,dtheta2_deg,dtheta3_deg,dtheta4_deg,dtheta5_deg,dtheta6_deg,iterations,final_loss_mm2,converged,within_limits\n",
    );
    for r in results {
        for d in r.delta_theta_deg {
            let _ = write!(out, "{d},");
        }
        let _ = writeln!(out, "{},{},{},{}", r.iterations, r.final_loss, r.converged, r.within_limits);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_known_errors() {
        let s = axis_spread(&[[1.0, -2.0, 0.0], [-1.0, 2.0, 0.5]]);
        assert_eq!(s[0].std, 1.0);
        assert_eq!(s[1].max, 2.0);
        assert_eq!(s[2].min, 0.0);
    }

    #[test]
    fn solver_config_validation() {
        SolverConfig::default().validate().unwrap();
        let bad = SolverConfig {
            max_iterations: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
