//! Hybrid training objective.
//!
//! The data term is the mean squared Euclidean residual between predicted
//! and measured positions. The physics term compares the shape of a batch:
//! pairwise squared-distance matrices of the predictions and of the nominal
//! kinematic positions are each scaled by their own maximum and compared
//! entrywise. Both terms are weighted by `exp(log λ)` with trainable
//! log-weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Denominator used when the predicted distance matrix has collapsed.
pub const NORMALIZATION_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Spi,
    DataOnly,
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_physics: f64,
    pub lambda_data: f64,
    pub lambda_physics: f64,
    pub l_total: f64,
}

fn points_shape(g: &Graph, v: Var, what: &str) -> Result<usize> {
    match g.shape(v) {
        [n, 3] => Ok(*n),
        other => Err(Error::InvalidInput(format!("{what} must be [N, 3], got {other:?}"))),
    }
}

/// Mean over rows of `‖pred − gt‖²`.
pub fn data_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let n = points_shape(g, pred, "prediction")?;
    if g.shape(gt) != g.shape(pred) {
        return Err(Error::InvalidInput(format!(
            "prediction {:?} and target {:?} differ in shape",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("data loss of an empty batch".into()));
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.squared_norm(diff)?;
    Ok(g.mean(sq)?)
}

/// `[N, 3]` points to the `[N, N]` matrix of squared distances.
pub fn distance_matrix(g: &mut Graph, points: Var) -> Result<Var> {
    let n = points_shape(g, points, "points")?;
    if n < 2 {
        return Err(Error::InvalidInput(format!("distance matrix needs at least 2 points, got {n}")));
    }
    Ok(g.pairwise_sq_dist(points)?)
}

/// Mean squared difference of the max-normalized distance matrices.
pub fn physics_loss(g: &mut Graph, pred: Var, theory: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(theory) {
        return Err(Error::InvalidInput(format!(
            "prediction {:?} and theory {:?} differ in shape",
            g.shape(pred),
            g.shape(theory)
        )));
    }
    let d_theory = distance_matrix(g, theory)?;
    let d_pred = distance_matrix(g, pred)?;
    let max_theory = g.max(d_theory)?;
    if g.value(max_theory).item() <= 0.0 {
        return Err(Error::Degenerate("all theoretical points in the batch coincide".into()));
    }
    let theory_norm = g.div(d_theory, max_theory)?;
    let max_pred = g.max(d_pred)?;
    let pred_norm = if g.value(max_pred).item() < NORMALIZATION_GUARD {
        g.div_scalar(d_pred, NORMALIZATION_GUARD)?
    } else {
        g.div(d_pred, max_pred)?
    };
    let diff = g.sub(pred_norm, theory_norm)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// `exp(logλ_data)·l_data + exp(logλ_physics)·l_physics`. Without a physics
/// term only the data part is formed.
pub fn total_loss(
    g: &mut Graph,
    l_data: Var,
    l_physics: Option<Var>,
    log_lambda_data: Var,
    log_lambda_physics: Var,
) -> Result<Var> {
    let w_data = g.exp(log_lambda_data)?;
    let data = g.mul(w_data, l_data)?;
    match l_physics {
        None => Ok(data),
        Some(l_physics) => {
            let w_phys = g.exp(log_lambda_physics)?;
            let phys = g.mul(w_phys, l_physics)?;
            Ok(g.add(data, phys)?)
        }
    }
}

/// Graph handles and values of a full loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the objective for one batch. The physics term is left out in
/// data-only mode and for single-sample batches.
pub fn spi_loss(
    g: &mut Graph,
    pred: Var,
    measured: Var,
    theory: Var,
    log_lambda_data: Var,
    log_lambda_physics: Var,
    mode: LossMode,
) -> Result<LossNodes> {
    let l_data = data_loss(g, pred, measured)?;
    let n = g.shape(pred)[0];
    let l_physics = match mode {
        LossMode::Spi if n >= 2 => Some(physics_loss(g, pred, theory)?),
        _ => None,
    };
    let total = total_loss(g, l_data, l_physics, log_lambda_data, log_lambda_physics)?;
    let breakdown = LossBreakdown {
        l_data: g.value(l_data).item(),
        l_physics: l_physics.map_or(0.0, |v| g.value(v).item()),
        lambda_data: g.value(log_lambda_data).item().exp(),
        lambda_physics: g.value(log_lambda_physics).item().exp(),
        l_total: g.value(total).item(),
    };
    Ok(LossNodes { total, breakdown })
}

/// Normalized theory and prediction distance matrices and their absolute
/// difference, as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMaps {
    pub theory: Array,
    pub prediction: Array,
    pub abs_diff: Array,
}

pub fn distance_maps(pred: &[[f64; 3]], theory: &[[f64; 3]]) -> Result<DistanceMaps> {
    if pred.len() != theory.len() {
        return Err(Error::InvalidInput("prediction and theory lengths differ".into()));
    }
    let mut g = Graph::new();
    let to_array = |pts: &[[f64; 3]]| Array::from_rows(pts);
    let p = g.constant(to_array(pred)?)?;
    let t = g.constant(to_array(theory)?)?;
    let dp = distance_matrix(&mut g, p)?;
    let dt = distance_matrix(&mut g, t)?;
    let normalize = |m: &Array, guard: bool| -> Result<Array> {
        let max = m.data().iter().copied().fold(0.0, f64::max);
        let denom = if max < NORMALIZATION_GUARD {
            if !guard {
                return Err(Error::Degenerate("all theoretical points coincide".into()));
            }
            NORMALIZATION_GUARD
        } else {
            max
        };
        Ok(m.map(|v| v / denom))
    };
    let theory = normalize(g.value(dt), false)?;
    let prediction = normalize(g.value(dp), true)?;
    let abs_diff = Array::new(
        theory.shape().to_vec(),
        theory.data().iter().zip(prediction.data()).map(|(a, b)| (a - b).abs()).collect(),
    )?;
    Ok(DistanceMaps {
        theory,
        prediction,
        abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(g: &mut Graph, rows: &[[f64; 3]]) -> Var {
        g.constant(Array::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn data_loss_single_sample() {
        let mut g = Graph::new();
        let p = pts(&mut g, &[[1.0, 2.0, 2.0]]);
        let t = pts(&mut g, &[[0.0, 0.0, 0.0]]);
        let l = data_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), 9.0);
        let e = pts(&mut g, &[]);
        assert!(data_loss(&mut g, e, e).is_err());
    }

    #[test]
    fn distance_matrix_by_hand() {
        let mut g = Graph::new();
        let p = pts(&mut g, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let d = distance_matrix(&mut g, p).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 1.0, 1.0, 1.0, 0.0, 2.0, 1.0, 2.0, 0.0]);
        let one = pts(&mut g, &[[1.0, 2.0, 3.0]]);
        assert!(distance_matrix(&mut g, one).is_err());
    }

    #[test]
    fn physics_loss_scale_free() {
        let base = [[0.0, 0.0, 0.0], [3.0, 1.0, 0.0], [0.5, 2.0, 1.0], [1.0, -1.0, 4.0]];
        let doubled: Vec<[f64; 3]> = base.iter().map(|p| p.map(|v| 2.0 * v)).collect();
        let mut g = Graph::new();
        let t = pts(&mut g, &base);
        let p = pts(&mut g, &doubled);
        let l = physics_loss(&mut g, p, t).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn physics_loss_rejects_coincident_theory_and_guards_pred() {
        let mut g = Graph::new();
        let t = pts(&mut g, &[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        let p = pts(&mut g, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(physics_loss(&mut g, p, t), Err(Error::Degenerate(_))));

        let t = pts(&mut g, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let p = pts(&mut g, &[[5.0, 5.0, 5.0], [5.0, 5.0, 5.0]]);
        let l = physics_loss(&mut g, p, t).unwrap();
        // collapsed prediction: every normalized entry is 0, theory has two 1s
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_substitution() {
        let mut g = Graph::new();
        let ld = g.constant(Array::scalar(3.0)).unwrap();
        let lp = g.constant(Array::scalar(0.0)).unwrap();
        let a = g.constant(Array::scalar(2f64.ln())).unwrap();
        let b = g.constant(Array::scalar(0.0)).unwrap();
        let t = total_loss(&mut g, ld, Some(lp), a, b).unwrap();
        assert!((g.value(t).item() - 6.0).abs() < 1e-14);
        let t = total_loss(&mut g, ld, None, a, b).unwrap();
        assert!((g.value(t).item() - 6.0).abs() < 1e-14);
    }
}
