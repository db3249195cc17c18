//! Rigid registration of a robot base frame against a world frame.
//!
//! Given corresponding points `Q` (base frame) and `P` (world frame), finds
//! the rotation `R` and translation `T` minimizing `Σ‖R·qᵢ + T − pᵢ‖²`.
//! The 3x3 cross-covariance is decomposed with a one-sided Jacobi SVD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn apply_point(&self, q: Vec3) -> Vec3 {
        let mut out = mat_vec(&self.rotation, q);
        for (o, t) in out.iter_mut().zip(self.translation) {
            *o += t;
        }
        out
    }

    pub fn apply(&self, qs: &[Vec3]) -> Vec<Vec3> {
        qs.iter().map(|&q| self.apply_point(q)).collect()
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &inner.rotation),
            translation: self.apply_point(inner.translation),
        }
    }
}

/// Paired base-frame and world-frame points.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    base: Vec<Vec3>,
    world: Vec<Vec3>,
}

impl Correspondences {
    pub fn new(base: Vec<Vec3>, world: Vec<Vec3>) -> Result<Self> {
        if base.len() != world.len() {
            return Err(Error::InvalidInput(format!(
                "{} base points but {} world points",
                base.len(),
                world.len()
            )));
        }
        if base.len() < 3 {
            return Err(Error::InvalidInput(format!("need at least 3 point pairs, got {}", base.len())));
        }
        if base.iter().chain(&world).flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { base, world })
    }

    pub fn base(&self) -> &[Vec3] {
        &self.base
    }

    pub fn world(&self) -> &[Vec3] {
        &self.world
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [m[0][i], m[1][i], m[2][i]])
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len() as f64;
    [0, 1, 2].map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
}

/// `H = U·diag(σ)·Vᵀ` with `σ` sorted descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

/// One-sided Jacobi SVD of a 3x3 matrix. Columns of `U` belonging to zero
/// singular values are completed to a right-handed orthonormal basis.
pub fn svd3(h: &Mat3) -> Svd3 {
    // work on columns: a = h·v converges to u·diag(σ)
    let mut a = *h;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let alpha: f64 = (0..3).map(|k| a[k][i] * a[k][i]).sum();
            let beta: f64 = (0..3).map(|k| a[k][j] * a[k][j]).sum();
            let gamma: f64 = (0..3).map(|k| a[k][i] * a[k][j]).sum();
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut a, &mut v] {
                for row in m.iter_mut() {
                    let (x, y) = (row[i], row[j]);
                    row[i] = c * x - s * y;
                    row[j] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [0, 1, 2].map(|j| (0..3).map(|k| a[k][j] * a[k][j]).sum::<f64>().sqrt());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma = order.map(|j| norms[j]);
    let mut u_cols = [[0.0; 3]; 3];
    let mut v_cols = [[0.0; 3]; 3];
    for (slot, &j) in order.iter().enumerate() {
        v_cols[slot] = [v[0][j], v[1][j], v[2][j]];
        if sigma[slot] > 0.0 {
            u_cols[slot] = [0, 1, 2].map(|k| a[k][j] / sigma[slot]);
        }
    }
    let largest = sigma[0];
    if sigma[1] <= RANK_TOL * largest || largest == 0.0 {
        // rank below two: fitting rejects this before using U
        return Svd3 {
            u: transpose(&u_cols),
            sigma,
            v: transpose(&v_cols),
        };
    }
    if sigma[2] <= RANK_TOL * largest {
        u_cols[2] = cross(u_cols[0], u_cols[1]);
    }
    Svd3 {
        u: transpose(&u_cols),
        sigma,
        v: transpose(&v_cols),
    }
}

/// Least-squares rigid transform mapping `base` points onto `world` points.
pub fn fit_rigid_transform(c: &Correspondences) -> Result<RigidTransform> {
    let q_bar = centroid(&c.base);
    let p_bar = centroid(&c.world);
    let n = c.len() as f64;
    let mut h = [[0.0; 3]; 3];
    for (q, p) in c.base.iter().zip(&c.world) {
        let qc = [0, 1, 2].map(|k| q[k] - q_bar[k]);
        let pc = [0, 1, 2].map(|k| p[k] - p_bar[k]);
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += qc[i] * pc[j];
            }
        }
    }
    for row in &mut h {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let Svd3 { u, sigma, v } = svd3(&h);
    if sigma[0] == 0.0 || sigma[1] < RANK_TOL * sigma[0] {
        return Err(Error::Degenerate(format!(
            "point sets are collinear or coincident (singular values {sigma:?})"
        )));
    }
    let ut = transpose(&u);
    let d = det3(&mat_mul(&v, &ut)).signum();
    let mut vd = v;
    for row in &mut vd {
        row[2] *= d;
    }
    let rotation = mat_mul(&vd, &ut);
    let rq = mat_vec(&rotation, q_bar);
    let translation = [0, 1, 2].map(|k| p_bar[k] - rq[k]);
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Root-mean-square distance between transformed base points and world points.
pub fn residual_rms(t: &RigidTransform, c: &Correspondences) -> f64 {
    let sum: f64 = c
        .base
        .iter()
        .zip(&c.world)
        .map(|(&q, p)| {
            let m = t.apply_point(q);
            (0..3).map(|k| (m[k] - p[k]).powi(2)).sum::<f64>()
        })
        .sum();
    (sum / c.len() as f64).sqrt()
}

/// Largest entry of `|RᵀR − I|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut worst = 0.0f64;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}
