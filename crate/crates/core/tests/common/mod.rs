//! Reference implementations written independently of the library, used as
//! oracles by the integration tests.
#![allow(dead_code)]

use boter_core::{BoterModel, HeadKind, JointAngles, MaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad;

/// UR5 link parameters as `(d, a, alpha)` in mm and radians.
pub const UR5_DH: [(f64, f64, f64); 6] = [
    (89.159, 0.0, std::f64::consts::FRAC_PI_2),
    (0.0, -425.0, 0.0),
    (0.0, -392.25, 0.0),
    (109.15, 0.0, std::f64::consts::FRAC_PI_2),
    (94.65, 0.0, -std::f64::consts::FRAC_PI_2),
    (82.3, 0.0, 0.0),
];

/// End position at the zero pose, hand-evaluated from the chained matrices.
pub const UR5_ZERO_POSE: [f64; 3] = [-817.25, -191.45, -5.491];

pub const SPI_MASK: [[u8; 6]; 6] = [
    [0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0],
    [1, 1, 0, 0, 0, 0],
    [1, 1, 1, 0, 0, 0],
    [1, 1, 1, 0, 0, 0],
];

pub const BODY_MASK: [[u8; 6]; 6] = [
    [0, 0, 1, 1, 1, 1],
    [0, 0, 0, 1, 1, 1],
    [1, 0, 0, 0, 1, 1],
    [1, 1, 0, 0, 0, 1],
    [1, 1, 1, 0, 0, 0],
    [1, 1, 1, 1, 0, 0],
];

type M4 = [[f64; 4]; 4];

fn mul4(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn rot_z(t: f64) -> M4 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn rot_x(t: f64) -> M4 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0, 0.0], [0.0, c, -s, 0.0], [0.0, s, c, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn shift(x: f64, y: f64, z: f64) -> M4 {
    [[1.0, 0.0, 0.0, x], [0.0, 1.0, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
}

/// Chains `Rz(θ) Tz(d) Tx(a) Rx(α)` per link as four separate matrices.
pub fn fk_oracle_pose(dh: &[(f64, f64, f64); 6], q: &[f64; 6]) -> M4 {
    let mut t = shift(0.0, 0.0, 0.0);
    for (i, &(d, a, alpha)) in dh.iter().enumerate() {
        t = mul4(&t, &rot_z(q[i]));
        t = mul4(&t, &shift(0.0, 0.0, d));
        t = mul4(&t, &shift(a, 0.0, 0.0));
        t = mul4(&t, &rot_x(alpha));
    }
    t
}

pub fn fk_oracle(dh: &[(f64, f64, f64); 6], q: &[f64; 6]) -> [f64; 3] {
    let t = fk_oracle_pose(dh, q);
    [t[0][3], t[1][3], t[2][3]]
}

/// Brute-force metrics: `[x, y, z, 3d]` rows of `[mae, mse, rmse, r2]`.
pub fn metrics_oracle(pred: &[[f64; 3]], meas: &[[f64; 3]], theo: &[[f64; 3]]) -> [[f64; 4]; 4] {
    let n = pred.len() as f64;
    let mut out = [[0.0; 4]; 4];
    let mut num3 = 0.0;
    let mut den3 = 0.0;
    for k in 0..3 {
        let mut mae = 0.0;
        let mut mse = 0.0;
        for i in 0..pred.len() {
            mae += (pred[i][k] - meas[i][k]).abs();
            mse += (pred[i][k] - meas[i][k]).powi(2);
        }
        mae /= n;
        mse /= n;
        let mut mean_abs_real = 0.0;
        for i in 0..pred.len() {
            mean_abs_real += (meas[i][k] - theo[i][k]).abs();
        }
        mean_abs_real /= n;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..pred.len() {
            let real = meas[i][k] - theo[i][k];
            let hat = pred[i][k] - theo[i][k];
            num += (hat - real).powi(2);
            den += (mean_abs_real - real).powi(2);
        }
        num3 += num;
        den3 += den;
        out[k] = [mae, mse, mse.sqrt(), 1.0 - num / den];
    }
    let mut mae = 0.0;
    let mut mse = 0.0;
    for i in 0..pred.len() {
        let dx = pred[i][0] - meas[i][0];
        let dy = pred[i][1] - meas[i][1];
        let dz = pred[i][2] - meas[i][2];
        mae += (dx * dx + dy * dy + dz * dz).sqrt();
        mse += dx * dx + dy * dy + dz * dz;
    }
    mae /= n;
    mse /= n;
    out[3] = [mae, mse, mse.sqrt(), 1.0 - num3 / den3];
    out
}

fn sq_dist_matrix(p: &[[f64; 3]]) -> Vec<Vec<f64>> {
    let n = p.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..3 {
                s += (p[i][k] - p[j][k]) * (p[i][k] - p[j][k]);
            }
            d[i][j] = s;
        }
    }
    d
}

pub fn physics_loss_oracle(pred: &[[f64; 3]], theory: &[[f64; 3]]) -> f64 {
    let dp = sq_dist_matrix(pred);
    let dt = sq_dist_matrix(theory);
    let mp = dp.iter().flatten().cloned().fold(0.0, f64::max);
    let mt = dt.iter().flatten().cloned().fold(0.0, f64::max);
    let n = pred.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += (dp[i][j] / mp - dt[i][j] / mt).powi(2);
        }
    }
    acc / (n * n) as f64
}

pub fn data_loss_oracle(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        acc += (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2);
    }
    acc / pred.len() as f64
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-scale..scale)))
        .collect()
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = [0.0; 4];
    for v in &mut q {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

pub fn random_joints(rng: &mut ChaCha8Rng) -> JointAngles {
    JointAngles::from_radians([0; 6].map(|_| rng.random_range(-3.0..3.0))).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param(model: &BoterModel, name: &str) -> (Vec<usize>, Vec<f64>) {
    let a = model.param(name).unwrap_or_else(|| panic!("missing {name}"));
    (a.shape().to_vec(), a.data().to_vec())
}

/// `x · W + b` with `W` stored row-major as `[in, out]`.
fn linear(model: &BoterModel, name: &str, x: &[f64]) -> Vec<f64> {
    let (ws, w) = param(model, &format!("{name}.w"));
    let (_, b) = param(model, &format!("{name}.b"));
    let (fan_in, fan_out) = (ws[0], ws[1]);
    assert_eq!(x.len(), fan_in);
    (0..fan_out)
        .map(|o| b[o] + (0..fan_in).map(|i| x[i] * w[i * fan_out + o]).sum::<f64>())
        .collect()
}

fn layer_norm(model: &BoterModel, name: &str, x: &[f64]) -> Vec<f64> {
    let (_, g) = param(model, &format!("{name}.g"));
    let (_, b) = param(model, &format!("{name}.b"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn relu(x: Vec<f64>, margin: &mut f64) -> Vec<f64> {
    for v in &x {
        *margin = margin.min(v.abs());
    }
    x.into_iter().map(|v| v.max(0.0)).collect()
}

pub struct Reference {
    pub compensation: [f64; 3],
    /// Indexed `[layer][head][query][key]`.
    pub attention: Vec<Vec<[[f64; 6]; 6]>>,
    /// Smallest `|x|` over every ReLU input.
    pub relu_margin: f64,
}

/// Sample-by-sample reference forward pass.
pub fn reference_forward(model: &BoterModel, q: &JointAngles) -> Reference {
    let mut margin = f64::INFINITY;
    let cfg = model.config().clone();
    let d = cfg.d_model;
    let (_, ew) = param(model, "embed.w");
    let (_, eb) = param(model, "embed.b");
    let mut tokens: Vec<Vec<f64>> = (0..6)
        .map(|j| relu((0..d).map(|c| q.0[j] * ew[j * d + c] + eb[j * d + c]).collect(), &mut margin))
        .collect();
    let mask = match cfg.mask {
        MaskKind::Spi => SPI_MASK,
        MaskKind::Body => BODY_MASK,
        MaskKind::None => [[0; 6]; 6],
    };
    let heads = cfg.n_head;
    let dk = d / heads;
    let mut attention = Vec::new();
    if cfg.encoder {
        for l in 0..cfg.n_layer {
            let p = format!("enc.{l}");
            let qs: Vec<Vec<f64>> = tokens.iter().map(|t| linear(model, &format!("{p}.attn.q"), t)).collect();
            let ks: Vec<Vec<f64>> = tokens.iter().map(|t| linear(model, &format!("{p}.attn.k"), t)).collect();
            let vs: Vec<Vec<f64>> = tokens.iter().map(|t| linear(model, &format!("{p}.attn.v"), t)).collect();
            let mut ctx = vec![vec![0.0; d]; 6];
            let mut layer_weights = Vec::new();
            for h in 0..heads {
                let mut w = [[0.0; 6]; 6];
                for i in 0..6 {
                    let mut scores = [0.0; 6];
                    for j in 0..6 {
                        let dot: f64 = (0..dk).map(|c| qs[i][h * dk + c] * ks[j][h * dk + c]).sum();
                        scores[j] = dot / (dk as f64).sqrt();
                    }
                    let visible: Vec<usize> = (0..6).filter(|&j| mask[i][j] == 0).collect();
                    let mx = visible.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = visible.iter().map(|&j| (scores[j] - mx).exp()).sum();
                    for &j in &visible {
                        w[i][j] = (scores[j] - mx).exp() / total;
                    }
                    for c in 0..dk {
                        ctx[i][h * dk + c] = (0..6).map(|j| w[i][j] * vs[j][h * dk + c]).sum();
                    }
                }
                layer_weights.push(w);
            }
            attention.push(layer_weights);
            let mut next = Vec::new();
            for i in 0..6 {
                let attn = linear(model, &format!("{p}.attn.o"), &ctx[i]);
                let res: Vec<f64> = tokens[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
                let x1 = layer_norm(model, &format!("{p}.ln1"), &res);
                let hidden = relu(linear(model, &format!("{p}.ff1"), &x1), &mut margin);
                let ff = linear(model, &format!("{p}.ff2"), &hidden);
                let res: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
                next.push(layer_norm(model, &format!("{p}.ln2"), &res));
            }
            tokens = next;
        }
    }
    let flat: Vec<f64> = tokens.concat();
    let a = relu(linear(model, "head.l1", &flat), &mut margin);
    let b = linear(model, "head.l2", &a);
    let z = match cfg.head {
        HeadKind::Residual => {
            let s = linear(model, "head.ls", &flat);
            relu(b.iter().zip(&s).map(|(x, y)| x + y).collect(), &mut margin)
        }
        HeadKind::Linear => relu(b, &mut margin),
    };
    // z is already non-negative, so this outer ReLU has no kink in reach
    let mut ignored = f64::INFINITY;
    let out = linear(model, "head.l3", &relu(z, &mut ignored));
    Reference {
        compensation: [out[0], out[1], out[2]],
        attention,
        relu_margin: margin,
    }
}
