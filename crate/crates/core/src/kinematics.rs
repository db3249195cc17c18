//! Denavit-Hartenberg forward kinematics of a six-axis serial arm.
//!
//! Positions are in millimetres, angles in radians. Two evaluation paths
//! exist: plain arithmetic ([`forward_kinematics`]) for data generation and
//! fixed inputs, and a graph form ([`forward_kinematics_graph`]) used when
//! gradients with respect to the joint angles are needed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

pub const JOINTS: usize = 6;

pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY4: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// One link: offset `d` (mm), length `a` (mm), twist `alpha` (rad) and
/// joint angle offset (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub const fn new(d: f64, a: f64, alpha: f64, theta_offset: f64) -> Self {
        Self {
            d,
            a,
            alpha,
            theta_offset,
        }
    }
}

/// Six links plus a tool frame appended after the last joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhTable {
    pub rows: [DhRow; JOINTS],
    pub tool: Mat4,
}

impl DhTable {
    pub fn new(rows: [DhRow; JOINTS], tool: Mat4) -> Result<Self> {
        let table = Self { rows, tool };
        table.validate()?;
        Ok(table)
    }

    /// Universal Robots UR5 nominal parameters with an identity tool.
    pub fn ur5() -> Self {
        let h = PI / 2.0;
        Self {
            rows: [
                DhRow::new(89.159, 0.0, h, 0.0),
                DhRow::new(0.0, -425.0, 0.0, 0.0),
                DhRow::new(0.0, -392.25, 0.0, 0.0),
                DhRow::new(109.15, 0.0, h, 0.0),
                DhRow::new(94.65, 0.0, -h, 0.0),
                DhRow::new(82.3, 0.0, 0.0, 0.0),
            ],
            tool: IDENTITY4,
        }
    }

    /// Looks up a built-in table by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "ur5" => Some(Self::ur5()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if ![r.d, r.a, r.alpha, r.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidTable(format!("row {} is not finite", i + 1)));
            }
            if r.alpha.abs() > PI + 1e-12 {
                return Err(Error::InvalidTable(format!(
                    "row {}: alpha {} outside [-pi, pi]",
                    i + 1,
                    r.alpha
                )));
            }
        }
        let t = &self.tool;
        if t.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTable("tool offset is not finite".into()));
        }
        if t[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTable("tool offset bottom row must be (0,0,0,1)".into()));
        }
        if orthonormality_error(t) > 1e-9 {
            return Err(Error::InvalidTable("tool rotation block is not orthonormal".into()));
        }
        Ok(())
    }
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid maps +pi to -pi; keep +pi where it was given
    if w == -PI && x > 0.0 {
        PI
    } else {
        w
    }
}

/// Joint angles in radians, each within `[-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointAngles(pub [f64; JOINTS]);

impl JointAngles {
    /// Converts degrees to radians and wraps. This is the single ingestion
    /// point for operator-facing angles.
    pub fn from_degrees(deg: [f64; JOINTS]) -> Result<Self> {
        if deg.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite joint angle in {deg:?}")));
        }
        Ok(Self(deg.map(|d| wrap_angle(d.to_radians()))))
    }

    pub fn from_radians(rad: [f64; JOINTS]) -> Result<Self> {
        if rad.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite joint angle in {rad:?}")));
        }
        Ok(Self(rad.map(wrap_angle)))
    }

    pub fn to_degrees(self) -> [f64; JOINTS] {
        self.0.map(f64::to_degrees)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance(self, other: Position3) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Largest entry of `|RᵀR - I|` for the rotation block of `t`.
pub fn orthonormality_error(t: &Mat4) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| t[k][i] * t[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Homogeneous transform of one link at joint angle `theta`.
pub fn joint_transform(row: &DhRow, theta: f64) -> Mat4 {
    let th = theta + row.theta_offset;
    let (s, c) = th.sin_cos();
    let (sa, ca) = row.alpha.sin_cos();
    [
        [c, -s * ca, s * sa, row.a * c],
        [s, c * ca, -c * sa, row.a * s],
        [0.0, sa, ca, row.d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Base-to-tool transform `T1 · … · T6 · tool`.
pub fn forward_pose(table: &DhTable, q: &JointAngles) -> Mat4 {
    let chain = table
        .rows
        .iter()
        .zip(q.0)
        .fold(IDENTITY4, |acc, (row, theta)| mat4_mul(&acc, &joint_transform(row, theta)));
    mat4_mul(&chain, &table.tool)
}

pub fn forward_kinematics(table: &DhTable, q: &JointAngles) -> Position3 {
    let t = forward_pose(table, q);
    Position3::new(t[0][3], t[1][3], t[2][3])
}

pub fn forward_kinematics_batch(table: &DhTable, qs: &[JointAngles]) -> Vec<Position3> {
    qs.iter().map(|q| forward_kinematics(table, q)).collect()
}

/// Coefficients expressing a link transform as `c·A_c + s·A_s + A_0`,
/// flattened row-major into a `[3, 16]` array (rows `A_c`, `A_s`, `A_0`).
fn link_coefficients(row: &DhRow) -> Array {
    let (sa, ca) = row.alpha.sin_cos();
    let a = row.a;
    let coef_c = [1.0, 0.0, 0.0, a, 0.0, ca, -sa, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let coef_s = [0.0, -ca, sa, 0.0, 1.0, 0.0, 0.0, a, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let coef_0 = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, sa, ca, row.d, 0.0, 0.0, 0.0, 1.0];
    Array::from_rows(&[coef_c, coef_s, coef_0]).expect("fixed shape")
}

/// Graph form of [`forward_kinematics_batch`]: `q` is `[N, 6]` radians,
/// the result `[N, 3]` millimetres.
pub fn forward_kinematics_graph(g: &mut Graph, table: &DhTable, q: Var) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || shape[1] != JOINTS {
        return Err(Error::InvalidInput(format!("joint batch must be [N, 6], got {shape:?}")));
    }
    let n = shape[0];
    let ones = g.constant(Array::full(&[n, 1], 1.0))?;
    let mut chain: Option<Var> = None;
    for (i, row) in table.rows.iter().enumerate() {
        let mut theta = g.narrow(q, 1, i, 1)?;
        if row.theta_offset != 0.0 {
            let off = g.constant(Array::scalar(row.theta_offset))?;
            theta = g.add(theta, off)?;
        }
        let c = g.cos(theta)?;
        let s = g.sin(theta)?;
        let basis = g.concat(&[c, s, ones], 1)?;
        let coef = g.constant(link_coefficients(row))?;
        let flat = g.matmul(basis, coef)?;
        let link = g.reshape(flat, &[n, 4, 4])?;
        chain = Some(match chain {
            None => link,
            Some(acc) => g.batch_matmul(acc, link)?,
        });
    }
    let chain = chain.expect("six links");
    let tool = g.constant(Array::from_rows(&table.tool).expect("4x4"))?;
    let pose = g.matmul(chain, tool)?;
    let flat = g.reshape(pose, &[n, 16])?;
    let cols = [
        g.narrow(flat, 1, 3, 1)?,
        g.narrow(flat, 1, 7, 1)?,
        g.narrow(flat, 1, 11, 1)?,
    ];
    Ok(g.concat(&cols, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_row_is_identity() {
        let t = joint_transform(&DhRow::new(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(t, IDENTITY4);
    }

    #[test]
    fn first_ur5_link_by_hand() {
        let t = joint_transform(&DhRow::new(89.159, 0.0, PI / 2.0, 0.0), 0.0);
        let expected = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, 89.159],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!(close(t[i][j], expected[i][j], 1e-15), "{i},{j}");
            }
        }
    }

    #[test]
    fn pure_link_length_is_translation() {
        let t = joint_transform(&DhRow::new(0.0, -425.0, 0.0, 0.0), 0.0);
        let mut expected = IDENTITY4;
        expected[0][3] = -425.0;
        assert_eq!(t, expected);
    }

    #[test]
    fn ur5_zero_pose() {
        let p = forward_kinematics(&DhTable::ur5(), &JointAngles([0.0; 6]));
        assert!(close(p.x, -817.25, 1e-9));
        assert!(close(p.y, -191.45, 1e-9));
        assert!(close(p.z, -5.491, 1e-9));
    }

    #[test]
    fn ur5_base_quarter_turn() {
        let q = JointAngles::from_degrees([90.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = forward_kinematics(&DhTable::ur5(), &q);
        assert!(close(p.x, 191.45, 1e-9));
        assert!(close(p.y, -817.25, 1e-9));
        assert!(close(p.z, -5.491, 1e-9));
    }

    #[test]
    fn tool_translation_moves_along_end_z() {
        let mut table = DhTable::ur5();
        let q = JointAngles([0.3, -1.1, 0.7, 0.2, -0.4, 1.3]);
        let end = forward_pose(&table, &q);
        let base = forward_kinematics(&table, &q);
        table.tool[2][3] = 25.0;
        table.validate().unwrap();
        let shifted = forward_kinematics(&table, &q);
        let moved = [shifted.x - base.x, shifted.y - base.y, shifted.z - base.z];
        for (k, m) in moved.iter().enumerate() {
            assert!(close(*m, end[k][2] * 25.0, 1e-9));
        }
    }

    #[test]
    fn batch_duplicates_and_matches_scalar() {
        let table = DhTable::ur5();
        let q = JointAngles([0.1, -1.0, 0.5, 0.0, 1.0, -2.0]);
        let out = forward_kinematics_batch(&table, &[q, q, q]);
        let single = forward_kinematics(&table, &q);
        assert!(out.iter().all(|p| *p == single));
    }

    #[test]
    fn wrapping_keeps_range() {
        for deg in [-720.0, -540.0, -180.0, -90.0, 0.0, 179.0, 180.0, 181.0, 540.0] {
            let w = wrap_angle(f64::to_radians(deg));
            assert!((-PI..=PI).contains(&w), "{deg} -> {w}");
        }
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
    }

    #[test]
    fn table_validation() {
        let mut t = DhTable::ur5();
        t.rows[2].alpha = 4.0;
        assert!(t.validate().is_err());
        let mut t = DhTable::ur5();
        t.tool[3][0] = 1.0;
        assert!(t.validate().is_err());
        let mut t = DhTable::ur5();
        t.tool[0][0] = 2.0;
        assert!(t.validate().is_err());
        assert!(JointAngles::from_degrees([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }
}
