//! Synthetic error world, sampling and the dataset file format.
//!
//! An [`ErrorWorld`] is a perturbed copy of the nominal DH table plus a
//! per-joint compliance term and isotropic measurement noise. It plays the
//! part of the physical robot and its tracker: samples pair commanded joint
//! angles with "measured" tool positions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, DhTable, JointAngles, Position3, JOINTS};

/// Half-widths of the uniform perturbations and the noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldBounds {
    /// Link length and offset perturbation, mm.
    pub link_mm: f64,
    /// Twist and joint-offset perturbation, degrees.
    pub angle_deg: f64,
    /// Compliance coefficient range, degrees.
    pub compliance_deg: f64,
    pub noise_sigma_mm: f64,
    pub compliance_shape: ComplianceShape,
}

impl Default for WorldBounds {
    fn default() -> Self {
        Self {
            link_mm: 0.5,
            angle_deg: 0.1,
            compliance_deg: 0.05,
            noise_sigma_mm: 0.02,
            compliance_shape: ComplianceShape::Cos,
        }
    }
}

impl WorldBounds {
    pub const ZERO: WorldBounds = WorldBounds {
        link_mm: 0.0,
        angle_deg: 0.0,
        compliance_deg: 0.0,
        noise_sigma_mm: 0.0,
        compliance_shape: ComplianceShape::Cos,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("link_mm", self.link_mm),
            ("angle_deg", self.angle_deg),
            ("compliance_deg", self.compliance_deg),
            ("noise_sigma_mm", self.noise_sigma_mm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("world bound {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Angle-dependent deflection `c·f(θ)` added to each commanded angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceShape {
    #[default]
    Cos,
    Sin,
}

impl ComplianceShape {
    fn eval(self, theta: f64) -> f64 {
        match self {
            ComplianceShape::Cos => theta.cos(),
            ComplianceShape::Sin => theta.sin(),
        }
    }
}

/// Ground-truth robot used to synthesize measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorWorld {
    pub seed: u64,
    pub nominal: DhTable,
    pub true_table: DhTable,
    /// Per-joint deflection coefficients, radians.
    pub compliance: [f64; JOINTS],
    pub compliance_shape: ComplianceShape,
    pub noise_sigma: f64,
}

pub fn generate_world(seed: u64, nominal: &DhTable, bounds: &WorldBounds) -> Result<ErrorWorld> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |half: f64| rng.random_range(-1.0..=1.0) * half;
    let mut true_table = nominal.clone();
    let angle = bounds.angle_deg.to_radians();
    for row in &mut true_table.rows {
        row.d += draw(bounds.link_mm);
        row.a += draw(bounds.link_mm);
        row.alpha += draw(angle);
        row.theta_offset += draw(angle);
    }
    let compliance_rad = bounds.compliance_deg.to_radians();
    let compliance = [(); JOINTS].map(|_| draw(compliance_rad));
    true_table.validate()?;
    Ok(ErrorWorld {
        seed,
        nominal: nominal.clone(),
        true_table,
        compliance,
        compliance_shape: bounds.compliance_shape,
        noise_sigma: bounds.noise_sigma_mm,
    })
}

impl ErrorWorld {
    /// Angles the true arm actually reaches for commanded `q`.
    pub fn effective_angles(&self, q: &JointAngles) -> JointAngles {
        let mut eff = q.0;
        for (e, c) in eff.iter_mut().zip(self.compliance) {
            *e += c * self.compliance_shape.eval(*e);
        }
        JointAngles(eff)
    }

    /// Noise-free true position for commanded angles in degrees.
    pub fn measure_exact(&self, theta_deg: [f64; JOINTS]) -> Result<Position3> {
        let q = JointAngles::from_degrees(theta_deg)?;
        Ok(forward_kinematics(&self.true_table, &self.effective_angles(&q)))
    }

    /// True position plus isotropic Gaussian noise drawn from `rng`.
    pub fn measure<R: Rng>(&self, theta_deg: [f64; JOINTS], rng: &mut R) -> Result<Position3> {
        let p = self.measure_exact(theta_deg)?;
        let mut noise = || self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        Ok(Position3::new(p.x + noise(), p.y + noise(), p.z + noise()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: ErrorWorld =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("world document: {e}")))?;
        world.true_table.validate()?;
        world.nominal.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        artifact::write_text(path, prov, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&artifact::read_text(path)?)
    }
}

/// Per-joint sampling intervals in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointRanges(pub [[f64; 2]; JOINTS]);

impl Default for JointRanges {
    fn default() -> Self {
        Self([
            [-90.0, 90.0],
            [-120.0, -60.0],
            [-60.0, 60.0],
            [-120.0, 120.0],
            [-120.0, 120.0],
            [-180.0, 180.0],
        ])
    }
}

impl JointRanges {
    pub fn validate(&self) -> Result<()> {
        for (i, [lo, hi]) in self.0.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!("joint {} range [{lo}, {hi}] is invalid", i + 1)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta_deg: &[f64; JOINTS]) -> bool {
        theta_deg.iter().zip(&self.0).all(|(t, [lo, hi])| (lo..=hi).contains(&t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub theta_deg: [f64; JOINTS],
    pub measured: Position3,
    /// Nominal forward kinematics of `theta_deg`.
    pub theoretical: Position3,
}

impl Sample {
    pub fn new(theta_deg: [f64; JOINTS], measured: Position3, nominal: &DhTable) -> Result<Self> {
        if !(measured.x.is_finite() && measured.y.is_finite() && measured.z.is_finite()) {
            return Err(Error::InvalidInput("measured position is not finite".into()));
        }
        let joints = JointAngles::from_degrees(theta_deg)?;
        Ok(Self {
            theta_deg,
            measured,
            theoretical: forward_kinematics(nominal, &joints),
        })
    }

    pub fn joints(&self) -> JointAngles {
        JointAngles::from_degrees(self.theta_deg).expect("validated on construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<Sample> {
        self.indices(split).into_iter().map(|i| self.samples[i]).collect()
    }

    /// `(train, val, test)` sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

/// 8:1:1 split sizes: validation and test take `⌊n/10⌋` each and training
/// keeps the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

/// Split labels from a seeded shuffle of the sample indices.
pub fn split_labels(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let (train, val, _) = split_sizes(n);
    let mut labels = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    labels
}

/// Draws `n` commanded poses and their measurements. Sample `i` uses its
/// own random stream, so the result does not depend on evaluation order.
pub fn sample_dataset(world: &ErrorWorld, n: usize, seed: u64, ranges: &JointRanges) -> Result<SampleSet> {
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 samples, got {n}")));
    }
    ranges.validate()?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let theta_deg = ranges.0.map(|[lo, hi]| rng.random_range(lo..=hi));
            let measured = world.measure(theta_deg, &mut rng)?;
            Sample::new(theta_deg, measured, &world.nominal)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet {
        samples,
        splits: split_labels(n, seed),
        seed,
    })
}

pub const CSV_HEADER: [&str; 10] = [
    "j1_deg", "j2_deg", "j3_deg", "j4_deg", "j5_deg", "j6_deg", "x_mm", "y_mm", "z_mm", "split",
];

fn csv_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

pub fn dataset_to_csv(set: &SampleSet) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidInput(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for (s, split) in set.samples.iter().zip(&set.splits) {
        let mut row: Vec<String> = s.theta_deg.iter().map(|v| v.to_string()).collect();
        row.extend(s.measured.to_array().iter().map(|v| v.to_string()));
        row.push(split.to_string());
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

pub fn write_dataset(set: &SampleSet, path: &Path, prov: &Provenance) -> Result<()> {
    let body = format!("# seed={}\n{}", set.seed, dataset_to_csv(set)?);
    artifact::write_text(path, prov, &body)
}

/// Reads a dataset file, recomputing the theoretical column from `nominal`.
pub fn read_dataset(path: &Path, nominal: &DhTable) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, nominal)
}

pub fn parse_dataset(text: &str, path: &Path, nominal: &DhTable) -> Result<SampleSet> {
    let seed = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# seed=").and_then(|v| v.trim().parse::<u64>().ok()))
        .unwrap_or(0);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e.position().map_or(0, |p| p.line()), e.to_string()))?,
        None => return Err(csv_error(path, 1, "missing header")),
    };
    let header_line = header.position().map_or(1, |p| p.line());
    if header.len() != CSV_HEADER.len() {
        return Err(csv_error(
            path,
            header_line,
            format!("expected {} columns, found {}", CSV_HEADER.len(), header.len()),
        ));
    }
    if let Some((got, want)) = header.iter().zip(CSV_HEADER).find(|(g, w)| g.trim() != *w) {
        return Err(csv_error(path, header_line, format!("expected column `{want}`, found `{got}`")));
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CSV_HEADER.len() {
            return Err(csv_error(
                path,
                line,
                format!("expected {} columns, found {}", CSV_HEADER.len(), record.len()),
            ));
        }
        let mut values = [0.0; 9];
        for (k, v) in values.iter_mut().enumerate() {
            let cell = record[k].trim();
            *v = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| csv_error(path, line, format!("column `{}`: `{cell}` is not a finite number", CSV_HEADER[k])))?;
        }
        let split: Split = record[9]
            .trim()
            .parse()
            .map_err(|_| csv_error(path, line, format!("column `split`: unknown label `{}`", &record[9])))?;
        let theta_deg: [f64; JOINTS] = values[..JOINTS].try_into().expect("six");
        let sample = Sample::new(theta_deg, Position3::from_slice(&values[JOINTS..]), nominal)
            .map_err(|e| csv_error(path, line, e.to_string()))?;
        samples.push(sample);
        splits.push(split);
    }
    Ok(SampleSet { samples, splits, seed })
}
