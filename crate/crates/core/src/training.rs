//! Training loop, evaluation metrics and ablation runs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, GraphError};
use crate::dataset::{Sample, SampleSet, Split};
use crate::error::{Error, Result};
use crate::kinematics::{JointAngles, Position3};
use crate::loss::{spi_loss, LossBreakdown, LossMode};
use crate::model::{joint_array, BoterModel, HeadKind, MaskKind, ModelConfig, LOG_LAMBDA_DATA, LOG_LAMBDA_PHYSICS};
use crate::optim::{clip_grad_norm, AdamConfig, AdamW};

/// Samples per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_threshold: f64,
    /// Weight initialization and batch shuffling. Supplied by the run
    /// configuration's seed table rather than the training section.
    #[serde(skip)]
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 256,
            max_epochs: 150,
            clip_threshold: 1.0,
            seed: 139,
            loss_mode: LossMode::Spi,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.clip_threshold) {
            return Err(Error::Config("learning_rate and clip_threshold must be positive".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub x: AxisMetrics,
    pub y: AxisMetrics,
    pub z: AxisMetrics,
    pub d3: AxisMetrics,
}

fn r_squared(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        1.0
    } else if den == 0.0 {
        f64::NEG_INFINITY
    } else {
        1.0 - num / den
    }
}

/// Coordinate-space errors of `pred` against `measured`, and error-space
/// R² of `pred − theory` against `measured − theory`. The R² baseline is the
/// mean absolute real error of each axis.
pub fn compute_metrics(pred: &[Position3], measured: &[Position3], theory: &[Position3]) -> Result<MetricsReport> {
    let n = pred.len();
    if n == 0 {
        return Err(Error::InvalidInput("metrics of an empty sample set".into()));
    }
    if measured.len() != n || theory.len() != n {
        return Err(Error::InvalidInput("prediction, measurement and theory lengths differ".into()));
    }
    let nf = n as f64;
    let pred: Vec<[f64; 3]> = pred.iter().map(|p| p.to_array()).collect();
    let meas: Vec<[f64; 3]> = measured.iter().map(|p| p.to_array()).collect();
    let theo: Vec<[f64; 3]> = theory.iter().map(|p| p.to_array()).collect();

    let mut axes = [AxisMetrics::default(); 3];
    let mut num_3d = 0.0;
    let mut den_3d = 0.0;
    for (k, axis) in axes.iter_mut().enumerate() {
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut real_abs_sum = 0.0;
        for i in 0..n {
            let e = pred[i][k] - meas[i][k];
            abs_sum += e.abs();
            sq_sum += e * e;
            real_abs_sum += (meas[i][k] - theo[i][k]).abs();
        }
        let baseline = real_abs_sum / nf;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let real = meas[i][k] - theo[i][k];
            let predicted = pred[i][k] - theo[i][k];
            num += (predicted - real).powi(2);
            den += (baseline - real).powi(2);
        }
        num_3d += num;
        den_3d += den;
        let mse = sq_sum / nf;
        *axis = AxisMetrics {
            mae: abs_sum / nf,
            mse,
            rmse: mse.sqrt(),
            r2: r_squared(num, den),
        };
    }
    let mut dist_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..n {
        let sq: f64 = (0..3).map(|k| (pred[i][k] - meas[i][k]).powi(2)).sum();
        dist_sum += sq.sqrt();
        sq_sum += sq;
    }
    let mse = sq_sum / nf;
    Ok(MetricsReport {
        samples: n,
        x: axes[0],
        y: axes[1],
        z: axes[2],
        d3: AxisMetrics {
            mae: dist_sum / nf,
            mse,
            rmse: mse.sqrt(),
            r2: r_squared(num_3d, den_3d),
        },
    })
}

impl MetricsReport {
    pub fn axes(&self) -> [(&'static str, AxisMetrics); 4] {
        [("X", self.x), ("Y", self.y), ("Z", self.z), ("3D", self.d3)]
    }

    pub const TABLE_HEADER: &'static str = "Split    Samples  Axis  MAE(mm)     MSE(mm^2)   RMSE(mm)    R2";

    /// Rows of the per-split table, one per axis.
    pub fn table_rows(&self, label: &str) -> String {
        let mut out = String::new();
        for (axis, m) in self.axes() {
            let _ = writeln!(
                out,
                "{label:<8} {:<8} {axis:<5} {:<11.6} {:<11.6} {:<11.6} {:.6}",
                self.samples, m.mae, m.mse, m.rmse, m.r2
            );
        }
        out
    }

    pub fn table(&self, label: &str) -> String {
        format!("{}\n{}", Self::TABLE_HEADER, self.table_rows(label))
    }
}

/// Predictions of `model` for `samples`, in chunks.
pub fn predict_samples(model: &BoterModel, samples: &[Sample]) -> Result<Vec<Position3>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let qs: Vec<JointAngles> = chunk.iter().map(Sample::joints).collect();
        out.extend(model.predict_batch(&qs)?);
    }
    Ok(out)
}

pub fn evaluate(model: &BoterModel, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one sample".into()));
    }
    let pred = predict_samples(model, samples)?;
    let measured: Vec<Position3> = samples.iter().map(|s| s.measured).collect();
    let theory: Vec<Position3> = samples.iter().map(|s| s.theoretical).collect();
    compute_metrics(&pred, &measured, &theory)
}

/// Metrics of the nominal kinematics alone (no compensation).
pub fn uncompensated_metrics(samples: &[Sample]) -> Result<MetricsReport> {
    let measured: Vec<Position3> = samples.iter().map(|s| s.measured).collect();
    let theory: Vec<Position3> = samples.iter().map(|s| s.theoretical).collect();
    compute_metrics(&theory, &measured, &theory)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_physics: f64,
    pub lambda_data: f64,
    pub lambda_physics: f64,
    pub val_mae_3d: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation 3D MAE.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_data,l_physics,lambda_data,lambda_physics,val_mae_3d\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_data, r.l_physics, r.lambda_data, r.lambda_physics, r.val_mae_3d
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: BoterModel,
    pub history: TrainHistory,
}

struct Batchable {
    joints: Vec<JointAngles>,
    theory: Vec<[f64; 3]>,
    measured: Vec<[f64; 3]>,
}

impl Batchable {
    fn new(samples: &[Sample]) -> Self {
        Self {
            joints: samples.iter().map(Sample::joints).collect(),
            theory: samples.iter().map(|s| s.theoretical.to_array()).collect(),
            measured: samples.iter().map(|s| s.measured.to_array()).collect(),
        }
    }

    fn gather(&self, idx: &[usize]) -> (Array, Array, Array) {
        let q: Vec<JointAngles> = idx.iter().map(|&i| self.joints[i]).collect();
        let rows = |src: &[[f64; 3]]| {
            let data = idx.iter().flat_map(|&i| src[i]).collect();
            Array::new(vec![idx.len(), 3], data).expect("shape")
        };
        (joint_array(&q), rows(&self.theory), rows(&self.measured))
    }
}

fn diverged(epoch: usize) -> Error {
    Error::Diverged {
        epoch,
        last_finite: epoch.checked_sub(1).filter(|&e| e > 0),
    }
}

/// One optimization step on a batch; returns the loss values before the update.
fn train_step(
    model: &mut BoterModel,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    q: Array,
    theory: Array,
    measured: Array,
) -> Result<LossBreakdown, Error> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let q = g.constant(q)?;
    let theory = g.constant(theory)?;
    let measured = g.constant(measured)?;
    let trace = model.forward(&mut g, &bound, q, theory)?;
    let log_data = model.var(&bound, LOG_LAMBDA_DATA);
    let log_phys = model.var(&bound, LOG_LAMBDA_PHYSICS);
    let loss = spi_loss(&mut g, trace.prediction, measured, theory, log_data, log_phys, cfg.loss_mode)?;
    let mut grads = g.backward(loss.total)?;
    let mut flat: Vec<Array> = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Array::zeros(g.shape(v))))
        .collect();
    drop(g);
    clip_grad_norm(&mut flat, cfg.clip_threshold);
    let mut params: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
    let grad_refs: Vec<&[f64]> = flat.iter().map(Array::data).collect();
    opt.step(&mut params, &grad_refs);
    Ok(loss.breakdown)
}

/// Trains `model` on the train split, selecting the epoch with the lowest
/// validation 3D MAE.
pub fn train(mut model: BoterModel, set: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(&mut model, set, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut BoterModel,
    set: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_samples = set.subset(Split::Train);
    let val_samples = set.subset(Split::Val);
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::InvalidInput("training needs nonempty train and val splits".into()));
    }
    let data = Batchable::new(&train_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, BoterModel)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut data_sum, mut phys_sum, mut seen, mut phys_batches) = (0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (q, theory, measured) = data.gather(idx);
            let step = match train_step(model, &mut opt, cfg, q, theory, measured) {
                Err(Error::Graph(GraphError::NonFinite { .. })) => return Err(diverged(epoch)),
                other => other?,
            };
            if !step.l_total.is_finite() {
                return Err(diverged(epoch));
            }
            data_sum += step.l_data * idx.len() as f64;
            seen += idx.len();
            if cfg.loss_mode == LossMode::Spi && idx.len() >= 2 {
                phys_sum += step.l_physics;
                phys_batches += 1;
            }
        }
        if model.params().iter().any(|p| !p.value.is_finite()) {
            return Err(diverged(epoch));
        }
        let val = evaluate(model, &val_samples)?;
        let (ld, lp) = model.log_lambdas();
        let record = EpochRecord {
            epoch,
            l_data: data_sum / seen as f64,
            l_physics: if phys_batches > 0 { phys_sum / phys_batches as f64 } else { 0.0 },
            lambda_data: ld.exp(),
            lambda_physics: lp.exp(),
            val_mae_3d: val.d3.mae,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val.d3.mae < *b) {
            best = Some((val.d3.mae, model.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        history,
    })
}

/// One configuration of an ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGroup {
    pub name: String,
    pub model: ModelConfig,
    pub loss_mode: LossMode,
}

impl AblationGroup {
    fn new(name: &str, model: ModelConfig, loss_mode: LossMode) -> Self {
        Self {
            name: name.into(),
            model,
            loss_mode,
        }
    }
}

/// Baseline plus the four architectural variants.
pub fn structure_groups(base: &ModelConfig) -> Vec<AblationGroup> {
    let with = |f: fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        AblationGroup::new("baseline", base.clone(), LossMode::Spi),
        AblationGroup::new("no_mask", with(|c| c.mask = MaskKind::None), LossMode::Spi),
        AblationGroup::new("body_mask", with(|c| c.mask = MaskKind::Body), LossMode::Spi),
        AblationGroup::new("no_resnet", with(|c| c.head = HeadKind::Linear), LossMode::Spi),
        AblationGroup::new("no_transformer", with(|c| c.encoder = false), LossMode::Spi),
    ]
}

/// Full objective against the data term alone.
pub fn loss_groups(base: &ModelConfig) -> Vec<AblationGroup> {
    vec![
        AblationGroup::new("baseline", base.clone(), LossMode::Spi),
        AblationGroup::new("data_only", base.clone(), LossMode::DataOnly),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub group: AblationGroup,
    pub best_epoch: usize,
    pub test: MetricsReport,
    pub model: BoterModel,
    pub history: TrainHistory,
}

/// Trains every group with the same configuration and seed and evaluates
/// each best checkpoint on the test split.
pub fn run_ablation(groups: &[AblationGroup], set: &SampleSet, cfg: &TrainConfig) -> Result<Vec<AblationResult>> {
    let test = set.subset(Split::Test);
    groups
        .iter()
        .map(|group| {
            let model = BoterModel::new(group.model.clone(), cfg.seed)?;
            let cfg = TrainConfig {
                loss_mode: group.loss_mode,
                ..cfg.clone()
            };
            let outcome = train(model, set, &cfg)?;
            Ok(AblationResult {
                group: group.clone(),
                best_epoch: outcome.history.best_epoch,
                test: evaluate(&outcome.model, &test)?,
                model: outcome.model,
                history: outcome.history,
            })
        })
        .collect()
}

pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut out = String::from("Group            Epochs  Axis  MAE(mm)     MSE(mm^2)   RMSE(mm)    R2\n");
    for r in results {
        for (axis, m) in r.test.axes() {
            let _ = writeln!(
                out,
                "{:<16} {:<7} {axis:<5} {:<11.6} {:<11.6} {:<11.6} {:.6}",
                r.group.name, r.best_epoch, m.mae, m.mse, m.rmse, m.r2
            );
        }
    }
    out
}
