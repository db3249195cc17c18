//! Compensation network and its fusion with the kinematic branch.
//!
//! Each joint angle is lifted into its own `d_model`-wide token by an
//! independent affine map, the six tokens pass through a post-norm
//! transformer encoder whose self-attention is restricted by a 6x6 joint
//! visibility mask, and a residual MLP head turns the flattened tokens into
//! a 3-D correction `Δp`. The prediction is `p_theory + α·Δp` where
//! `p_theory` comes from the nominal DH table and `α` is trainable.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::autodiff::{Array, Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics_batch, DhTable, JointAngles, Position3, JOINTS};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const ALPHA: &str = "fusion.alpha";
pub const LOG_LAMBDA_DATA: &str = "loss.log_lambda_data";
pub const LOG_LAMBDA_PHYSICS: &str = "loss.log_lambda_physics";

/// Which joint pairs may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Arm joints 1-3 see every joint; wrist joints 4-6 are blocked from
    /// part of the arm group.
    #[default]
    Spi,
    /// Chain-neighbourhood mask: each joint sees itself and its direct neighbours.
    Body,
    None,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Spi => "spi",
            MaskKind::Body => "body",
            MaskKind::None => "none",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spi" => Ok(MaskKind::Spi),
            "body" => Ok(MaskKind::Body),
            "none" => Ok(MaskKind::None),
            other => Err(Error::InvalidInput(format!("unknown mask kind `{other}`"))),
        }
    }
}

pub type JointMask = [[u8; JOINTS]; JOINTS];

/// Visibility mask, `mask[query][key]`: 0 = visible, 1 = blocked.
pub fn build_mask(kind: MaskKind) -> JointMask {
    match kind {
        MaskKind::Spi => [
            [0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
        ],
        MaskKind::Body => [
            [0, 0, 1, 1, 1, 1],
            [0, 0, 0, 1, 1, 1],
            [1, 0, 0, 0, 1, 1],
            [1, 1, 0, 0, 0, 1],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 1, 0, 0],
        ],
        MaskKind::None => [[0; JOINTS]; JOINTS],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `ReLU(L2(ReLU(L1 x)) + Ls x)` followed by the output map.
    #[default]
    Residual,
    /// Same widths without the shortcut projection.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_hidden: usize,
    pub mask: MaskKind,
    pub alpha_init: f64,
    pub head: HeadKind,
    /// When false the embedded tokens feed the head directly.
    pub encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 126,
            n_layer: 4,
            n_head: 9,
            d_hidden: 512,
            mask: MaskKind::Spi,
            alpha_init: 0.1,
            head: HeadKind::Residual,
            encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layer == 0 || self.n_head == 0 || self.d_hidden == 0 {
            return Err(Error::Config("model widths and counts must be positive".into()));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("alpha_init must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

/// All trainable state: network weights, fusion scale and loss log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BoterModel {
    config: ModelConfig,
    table_id: String,
    table: DhTable,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    blocked: Vec<bool>,
}

/// Graph handles for every parameter of a model, in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles registered elsewhere; they must follow parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub prediction: Var,
    pub compensation: Var,
    /// Attention weights `[B, heads, 6, 6]`, one per encoder layer.
    pub attention: Vec<Var>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape")
}

impl BoterModel {
    /// Fresh model on the built-in UR5 table.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_table(config, "ur5", DhTable::ur5(), seed)
    }

    pub fn with_table(config: ModelConfig, table_id: &str, table: DhTable, seed: u64) -> Result<Self> {
        config.validate()?;
        table.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = Vec::new();
        let mut push = |name: String, value: Array| params.push(Param { name, value });
        let linear = |rng: &mut ChaCha8Rng, push: &mut dyn FnMut(String, Array), name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            push(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
            push(format!("{name}.b"), uniform(rng, &[fan_out], bound));
        };

        // per-joint 1 -> d maps, stacked as [6, d]
        push("embed.w".into(), uniform(&mut rng, &[JOINTS, d], 1.0));
        push("embed.b".into(), uniform(&mut rng, &[JOINTS, d], 1.0));
        if config.encoder {
            for l in 0..config.n_layer {
                let p = format!("enc.{l}");
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut rng, &mut push, &format!("{p}.attn.{proj}"), d, d);
                }
                push(format!("{p}.ln1.g"), Array::full(&[d], 1.0));
                push(format!("{p}.ln1.b"), Array::zeros(&[d]));
                linear(&mut rng, &mut push, &format!("{p}.ff1"), d, 4 * d);
                linear(&mut rng, &mut push, &format!("{p}.ff2"), 4 * d, d);
                push(format!("{p}.ln2.g"), Array::full(&[d], 1.0));
                push(format!("{p}.ln2.b"), Array::zeros(&[d]));
            }
        }
        let flat = JOINTS * d;
        let h = config.d_hidden;
        linear(&mut rng, &mut push, "head.l1", flat, h);
        linear(&mut rng, &mut push, "head.l2", h, h);
        if config.head == HeadKind::Residual {
            linear(&mut rng, &mut push, "head.ls", flat, h);
        }
        linear(&mut rng, &mut push, "head.l3", h, 3);
        push(ALPHA.into(), Array::scalar(config.alpha_init));
        push(LOG_LAMBDA_DATA.into(), Array::scalar(0.0));
        push(LOG_LAMBDA_PHYSICS.into(), Array::scalar(0.0));

        Ok(Self::assemble(config, table_id.to_string(), table, params))
    }

    fn assemble(config: ModelConfig, table_id: String, table: DhTable, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let blocked = build_mask(config.mask).iter().flatten().map(|&m| m == 1).collect();
        Self {
            config,
            table_id,
            table,
            params,
            index,
            blocked,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self) -> &DhTable {
        &self.table
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn mask(&self) -> JointMask {
        build_mask(self.config.mask)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn alpha(&self) -> f64 {
        self.param(ALPHA).expect("alpha").item()
    }

    pub fn log_lambdas(&self) -> (f64, f64) {
        (
            self.param(LOG_LAMBDA_DATA).expect("log lambda").item(),
            self.param(LOG_LAMBDA_PHYSICS).expect("log lambda").item(),
        )
    }

    /// Registers every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.trainable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn affine(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(b, &format!("{name}.w")))?;
        Ok(g.add(y, self.var(b, &format!("{name}.b")))?)
    }

    /// `[B, 6]` radians → `[B, 6, d_model]` tokens.
    pub fn embed(&self, g: &mut Graph, b: &Bound, q: Var) -> Result<Var> {
        let d = self.config.d_model;
        let lifted = g.repeat_last(q, d)?;
        let scaled = g.mul(lifted, self.var(b, "embed.w"))?;
        let shifted = g.add(scaled, self.var(b, "embed.b"))?;
        Ok(g.relu(shifted)?)
    }

    fn attention(&self, g: &mut Graph, b: &Bound, x: Var, layer: usize) -> Result<(Var, Var)> {
        let batch = g.shape(x)[0];
        let (d, heads, dk) = (self.config.d_model, self.config.n_head, self.config.head_dim());
        let p = format!("enc.{layer}.attn");
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[batch, JOINTS, heads, dk])?;
            Ok(g.permute(v, &[0, 2, 1, 3])?)
        };
        let q = self.affine(g, b, x, &format!("{p}.q"))?;
        let k = self.affine(g, b, x, &format!("{p}.k"))?;
        let v = self.affine(g, b, x, &format!("{p}.v"))?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let kt = g.transpose(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let blocked: &[bool] = if self.config.mask == MaskKind::None { &[] } else { &self.blocked };
        let weights = g.softmax_masked(scores, blocked)?;
        let ctx = g.batch_matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, JOINTS, d])?;
        Ok((self.affine(g, b, ctx, &format!("{p}.o"))?, weights))
    }

    fn norm(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS)?;
        let n = g.mul(n, self.var(b, &format!("{name}.g")))?;
        Ok(g.add(n, self.var(b, &format!("{name}.b")))?)
    }

    /// Encoder stack; returns encoded tokens and per-layer attention weights.
    pub fn encode(&self, g: &mut Graph, b: &Bound, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let mut x = tokens;
        let mut weights = Vec::new();
        if !self.config.encoder {
            return Ok((x, weights));
        }
        for l in 0..self.config.n_layer {
            let p = format!("enc.{l}");
            let (attn, w) = self.attention(g, b, x, l)?;
            weights.push(w);
            let res = g.add(x, attn)?;
            let x1 = self.norm(g, b, res, &format!("{p}.ln1"))?;
            let hidden = self.affine(g, b, x1, &format!("{p}.ff1"))?;
            let hidden = g.relu(hidden)?;
            let ff = self.affine(g, b, hidden, &format!("{p}.ff2"))?;
            let res = g.add(x1, ff)?;
            x = self.norm(g, b, res, &format!("{p}.ln2"))?;
        }
        Ok((x, weights))
    }

    /// `[B, 6, d_model]` → `[B, 3]` correction.
    pub fn head(&self, g: &mut Graph, b: &Bound, encoded: Var) -> Result<Var> {
        let batch = g.shape(encoded)[0];
        let x = g.reshape(encoded, &[batch, JOINTS * self.config.d_model])?;
        let a = self.affine(g, b, x, "head.l1")?;
        let a = g.relu(a)?;
        let bb = self.affine(g, b, a, "head.l2")?;
        let z = match self.config.head {
            HeadKind::Residual => {
                let r = self.affine(g, b, x, "head.ls")?;
                let sum = g.add(bb, r)?;
                g.relu(sum)?
            }
            HeadKind::Linear => g.relu(bb)?,
        };
        let z = g.relu(z)?;
        self.affine(g, b, z, "head.l3")
    }

    /// Full forward pass for `[B, 6]` radians with the kinematic branch
    /// supplied as `p_theory` (`[B, 3]`).
    pub fn forward(&self, g: &mut Graph, b: &Bound, q: Var, p_theory: Var) -> Result<ForwardTrace> {
        let tokens = self.embed(g, b, q)?;
        let (encoded, attention) = self.encode(g, b, tokens)?;
        let compensation = self.head(g, b, encoded)?;
        let scaled = g.mul(compensation, self.var(b, ALPHA))?;
        let prediction = g.add(p_theory, scaled)?;
        Ok(ForwardTrace {
            prediction,
            compensation,
            attention,
        })
    }

    /// Nominal positions for a batch, as a constant `[B, 3]` array.
    pub fn theory_positions(&self, qs: &[JointAngles]) -> Array {
        let data = forward_kinematics_batch(&self.table, qs)
            .into_iter()
            .flat_map(Position3::to_array)
            .collect();
        Array::new(vec![qs.len(), 3], data).expect("shape")
    }

    pub fn predict_batch(&self, qs: &[JointAngles]) -> Result<Vec<Position3>> {
        if qs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let q = g.constant(joint_array(qs))?;
        let theory = g.constant(self.theory_positions(qs))?;
        let trace = self.forward(&mut g, &b, q, theory)?;
        Ok(g.value(trace.prediction).data().chunks(3).map(Position3::from_slice).collect())
    }

    pub fn predict(&self, q: &JointAngles) -> Result<Position3> {
        Ok(self.predict_batch(std::slice::from_ref(q))?[0])
    }

    /// Raw network corrections `Δp` (before scaling by α).
    pub fn compensation_batch(&self, qs: &[JointAngles]) -> Result<Vec<Position3>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let q = g.constant(joint_array(qs))?;
        let tokens = self.embed(&mut g, &b, q)?;
        let (enc, _) = self.encode(&mut g, &b, tokens)?;
        let dp = self.head(&mut g, &b, enc)?;
        Ok(g.value(dp).data().chunks(3).map(Position3::from_slice).collect())
    }

    pub fn freeze(self) -> FrozenModel {
        FrozenModel(self)
    }

    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        artifact::write_text(path, prov, &self.to_checkpoint_string()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = artifact::read_text(path)?;
        Self::from_checkpoint_str(&text)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            table_id: self.table_id.clone(),
            table: self.table.clone(),
            config: self.config.clone(),
            mask: self.config.mask,
            alpha: self.alpha(),
            log_lambda_data: self.log_lambdas().0,
            log_lambda_physics: self.log_lambdas().1,
            params: self
                .params
                .iter()
                .filter(|p| ![ALPHA, LOG_LAMBDA_DATA, LOG_LAMBDA_PHYSICS].contains(&p.name.as_str()))
                .cloned()
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        if doc.mask != doc.config.mask {
            return Err(Error::Checkpoint("mask kind disagrees with config".into()));
        }
        // Shapes must match a freshly built model of the same config.
        let reference = Self::with_table(doc.config.clone(), &doc.table_id, doc.table.clone(), 0)?;
        let mut stored: HashMap<String, Array> = doc.params.into_iter().map(|p| (p.name, p.value)).collect();
        stored.insert(ALPHA.into(), Array::scalar(doc.alpha));
        stored.insert(LOG_LAMBDA_DATA.into(), Array::scalar(doc.log_lambda_data));
        stored.insert(LOG_LAMBDA_PHYSICS.into(), Array::scalar(doc.log_lambda_physics));
        let mut params = Vec::with_capacity(reference.params.len());
        for p in &reference.params {
            let value = stored
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{}` is not finite", p.name)));
            }
            params.push(Param {
                name: p.name.clone(),
                value,
            });
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::assemble(doc.config, doc.table_id, doc.table, params))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    table_id: String,
    table: DhTable,
    config: ModelConfig,
    mask: MaskKind,
    alpha: f64,
    log_lambda_data: f64,
    log_lambda_physics: f64,
    params: Vec<Param>,
}

/// A model whose parameters can no longer change. Binding always produces
/// constants, so gradients never reach the weights.
#[derive(Debug, Clone)]
pub struct FrozenModel(BoterModel);

impl FrozenModel {
    pub fn model(&self) -> &BoterModel {
        &self.0
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.0.bind(g, false)
    }

    pub fn into_inner(self) -> BoterModel {
        self.0
    }
}

impl std::ops::Deref for FrozenModel {
    type Target = BoterModel;

    fn deref(&self) -> &BoterModel {
        &self.0
    }
}

/// Packs joint vectors into a `[B, 6]` array.
pub fn joint_array(qs: &[JointAngles]) -> Array {
    let data = qs.iter().flat_map(|q| q.0).collect();
    Array::new(vec![qs.len(), JOINTS], data).expect("shape")
}
