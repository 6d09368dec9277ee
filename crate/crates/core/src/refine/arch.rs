use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BranchInput;
use crate::nn::{quat_matrix, weight_penalty, LayerSpec, Mode, ParamStore, Tape, Tensor, Var};

/// How a learned vector `t` acts on a feature `v` as a matrix `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConnectionKind {
    /// `t` is a quaternion; `T` is its (normalized) rotation. Needs `q = 3`.
    RotationQuaternion,
    /// `t` reshaped to a 3×3 matrix. Needs `q = 3`.
    TransformMatrix,
    /// `t` reshaped to a `p×q` matrix.
    WeightMatrix { p: usize },
}

impl ConnectionKind {
    /// Length of `t` for an input of width `q`.
    pub fn raw_dim(&self, q: usize) -> usize {
        match self {
            ConnectionKind::RotationQuaternion => 4,
            ConnectionKind::TransformMatrix => 9,
            ConnectionKind::WeightMatrix { p } => p * q,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ConnectionKind::RotationQuaternion | ConnectionKind::TransformMatrix => 3,
            ConnectionKind::WeightMatrix { p } => *p,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        match self {
            ConnectionKind::WeightMatrix { p } if *p == 0 => Err(Error::InvalidParams("weight-matrix connection needs p >= 1".into())),
            ConnectionKind::RotationQuaternion | ConnectionKind::TransformMatrix if q != 3 => {
                Err(Error::InvalidParams(format!("{self:?} acts on 3-vectors, got width {q}")))
            }
            _ => Ok(()),
        }
    }

    fn apply_on(&self, tape: &mut Tape, layer: &str, t: Var, v: Var, q: usize) -> Result<Var> {
        match self {
            ConnectionKind::RotationQuaternion => {
                let r = tape.quat_to_rot(layer, t)?;
                tape.batched_matvec(layer, r, v, 3, 3)
            }
            ConnectionKind::TransformMatrix => tape.batched_matvec(layer, t, v, 3, 3),
            ConnectionKind::WeightMatrix { p } => tape.batched_matvec(layer, t, v, *p, q),
        }
    }
}

/// `Y = T·v` for a single raw transform vector.
pub fn connection_apply(kind: ConnectionKind, t_raw: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let q = v.len();
    kind.validate(q)?;
    if t_raw.len() != kind.raw_dim(q) {
        return Err(Error::DimensionMismatch { expected: kind.raw_dim(q), actual: t_raw.len() });
    }
    let t = match kind {
        ConnectionKind::RotationQuaternion => {
            let n = t_raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::ZeroQuaternion);
            }
            quat_matrix([t_raw[0] / n, t_raw[1] / n, t_raw[2] / n, t_raw[3] / n]).to_vec()
        }
        _ => t_raw.to_vec(),
    };
    Ok((0..kind.output_dim()).map(|i| (0..q).map(|j| t[i * q + j] * v[j]).sum()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmpStage {
    /// 3×3 convolution with this many output channels, then ReLU.
    Conv(usize),
    /// 3×3 max pooling, stride 1.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L2,
    L1,
}

/// Layer widths of the refinement network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Shared per-point MLP widths.
    pub point_mlp: Vec<usize>,
    /// Hidden FC widths after pooling the patch.
    pub point_fc: Vec<usize>,
    pub hmp_conv: Vec<HmpStage>,
    pub hmp_fc: Vec<usize>,
    /// Per-branch FC widths lifting the canonical normal.
    pub lift: Vec<usize>,
    /// Hidden widths of the output head (a final FC to 3 follows).
    pub head: Vec<usize>,
    /// Dropout keep probability on hidden FC layers.
    pub keep: f64,
    /// Replace both connection outputs with zeros.
    #[serde(default)]
    pub ablate_connections: bool,
}

impl ArchSpec {
    /// Full-size layout for large training sets.
    pub fn full() -> Self {
        use HmpStage::{Conv, Pool};
        Self {
            point_mlp: vec![64, 64, 64, 128, 1024],
            point_fc: vec![256, 128],
            hmp_conv: vec![Conv(64), Conv(64), Pool, Conv(128), Conv(128), Pool, Conv(128)],
            hmp_fc: vec![256, 128],
            lift: vec![64, 64],
            head: vec![512, 256],
            keep: 0.3,
            ablate_connections: false,
        }
    }

    /// Small layout for single-core training runs.
    pub fn desk() -> Self {
        use HmpStage::{Conv, Pool};
        Self {
            point_mlp: vec![16, 16, 32],
            point_fc: vec![32],
            hmp_conv: vec![Conv(8), Pool, Conv(8)],
            hmp_fc: vec![32],
            lift: vec![16, 16],
            head: vec![64, 32],
            keep: 1.0,
            ablate_connections: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.point_mlp.iter().chain(&self.point_fc).chain(&self.hmp_fc).chain(&self.lift).chain(&self.head);
        let convs = self.hmp_conv.iter().filter_map(|s| match s {
            HmpStage::Conv(c) => Some(c),
            HmpStage::Pool => None,
        });
        if widths.chain(convs).any(|&w| w == 0) {
            return Err(Error::InvalidParams("layer widths must be positive".into()));
        }
        if self.point_mlp.is_empty() {
            return Err(Error::InvalidParams("point module needs at least one shared layer".into()));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::InvalidParams("dropout keep must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The refinement network for a fixed input layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub arch: ArchSpec,
    /// Point-module connection, acting on the canonical normal.
    pub conn1: ConnectionKind,
    /// Height-map connection, acting on the first connection's output.
    pub conn2: ConnectionKind,
    /// Number of filtered normals per point.
    pub branches: usize,
    /// Rows of the padded patch.
    pub max_pts: usize,
    /// Height-map side.
    pub m: usize,
}

/// Stacked network inputs of `B` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(B, max_pts, 3)`.
    pub patch: Tensor,
    /// `(B, m, m, X)`, one channel per branch.
    pub hmps: Tensor,
    /// `X` tensors of shape `(B, 3)`.
    pub normals: Vec<Tensor>,
}

impl Batch {
    pub fn new(inputs: &[&BranchInput], net: &Network) -> Result<Self> {
        let (b, x, m, p) = (inputs.len(), net.branches, net.m, net.max_pts);
        let mut patch = Vec::with_capacity(b * p * 3);
        let mut hmps = vec![0.0; b * m * m * x];
        let mut normals = vec![Vec::with_capacity(b * 3); x];
        for (bi, input) in inputs.iter().enumerate() {
            if input.patch.coords.len() != p {
                return Err(Error::DimensionMismatch { expected: p, actual: input.patch.coords.len() });
            }
            if input.hmps.len() != x || input.frame.normals.len() != x {
                return Err(Error::DimensionMismatch { expected: x, actual: input.hmps.len().min(input.frame.normals.len()) });
            }
            patch.extend(input.patch.flat());
            for (c, grid) in input.hmps.iter().enumerate() {
                if grid.m != m {
                    return Err(Error::DimensionMismatch { expected: m, actual: grid.m });
                }
                for (cell, v) in grid.values.iter().enumerate() {
                    hmps[(bi * m * m + cell) * x + c] = *v;
                }
            }
            for (c, n) in input.frame.normals.iter().enumerate() {
                normals[c].extend([n.x, n.y, n.z]);
            }
        }
        Ok(Self {
            patch: Tensor::new(vec![b, p, 3], patch)?,
            hmps: Tensor::new(vec![b, m, m, x], hmps)?,
            normals: normals.into_iter().map(|d| Tensor::new(vec![b, 3], d)).collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.patch.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn fc_block(layers: &mut Vec<LayerSpec>, prefix: &str, mut width: usize, hidden: &[usize], keep: f64, bn: bool) -> usize {
    for (k, &w) in hidden.iter().enumerate() {
        let name = format!("{prefix}.fc{k}");
        layers.push(LayerSpec::fc(&name, width, w));
        if bn {
            layers.push(LayerSpec::bn(&format!("{prefix}.bn{k}"), w));
        }
        layers.push(LayerSpec::Relu);
        if keep < 1.0 {
            layers.push(LayerSpec::Dropout { keep });
        }
        width = w;
    }
    width
}

impl Network {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.conn1.validate(3)?;
        self.conn2.validate(self.conn1.output_dim())?;
        if self.branches == 0 || self.max_pts == 0 || self.m == 0 {
            return Err(Error::InvalidParams("network needs at least one branch, patch row and grid cell".into()));
        }
        Ok(())
    }

    /// Width of the point-module output.
    pub fn d1(&self) -> usize {
        self.conn1.raw_dim(3)
    }

    /// Width of the height-map-module output.
    pub fn d2(&self) -> usize {
        self.conn2.raw_dim(self.conn1.output_dim())
    }

    pub fn branch_width(&self) -> usize {
        self.conn1.output_dim() + self.conn2.output_dim() + self.arch.lift.last().copied().unwrap_or(3)
    }

    pub fn point_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = 3;
        for (k, &w) in self.arch.point_mlp.iter().enumerate() {
            layers.push(LayerSpec::shared(&format!("point.mlp{k}"), width, w));
            layers.push(LayerSpec::Relu);
            width = w;
        }
        layers.push(LayerSpec::MaxOverSet);
        let width = fc_block(&mut layers, "point", width, &self.arch.point_fc, self.arch.keep, false);
        layers.push(LayerSpec::fc("point.t", width, self.d1()));
        layers
    }

    pub fn hmp_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut channels = self.branches;
        for (k, stage) in self.arch.hmp_conv.iter().enumerate() {
            match *stage {
                HmpStage::Conv(c) => {
                    layers.push(LayerSpec::conv(&format!("hmp.conv{k}"), channels, c));
                    layers.push(LayerSpec::Relu);
                    channels = c;
                }
                HmpStage::Pool => layers.push(LayerSpec::MaxPool3x3),
            }
        }
        layers.push(LayerSpec::Flatten);
        let width = fc_block(&mut layers, "hmp", self.m * self.m * channels, &self.arch.hmp_fc, self.arch.keep, false);
        layers.push(LayerSpec::fc("hmp.t", width, self.d2()));
        layers
    }

    pub fn lift_layers(&self, branch: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        fc_block(&mut layers, &format!("lift{branch}"), 3, &self.arch.lift, 1.0, false);
        layers
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let width = fc_block(&mut layers, "head", self.branches * self.branch_width(), &self.arch.head, self.arch.keep, true);
        layers.push(LayerSpec::fc("head.out", width, 3));
        layers
    }

    /// Seeded parameters for every layer.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        let lifts = (0..self.branches).flat_map(|x| self.lift_layers(x));
        for layer in self.point_layers().iter().chain(&self.hmp_layers()).chain(lifts.collect::<Vec<_>>().iter()).chain(&self.head_layers()) {
            layer.init(&mut store, rng)?;
        }
        Ok(store)
    }

    /// Patch `(B, max_pts, 3)` to the `(B, d1)` transform.
    pub fn point_module<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, patch: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        run(&self.point_layers(), tape, store, patch, mode, rng)
    }

    /// Height maps `(B, m, m, X)` to the `(B, d2)` transform.
    pub fn hmp_module<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, hmps: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        run(&self.hmp_layers(), tape, store, hmps, mode, rng)
    }

    /// Feature of one branch: both connection outputs and the lifted normal.
    #[allow(clippy::too_many_arguments)]
    pub fn branch<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, branch: usize, t1: Var, t2: Var, normal: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let y1 = self.conn1.apply_on(tape, "connection1", t1, normal, 3)?;
        let y2 = self.conn2.apply_on(tape, "connection2", t2, y1, self.conn1.output_dim())?;
        let lift = run(&self.lift_layers(branch), tape, store, normal, mode, rng)?;
        let (y1, y2) = if self.arch.ablate_connections {
            let rows = tape.value(normal).rows();
            let z1 = tape.constant(Tensor::zeros(&[rows, self.conn1.output_dim()]));
            let z2 = tape.constant(Tensor::zeros(&[rows, self.conn2.output_dim()]));
            (z1, z2)
        } else {
            (y1, y2)
        };
        tape.concat("branch", &[y1, y2, lift])
    }

    /// Unnormalized `(B, 3)` prediction in the canonical frame.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, mode: Mode, rng: &mut R) -> Result<Var> {
        if batch.normals.len() != self.branches {
            return Err(Error::DimensionMismatch { expected: self.branches, actual: batch.normals.len() });
        }
        let patch = tape.input(batch.patch.clone());
        let hmps = tape.input(batch.hmps.clone());
        let t1 = self.point_module(tape, store, patch, mode, rng)?;
        let t2 = self.hmp_module(tape, store, hmps, mode, rng)?;
        let mut features = Vec::with_capacity(self.branches);
        for (x, n) in batch.normals.iter().enumerate() {
            let n = tape.input(n.clone());
            features.push(self.branch(tape, store, x, t1, t2, n, mode, rng)?);
        }
        let joined = tape.concat("branches", &features)?;
        run(&self.head_layers(), tape, store, joined, mode, rng)
    }

    /// Mean normalized-prediction error over the batch plus `lambda` times the
    /// squared sum of all weight matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, target: &Tensor, lambda: f64, kind: LossKind, mode: Mode, rng: &mut R) -> Result<Var> {
        let pred = self.forward(tape, store, batch, mode, rng)?;
        loss_terms(tape, store, pred, target, lambda, kind)
    }
}

/// Loss on an existing prediction node.
pub fn loss_terms(tape: &mut Tape, store: &ParamStore, pred: Var, target: &Tensor, lambda: f64, kind: LossKind) -> Result<Var> {
    let err = tape.normalized_error(pred, target, kind == LossKind::L1)?;
    if lambda == 0.0 {
        return Ok(err);
    }
    let reg = weight_penalty(tape, store);
    tape.add_scaled(err, reg, lambda)
}

fn run<R: Rng>(layers: &[LayerSpec], tape: &mut Tape, store: &ParamStore, mut h: Var, mode: Mode, rng: &mut R) -> Result<Var> {
    for layer in layers {
        h = layer.apply(tape, store, h, mode, rng)?;
    }
    Ok(h)
}
