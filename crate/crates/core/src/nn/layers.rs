use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use super::tape::{Grads, Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One layer of a feed-forward stack. Named layers own parameters
/// `{name}.w`/`{name}.b` (dense and conv) or `{name}.gamma/.beta/.mean/.var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Dense map applied to every element of a `(B, P, C)` set.
    SharedMlp { name: String, input: usize, output: usize },
    FullyConnected { name: String, input: usize, output: usize },
    /// `(B, H, W, C)` to `(B, H, W, output)`, padding 1.
    Conv3x3 { name: String, input: usize, output: usize },
    /// Stride 1, padding 1.
    MaxPool3x3,
    /// `(B, P, C)` to `(B, C)`.
    MaxOverSet,
    Relu,
    BatchNorm { name: String, dim: usize },
    Dropout { keep: f64 },
    /// `(B, ...)` to `(B, prod(...))`.
    Flatten,
}

impl LayerSpec {
    pub fn fc(name: &str, input: usize, output: usize) -> Self {
        LayerSpec::FullyConnected { name: name.into(), input, output }
    }

    pub fn shared(name: &str, input: usize, output: usize) -> Self {
        LayerSpec::SharedMlp { name: name.into(), input, output }
    }

    pub fn conv(name: &str, input: usize, output: usize) -> Self {
        LayerSpec::Conv3x3 { name: name.into(), input, output }
    }

    pub fn bn(name: &str, dim: usize) -> Self {
        LayerSpec::BatchNorm { name: name.into(), dim }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::SharedMlp { input, output, .. } | LayerSpec::FullyConnected { input, output, .. } | LayerSpec::Conv3x3 { input, output, .. } => *input > 0 && *output > 0,
            LayerSpec::BatchNorm { dim, .. } => *dim > 0,
            LayerSpec::Dropout { keep } => *keep > 0.0 && *keep <= 1.0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid layer dimensions: {self:?}")))
        }
    }

    /// Registers this layer's parameters with seeded initial values.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        match self {
            LayerSpec::SharedMlp { name, input, output } | LayerSpec::FullyConnected { name, input, output } => store.add_dense(name, *input, *output, rng),
            LayerSpec::Conv3x3 { name, input, output } => store.add_dense(name, 9 * input, *output, rng),
            LayerSpec::BatchNorm { name, dim } => store.add_batch_norm(name, *dim),
            _ => Ok(()),
        }
    }

    fn label(&self) -> String {
        match self {
            LayerSpec::SharedMlp { name, .. } | LayerSpec::FullyConnected { name, .. } | LayerSpec::Conv3x3 { name, .. } | LayerSpec::BatchNorm { name, .. } => name.clone(),
            other => format!("{other:?}").to_lowercase(),
        }
    }

    /// Appends this layer to `tape`.
    pub fn apply<R: Rng>(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let label = self.label();
        let shape = tape.value(x).shape.clone();
        let check_width = |input: usize| {
            if shape.last() != Some(&input) {
                return Err(Error::ShapeMismatch { layer: label.clone(), detail: format!("expected width {input}, got shape {shape:?}") });
            }
            Ok(())
        };
        match self {
            LayerSpec::SharedMlp { name, input, .. } => {
                if shape.len() != 3 {
                    return Err(Error::ShapeMismatch { layer: label, detail: format!("expected (B, P, C), got {shape:?}") });
                }
                check_width(*input)?;
                dense(tape, store, name, x)
            }
            LayerSpec::FullyConnected { name, input, .. } => {
                if shape.len() != 2 {
                    return Err(Error::ShapeMismatch { layer: label, detail: format!("expected (B, C), got {shape:?}") });
                }
                check_width(*input)?;
                dense(tape, store, name, x)
            }
            LayerSpec::Conv3x3 { name, input, .. } => {
                check_width(*input)?;
                let w = tape.param(store, store.require(&format!("{name}.w"), name)?);
                let b = tape.param(store, store.require(&format!("{name}.b"), name)?);
                tape.conv3x3(name, x, w, b)
            }
            LayerSpec::MaxPool3x3 => tape.maxpool3x3(&label, x),
            LayerSpec::MaxOverSet => tape.max_over_set(&label, x),
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::BatchNorm { name, dim } => {
                check_width(*dim)?;
                let ids = ["gamma", "beta", "mean", "var"].map(|s| store.require(&format!("{name}.{s}"), name));
                let [g, b, m, v] = ids;
                tape.batch_norm(name, store, x, [g?, b?, m?, v?], mode)
            }
            LayerSpec::Dropout { keep } => Ok(tape.dropout(x, *keep, mode, rng)),
            LayerSpec::Flatten => {
                let rows = shape.first().copied().unwrap_or(0);
                let rest = shape.iter().skip(1).product();
                tape.reshape(&label, x, &[rows, rest])
            }
        }
    }
}

pub(crate) fn dense(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, store.require(&format!("{name}.w"), name)?);
    let b = tape.param(store, store.require(&format!("{name}.b"), name)?);
    tape.linear(name, x, w, Some(b))
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tape: Tape,
    pub input: Var,
    pub output: Var,
}

impl Forward {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }
}

/// Runs `layers` on `x`, recording the computation.
pub fn forward<R: Rng>(layers: &[LayerSpec], params: &ParamStore, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Forward> {
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let mut h = input;
    for layer in layers {
        h = layer.apply(&mut tape, params, h, mode, rng)?;
    }
    Ok(Forward { tape, input, output: h })
}

/// Parameter gradients (one per store entry) and the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

pub fn backward(fwd: &Forward, params: &ParamStore, upstream: &Tensor) -> Gradients {
    let grads: Grads = fwd.tape.backward(fwd.output, Some(upstream));
    let input = grads.of(fwd.input).cloned().unwrap_or_else(|| Tensor::zeros(&fwd.tape.value(fwd.input).shape));
    Gradients { params: grads.params(&fwd.tape, params), input }
}

/// `θ ← θ − lr·g` on trainable entries; running statistics are untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: grads.len() });
    }
    for (id, g) in grads.iter().enumerate() {
        if !params.entries()[id].kind.trainable() {
            continue;
        }
        let value = params.value_mut(id);
        if value.shape != g.shape {
            return Err(Error::ShapeMismatch { layer: "sgd".into(), detail: format!("{:?} vs {:?}", value.shape, g.shape) });
        }
        for (v, d) in value.data.iter_mut().zip(&g.data) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not count as failures.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// `(parameter name, max relative error)` for trainable entries.
    pub params: Vec<(String, f64)>,
    /// Max relative error over the input entries, when checked.
    pub input: Option<f64>,
    pub max_error: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of a scalar function of the parameters
/// (and optionally an input tensor) with central differences of step `h`.
///
/// `f` rebuilds the computation on a fresh tape and returns the scalar output;
/// it must be deterministic (reseed any dropout inside it).
pub fn grad_check_fn<F>(params: &ParamStore, input: Option<&Tensor>, f: F, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore, Option<Var>) -> Result<Var>,
{
    let eval = |store: &ParamStore, x: Option<&Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = x.map(|t| tape.input(t.clone()));
        let out = f(&mut tape, store, xv)?;
        Ok(tape.value(out).data[0])
    };
    let mut tape = Tape::new();
    let xv = input.map(|t| tape.input(t.clone()));
    let out = f(&mut tape, params, xv)?;
    let grads = tape.backward(out, None);
    let analytic = grads.params(&tape, params);

    let mut report = Vec::new();
    let mut max_error: f64 = 0.0;
    let mut probe = params.clone();
    for (id, entry) in params.entries().iter().enumerate() {
        if !entry.kind.trainable() {
            continue;
        }
        let mut worst: f64 = 0.0;
        for k in 0..entry.value.len() {
            let orig = entry.value.data[k];
            probe.value_mut(id).data[k] = orig + h;
            let up = eval(&probe, input)?;
            probe.value_mut(id).data[k] = orig - h;
            let down = eval(&probe, input)?;
            probe.value_mut(id).data[k] = orig;
            worst = worst.max(relative_error(analytic[id].data[k], (up - down) / (2.0 * h)));
        }
        max_error = max_error.max(worst);
        report.push((entry.name.clone(), worst));
    }
    let input_error = match (input, xv) {
        (Some(x), Some(v)) => {
            let ga = grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(&x.shape));
            let mut worst: f64 = 0.0;
            let mut probe_x = x.clone();
            for k in 0..x.len() {
                probe_x.data[k] = x.data[k] + h;
                let up = eval(params, Some(&probe_x))?;
                probe_x.data[k] = x.data[k] - h;
                let down = eval(params, Some(&probe_x))?;
                probe_x.data[k] = x.data[k];
                worst = worst.max(relative_error(ga.data[k], (up - down) / (2.0 * h)));
            }
            max_error = max_error.max(worst);
            Some(worst)
        }
        _ => None,
    };
    Ok(GradReport { params: report, input: input_error, max_error, passed: max_error < tol })
}

/// [`grad_check_fn`] for a layer stack followed by `loss_fn`, which maps the
/// stack output to a scalar on the same tape. Dropout masks come from a fresh
/// `rng_factory()` on every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<L, R, G>(layers: &[LayerSpec], params: &ParamStore, x: &Tensor, mode: Mode, loss_fn: L, rng_factory: G, h: f64, tol: f64) -> Result<GradReport>
where
    L: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng,
    G: Fn() -> R,
{
    grad_check_fn(
        params,
        Some(x),
        |tape, store, xv| {
            let mut rng = rng_factory();
            let mut hdn = xv.expect("input is always provided");
            for layer in layers {
                hdn = layer.apply(tape, store, hdn, mode, &mut rng)?;
            }
            loss_fn(tape, hdn)
        },
        h,
        tol,
    )
}

/// Seeded parameters for a whole stack.
pub fn init_layers<R: Rng>(layers: &[LayerSpec], rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for l in layers {
        l.init(&mut store, rng)?;
    }
    Ok(store)
}

/// Squared-sum regularizer over every weight entry of `store` that `tape`
/// has used.
pub fn weight_penalty(tape: &mut Tape, store: &ParamStore) -> Var {
    let weights: Vec<Var> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Weight)
        .map(|(id, _)| tape.param(store, id))
        .collect();
    tape.sum_squares(&weights)
}
