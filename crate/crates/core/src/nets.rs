//! Learnable networks: parameter storage, MLPs, the full network bundle and
//! a finite-difference gradient checker.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{CategoricalDist, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::rng::{Purpose, RngStream};

/// A named parameter with its accumulated gradient.
///
/// Weights are stored `fan_in × fan_out` so a layer is `X · W + b`; biases
/// are `1 × fan_out` with logical shape `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    fn new(name: String, shape: Vec<usize>, values: Matrix) -> Self {
        let grad = Array2::zeros(values.dim());
        Self {
            name,
            shape,
            values,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, shape: Vec<usize>, values: Matrix) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.tensors.push(ParamTensor::new(name, shape, values));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &ParamTensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut ParamTensor {
        &mut self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (index, g) in grads.iter() {
            self.tensors[index].grad += g;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
    /// First half mean, second half log-variance.
    SplitGaussian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, head: Head) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::contract(format!("bad layer sizes {sizes:?}")));
        }
        if head == Head::SplitGaussian && sizes[sizes.len() - 1] % 2 != 0 {
            return Err(Error::contract("split-gaussian head needs an even output width"));
        }
        Ok(Self {
            sizes,
            hidden,
            head,
        })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    weight: usize,
    bias: usize,
}

/// Output of a head evaluated outside a training graph.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Vector(Vec<f64>),
    Gaussian(DiagGaussian),
    Categorical(CategoricalDist),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    fn build(store: &mut ParamStore, prefix: &str, spec: MlpSpec, rng: &mut RngStream) -> Self {
        let mut layers = Vec::with_capacity(spec.sizes.len() - 1);
        for (i, pair) in spec.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| (2.0 * rng.uniform() - 1.0) * bound);
            let weight = store.add(format!("{prefix}.{i}.weight"), vec![fan_in, fan_out], w);
            let bias = store.add(
                format!("{prefix}.{i}.bias"),
                vec![fan_out],
                Array2::zeros((1, fan_out)),
            );
            layers.push(Linear { weight, bias });
        }
        Self { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Records the network up to (not including) its head.
    pub fn raw_on_tape(&self, params: &ParamStore, tape: &mut Tape, input: Var) -> Result<Var> {
        let (_, width) = tape.shape(input);
        if width != self.spec.input_width() {
            return Err(Error::contract(format!(
                "network expects input width {}, got {width}",
                self.spec.input_width()
            )));
        }
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight, &params.tensor(layer.weight).values);
            let b = tape.param(layer.bias, &params.tensor(layer.bias).values);
            let rows = tape.shape(x).0;
            let xw = tape.matmul(x, w)?;
            let bb = tape.broadcast_rows(b, rows)?;
            x = tape.add(xw, bb)?;
            if i < last {
                x = match self.spec.hidden {
                    Activation::Relu => tape.relu(x),
                    Activation::Tanh => tape.tanh(x),
                };
            }
        }
        Ok(x)
    }

    /// Records the network including an elementwise head. Softmax heads
    /// return log-probabilities; split-gaussian heads return the raw output
    /// (use [`split_gaussian`]).
    pub fn on_tape(&self, params: &ParamStore, tape: &mut Tape, input: Var) -> Result<Var> {
        let raw = self.raw_on_tape(params, tape, input)?;
        Ok(match self.spec.head {
            Head::Linear | Head::SplitGaussian => raw,
            Head::Relu => tape.relu(raw),
            Head::Sigmoid => tape.sigmoid(raw),
            Head::Softmax => tape.log_softmax_rows(raw),
        })
    }

    /// Single-input evaluation.
    pub fn forward(&self, params: &ParamStore, input: &[f64]) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let x = tape.row(input);
        let out = self.on_tape(params, &mut tape, x)?;
        let values: Vec<f64> = tape.value(out).iter().copied().collect();
        Ok(match self.spec.head {
            Head::Linear | Head::Relu | Head::Sigmoid => HeadOutput::Vector(values),
            Head::Softmax => HeadOutput::Categorical(softmax_from_log(&values)?),
            Head::SplitGaussian => {
                let m = values.len() / 2;
                HeadOutput::Gaussian(DiagGaussian::new(
                    values[..m].to_vec(),
                    values[m..].to_vec(),
                )?)
            }
        })
    }
}

/// Probabilities from log-probabilities, renormalised against rounding.
pub fn softmax_from_log(log_probs: &[f64]) -> Result<CategoricalDist> {
    let p: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let total: f64 = p.iter().sum();
    CategoricalDist::new(p.into_iter().map(|v| v / total).collect())
}

/// Splits a `rows × 2m` output into `(mean, clamped log_var)`.
pub fn split_gaussian(tape: &mut Tape, raw: Var) -> Result<(Var, Var)> {
    let width = tape.shape(raw).1;
    if width % 2 != 0 {
        return Err(Error::contract("split-gaussian output must have even width"));
    }
    let m = width / 2;
    let mean = tape.slice_cols(raw, 0, m)?;
    let lv = tape.slice_cols(raw, m, width)?;
    let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok((mean, lv))
}

/// Latent and data dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub data_dim: usize,
    pub d_local: usize,
    pub g_global: usize,
    pub k: usize,
    /// Width of every hidden layer (256 in the reference architecture).
    pub hidden: usize,
}

impl ModelDims {
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(data_dim: usize, d_local: usize, g_global: usize, k: usize) -> Self {
        Self {
            data_dim,
            d_local,
            g_global,
            k,
            hidden: Self::DEFAULT_HIDDEN,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.data_dim, self.d_local, self.g_global, self.k, self.hidden];
        if all.contains(&0) {
            return Err(Error::contract(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Every learnable function of the model:
///
/// * `h`: pre-encoder `D → H`, ReLU.
/// * `phi_z`: `H → 2d` split-gaussian, the local posterior `q(z|x)`.
/// * `phi_d`: `d → H → K` tanh/softmax, the component posterior `q(d|z)`.
/// * `phi_beta`: `H + K → 2g` split-gaussian, per-sample global contribution.
/// * `theta_z[k]`: `g → H → 2d` split-gaussian, one prior network per component.
/// * `theta_x`: `d + g → H → D` ReLU/sigmoid, the decoder mean.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle {
    pub dims: ModelDims,
    pub params: ParamStore,
    pub h: Mlp,
    pub phi_z: Mlp,
    pub phi_d: Mlp,
    pub phi_beta: Mlp,
    pub theta_z: Vec<Mlp>,
    pub theta_x: Mlp,
}

/// Glorot-uniform weights and zero biases, drawn from the seed's init substream.
pub fn init_bundle(dims: ModelDims, seed: u64) -> Result<NetworkBundle> {
    dims.validate()?;
    let ModelDims {
        data_dim,
        d_local: d,
        g_global: g,
        k,
        hidden,
    } = dims;
    let mut rng = RngStream::substream(seed, Purpose::Init, 0);
    let mut store = ParamStore::default();
    use Activation::*;
    let h = Mlp::build(&mut store, "h", MlpSpec::new(vec![data_dim, hidden], Relu, Head::Relu)?, &mut rng);
    let phi_z = Mlp::build(
        &mut store,
        "phi_z",
        MlpSpec::new(vec![hidden, 2 * d], Relu, Head::SplitGaussian)?,
        &mut rng,
    );
    let phi_d = Mlp::build(
        &mut store,
        "phi_d",
        MlpSpec::new(vec![d, hidden, k], Tanh, Head::Softmax)?,
        &mut rng,
    );
    let phi_beta = Mlp::build(
        &mut store,
        "phi_beta",
        MlpSpec::new(vec![hidden + k, 2 * g], Relu, Head::SplitGaussian)?,
        &mut rng,
    );
    let theta_z = (0..k)
        .map(|i| {
            Ok(Mlp::build(
                &mut store,
                &format!("theta_z.{i}"),
                MlpSpec::new(vec![g, hidden, 2 * d], Tanh, Head::SplitGaussian)?,
                &mut rng,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let theta_x = Mlp::build(
        &mut store,
        "theta_x",
        MlpSpec::new(vec![d + g, hidden, data_dim], Relu, Head::Sigmoid)?,
        &mut rng,
    );
    Ok(NetworkBundle {
        dims,
        params: store,
        h,
        phi_z,
        phi_d,
        phi_beta,
        theta_z,
        theta_x,
    })
}

impl NetworkBundle {
    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(dims: ModelDims) -> Result<Self> {
        let mut b = init_bundle(dims, 0)?;
        for t in b.params.iter_mut() {
            t.values.fill(0.0);
        }
        Ok(b)
    }

    pub fn k(&self) -> usize {
        self.dims.k
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_len()
    }

    /// Multiplies every weight (not bias) by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        for t in self.params.iter_mut().filter(|t| t.name.ends_with(".weight")) {
            t.values *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Fraction of coordinates with relative error ≤ `tolerance`.
    pub fraction_within: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Step and denominator floor for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// `|a - n| / max(|a| + |n|, floor)`; keeps exact zeros from dividing by zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares tape gradients with central finite differences on every
/// parameter coordinate. `loss` must be deterministic (fixed noise). The
/// check passes when the mean relative error is strictly below `tolerance`.
pub fn gradient_check<F>(
    bundle: &mut NetworkBundle,
    loss: F,
    tolerance: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&NetworkBundle) -> Result<(Tape, Var)>,
{
    let (mut tape, l) = loss(bundle)?;
    let grads = tape.backward(l)?;
    let eval = |b: &NetworkBundle| -> Result<f64> {
        let (t, v) = loss(b)?;
        Ok(t.scalar(v))
    };

    let mut tensors = Vec::with_capacity(bundle.params.len());
    let mut all_max = 0.0_f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut within = 0usize;
    for index in 0..bundle.params.len() {
        let n = bundle.params.tensor(index).len();
        let zeros = Array2::zeros(bundle.params.tensor(index).values.dim());
        let analytic = grads.get(index).unwrap_or(&zeros).clone();
        let (mut t_max, mut t_sum) = (0.0_f64, 0.0);
        for c in 0..n {
            let original = bundle.params.tensor(index).values.as_slice().expect("contiguous")[c];
            let set = |b: &mut NetworkBundle, v: f64| {
                b.params.tensor_mut(index).values.as_slice_mut().expect("contiguous")[c] = v;
            };
            set(bundle, original + options.step);
            let plus = eval(bundle)?;
            set(bundle, original - options.step);
            let minus = eval(bundle)?;
            set(bundle, original);
            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.as_slice().expect("contiguous")[c];
            let rel = relative_error(a, numeric, options.floor);
            t_max = t_max.max(rel);
            t_sum += rel;
            if rel <= tolerance {
                within += 1;
            }
        }
        all_max = all_max.max(t_max);
        total += t_sum;
        count += n;
        tensors.push(TensorCheck {
            name: bundle.params.tensor(index).name.clone(),
            max_rel: t_max,
            mean_rel: t_sum / n.max(1) as f64,
            coordinates: n,
        });
    }
    let mean_rel = total / count.max(1) as f64;
    Ok(GradCheckReport {
        tensors,
        max_rel: all_max,
        mean_rel,
        fraction_within: within as f64 / count.max(1) as f64,
        tolerance,
        passed: mean_rel < tolerance,
    })
}
