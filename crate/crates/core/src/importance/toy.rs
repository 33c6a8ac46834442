//! Desk-scale dense network with hand-written reverse mode.
//!
//! Parameters are named `layers.{i}.weight` (`[out, in]`, row-major) and
//! `layers.{i}.bias` (`[out]`). The loss is either mean-squared error over the
//! output vector or softmax cross-entropy on the output logits.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use rayon::prelude::*;

use super::{average_abs_gradients, CalibrationSet, GradientMap, ImportanceMap, Sample, Target};
use crate::checkpoint::{Dtype, WeightMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    #[serde(rename = "mse")]
    MeanSquaredError,
    #[serde(rename = "cross_entropy")]
    CrossEntropy,
}

impl LossKind {
    fn as_str(self) -> &'static str {
        match self {
            LossKind::MeanSquaredError => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let w = self.weight.data();
        let n_in = self.inputs();
        (0..self.outputs())
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = row.iter().zip(x).fold(self.bias.data()[o], |acc, (&a, &b)| acc + a * b);
                self.activation.apply(z)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    layers: Vec<DenseLayer<T>>,
    pub loss: LossKind,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layers.{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layers.{layer}.bias")
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(layers: Vec<DenseLayer<T>>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("toy model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.outputs()] {
                return Err(Error::Validation(format!("layer {i}: weight must be [out, in] and bias [out]")));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Validation(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.inputs(),
                    i - 1,
                    layers[i - 1].outputs()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Validation(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers, loss })
    }

    /// Uniform initialization in `[-scale, scale]`. `dims` lists layer widths
    /// from input to output; `activations` has one entry per layer.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        loss: LossKind,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Validation(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64_rne(rng.random_range(-scale..=scale))).collect() };
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| DenseLayer {
                weight: Tensor::new(vec![w[1], w[0]], draw(w[0] * w[1])).unwrap(),
                bias: Tensor::from_vec(draw(w[1])),
                activation,
            })
            .collect();
        ToyModel::new(layers, loss)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Parameters by name in canonical order.
    pub fn params(&self) -> BTreeMap<String, &Tensor<T>> {
        let mut out = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(weight_name(i), &l.weight);
            out.insert(bias_name(i), &l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (i, kind) = parse_param_name(name)?;
        let layer = self.layers.get_mut(i)?;
        Some(if kind == "weight" { &mut layer.weight } else { &mut layer.bias })
    }

    /// Apply `f(name, values)` to every parameter tensor.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&weight_name(i), l.weight.data_mut());
            f(&bias_name(i), l.bias.data_mut());
        }
    }

    fn check_sample(&self, sample: &Sample<T>) -> Result<()> {
        if sample.input.len() != self.input_dim() {
            return Err(Error::Validation(format!(
                "sample has {} inputs, model expects {}",
                sample.input.len(),
                self.input_dim()
            )));
        }
        match (&sample.target, self.loss) {
            (Target::Values(t), LossKind::MeanSquaredError) if t.len() == self.output_dim() => Ok(()),
            (Target::Class(c), LossKind::CrossEntropy) if *c < self.output_dim() => Ok(()),
            _ => Err(Error::Validation(format!(
                "sample target does not fit a {}-output {} model",
                self.output_dim(),
                self.loss.as_str()
            ))),
        }
    }

    /// Activations of every layer, input first.
    fn activations(&self, input: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    fn loss_and_output_grad(&self, output: &[T], target: &Target<T>) -> (T, Vec<T>) {
        match target {
            Target::Values(t) => {
                let n = T::from_usize(output.len()).unwrap();
                let loss = output.iter().zip(t).map(|(&y, &t)| (y - t) * (y - t)).sum::<T>() / n;
                let two = T::lit(2.0);
                let grad = output.iter().zip(t).map(|(&y, &t)| two * (y - t) / n).collect();
                (loss, grad)
            }
            Target::Class(c) => {
                let max = output.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = output.iter().map(|&z| (z - max).exp()).collect();
                let sum: T = exps.iter().copied().sum();
                let loss = sum.ln() - (output[*c] - max);
                let grad = exps
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| e / sum - if i == *c { T::one() } else { T::zero() })
                    .collect();
                (loss, grad)
            }
        }
    }

    pub fn forward_loss(&self, sample: &Sample<T>) -> Result<T> {
        self.check_sample(sample)?;
        let acts = self.activations(&sample.input);
        Ok(self.loss_and_output_grad(acts.last().unwrap(), &sample.target).0)
    }

    pub fn mean_loss(&self, samples: &[Sample<T>]) -> Result<T> {
        let mut total = T::zero();
        for s in samples {
            total += self.forward_loss(s)?;
        }
        Ok(total / T::from_usize(samples.len().max(1)).unwrap())
    }

    /// Exact reverse-mode gradient of [`forward_loss`](Self::forward_loss).
    pub fn backward(&self, sample: &Sample<T>) -> Result<GradientMap<T>> {
        self.check_sample(sample)?;
        let acts = self.activations(&sample.input);
        let (_, mut upstream) = self.loss_and_output_grad(acts.last().unwrap(), &sample.target);
        let mut grads = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[i + 1];
            let inp = &acts[i];
            let delta: Vec<T> = upstream
                .iter()
                .zip(out)
                .map(|(&g, &y)| g * layer.activation.derivative_from_output(y))
                .collect();
            let n_in = layer.inputs();
            let mut dw = Vec::with_capacity(delta.len() * n_in);
            for &d in &delta {
                dw.extend(inp.iter().map(|&x| d * x));
            }
            let w = layer.weight.data();
            upstream = (0..n_in)
                .map(|j| delta.iter().enumerate().fold(T::zero(), |acc, (o, &d)| acc + w[o * n_in + j] * d))
                .collect();
            grads.insert(weight_name(i), Tensor::new(vec![delta.len(), n_in], dw).unwrap());
            grads.insert(bias_name(i), Tensor::from_vec(delta));
        }
        Ok(grads)
    }

    /// Gradient of the mean loss over `samples`.
    pub fn mean_gradient(&self, samples: &[Sample<T>]) -> Result<GradientMap<T>> {
        let per_sample: Vec<GradientMap<T>> = samples.par_iter().map(|s| self.backward(s)).collect::<Result<_>>()?;
        let n = T::from_usize(samples.len()).unwrap();
        let mut iter = per_sample.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::Precondition("no samples".into()))?;
        for g in iter {
            for (name, t) in g {
                let a = acc.get_mut(&name).unwrap();
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += *y;
                }
            }
        }
        for t in acc.values_mut() {
            for x in t.data_mut() {
                *x /= n;
            }
        }
        Ok(acc)
    }

    /// Store as a checkpoint; activations and loss travel in metadata.
    pub fn to_weight_map(&self, dtype: Dtype) -> Result<WeightMap> {
        let mut map = WeightMap::new();
        for (name, t) in self.params() {
            map.insert(name, t, dtype)?;
        }
        let acts: Vec<&str> = self.layers.iter().map(|l| l.activation.as_str()).collect();
        map.metadata_mut().insert("activations".into(), acts.join(","));
        map.metadata_mut().insert("loss".into(), self.loss.as_str().into());
        Ok(map)
    }

    /// Rebuild from a checkpoint. `template` supplies activations and loss when
    /// the map carries no metadata (e.g. merge outputs).
    pub fn from_weight_map(map: &WeightMap, template: Option<&ToyModel<T>>) -> Result<Self> {
        let n_layers = (0..).take_while(|&i| map.contains(&weight_name(i))).count();
        if n_layers == 0 {
            return Err(Error::Validation("checkpoint has no layers.0.weight; not a toy model".into()));
        }
        let activations: Vec<Activation> = match (map.metadata().get("activations"), template) {
            (Some(s), _) => s
                .split(',')
                .map(|a| Activation::parse(a).ok_or_else(|| Error::Validation(format!("unknown activation {a:?}"))))
                .collect::<Result<_>>()?,
            (None, Some(t)) => t.layers.iter().map(|l| l.activation).collect(),
            (None, None) => return Err(Error::Validation("toy checkpoint lacks activations metadata".into())),
        };
        if activations.len() != n_layers {
            return Err(Error::Validation(format!(
                "{} activations for {n_layers} layers",
                activations.len()
            )));
        }
        let loss = match (map.metadata().get("loss").map(String::as_str), template) {
            (Some("mse"), _) => LossKind::MeanSquaredError,
            (Some("cross_entropy"), _) => LossKind::CrossEntropy,
            (Some(other), _) => return Err(Error::Validation(format!("unknown loss {other:?}"))),
            (None, Some(t)) => t.loss,
            (None, None) => return Err(Error::Validation("toy checkpoint lacks loss metadata".into())),
        };
        let layers = activations
            .into_iter()
            .enumerate()
            .map(|(i, activation)| {
                Ok(DenseLayer {
                    weight: map.read_tensor(&weight_name(i))?,
                    bias: map.read_tensor(&bias_name(i))?,
                    activation,
                })
            })
            .collect::<Result<_>>()?;
        ToyModel::new(layers, loss)
    }
}

fn parse_param_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, kind) = rest.split_once('.')?;
    matches!(kind, "weight" | "bias").then_some(())?;
    Some((idx.parse().ok()?, kind))
}

/// Central differences `(L(θ + eps·e_i) − L(θ − eps·e_i)) / (2·eps)` for every
/// parameter.
pub fn finite_diff_gradient<T: Scalar>(model: &ToyModel<T>, sample: &Sample<T>, eps: T) -> Result<GradientMap<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {eps}")));
    }
    model.check_sample(sample)?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let two_eps = eps + eps;
    let mut grads = BTreeMap::new();
    for name in names {
        let base = model.params()[&name].clone();
        let mut data = Vec::with_capacity(base.numel());
        let mut probe = model.clone();
        for i in 0..base.numel() {
            let p = probe.param_mut(&name).unwrap();
            p.data_mut()[i] = base.data()[i] + eps;
            let plus = probe.forward_loss(sample)?;
            probe.param_mut(&name).unwrap().data_mut()[i] = base.data()[i] - eps;
            let minus = probe.forward_loss(sample)?;
            probe.param_mut(&name).unwrap().data_mut()[i] = base.data()[i];
            data.push((plus - minus) / two_eps);
        }
        grads.insert(name, Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(grads)
}

/// Importance of `model` on `calib`: mean |gradient| at the model's own
/// parameters. Per-sample gradients run in parallel; accumulation follows the
/// sample order.
pub fn toy_importance<T: Scalar>(model: &ToyModel<T>, calib: &CalibrationSet<T>) -> Result<ImportanceMap> {
    let grads: Vec<GradientMap<T>> = calib
        .samples()
        .par_iter()
        .map(|s| model.backward(s))
        .collect::<Result<_>>()?;
    let mut imp = average_abs_gradients(&grads)?;
    imp.provenance.calibration_id = calib.id.clone();
    Ok(imp)
}
