//! Small fully connected networks `R^d -> R` with C^1 hidden activations,
//! exact input gradients, batch parameter gradients and Adam.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! (row-major, `out x in`) followed by the bias vector. The output layer is
//! linear with a single unit.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sigmoid,
    /// `max(0, x)^2`
    Relu2,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu2 => {
                let r = z.max(0.0);
                r * r
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu2 => 2.0 * z.max(0.0),
        }
    }
}

/// Fixed affine map `x -> (x - shift) / scale` applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// From a box given by midpoint and half-width; zero widths map to 1.
    pub fn from_box(mid: &[f64], half_width: &[f64]) -> Self {
        Self {
            shift: mid.to_vec(),
            scale: half_width.iter().map(|h| if *h > 0.0 { *h } else { 1.0 }).collect(),
        }
    }
}

/// Fixed affine map `y -> shift + scale * y` applied after the output layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputScale {
    pub shift: f64,
    pub scale: f64,
}

impl OutputScale {
    /// Mean and standard deviation of `targets`; a zero spread maps to 1.
    pub fn from_targets(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let big = targets.iter().fold(0.0, |m: f64, y| m.max(y.abs()));
        if !(big.is_finite() && big > 0.0) {
            return Self { shift: 0.0, scale: 1.0 };
        }
        let shift = big * targets.iter().map(|y| y / big).sum::<f64>() / n;
        let std = big * (targets.iter().map(|y| ((y - shift) / big).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if std > 1e-12 { std } else { 1.0 };
        Self { shift, scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    widths: Vec<usize>,
    activation: Activation,
    standardization: Option<Standardization>,
    output: Option<OutputScale>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-evaluation buffers, reusable across samples.
#[derive(Debug, Clone)]
pub struct Scratch {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Network {
    /// All-zero parameters.
    pub fn zeros(input_dim: usize, widths: &[usize], activation: Activation) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("input dimension must be positive".into()));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "hidden widths must be non-empty and positive: {widths:?}"
            )));
        }
        let mut net = Self {
            input_dim,
            widths: widths.to_vec(),
            activation,
            standardization: None,
            output: None,
            params: Vec::new(),
            offsets: Vec::new(),
        };
        let mut total = 0;
        for w in net.layer_dims().windows(2) {
            net.offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        net.params = vec![0.0; total];
        Ok(net)
    }

    pub fn with_standardization(mut self, s: Standardization) -> Result<Self> {
        if s.shift.len() != self.input_dim || s.scale.len() != self.input_dim {
            return Err(Error::ShapeMismatch(
                "standardization must match input dimension".into(),
            ));
        }
        if s.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("standardization scale must be positive".into()));
        }
        self.standardization = Some(s);
        Ok(self)
    }

    /// Biases redrawn uniformly on `±1/sqrt(fan_in)` of their layer.
    pub fn with_random_biases(mut self, stream: &RngStream) -> Self {
        let dims = self.layer_dims();
        let mut rng = stream.generator();
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            offset += fan_in * fan_out;
            for b in &mut self.params[offset..offset + fan_out] {
                *b = rng.random_range(-bound..bound);
            }
            offset += fan_out;
        }
        self
    }

    pub fn with_output_scale(mut self, o: OutputScale) -> Result<Self> {
        if !(o.shift.is_finite() && o.scale.is_finite() && o.scale > 0.0) {
            return Err(Error::InvalidParameter(
                "output scale must be finite and positive".into(),
            ));
        }
        self.output = Some(o);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn output_scale(&self) -> Option<OutputScale> {
        self.output
    }

    fn out_factor(&self) -> f64 {
        self.output.map_or(1.0, |o| o.scale)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same layer shapes, activation and input standardization.
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.input_dim == other.input_dim
            && self.widths == other.widths
            && self.activation == other.activation
            && self.standardization == other.standardization
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.widths);
        dims.push(1);
        dims
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            input: vec![0.0; self.input_dim],
            pre: self.widths.iter().map(|w| vec![0.0; *w]).collect(),
            post: self.widths.iter().map(|w| vec![0.0; *w]).collect(),
            delta: self.widths.iter().map(|w| vec![0.0; *w]).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} entries, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Forward pass filling the scratch; returns the output.
    fn run(&self, x: &[f64], s: &mut Scratch) -> f64 {
        match &self.standardization {
            Some(st) => {
                for k in 0..self.input_dim {
                    s.input[k] = (x[k] - st.shift[k]) / st.scale[k];
                }
            }
            None => s.input.copy_from_slice(x),
        }
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        for (l, &width) in self.widths.iter().enumerate() {
            let w = &self.params[offset..offset + width * fan_in];
            let b = &self.params[offset + width * fan_in..offset + width * fan_in + width];
            let prev: &[f64] = if l == 0 { &s.input } else { &s.post[l - 1] };
            let cur = &mut s.pre[l];
            for j in 0..width {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                cur[j] = b[j] + row.iter().zip(prev).map(|(a, c)| a * c).sum::<f64>();
            }
            for j in 0..width {
                s.post[l][j] = self.activation.apply(s.pre[l][j]);
            }
            offset += width * fan_in + width;
            fan_in = width;
        }
        let w = &self.params[offset..offset + fan_in];
        let b = self.params[offset + fan_in];
        let y = b + w
            .iter()
            .zip(&s.post[self.widths.len() - 1])
            .map(|(a, c)| a * c)
            .sum::<f64>();
        match self.output {
            Some(o) => o.shift + o.scale * y,
            None => y,
        }
    }

    /// Backward pass for the output seed `seed`; fills `delta` with the
    /// gradient with respect to each hidden pre-activation.
    fn backward(&self, seed: f64, s: &mut Scratch) {
        let seed = seed * self.out_factor();
        let layers = self.widths.len();
        let offsets = &self.offsets;
        let out_w = &self.params[offsets[layers]..offsets[layers] + self.widths[layers - 1]];
        for j in 0..self.widths[layers - 1] {
            s.delta[layers - 1][j] = seed * out_w[j] * self.activation.derivative(s.pre[layers - 1][j]);
        }
        for l in (0..layers - 1).rev() {
            let fan_in = self.widths[l];
            let width = self.widths[l + 1];
            let w = &self.params[offsets[l + 1]..offsets[l + 1] + width * fan_in];
            let (lower, upper) = s.delta.split_at_mut(l + 1);
            let next = &upper[0];
            for k in 0..fan_in {
                let mut acc = 0.0;
                for j in 0..width {
                    acc += w[j * fan_in + k] * next[j];
                }
                lower[l][k] = acc * self.activation.derivative(s.pre[l][k]);
            }
        }
    }

    fn input_gradient_from_delta(&self, s: &Scratch, out: &mut [f64]) {
        let fan_in = self.input_dim;
        let width = self.widths[0];
        let w = &self.params[..width * fan_in];
        for k in 0..fan_in {
            let mut acc = 0.0;
            for j in 0..width {
                acc += w[j * fan_in + k] * s.delta[0][j];
            }
            out[k] = match &self.standardization {
                Some(st) => acc / st.scale[k],
                None => acc,
            };
        }
    }

    fn accumulate_param_gradient(&self, seed: f64, s: &Scratch, acc: &mut [f64]) {
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        for (l, &width) in self.widths.iter().enumerate() {
            let prev: &[f64] = if l == 0 { &s.input } else { &s.post[l - 1] };
            for j in 0..width {
                let d = s.delta[l][j];
                let row = &mut acc[offset + j * fan_in..offset + (j + 1) * fan_in];
                for (r, p) in row.iter_mut().zip(prev) {
                    *r += d * p;
                }
            }
            let boff = offset + width * fan_in;
            for j in 0..width {
                acc[boff + j] += s.delta[l][j];
            }
            offset += width * fan_in + width;
            fan_in = width;
        }
        let seed = seed * self.out_factor();
        let last = &s.post[self.widths.len() - 1];
        for (r, p) in acc[offset..offset + fan_in].iter_mut().zip(last) {
            *r += seed * p;
        }
        acc[offset + fan_in] += seed;
    }

    /// Value without input validation.
    pub fn value_with(&self, x: &[f64], s: &mut Scratch) -> f64 {
        self.run(x, s)
    }

    /// Value and input gradient without input validation.
    pub fn value_and_gradient_with(&self, x: &[f64], s: &mut Scratch, grad: &mut [f64]) -> f64 {
        let v = self.run(x, s);
        self.backward(1.0, s);
        self.input_gradient_from_delta(s, grad);
        v
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.run(x, &mut self.scratch()))
    }

    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = vec![0.0; self.input_dim];
        self.value_and_gradient_with(x, &mut self.scratch(), &mut g);
        Ok(g)
    }

    /// Mean over the batch of `residual_grads[m] * dU(x_m)/dparams`, where
    /// `inputs` holds the samples row by row.
    pub fn backprop_params(&self, inputs: &[f64], residual_grads: &[f64]) -> Result<Vec<f64>> {
        let n = residual_grads.len();
        if n == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if inputs.len() != n * self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for {n} samples of dimension {}",
                inputs.len(),
                self.input_dim
            )));
        }
        let d = self.input_dim;
        let mut g = par::sum_vectors_with(
            n,
            self.param_count(),
            || self.scratch(),
            |m, s, acc| {
                self.run(&inputs[m * d..(m + 1) * d], s);
                let r = residual_grads[m];
                self.backward(r, s);
                self.accumulate_param_gradient(r, s, acc);
            },
        );
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    /// `mean_m (U(x_m) - y_m)^2` and its parameter gradient in one pass.
    pub fn mse_loss_and_gradient(&self, inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = targets.len();
        if n == 0 || inputs.len() != n * self.input_dim {
            return Err(Error::ShapeMismatch("inputs and targets disagree".into()));
        }
        let d = self.input_dim;
        let p = self.param_count();
        // slot p carries the loss
        let mut g = par::sum_vectors_with(
            n,
            p + 1,
            || self.scratch(),
            |m, s, acc| {
                let out = self.run(&inputs[m * d..(m + 1) * d], s);
                let resid = out - targets[m];
                let r = 2.0 * resid;
                self.backward(r, s);
                self.accumulate_param_gradient(r, s, &mut acc[..p]);
                acc[p] += resid * resid;
            },
        );
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        let loss = g.pop().expect("loss slot");
        Ok((loss, g))
    }

    pub fn to_file(&self) -> NetworkFile {
        let enc = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect();
        NetworkFile {
            input_dim: self.input_dim,
            widths: self.widths.clone(),
            activation: self.activation,
            standardization: self.standardization.as_ref().map(|s| StandardizationFile {
                shift: enc(&s.shift),
                scale: enc(&s.scale),
            }),
            output: self.output.map(|o| OutputScaleFile {
                shift: format!("{:?}", o.shift),
                scale: format!("{:?}", o.scale),
            }),
            params: enc(&self.params),
        }
    }

    pub fn from_file(file: &NetworkFile) -> Result<Self> {
        let dec = |v: &[String]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::config("network.params", format!("`{s}`: {e}")))
                })
                .collect()
        };
        let mut net = Network::zeros(file.input_dim, &file.widths, file.activation)?;
        let params = dec(&file.params)?;
        if params.len() != net.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters stored, architecture needs {}",
                params.len(),
                net.param_count()
            )));
        }
        net.params = params;
        if let Some(s) = &file.standardization {
            net = net.with_standardization(Standardization {
                shift: dec(&s.shift)?,
                scale: dec(&s.scale)?,
            })?;
        }
        if let Some(o) = &file.output {
            let v = dec(&[o.shift.clone(), o.scale.clone()])?;
            net = net.with_output_scale(OutputScale {
                shift: v[0],
                scale: v[1],
            })?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(&serde_json::from_str(&text)?)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
pub fn init_network(d: usize, widths: &[usize], activation: Activation, stream: &RngStream) -> Result<Network> {
    let mut net = Network::zeros(d, widths, activation)?;
    let dims = net.layer_dims();
    let mut rng = stream.generator();
    let mut offset = 0;
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in &mut net.params[offset..offset + fan_in * fan_out] {
            *p = rng.random_range(-bound..bound);
        }
        offset += fan_in * fan_out + fan_out;
    }
    Ok(net)
}

/// On-disk form; floats are decimal strings that parse back bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub standardization: Option<StandardizationFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputScaleFile>,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScaleFile {
    pub shift: String,
    pub scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationFile {
    pub shift: Vec<String>,
    pub scale: Vec<String>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    learning_rate: f64,
    /// `(iteration, multiplier)`: after update number `iteration` the rate
    /// is multiplied by `multiplier`.
    schedule: Vec<(u64, f64)>,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64, schedule: Vec<(u64, f64)>) -> Self {
        Self {
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            learning_rate,
            schedule,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} parameters got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grads[k];
            self.first[k] = self.beta1 * self.first[k] + (1.0 - self.beta1) * g;
            self.second[k] = self.beta2 * self.second[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[k] / c1;
            let v_hat = self.second[k] / c2;
            params[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        for &(at, mult) in &self.schedule {
            if at == self.step {
                self.learning_rate *= mult;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_net(activation: Activation) -> Network {
        // 1 -> 1 -> 1 with unit weights
        let mut n = Network::zeros(1, &[1], activation).unwrap();
        n.params_mut().copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
        n
    }

    #[test]
    fn parameter_count() {
        let n = Network::zeros(4, &[14, 14], Activation::Softplus).unwrap();
        assert_eq!(n.param_count(), 14 * 4 + 14 + 14 * 14 + 14 + 14 + 1);
        assert_eq!(n.param_count(), 295);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Network::zeros(2, &[], Activation::Sigmoid).is_err());
        assert!(Network::zeros(2, &[3, 0], Activation::Sigmoid).is_err());
        let n = Network::zeros(2, &[3], Activation::Sigmoid).unwrap();
        assert!(matches!(n.forward(&[1.0, f64::NAN]), Err(Error::NonFiniteInput)));
        assert!(n.forward(&[1.0]).is_err());
        assert!(n.backprop_params(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(n.backprop_params(&[], &[]).is_err());
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut n = Network::zeros(3, &[5, 4], Activation::Softplus).unwrap();
        let last = n.param_count() - 1;
        n.params_mut()[last] = 0.37;
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 5.0]] {
            assert_eq!(n.forward(&x).unwrap(), 0.37);
            assert_eq!(n.grad_input(&x).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn fresh_network_at_origin_matches_hand_composition() {
        let n = init_network(2, &[3, 3], Activation::Softplus, &RngStream::new(5, 0)).unwrap();
        let p = n.params();
        let ln2 = std::f64::consts::LN_2;
        // first layer pre-activations vanish, so every hidden unit is ln 2
        let w1 = &p[9..18];
        let z2: Vec<f64> = (0..3).map(|j| (0..3).map(|k| w1[j * 3 + k] * ln2).sum()).collect();
        let a2: Vec<f64> = z2.iter().map(|z| (1.0f64 + z.exp()).ln()).collect();
        let w_out = &p[21..24];
        let expected: f64 = w_out.iter().zip(&a2).map(|(w, a)| w * a).sum::<f64>() + p[24];
        assert!((n.forward(&[0.0, 0.0]).unwrap() - expected).abs() < 1e-14);
        assert!((Activation::Softplus.apply(0.0) - ln2).abs() < 1e-15);
    }

    #[test]
    fn output_scale_of_huge_targets_is_finite() {
        let o = OutputScale::from_targets(&[1e300, -1e300, 1e300, -1e300]);
        assert_eq!((o.shift, o.scale), (0.0, 1e300));
        let c = OutputScale::from_targets(&[2.5; 4]);
        assert_eq!((c.shift, c.scale), (2.5, 1.0));
    }

    #[test]
    fn random_biases_leave_weights_alone() {
        let s = RngStream::new(3, 4);
        let a = init_network(4, &[14, 14], Activation::Sigmoid, &s).unwrap();
        let b = a.clone().with_random_biases(&s.derive(9));
        assert_eq!(b, a.clone().with_random_biases(&s.derive(9)));
        let bias_slots = [
            (56, 70, 0.5),
            (266, 280, 1.0 / 14f64.sqrt()),
            (294, 295, 1.0 / 14f64.sqrt()),
        ];
        let mut k = 0;
        for (lo, hi, bound) in bias_slots {
            assert_eq!(a.params()[k..lo], b.params()[k..lo]);
            assert!(b.params()[lo..hi].iter().all(|v| v.abs() <= bound && *v != 0.0));
            k = hi;
        }
        assert_eq!(k, a.param_count());
    }

    #[test]
    fn sigmoid_unit_net() {
        assert_eq!(hand_net(Activation::Sigmoid).forward(&[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = RngStream::new(3, 4);
        let a = init_network(4, &[14, 14], Activation::Sigmoid, &s).unwrap();
        let b = init_network(4, &[14, 14], Activation::Sigmoid, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.params()[..56].iter().all(|w| w.abs() <= 0.5));
        assert!(a.params()[56..70].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn single_unit_gradients_by_hand() {
        // U(x) = v * s(w x + b) + c, sigmoid s
        let (w, b, v, c) = (0.7, -0.2, 1.3, 0.1);
        let mut n = Network::zeros(1, &[1], Activation::Sigmoid).unwrap();
        n.params_mut().copy_from_slice(&[w, b, v, c]);
        let x = 0.9;
        let r = 0.6;
        let z = w * x + b;
        let s = 1.0 / (1.0 + (-z).exp());
        let ds = s * (1.0 - s);
        let g = n.backprop_params(&[x], &[r]).unwrap();
        let expected = [r * v * ds * x, r * v * ds, r * s, r];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
        assert!((n.grad_input(&[x]).unwrap()[0] - v * ds * w).abs() < 1e-14);
    }

    #[test]
    fn zero_residuals_zero_gradient() {
        let n = init_network(3, &[4], Activation::Relu2, &RngStream::new(1, 1)).unwrap();
        let g = n
            .backprop_params(&[0.1, 0.2, 0.3, -1.0, 0.5, 2.0], &[0.0, 0.0])
            .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardization_enters_gradient() {
        let n = init_network(2, &[6], Activation::Softplus, &RngStream::new(2, 2)).unwrap();
        let st = n
            .clone()
            .with_standardization(Standardization::from_box(&[1.0, -1.0], &[2.0, 0.5]))
            .unwrap();
        let x = [0.4, 0.3];
        let y = [(0.4 - 1.0) / 2.0, (0.3 + 1.0) / 0.5];
        assert_eq!(st.forward(&x).unwrap(), n.forward(&y).unwrap());
        let gs = st.grad_input(&x).unwrap();
        let gn = n.grad_input(&y).unwrap();
        assert!((gs[0] - gn[0] / 2.0).abs() < 1e-15);
        assert!((gs[1] - gn[1] / 0.5).abs() < 1e-15);
    }

    #[test]
    fn mse_gradient_matches_backprop() {
        let n = init_network(2, &[5, 5], Activation::Sigmoid, &RngStream::new(8, 0)).unwrap();
        let xs = [0.1, 0.2, -0.5, 0.7, 1.5, -1.0];
        let ys = [0.3, -0.1, 0.9];
        let (loss, g) = n.mse_loss_and_gradient(&xs, &ys).unwrap();
        let outs: Vec<f64> = (0..3).map(|m| n.forward(&xs[2 * m..2 * m + 2]).unwrap()).collect();
        let expected_loss = outs.iter().zip(ys).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / 3.0;
        assert!((loss - expected_loss).abs() < 1e-15);
        let r: Vec<f64> = outs.iter().zip(ys).map(|(o, y)| 2.0 * (o - y)).collect();
        let g2 = n.backprop_params(&xs, &r).unwrap();
        for (a, b) in g.iter().zip(g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let n = init_network(3, &[4, 2], Activation::Relu2, &RngStream::new(4, 4))
            .unwrap()
            .with_standardization(Standardization::from_box(&[0.1, 0.2, 0.3], &[1.0 / 3.0, 2.0, 0.7]))
            .unwrap();
        let text = serde_json::to_string(&n.to_file()).unwrap();
        let back = Network::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, n);
        assert!(back
            .params()
            .iter()
            .zip(n.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_zero_gradient_first_step() {
        let mut st = AdamState::new(2, 0.01, vec![]);
        let mut p = [1.5, -0.5];
        st.adam_step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [1.5, -0.5]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_single_step_by_hand() {
        let mut st = AdamState::new(1, 0.01, vec![]);
        let mut p = [0.0];
        st.adam_step(&mut p, &[1.0]).unwrap();
        let m_hat = (1.0 - 0.9) * 1.0 / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * 1.0 / (1.0 - 0.999);
        let expected = -0.01 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn adam_schedule_decays_after_crossing() {
        let mut st = AdamState::new(1, 0.01, vec![(2000, 0.1), (4000, 0.1)]);
        let mut p = [0.0];
        for _ in 0..1999 {
            st.adam_step(&mut p, &[0.1]).unwrap();
        }
        assert_eq!(st.learning_rate(), 0.01);
        st.adam_step(&mut p, &[0.1]).unwrap();
        assert_eq!(st.learning_rate(), 0.01 * 0.1);
        assert!(st.adam_step(&mut p, &[0.1, 0.2]).is_err());
    }
}
