//! Small fully connected networks on a flat parameter vector, with
//! hand-written reverse mode and first-order optimizers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layers with `activation` between them and a linear last layer.
/// Weights of layer `l` are stored row-major as `[out][in]`, followed by its
/// biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Cached activations of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub n: usize,
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Input of the last layer: the representation for a model, or the last
    /// hidden layer for a discriminator.
    pub fn representation(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

pub struct Backward {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Mlp {
    pub fn n_params_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), activation, params: vec![0.0; Self::n_params_for(sizes)] })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        for l in 0..m.n_layers() {
            let bound = 1.0 / (m.sizes[l] as f64).sqrt();
            let (w, b) = m.layer_ranges(l);
            for p in &mut m.params[w.start..b.end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("sizes nonempty")
    }

    /// Width of the last layer's input.
    pub fn representation_width(&self) -> usize {
        self.sizes[self.sizes.len() - 2]
    }

    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    /// Batched forward pass over `x`, row-major `n × input_width`.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let width = self.input_width();
        if x.len() % width != 0 {
            return Err(Error::WidthMismatch { expected: width, actual: x.len() % width });
        }
        let n = x.len() / width;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_ranges(l);
            let w = &self.params[wr];
            let b = &self.params[br];
            let input = &acts[l];
            let mut z = vec![0.0; n * o];
            for r in 0..n {
                let xi = &input[r * i..(r + 1) * i];
                for k in 0..o {
                    let wk = &w[k * i..(k + 1) * i];
                    z[r * o + k] = b[k] + wk.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let last = l + 1 == self.n_layers();
            let a = if last { z.clone() } else { z.iter().map(|&v| self.activation.apply(v)).collect() };
            pre.push(z);
            acts.push(a);
        }
        Ok(Forward { n, acts, pre })
    }

    /// Gradients of a scalar loss given `d_out` (∂loss/∂output, `n × out`) and
    /// optionally `d_rep` (∂loss/∂representation, `n × rep_width`) injected at
    /// the last layer's input.
    pub fn backward(&self, fwd: &Forward, d_out: &[f64], d_rep: Option<&[f64]>) -> Backward {
        let n = fwd.n;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = d_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let last = l + 1 == self.n_layers();
            if !last {
                let pre = &fwd.pre[l];
                let post = &fwd.acts[l + 1];
                for (k, d) in delta.iter_mut().enumerate() {
                    *d *= self.activation.deriv(pre[k], post[k]);
                }
            }
            let (wr, br) = self.layer_ranges(l);
            let input = &fwd.acts[l];
            {
                let (gw, gb) = grads[wr.start..br.end].split_at_mut(i * o);
                for r in 0..n {
                    let xi = &input[r * i..(r + 1) * i];
                    for k in 0..o {
                        let d = delta[r * o + k];
                        if d == 0.0 {
                            continue;
                        }
                        gb[k] += d;
                        for (g, x) in gw[k * i..(k + 1) * i].iter_mut().zip(xi) {
                            *g += d * x;
                        }
                    }
                }
            }
            let w = &self.params[wr];
            let mut prev = vec![0.0; n * i];
            for r in 0..n {
                for k in 0..o {
                    let d = delta[r * o + k];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev[r * i..(r + 1) * i].iter_mut().zip(&w[k * i..(k + 1) * i]) {
                        *p += d * wv;
                    }
                }
            }
            if last {
                if let Some(extra) = d_rep {
                    for (p, e) in prev.iter_mut().zip(extra) {
                        *p += e;
                    }
                }
            }
            delta = prev;
        }
        Backward { params: grads, input: delta }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Momentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn build(self, n_params: usize) -> Optimizer {
        Optimizer { cfg: self, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }
}

/// Stateful optimizer over a flat parameter slice.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Momentum { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(self.m.iter_mut()) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (k, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps);
                }
            }
        }
    }

    /// Ascent step on the same state, used by adversaries.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.step(params, &neg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn zero_model_outputs_zero_logit() {
        let m = Mlp::zeros(&[4, 16, 16, 1], Activation::Tanh).unwrap();
        let f = m.forward(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.output(), &[0.0, 0.0]);
        assert_eq!(crate::penalty::sigmoid(f.output()[0]), 0.5);
        assert_eq!(f.representation().len(), 2 * 16);
    }

    #[test]
    fn identity_layer() {
        let mut m = Mlp::zeros(&[1, 1], Activation::Tanh).unwrap();
        m.params[0] = 1.0;
        let f = m.forward(&[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(f.output(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn width_mismatch() {
        let m = Mlp::zeros(&[4, 2, 1], Activation::Tanh).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0, 3.0]), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn init_respects_bounds() {
        let m = Mlp::init(&[4, 16, 1], Activation::Tanh, &mut stream_rng(1, Stream::Init, 0)).unwrap();
        let (w0, _) = m.layer_ranges(0);
        assert!(m.params[w0].iter().all(|p| p.abs() <= 0.5));
        let (w1, b1) = m.layer_ranges(1);
        assert!(m.params[w1.start..b1.end].iter().all(|p| p.abs() <= 0.25));
        assert_eq!(m.params.len(), 4 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn optimizers_descend_quadratic() {
        for cfg in [
            OptimizerConfig::Sgd { lr: 0.1 },
            OptimizerConfig::Momentum { lr: 0.05, momentum: 0.9 },
            OptimizerConfig::adam(0.05),
        ] {
            let mut opt = cfg.build(2);
            let mut p = vec![3.0, -2.0];
            for _ in 0..500 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut p, &g);
            }
            assert!(p.iter().all(|x| x.abs() < 1e-2), "{cfg:?} -> {p:?}");
        }
    }

    fn weighted_sum(m: &Mlp, x: &[f64], wo: &[f64], wr: &[f64]) -> f64 {
        let f = m.forward(x).unwrap();
        let a: f64 = f.output().iter().zip(wo).map(|(a, b)| a * b).sum();
        let b: f64 = f.representation().iter().zip(wr).map(|(a, b)| a * b).sum();
        a + b
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backward_matches_finite_differences(seed in 0u64..10_000, n in 1usize..5) {
            let mut rng = stream_rng(seed, Stream::Init, 0);
            let m = Mlp::init(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
            let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wo: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wr: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = m.forward(&x).unwrap();
            let bw = m.backward(&f, &wo, Some(&wr));
            let h = 1e-5;
            for k in 0..m.params.len() {
                let mut up = m.clone();
                let mut dn = m.clone();
                up.params[k] += h;
                dn.params[k] -= h;
                let num = (weighted_sum(&up, &x, &wo, &wr) - weighted_sum(&dn, &x, &wo, &wr)) / (2.0 * h);
                let a = bw.params[k];
                prop_assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4, "param {} {} {}", k, a, num);
            }
            for k in 0..x.len() {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[k] += h;
                dn[k] -= h;
                let num = (weighted_sum(&m, &up, &wo, &wr) - weighted_sum(&m, &dn, &wo, &wr)) / (2.0 * h);
                assert_abs_diff_eq!(bw.input[k], num, epsilon = 1e-6);
            }
        }
    }
}
