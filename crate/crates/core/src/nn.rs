//! Small fully-connected networks with analytic backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer, a row-major
//! `out × in` weight block followed by `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    output: Activation,
    params: Vec<f64>,
}

/// Per-layer outputs of a forward pass, input included.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has input")
    }
}

impl Mlp {
    /// Zero-initialized network. Hidden layers use ReLU.
    pub fn zeros(sizes: &[usize], output: Activation) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp {
            sizes: sizes.to_vec(),
            output,
            params: vec![0.0; count],
        }
    }

    /// Fan-in uniform init for hidden layers, `±final_scale` for the last.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], output: Activation, final_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, output);
        let last = net.layer_count() - 1;
        let mut offset = 0;
        for l in 0..net.layer_count() {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let bound = if l == last {
                final_scale
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes nonempty")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            self.output
        } else {
            Activation::Relu
        }
    }

    /// Calls `f(weight_range, bias_range)` for every layer.
    fn for_each_layer(&self, mut f: impl FnMut(usize, std::ops::Range<usize>, std::ops::Range<usize>)) {
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let n_w = self.sizes[l] * self.sizes[l + 1];
            let n_b = self.sizes[l + 1];
            f(l, offset..offset + n_w, offset + n_w..offset + n_w + n_b);
            offset += n_w + n_b;
        }
    }

    pub fn forward_trace(&self, input: &[f64]) -> Trace {
        assert_eq!(input.len(), self.input_dim(), "input dimension");
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activation(l);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let x = layers.last().expect("input present");
            let y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                    act.apply(z)
                })
                .collect();
            layers.push(y);
            offset += n_in * n_out + n_out;
        }
        Trace { layers }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).layers.pop().expect("output layer")
    }

    /// Backpropagates `d_output` (gradient w.r.t. the network output) through
    /// `trace`, adding parameter gradients into `grads`. Returns the gradient
    /// w.r.t. the input.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        assert_eq!(d_output.len(), self.output_dim(), "output gradient dimension");
        let mut offsets = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta_out = d_output.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activation(l);
            let y = &trace.layers[l + 1];
            let x = &trace.layers[l];
            let dz: Vec<f64> = delta_out
                .iter()
                .zip(y)
                .map(|(d, yo)| d * act.derivative(*yo))
                .collect();
            let off = offsets[l];
            let w = &self.params[off..off + n_in * n_out];
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                if dz[o] == 0.0 {
                    continue;
                }
                let row = o * n_in;
                for i in 0..n_in {
                    grads[off + row + i] += dz[o] * x[i];
                    dx[i] += dz[o] * w[row + i];
                }
                grads[off + n_in * n_out + o] += dz[o];
            }
            delta_out = dx;
        }
        delta_out
    }

    /// `½ Σ w²` over weights (biases excluded).
    pub fn weight_penalty(&self) -> f64 {
        let mut total = 0.0;
        self.for_each_layer(|_, w, _| {
            total += self.params[w].iter().map(|v| v * v).sum::<f64>();
        });
        0.5 * total
    }

    /// Adds `scale · ∇(½ Σ w²)` into `grads`.
    pub fn add_weight_penalty_grad(&self, scale: f64, grads: &mut [f64]) {
        self.for_each_layer(|_, w, _| {
            for i in w {
                grads[i] += scale * self.params[i];
            }
        });
    }

    /// `self ← τ·online + (1 − τ)·self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        assert_eq!(self.sizes, online.sizes, "target shape mirrors online shape");
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], Activation::Tanh);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_dot_product() {
        let mut net = Mlp::zeros(&[3, 1], Activation::Identity);
        net.params_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let y = net.forward(&[2.0, 1.0, 3.0]);
        assert!((y[0] - (0.5 * 2.0 - 1.0 + 6.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::init(&[3, 5, 4, 2], Activation::Tanh, 0.5, &mut rng);
        let x = [0.3, -0.7, 0.2];
        let upstream = [0.7, -1.3];
        let loss = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x).iter().zip(&upstream).map(|(y, u)| y * u).sum()
        };
        let mut grads = vec![0.0; net.params().len()];
        let trace = net.forward_trace(&x);
        let dx = net.backward(&trace, &upstream, &mut grads);
        let h = 1e-6;
        for i in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let online = Mlp::init(&[2, 3, 1], Activation::Identity, 0.1, &mut rng);
        let mut target = Mlp::zeros(&[2, 3, 1], Activation::Identity);
        target.soft_update_from(&online, 0.0);
        assert!(target.params().iter().all(|p| *p == 0.0));
        target.soft_update_from(&online, 1.0);
        assert_eq!(target.params(), online.params());
    }

    #[test]
    fn soft_update_half() {
        let mut online = Mlp::zeros(&[1, 1], Activation::Identity);
        online.params_mut().fill(1.0);
        let mut target = Mlp::zeros(&[1, 1], Activation::Identity);
        target.soft_update_from(&online, 0.5);
        assert!(target.params().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut x = vec![3.0];
        let mut opt = Adam::new(0.1, 1);
        for _ in 0..500 {
            let g = vec![2.0 * (x[0] - 1.0)];
            opt.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-2);
    }
}
