//! Minimal dense networks with exact reverse-mode gradients, plus Adam.
//!
//! Everything runs in f64 on ndarray matrices; batches are rows. Hidden
//! layers use tanh, the output layer is linear. Initialization is
//! orthogonal-style (Gram-Schmidt on a seeded Gaussian) with per-layer gains.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Weight matrix, `[out, in]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Forward-pass activations kept for the backward pass.
pub struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of each layer.
    outputs: Vec<Array2<f64>>,
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Orthonormalize along the smaller dimension via modified Gram-Schmidt.
    let transpose = rows < cols;
    let (n, d) = if transpose { (cols, rows) } else { (rows, cols) };
    // n >= d: build d orthonormal columns of length n.
    let mut a = Array2::<f64>::zeros((n, d));
    for v in a.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for j in 0..d {
        for k in 0..j {
            let dot = (0..n).map(|i| a[[i, j]] * a[[i, k]]).sum::<f64>();
            for i in 0..n {
                a[[i, j]] -= dot * a[[i, k]];
            }
        }
        let norm = (0..n).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt().max(1e-12);
        for i in 0..n {
            a[[i, j]] /= norm;
        }
    }
    let m = if transpose { a.t().to_owned() } else { a };
    m * gain
}

impl Mlp {
    /// Build an MLP with the given layer dims (`dims[0]` is the input size)
    /// and one gain per weight layer.
    pub fn new(dims: &[usize], gains: &[f64], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2 && gains.len() == dims.len() - 1);
        let layers = dims
            .windows(2)
            .zip(gains)
            .map(|(win, gain)| Dense {
                w: orthogonal(win[1], win[0], *gain, rng),
                b: Array1::zeros(win[1]),
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.w.t()) + &layer.b;
            if i != last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut cache = Cache { inputs: Vec::new(), outputs: Vec::new() };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cache.inputs.push(h.clone());
            let mut z = h.dot(&layer.w.t()) + &layer.b;
            if i != last {
                z.mapv_inplace(f64::tanh);
            }
            cache.outputs.push(z.clone());
            h = z;
        }
        (h, cache)
    }

    /// Backpropagate `dl_dy` (gradient at the output). Returns per-layer
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, dl_dy: &Array2<f64>) -> (Vec<Dense>, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense { w: Array2::zeros(l.w.dim()), b: Array1::zeros(l.b.len()) })
            .collect();
        let mut delta = dl_dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                // tanh'(z) = 1 - y^2 with y the cached post-activation.
                let y = &cache.outputs[i];
                delta = &delta * &(1.0 - y * y);
            }
            grads[i].w = delta.t().dot(&cache.inputs[i]);
            grads[i].b = delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&self.layers[i].w);
            } else {
                delta = delta.dot(&self.layers[i].w);
                return (grads, delta);
            }
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
    }

    /// Load parameters from a flat slice; returns the number consumed.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        k
    }
}

/// Flatten per-layer gradients in the same order as [`Mlp::flatten_into`].
pub fn flatten_grads_into(grads: &[Dense], out: &mut Vec<f64>) {
    for g in grads {
        out.extend(g.w.iter());
        out.extend(g.b.iter());
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
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
    pub fn new(lr: f64, dim: usize) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scale `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = orthogonal(64, 16, 1.0, &mut rng);
        let gram = w.t().dot(&w);
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(&[4, 8, 3], &[1.0, 1.0], &mut rng);
        let mut x = Array2::<f64>::zeros((5, 4));
        for v in x.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        // Loss: 0.5 * sum(y^2); dl_dy = y.
        let (y, cache) = mlp.forward_cached(&x);
        let (grads, _) = mlp.backward(&cache, &y);
        let mut flat_g = Vec::new();
        flatten_grads_into(&grads, &mut flat_g);

        let mut flat_p = Vec::new();
        mlp.flatten_into(&mut flat_p);
        let h = 1e-6;
        for idx in [0usize, 3, 17, 40, flat_p.len() - 1] {
            let orig = flat_p[idx];
            flat_p[idx] = orig + h;
            mlp.unflatten_from(&flat_p);
            let fp = 0.5 * mlp.forward(&x).iter().map(|v| v * v).sum::<f64>();
            flat_p[idx] = orig - h;
            mlp.unflatten_from(&flat_p);
            let fm = 0.5 * mlp.forward(&x).iter().map(|v| v * v).sum::<f64>();
            flat_p[idx] = orig;
            mlp.unflatten_from(&flat_p);
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(flat_g[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(0.1, 2);
        for _ in 0..500 {
            let grad: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grad);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "{params:?}");
    }

    #[test]
    fn clip_grad_norm_scales() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_abs_diff_eq!(norm, 5.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn init_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Mlp::new(&[10, 16, 4], &[1.4, 0.01], &mut r1);
        let b = Mlp::new(&[10, 16, 4], &[1.4, 0.01], &mut r2);
        assert_eq!(a, b);
    }
}
