use rand::Rng;

use crate::error::{Error, Result};
use crate::nnprims::{sigmoid, Tensor};

use super::spline::BSplineBasis;

/// Shortcut nonlinearity `x·sigmoid(x)`.
pub fn shortcut_activation(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn shortcut_activation_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// One KAN layer: every edge `i → j` carries a spline `Σ_b c[j,i,b]·B_b(x_i)`
/// plus a shortcut `w[j,i]·σ(x_i)`, and each output sums its incoming edges.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub basis: BSplineBasis,
    /// `out_dim × in_dim × n_basis`, row-major.
    pub spline_coeffs: Vec<f64>,
    /// `out_dim × in_dim`, row-major.
    pub shortcut_weights: Vec<f64>,
}

impl KanLayer {
    pub fn new(in_dim: usize, out_dim: usize, basis: BSplineBasis, spline_coeffs: Vec<f64>, shortcut_weights: Vec<f64>) -> Result<Self> {
        let nb = basis.n_basis();
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("KAN layer dimensions must be positive".into()));
        }
        if spline_coeffs.len() != out_dim * in_dim * nb {
            return Err(Error::shape("KanLayer::new", out_dim * in_dim * nb, spline_coeffs.len()));
        }
        if shortcut_weights.len() != out_dim * in_dim {
            return Err(Error::shape("KanLayer::new", out_dim * in_dim, shortcut_weights.len()));
        }
        if spline_coeffs.iter().chain(&shortcut_weights).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("KAN layer parameters must be finite".into()));
        }
        Ok(KanLayer {
            in_dim,
            out_dim,
            basis,
            spline_coeffs,
            shortcut_weights,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, basis: BSplineBasis) -> Self {
        let nb = basis.n_basis();
        KanLayer {
            in_dim,
            out_dim,
            basis,
            spline_coeffs: vec![0.0; out_dim * in_dim * nb],
            shortcut_weights: vec![0.0; out_dim * in_dim],
        }
    }

    /// Uniform initialisation in `±scale/√in_dim` for both branches.
    pub fn random(in_dim: usize, out_dim: usize, basis: BSplineBasis, scale: f64, rng: &mut impl Rng) -> Self {
        let s = scale / (in_dim as f64).sqrt();
        let mut layer = KanLayer::zeros(in_dim, out_dim, basis);
        layer.spline_coeffs.iter_mut().for_each(|c| *c = rng.random_range(-s..s));
        layer.shortcut_weights.iter_mut().for_each(|c| *c = rng.random_range(-s..s));
        layer
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::shape("kan_layer_forward", self.in_dim, x.len()));
        }
        let bad: Vec<usize> = x.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { indices: bad });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let nb = self.basis.n_basis();
        let evals: Vec<_> = x.iter().map(|&xi| self.basis.eval(xi)).collect();
        let act: Vec<f64> = x.iter().map(|&xi| shortcut_activation(xi)).collect();
        let mut out = vec![0.0; self.out_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, e) in evals.iter().enumerate() {
                let c = &self.spline_coeffs[(j * self.in_dim + i) * nb..];
                acc += e.values.iter().enumerate().map(|(k, v)| c[e.first + k] * v).sum::<f64>();
                acc += self.shortcut_weights[j * self.in_dim + i] * act[i];
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Analytic `out_dim × in_dim` Jacobian.
    pub fn jacobian(&self, x: &[f64]) -> Result<Tensor> {
        self.check_input(x)?;
        let nb = self.basis.n_basis();
        let evals: Vec<_> = x.iter().map(|&xi| self.basis.eval_with_derivative(xi)).collect();
        let dact: Vec<f64> = x.iter().map(|&xi| shortcut_activation_derivative(xi)).collect();
        let mut jac = Tensor::zeros(&[self.out_dim, self.in_dim]);
        for j in 0..self.out_dim {
            for (i, (e, d)) in evals.iter().enumerate() {
                let c = &self.spline_coeffs[(j * self.in_dim + i) * nb..];
                let spline: f64 = d.iter().enumerate().map(|(k, v)| c[e.first + k] * v).sum();
                jac.data_mut()[j * self.in_dim + i] = spline + self.shortcut_weights[j * self.in_dim + i] * dact[i];
            }
        }
        Ok(jac)
    }
}

/// Layers applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("KAN stack needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::shape("KanStack::new", w[0].out_dim, w[1].in_dim));
            }
        }
        Ok(KanStack { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers.iter().try_fold(x.to_vec(), |h, layer| layer.forward(&h))
    }

    /// Chain-rule product of per-layer Jacobians.
    pub fn jacobian(&self, x: &[f64]) -> Result<Tensor> {
        let mut h = x.to_vec();
        let mut acc: Option<Tensor> = None;
        for layer in &self.layers {
            let j = layer.jacobian(&h)?;
            acc = Some(match acc {
                None => j,
                Some(prev) => matmul(&j, &prev),
            });
            h = layer.forward(&h)?;
        }
        Ok(acc.unwrap())
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnprims::{finite_diff_jacobian, max_relative_error, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis() -> BSplineBasis {
        BSplineBasis::uniform(8, 3, -1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_layer_gives_zero() {
        let l = KanLayer::zeros(3, 2, basis());
        assert_eq!(l.forward(&[0.1, -0.5, 0.9]).unwrap(), vec![0.0, 0.0]);
        assert!(l.forward(&[0.1]).is_err());
        assert!(l.forward(&[0.1, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn degree_one_identity_interpolant() {
        // Hat functions centered on the knots; coefficient = knot value
        // reproduces the identity on the whole domain.
        let b = BSplineBasis::uniform(4, 1, -1.0, 1.0).unwrap();
        let centers: Vec<f64> = (0..b.n_basis()).map(|i| b.knots()[i + 1]).collect();
        let l = KanLayer::new(1, 1, b, centers, vec![0.0]).unwrap();
        for &x in &[-1.0, -0.5, 0.0, 0.5, 1.0, 0.3] {
            assert!((l.forward(&[x]).unwrap()[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = KanLayer::random(4, 3, basis(), 1.0, &mut rng);
        let b = KanLayer::random(4, 3, basis(), 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let mix = KanLayer {
            spline_coeffs: a.spline_coeffs.iter().zip(&b.spline_coeffs).map(|(x, y)| alpha * x + beta * y).collect(),
            shortcut_weights: a.shortcut_weights.iter().zip(&b.shortcut_weights).map(|(x, y)| alpha * x + beta * y).collect(),
            ..a.clone()
        };
        let x = [0.2, -0.6, 0.95, -0.05];
        let (fa, fb, fm) = (a.forward(&x).unwrap(), b.forward(&x).unwrap(), mix.forward(&x).unwrap());
        for j in 0..3 {
            assert!((fm[j] - (alpha * fa[j] + beta * fb[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = KanLayer::random(5, 4, basis(), 1.0, &mut rng);
        let x = [0.31, -0.72, 0.05, 0.88, -0.2];
        let fd = finite_diff_jacobian(|v| l.forward(v).unwrap(), &x, DEFAULT_STEP).unwrap();
        assert!(max_relative_error(&l.jacobian(&x).unwrap(), &fd, 1e-3) < 1e-5);
    }

    #[test]
    fn stack_checks_widths() {
        let a = KanLayer::zeros(3, 4, basis());
        let b = KanLayer::zeros(5, 2, basis());
        assert!(KanStack::new(vec![a, b]).is_err());
        assert!(KanStack::new(vec![]).is_err());
    }
}
