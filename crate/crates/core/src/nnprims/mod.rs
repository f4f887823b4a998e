//! Framework-free numeric primitives for the depth branch.
//!
//! Layout conventions (row-major throughout):
//! * feature maps are `C×H×W`;
//! * the lifted frustum tensor is `C_C×C_D×H×W`, i.e. (context channel,
//!   depth bin, row, column).
//!
//! All operations take inputs by reference and return fresh tensors.

mod gradcheck;
mod tensor;

pub use gradcheck::{finite_diff_jacobian, max_relative_error, DEFAULT_STEP};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Uniform depth discretisation: bin `l` starts at `d_min + l·spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        let spec = DepthBinSpec { d_min, d_max, count };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "depth bins need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.count < 2 {
            return Err(Error::Config(format!("need at least 2 depth bins, got {}", self.count)));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    /// Depth value represented by bin `l`.
    pub fn value(&self, l: usize) -> f64 {
        self.d_min + l as f64 * self.spacing()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|l| self.value(l)).collect()
    }

    /// Nearest bin for a depth inside `[d_min, d_max]`; `None` outside.
    pub fn nearest_bin(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth <= self.d_max) {
            return None;
        }
        let l = ((depth - self.d_min) / self.spacing()).round() as usize;
        Some(l.min(self.count - 1))
    }
}

/// Softmax over the leading (depth) axis of a `C_D×H×W` tensor, computed with
/// the per-pixel maximum subtracted.
pub fn softmax_over_depth(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("softmax_over_depth", 3)?;
    logits.ensure_finite()?;
    let (bins, hw) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
    let src = logits.data();

    let mut peak = vec![f64::NEG_INFINITY; hw];
    for l in 0..bins {
        for (m, &v) in peak.iter_mut().zip(&src[l * hw..(l + 1) * hw]) {
            *m = m.max(v);
        }
    }
    let mut out = Tensor::zeros(logits.shape());
    let dst = out.data_mut();
    let mut total = vec![0.0; hw];
    for l in 0..bins {
        let row = &mut dst[l * hw..(l + 1) * hw];
        for p in 0..hw {
            let e = (src[l * hw + p] - peak[p]).exp();
            row[p] = e;
            total[p] += e;
        }
    }
    for l in 0..bins {
        for (v, t) in dst[l * hw..(l + 1) * hw].iter_mut().zip(&total) {
            *v /= t;
        }
    }
    Ok(out)
}

/// Outer product of context features and depth probabilities:
/// `out[i, l, j, k] = context[i, j, k] · depth[l, j, k]`.
pub fn lift_outer_product(context: &Tensor, depth: &Tensor) -> Result<Tensor> {
    context.expect_rank("lift_outer_product", 3)?;
    depth.expect_rank("lift_outer_product", 3)?;
    if context.shape()[1..] != depth.shape()[1..] {
        return Err(Error::shape(
            "lift_outer_product",
            format!("matching H×W {:?}", &context.shape()[1..]),
            format!("{:?}", &depth.shape()[1..]),
        ));
    }
    let (cc, cd) = (context.shape()[0], depth.shape()[0]);
    let hw = context.shape()[1] * context.shape()[2];
    let mut out = Tensor::zeros(&[cc, cd, context.shape()[1], context.shape()[2]]);
    let (ctx, pd) = (context.data(), depth.data());
    exec::for_each_chunk_mut(out.data_mut(), cd * hw, |i, block| {
        let c = &ctx[i * hw..(i + 1) * hw];
        for (l, row) in block.chunks_mut(hw).enumerate() {
            let p = &pd[l * hw..(l + 1) * hw];
            for ((o, &a), &b) in row.iter_mut().zip(c).zip(p) {
                *o = a * b;
            }
        }
    });
    Ok(out)
}

/// Per-channel excitation `out[c] = gates[c] · features[c]`.
pub fn se_excite(features: &Tensor, gates: &[f64]) -> Result<Tensor> {
    features.expect_rank("se_excite", 3)?;
    let c = features.shape()[0];
    if gates.len() != c {
        return Err(Error::shape("se_excite", format!("{c} gates"), gates.len()));
    }
    let hw = features.shape()[1] * features.shape()[2];
    let mut out = features.clone();
    exec::for_each_chunk_mut(out.data_mut(), hw, |ch, plane| {
        let g = gates[ch];
        plane.iter_mut().for_each(|v| *v *= g);
    });
    Ok(out)
}

/// 1×1 convolution: `out[o, p] = bias[o] + Σ_i kernel[o, i] · input[i, p]`.
pub fn conv_pointwise(input: &Tensor, kernel: &Tensor, bias: &[f64]) -> Result<Tensor> {
    input.expect_rank("conv_pointwise", 3)?;
    kernel.expect_rank("conv_pointwise", 2)?;
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kin) = (kernel.shape()[0], kernel.shape()[1]);
    if kin != cin {
        return Err(Error::shape("conv_pointwise", format!("kernel C_in {cin}"), kin));
    }
    if bias.len() != cout {
        return Err(Error::shape("conv_pointwise", format!("{cout} biases"), bias.len()));
    }
    let hw = h * w;
    let (src, k) = (input.data(), kernel.data());
    let mut out = Tensor::zeros(&[cout, h, w]);
    exec::for_each_chunk_mut(out.data_mut(), hw, |o, plane| {
        plane.fill(bias[o]);
        for i in 0..cin {
            let weight = k[o * cin + i];
            if weight == 0.0 {
                continue;
            }
            for (v, &x) in plane.iter_mut().zip(&src[i * hw..(i + 1) * hw]) {
                *v += weight * x;
            }
        }
    });
    Ok(out)
}

/// 3×3 convolution over the (depth, column) plane of a `C_F×C_D×H×W` tensor.
///
/// The tensor is treated as `C_F·H` independent `C_D×W` images (the
/// `[C_F·H, C_D, W]` arrangement), read through strides so no copy of the
/// input is made. Borders are zero padded. `kernel` is either one shared
/// `3×3` kernel or a `C_F×3×3` stack with one kernel per feature channel.
/// Zero taps are skipped, so an identity kernel reproduces the input bit for
/// bit.
pub fn depth_refine(features: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    features.expect_rank("depth_refine", 4)?;
    let [cf, cd, h, w] = [
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    ];
    if cd < 3 {
        return Err(Error::shape("depth_refine", "C_D >= 3", cd));
    }
    let per_channel = match kernel.shape() {
        [3, 3] => false,
        [c, 3, 3] if *c == cf => true,
        other => {
            return Err(Error::shape(
                "depth_refine",
                format!("[3, 3] or [{cf}, 3, 3] kernel"),
                format!("{other:?}"),
            ))
        }
    };
    let src = features.data();
    let block = cd * h * w;
    let mut out = Tensor::zeros(features.shape());
    exec::for_each_chunk_mut(out.data_mut(), block, |c, dst| {
        let k = if per_channel {
            &kernel.data()[c * 9..(c + 1) * 9]
        } else {
            kernel.data()
        };
        let base = &src[c * block..(c + 1) * block];
        let at = |d: usize, row: usize, col: usize| base[(d * h + row) * w + col];
        for d in 0..cd {
            for row in 0..h {
                for col in 0..w {
                    let mut acc: Option<f64> = None;
                    for (a, taps) in k.chunks(3).enumerate() {
                        let Some(dd) = (d + a).checked_sub(1).filter(|&x| x < cd) else {
                            continue;
                        };
                        for (b, &tap) in taps.iter().enumerate() {
                            if tap == 0.0 {
                                continue;
                            }
                            let Some(cc) = (col + b).checked_sub(1).filter(|&x| x < w) else {
                                continue;
                            };
                            let term = tap * at(dd, row, cc);
                            acc = Some(acc.map_or(term, |s| s + term));
                        }
                    }
                    dst[(d * h + row) * w + col] = acc.unwrap_or(0.0);
                }
            }
        }
    });
    Ok(out)
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let p = softmax_over_depth(&Tensor::full(&[4, 2, 3], 1.7)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let logits = Tensor::from_vec(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_over_depth(&logits).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_normalised() {
        let logits = random(&[7, 3, 5], 1);
        let mut shifted = logits.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 100.0);
        let a = softmax_over_depth(&logits).unwrap();
        let b = softmax_over_depth(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for p in 0..15 {
            let s: f64 = (0..7).map(|l| a.data()[l * 15 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(a.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tensor::zeros(&[2, 1, 2]);
        t.data_mut()[3] = f64::NAN;
        match softmax_over_depth(&t) {
            Err(Error::NonFinite { indices }) => assert_eq!(indices, vec![3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lift_examples() {
        let ctx = Tensor::full(&[1, 1, 1], 2.0);
        let pd = Tensor::full(&[1, 1, 1], 0.3);
        let out = lift_outer_product(&ctx, &pd).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);

        let ctx = random(&[3, 2, 2], 2);
        let mut pd = Tensor::zeros(&[5, 2, 2]);
        for p in 0..4 {
            pd.data_mut()[2 * 4 + p] = 1.0;
        }
        let out = lift_outer_product(&ctx, &pd).unwrap();
        for i in 0..3 {
            for l in 0..5 {
                for j in 0..2 {
                    for k in 0..2 {
                        let want = if l == 2 { ctx.get(&[i, j, k]) } else { 0.0 };
                        assert_eq!(out.get(&[i, l, j, k]), want);
                    }
                }
            }
        }
        assert!(lift_outer_product(&ctx, &Tensor::zeros(&[5, 2, 3])).is_err());
    }

    #[test]
    fn se_excite_examples() {
        let f = random(&[3, 2, 4], 3);
        assert_eq!(se_excite(&f, &[1.0; 3]).unwrap(), f);
        let half = se_excite(&f, &[0.5; 3]).unwrap();
        for (a, b) in half.data().iter().zip(f.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let gates = [0.1, 0.7, 0.9];
        let out = se_excite(&f, &gates).unwrap();
        for c in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    assert!((out.get(&[c, j, k]) - gates[c] * f.get(&[c, j, k])).abs() <= 1e-15);
                }
            }
        }
        assert!(se_excite(&f, &[1.0; 2]).is_err());
    }

    #[test]
    fn conv_pointwise_matches_brute_force() {
        let input = random(&[3, 4, 5], 4);
        let kernel = random(&[2, 3], 5);
        let bias = [0.3, -0.2];
        let out = conv_pointwise(&input, &kernel, &bias).unwrap();
        for o in 0..2 {
            for j in 0..4 {
                for k in 0..5 {
                    let mut want = bias[o];
                    for i in 0..3 {
                        want += kernel.get(&[o, i]) * input.get(&[i, j, k]);
                    }
                    assert!((out.get(&[o, j, k]) - want).abs() < 1e-12);
                }
            }
        }

        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(conv_pointwise(&input, &eye, &[0.0; 3]).unwrap(), input);
        assert!(conv_pointwise(&input, &kernel, &[0.0]).is_err());
    }

    #[test]
    fn depth_refine_identity_is_bitwise() {
        let x = random(&[2, 5, 3, 4], 6);
        let mut k = Tensor::zeros(&[3, 3]);
        k.set(&[1, 1], 1.0);
        let y = depth_refine(&x, &k).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn depth_refine_box_filter_borders() {
        let x = Tensor::full(&[1, 4, 2, 5], 1.0);
        let k = Tensor::full(&[3, 3], 1.0 / 9.0);
        let y = depth_refine(&x, &k).unwrap();
        for d in 0..4 {
            for row in 0..2 {
                for col in 0..5 {
                    let nd = if d == 0 || d == 3 { 2.0 } else { 3.0 };
                    let nc = if col == 0 || col == 4 { 2.0 } else { 3.0 };
                    let want = nd * nc / 9.0;
                    assert!((y.get(&[0, d, row, col]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn depth_refine_rejects_shallow_depth() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(depth_refine(&x, &Tensor::zeros(&[3, 3])).is_err());
        let x = Tensor::zeros(&[2, 3, 2, 2]);
        assert!(depth_refine(&x, &Tensor::zeros(&[3, 3, 3])).is_err());
    }

    #[test]
    fn depth_bins_nearest() {
        let bins = DepthBinSpec::new(2.0, 58.0, 112).unwrap();
        assert_eq!(bins.spacing(), 0.5);
        assert_eq!(bins.nearest_bin(2.0), Some(0));
        assert_eq!(bins.nearest_bin(2.26), Some(1));
        assert_eq!(bins.nearest_bin(58.0), Some(111));
        assert_eq!(bins.nearest_bin(1.9), None);
        assert!(DepthBinSpec::new(0.0, 1.0, 4).is_err());
        assert!(DepthBinSpec::new(1.0, 2.0, 1).is_err());
    }
}
