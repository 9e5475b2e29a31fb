//! Float kernels for the reference model.
//!
//! All kernels are pure functions over immutable inputs and accumulate reductions in
//! `f64` in a fixed order, so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;

/// Variance floor used by the pooling kernels.
pub const POOL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output keeps the input length. Requires an odd kernel.
    Same,
    /// No padding, output shrinks by `dilation * (K - 1)`.
    Valid,
}

/// Dilated 1-D cross-correlation of `input [C_in, T]` with `weight [C_out, C_in, K]`.
pub fn conv1d<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: &Tensor<R>,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<R>> {
    input.expect_rank("conv1d input", 2)?;
    weight.expect_rank("conv1d weight", 3)?;
    bias.expect_rank("conv1d bias", 1)?;
    let (c_in, t) = (input.dim(0), input.dim(1));
    let (c_out, k) = (weight.dim(0), weight.dim(2));
    if weight.dim(1) != c_in {
        return Err(Error::ShapeMismatch {
            context: "conv1d",
            axis: "input channels",
            expected: c_in,
            actual: weight.dim(1),
        });
    }
    if bias.dim(0) != c_out {
        return Err(Error::ShapeMismatch {
            context: "conv1d",
            axis: "output channels",
            expected: c_out,
            actual: bias.dim(0),
        });
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("conv1d: dilation must be >= 1".into()));
    }
    if matches!(padding, Padding::Same) && k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv1d: same padding requires an odd kernel, got K={k}"
        )));
    }
    let span = dilation * (k - 1);
    let (t_out, pad) = match padding {
        Padding::Same => (t, (span / 2) as isize),
        Padding::Valid => {
            let len = t as isize - span as isize;
            if len < 1 {
                return Err(Error::EmptyOutput {
                    context: "conv1d",
                    len,
                });
            }
            (len as usize, 0)
        }
    };

    let mut acc = vec![0f64; c_out * t_out];
    let x = input.data();
    let w = weight.data();
    for o in 0..c_out {
        let row = &mut acc[o * t_out..(o + 1) * t_out];
        let b = bias.data()[o].as_f64();
        row.fill(b);
        for ci in 0..c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            let wbase = (o * c_in + ci) * k;
            for kk in 0..k {
                let wv = w[wbase + kk].as_f64();
                let shift = (kk * dilation) as isize - pad;
                let lo = (-shift).max(0) as usize;
                let hi = ((t as isize - shift).min(t_out as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                let xwin = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (dst, src) in row[lo..hi].iter_mut().zip(xwin) {
                    *dst += wv * src.as_f64();
                }
            }
        }
    }
    let data = acc.into_iter().map(R::from_f64_lossy).collect();
    Tensor::new(vec![c_out, t_out], data)
}

/// `output_m = sum_n weight[m, n] * input[n] + bias[m]`.
pub fn linear<R: Real>(input: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    input.expect_rank("linear input", 1)?;
    weight.expect_rank("linear weight", 2)?;
    bias.expect_rank("linear bias", 1)?;
    let n = input.dim(0);
    let (m, wn) = (weight.dim(0), weight.dim(1));
    if wn != n {
        return Err(Error::ShapeMismatch {
            context: "linear",
            axis: "input features",
            expected: n,
            actual: wn,
        });
    }
    if bias.dim(0) != m {
        return Err(Error::ShapeMismatch {
            context: "linear",
            axis: "output features",
            expected: m,
            actual: bias.dim(0),
        });
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(m);
    for row in 0..m {
        let mut acc = bias.data()[row].as_f64();
        for col in 0..n {
            acc += w[row * n + col].as_f64() * x[col].as_f64();
        }
        out.push(R::from_f64_lossy(acc));
    }
    Tensor::new(vec![m], out)
}

fn check_finite<R: Real>(context: &'static str, x: &Tensor<R>) -> Result<()> {
    for (i, v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context,
                index: i,
                value: v.as_f64(),
            });
        }
    }
    Ok(())
}

fn map_elementwise<R: Real>(
    context: &'static str,
    x: &Tensor<R>,
    f: impl Fn(R) -> R,
) -> Result<Tensor<R>> {
    check_finite(context, x)?;
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn relu<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    map_elementwise("relu", x, |v| v.max(R::zero()))
}

pub fn sigmoid<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    map_elementwise("sigmoid", x, |v| {
        R::one() / (R::one() + (-v).exp())
    })
}

pub fn tanh<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    map_elementwise("tanh", x, |v| v.tanh())
}

/// Softmax along the time axis, independently per channel of `x [C, T]`.
pub fn softmax_over_time<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    x.expect_rank("softmax_over_time", 2)?;
    check_finite("softmax_over_time", x)?;
    let (c, t) = (x.dim(0), x.dim(1));
    let mut out = vec![R::zero(); c * t];
    for ch in 0..c {
        let row = &x.data()[ch * t..(ch + 1) * t];
        let max = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
        let mut denom = 0f64;
        for &v in row {
            denom += (v - max).exp().as_f64();
        }
        for (i, &v) in row.iter().enumerate() {
            out[ch * t + i] = R::from_f64_lossy((v - max).exp().as_f64() / denom);
        }
    }
    Tensor::new(vec![c, t], out)
}

/// Per-channel time mean followed by per-channel population standard deviation
/// (`sqrt(var + 1e-8)`), concatenated to a `[2C]` vector.
pub fn mean_std_pool<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    x.expect_rank("mean_std_pool", 2)?;
    let (c, t) = (x.dim(0), x.dim(1));
    let mut out = Vec::with_capacity(2 * c);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let row = &x.data()[ch * t..(ch + 1) * t];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / t as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / t as f64;
        out.push(R::from_f64_lossy(mean));
        stds.push(R::from_f64_lossy((var + POOL_EPS).sqrt()));
    }
    out.extend(stds);
    Tensor::new(vec![2 * c], out)
}

/// Channel-axis concatenation of `[C_i, T]` tensors with equal `T`.
pub fn concat_channels<R: Real>(parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
    }
    let t = parts[0].dim(1);
    let mut c_total = 0;
    for p in parts {
        p.expect_rank("concat_channels", 2)?;
        if p.dim(1) != t {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                axis: "time",
                expected: t,
                actual: p.dim(1),
            });
        }
        c_total += p.dim(0);
    }
    let mut data = Vec::with_capacity(c_total * t);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![c_total, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(data).unwrap()
    }

    fn t2(rows: Vec<Vec<f32>>) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    /// Direct-summation convolution with explicit zero padding, kept independent of
    /// the production kernel.
    #[allow(clippy::needless_range_loop)]
    fn conv1d_oracle(
        x: &[Vec<f32>],
        w: &[Vec<Vec<f32>>],
        bias: &[f32],
        dilation: usize,
        same: bool,
    ) -> Vec<Vec<f32>> {
        let t = x[0].len();
        let k = w[0][0].len();
        let span = dilation * (k - 1);
        let (t_out, pad) = if same {
            (t, (span / 2) as isize)
        } else {
            (t - span, 0)
        };
        let mut out = vec![vec![0f32; t_out]; w.len()];
        for (o, wo) in w.iter().enumerate() {
            for to in 0..t_out {
                let mut acc = bias[o] as f64;
                for (ci, wc) in wo.iter().enumerate() {
                    for (kk, &wv) in wc.iter().enumerate() {
                        let ti = to as isize + (kk * dilation) as isize - pad;
                        if ti >= 0 && (ti as usize) < t {
                            acc += wv as f64 * x[ci][ti as usize] as f64;
                        }
                    }
                }
                out[o][to] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn conv1d_scalar_kernel_scales() {
        let out = conv1d(
            &t2(vec![vec![1.0, 2.0, 3.0]]),
            &Tensor::new(vec![1, 1, 1], vec![2.0f32]).unwrap(),
            &t1(vec![0.0]),
            1,
            Padding::Same,
        )
        .unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv1d_dilated_same_matches_direct_summation() {
        // Frozen from the direct-summation oracle: [[1,2,3,4,5]] * [[[1,0,1]]], dilation 2.
        let x = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]];
        let w = vec![vec![vec![1.0, 0.0, 1.0]]];
        let expected = conv1d_oracle(&x, &w, &[0.0], 2, true);
        assert_eq!(expected[0], vec![3.0, 4.0, 6.0, 2.0, 3.0]);
        let out = conv1d(
            &t2(x),
            &Tensor::new(vec![1, 1, 3], w.concat().concat()).unwrap(),
            &t1(vec![0.0]),
            2,
            Padding::Same,
        )
        .unwrap();
        assert_eq!(out.data(), expected[0].as_slice());
    }

    #[test]
    fn conv1d_zero_input_passes_bias_through() {
        let out = conv1d(
            &t2(vec![vec![0.0; 4], vec![0.0; 4]]),
            &Tensor::new(vec![1, 2, 3], vec![0.3; 6]).unwrap(),
            &t1(vec![7.0]),
            1,
            Padding::Same,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv1d_shape_errors_name_the_axis() {
        let err = conv1d(
            &t2(vec![vec![1.0, 2.0]]),
            &Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap(),
            &t1(vec![0.0]),
            1,
            Padding::Same,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");

        let err = conv1d(
            &t2(vec![vec![1.0, 2.0]]),
            &Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap(),
            &t1(vec![0.0]),
            3,
            Padding::Valid,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyOutput { .. }), "{err}");
    }

    #[test]
    fn linear_hand_cases() {
        let out = linear(
            &t1(vec![1.0, 2.0]),
            &t2(vec![vec![3.0, 4.0]]),
            &t1(vec![0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[11.0]);

        let id = t2(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = t1(vec![-2.5, 4.0]);
        let out = linear(&x, &id, &t1(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), x.data());

        let out = linear(
            &t1(vec![0.0, 0.0]),
            &t2(vec![vec![5.0, -1.0], vec![2.0, 2.0]]),
            &t1(vec![1.5, -3.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.5, -3.0]);

        let err = linear(&t1(vec![1.0]), &t2(vec![vec![1.0, 2.0]]), &t1(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(&t1(vec![0.0])).unwrap().data(), &[0.5]);
        assert_eq!(relu(&t1(vec![-1.0, 2.0])).unwrap().data(), &[0.0, 2.0]);
        let sm = softmax_over_time(&t2(vec![vec![3.0; 4]])).unwrap();
        assert_eq!(sm.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn activations_reject_nan() {
        for r in [
            relu(&t1(vec![f32::NAN])),
            sigmoid(&t1(vec![0.0, f32::NAN])),
            tanh(&t1(vec![f32::NAN])),
            softmax_over_time(&t2(vec![vec![f32::NAN, 1.0]])),
        ] {
            assert!(matches!(r.unwrap_err(), Error::NonFinite { .. }));
        }
    }

    #[test]
    fn mean_std_pool_hand_cases() {
        let out = mean_std_pool(&t2(vec![vec![1.0, 3.0], vec![2.0, 2.0]])).unwrap();
        assert_eq!(out.shape(), &[4]);
        assert!((out.data()[0] - 2.0).abs() < 1e-7);
        assert!((out.data()[1] - 2.0).abs() < 1e-7);
        assert!((out.data()[2] - 1.0).abs() < 1e-4);
        assert!(out.data()[3].abs() < 1e-3);

        // constant channel: std is exactly sqrt(eps)
        let out = mean_std_pool(&t2(vec![vec![5.0; 7]])).unwrap();
        assert_eq!(out.data()[1], (POOL_EPS as f32).sqrt());

        // T = 1: mean is the frame, std is sqrt(eps)
        let out = mean_std_pool(&t2(vec![vec![-4.0], vec![9.0]])).unwrap();
        assert_eq!(&out.data()[..2], &[-4.0, 9.0]);
        assert_eq!(out.data()[2], (POOL_EPS as f32).sqrt());
    }

    #[test]
    fn concat_channels_cases() {
        let a = t2(vec![vec![1.0]]);
        let b = t2(vec![vec![2.0]]);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[1.0, 2.0]);

        let single = concat_channels(&[&a]).unwrap();
        assert_eq!(&single, &a);

        let c = t2(vec![vec![1.0, 2.0]]);
        assert!(matches!(
            concat_channels(&[&a, &c]).unwrap_err(),
            Error::ShapeMismatch { axis: "time", .. }
        ));
    }

    #[test]
    fn kernels_are_bit_deterministic() {
        let x = t2(vec![
            (0..17).map(|i| (i as f32 * 0.37).sin()).collect(),
            (0..17).map(|i| (i as f32 * 0.11).cos()).collect(),
        ]);
        let w = Tensor::new(vec![3, 2, 3], (0..18).map(|i| (i as f32 * 0.21).sin()).collect()).unwrap();
        let b = t1(vec![0.1, -0.2, 0.3]);
        let a = conv1d(&x, &w, &b, 2, Padding::Same).unwrap();
        let c = conv1d(&x, &w, &b, 2, Padding::Same).unwrap();
        assert_eq!(a, c);
    }

    proptest! {
        /// K=1 convolution is a per-timestep linear map.
        #[test]
        fn conv_k1_equals_per_timestep_linear(
            xs in proptest::collection::vec(-4.0f32..4.0, 2 * 5),
            ws in proptest::collection::vec(-2.0f32..2.0, 3 * 2),
            bs in proptest::collection::vec(-1.0f32..1.0, 3),
            dilation in 1usize..4,
        ) {
            let x = Tensor::new(vec![2, 5], xs).unwrap();
            let w = Tensor::new(vec![3, 2, 1], ws.clone()).unwrap();
            let b = Tensor::from_vec(bs.clone()).unwrap();
            let out = conv1d(&x, &w, &b, dilation, Padding::Same).unwrap();
            let wlin = Tensor::new(vec![3, 2], ws).unwrap();
            let blin = Tensor::from_vec(bs).unwrap();
            for t in 0..5 {
                let col = Tensor::from_vec(vec![x.at2(0, t), x.at2(1, t)]).unwrap();
                let y = linear(&col, &wlin, &blin).unwrap();
                for o in 0..3 {
                    prop_assert_eq!(out.at2(o, t), y.data()[o]);
                }
            }
        }

        /// Valid output equals the same-padding output with the padded columns removed.
        #[test]
        fn valid_is_centered_slice_of_same(
            xs in proptest::collection::vec(-4.0f32..4.0, 2 * 12),
            ws in proptest::collection::vec(-2.0f32..2.0, 2 * 2 * 3),
            dilation in 1usize..4,
        ) {
            let x = Tensor::new(vec![2, 12], xs).unwrap();
            let w = Tensor::new(vec![2, 2, 3], ws).unwrap();
            let b = Tensor::from_vec(vec![0.5, -0.5]).unwrap();
            let same = conv1d(&x, &w, &b, dilation, Padding::Same).unwrap();
            let valid = conv1d(&x, &w, &b, dilation, Padding::Valid).unwrap();
            let off = dilation * 2 / 2; // dilation*(K-1)/2
            for o in 0..2 {
                for t in 0..valid.dim(1) {
                    prop_assert_eq!(valid.at2(o, t), same.at2(o, t + off));
                }
            }
        }

        /// Softmax rows sum to one.
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-8.0f32..8.0, 3 * 7)) {
            let x = Tensor::new(vec![3, 7], xs).unwrap();
            let sm = softmax_over_time(&x).unwrap();
            for c in 0..3 {
                let s: f32 = (0..7).map(|t| sm.at2(c, t)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        /// Scaling the input scales means and stds for non-degenerate channels.
        #[test]
        fn pool_scales_linearly(
            xs in proptest::collection::vec(-4.0f32..4.0, 2 * 9),
            a in 0.5f32..3.0,
        ) {
            let x = Tensor::new(vec![2, 9], xs.clone()).unwrap();
            let scaled = Tensor::new(vec![2, 9], xs.iter().map(|v| v * a).collect()).unwrap();
            let p = mean_std_pool(&x).unwrap();
            let q = mean_std_pool(&scaled).unwrap();
            for c in 0..2 {
                prop_assert!((q.data()[c] - a * p.data()[c]).abs() < 1e-5 * (1.0 + p.data()[c].abs()));
                // stds: only meaningful away from the eps floor
                if p.data()[2 + c] > 1e-3 {
                    let rel = (q.data()[2 + c] - a * p.data()[2 + c]).abs() / (a * p.data()[2 + c]);
                    prop_assert!(rel < 1e-5);
                }
            }
        }
    }
}
