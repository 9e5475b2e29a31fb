//! Affine quantization math and true int8 kernels.
//!
//! The forward map is `x_q = round(x/c - d)` and the inverse `x = c(x_q + d)`, with
//! round-half-to-even everywhere. Weights are quantized symmetrically per output
//! channel, activations affinely per tensor; integer kernels accumulate in checked
//! `i32` and rescale with a per-row scalar.

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::num::Real;
use crate::tensor::Tensor;

pub const INT8_QMIN: i32 = -128;
pub const INT8_QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One `(c, d)` pair per slice along `axis`.
    PerChannel { axis: usize },
}

/// Quantization scheme for parameter derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Affine,
    Symmetric,
}

/// Scale(s) `c`, zero point(s) `d` and the integer range `[qmin, qmax]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams<R> {
    granularity: Granularity,
    scales: Vec<R>,
    zero_points: Vec<i32>,
    qmin: i32,
    qmax: i32,
}

impl<R: Real> QuantParams<R> {
    pub fn per_tensor(scale: R, zero_point: i32) -> Result<Self> {
        Self::validate(Granularity::PerTensor, vec![scale], vec![zero_point])
    }

    pub fn per_channel(axis: usize, scales: Vec<R>, zero_points: Vec<i32>) -> Result<Self> {
        Self::validate(Granularity::PerChannel { axis }, scales, zero_points)
    }

    fn validate(granularity: Granularity, scales: Vec<R>, zero_points: Vec<i32>) -> Result<Self> {
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::InvalidQuantParams(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        for (i, s) in scales.iter().enumerate() {
            if !(s.is_finite() && *s > R::zero()) {
                return Err(Error::InvalidQuantParams(format!(
                    "scale[{i}] = {:?} must be positive and finite",
                    s
                )));
            }
        }
        Ok(Self {
            granularity,
            scales,
            zero_points,
            qmin: INT8_QMIN,
            qmax: INT8_QMAX,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[R] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn qmin(&self) -> i32 {
        self.qmin
    }

    pub fn qmax(&self) -> i32 {
        self.qmax
    }

    pub fn is_per_tensor(&self) -> bool {
        matches!(self.granularity, Granularity::PerTensor)
    }

    pub fn is_symmetric(&self) -> bool {
        self.zero_points.iter().all(|&d| d == 0)
    }

    /// Slice index of a flat element position for per-channel params.
    fn slice_of(&self, shape: &[usize], flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                (flat / inner) % shape[axis]
            }
        }
    }

    fn n_slices(&self, shape: &[usize]) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { axis } => shape[axis],
        }
    }
}

/// Int8 payload plus the params that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<R> {
    pub values: Tensor<i8>,
    pub params: QuantParams<R>,
}

/// `clamp(round(x/c - d), qmin, qmax)` elementwise, round-half-to-even.
pub fn quantize<R: Real>(x: &Tensor<R>, params: &QuantParams<R>) -> Result<QuantizedTensor<R>> {
    let n_slices = params.n_slices(x.shape());
    if params.scales.len() != n_slices {
        return Err(Error::InvalidQuantParams(format!(
            "params carry {} slices, tensor needs {}",
            params.scales.len(),
            n_slices
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for (i, v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "quantize",
                index: i,
                value: v.as_f64(),
            });
        }
        let s = params.slice_of(x.shape(), i);
        let c = params.scales[s];
        let d = params.zero_points[s];
        let q = (*v / c - R::from_f64_lossy(d as f64)).round_ties_even();
        let q = q
            .to_i64()
            .unwrap_or(i64::from(params.qmax))
            .clamp(i64::from(params.qmin), i64::from(params.qmax)) as i8;
        out.push(q);
    }
    Ok(QuantizedTensor {
        values: Tensor::new(x.shape().to_vec(), out)?,
        params: params.clone(),
    })
}

/// `c(x_q + d)` elementwise.
pub fn dequantize<R: Real>(q: &QuantizedTensor<R>) -> Tensor<R> {
    let shape = q.values.shape().to_vec();
    let data = q
        .values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = q.params.slice_of(&shape, i);
            q.params.scales[s] * R::from_f64_lossy((v as i32 + q.params.zero_points[s]) as f64)
        })
        .collect();
    Tensor::new(shape, data).expect("shape preserved")
}

/// Quantize-then-dequantize on the float path.
pub fn fake_quant<R: Real>(x: &Tensor<R>, params: &QuantParams<R>) -> Result<Tensor<R>> {
    Ok(dequantize(&quantize(x, params)?))
}

/// Derive `(c, d)` from an observed range `[alpha, beta]`.
///
/// Affine: `c = (beta - alpha) / (qmax - qmin)`, `d = round(alpha/c - qmin)`.
/// Symmetric: `c = max(|alpha|, |beta|) / qmax`, `d = 0`.
/// The degenerate single-point range falls back to `c = 1` at zero, else `|v| / qmax`.
pub fn compute_params_from_range<R: Real>(alpha: R, beta: R, scheme: Scheme) -> Result<QuantParams<R>> {
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidQuantParams(format!(
            "non-finite range [{:?}, {:?}]",
            alpha, beta
        )));
    }
    if alpha > beta {
        return Err(Error::InvalidQuantParams(format!(
            "alpha {:?} exceeds beta {:?}",
            alpha, beta
        )));
    }
    let qmin = R::from_f64_lossy(INT8_QMIN as f64);
    let qmax = R::from_f64_lossy(INT8_QMAX as f64);
    match scheme {
        Scheme::Symmetric => {
            let amax = alpha.abs().max(beta.abs());
            if amax == R::zero() {
                return QuantParams::per_tensor(R::one(), 0);
            }
            QuantParams::per_tensor(amax / qmax, 0)
        }
        Scheme::Affine => {
            if alpha == beta {
                if alpha == R::zero() {
                    return QuantParams::per_tensor(R::one(), 0);
                }
                let c = alpha.abs() / qmax;
                let d = (alpha / c - qmin).round_ties_even();
                return QuantParams::per_tensor(c, d.to_i32().unwrap());
            }
            let c = (beta - alpha) / (qmax - qmin);
            let d = (alpha / c - qmin).round_ties_even();
            let d = d.to_i32().ok_or_else(|| {
                Error::InvalidQuantParams(format!("zero point {:?} out of i32 range", d))
            })?;
            QuantParams::per_tensor(c, d)
        }
    }
}

/// Derive params from calibration statistics (min/max range).
pub fn compute_params<R: Real>(stats: &crate::calib::CalibStats, scheme: Scheme) -> Result<QuantParams<R>> {
    let (alpha, beta) = stats.min_max()?;
    compute_params_from_range(R::from_f64_lossy(alpha), R::from_f64_lossy(beta), scheme)
}

/// Symmetric per-output-channel params for a weight tensor (slices along axis 0).
pub fn weight_params_per_channel<R: Real>(w: &Tensor<R>) -> Result<QuantParams<R>> {
    let c_out = w.dim(0);
    let inner = w.numel() / c_out;
    let qmax = R::from_f64_lossy(INT8_QMAX as f64);
    let mut scales = Vec::with_capacity(c_out);
    for ch in 0..c_out {
        let slice = &w.data()[ch * inner..(ch + 1) * inner];
        let amax = slice.iter().fold(R::zero(), |a, v| a.max(v.abs()));
        if !amax.is_finite() {
            return Err(Error::InvalidQuantParams(format!(
                "non-finite weight in channel {ch}"
            )));
        }
        scales.push(if amax == R::zero() { R::one() } else { amax / qmax });
    }
    QuantParams::per_channel(0, scales, vec![0; c_out])
}

fn expect_symmetric_weights<R: Real>(kernel: &'static str, w: &QuantizedTensor<R>) -> Result<()> {
    if !w.params.is_symmetric() {
        return Err(Error::InvalidQuantParams(format!(
            "{kernel}: weights must be symmetric (zero point 0)"
        )));
    }
    Ok(())
}

fn expect_per_tensor_activation<R: Real>(kernel: &'static str, x: &QuantizedTensor<R>) -> Result<()> {
    if !x.params.is_per_tensor() {
        return Err(Error::InvalidQuantParams(format!(
            "{kernel}: activation params must be per-tensor"
        )));
    }
    Ok(())
}

/// Weight scale of output row/channel `o`, honoring per-tensor fallback.
fn weight_scale<R: Real>(w: &QuantizedTensor<R>, o: usize) -> R {
    match w.params.granularity {
        Granularity::PerTensor => w.params.scales[0],
        Granularity::PerChannel { .. } => w.params.scales[o],
    }
}

/// Int8 linear: `acc_m = sum_n (x_q[n] + d_x) * w_q[m, n]` in checked i32, then
/// `out_m = c_x * c_w(m) * acc_m + bias[m]`.
pub fn qlinear<R: Real>(
    x: &QuantizedTensor<R>,
    w: &QuantizedTensor<R>,
    bias: &Tensor<R>,
) -> Result<Tensor<R>> {
    x.values.expect_rank("qlinear input", 1)?;
    w.values.expect_rank("qlinear weight", 2)?;
    expect_symmetric_weights("qlinear", w)?;
    expect_per_tensor_activation("qlinear", x)?;
    let n = x.values.dim(0);
    let m = w.values.dim(0);
    if w.values.dim(1) != n {
        return Err(Error::ShapeMismatch {
            context: "qlinear",
            axis: "input features",
            expected: n,
            actual: w.values.dim(1),
        });
    }
    if bias.dim(0) != m {
        return Err(Error::ShapeMismatch {
            context: "qlinear",
            axis: "output features",
            expected: m,
            actual: bias.dim(0),
        });
    }
    let d_x = x.params.zero_points[0] as i64;
    let c_x = x.params.scales[0].as_f64();
    let xq = x.values.data();
    let wq = w.values.data();
    let mut out = Vec::with_capacity(m);
    for row in 0..m {
        // terms fit i64 with huge margin; the i32 accumulator contract is enforced
        // on the final sum
        let mut acc: i64 = 0;
        for (xv, wv) in xq.iter().zip(&wq[row * n..(row + 1) * n]) {
            acc += (*xv as i64 + d_x) * *wv as i64;
        }
        if i32::try_from(acc).is_err() {
            return Err(Error::AccumulatorOverflow {
                kernel: "qlinear",
                index: row,
            });
        }
        let scale = c_x * weight_scale(w, row).as_f64();
        out.push(R::from_f64_lossy(scale * acc as f64 + bias.data()[row].as_f64()));
    }
    Tensor::new(vec![m], out)
}

/// Int8 dilated 1-D convolution; padded positions carry `x_q = -d_x` (real zero), so
/// they contribute nothing to the accumulator.
pub fn qconv1d<R: Real>(
    x: &QuantizedTensor<R>,
    w: &QuantizedTensor<R>,
    bias: &Tensor<R>,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<R>> {
    x.values.expect_rank("qconv1d input", 2)?;
    w.values.expect_rank("qconv1d weight", 3)?;
    expect_symmetric_weights("qconv1d", w)?;
    expect_per_tensor_activation("qconv1d", x)?;
    let (c_in, t) = (x.values.dim(0), x.values.dim(1));
    let (c_out, k) = (w.values.dim(0), w.values.dim(2));
    if w.values.dim(1) != c_in {
        return Err(Error::ShapeMismatch {
            context: "qconv1d",
            axis: "input channels",
            expected: c_in,
            actual: w.values.dim(1),
        });
    }
    if bias.dim(0) != c_out {
        return Err(Error::ShapeMismatch {
            context: "qconv1d",
            axis: "output channels",
            expected: c_out,
            actual: bias.dim(0),
        });
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("qconv1d: dilation must be >= 1".into()));
    }
    if matches!(padding, Padding::Same) && k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "qconv1d: same padding requires an odd kernel, got K={k}"
        )));
    }
    let span = dilation * (k - 1);
    let (t_out, pad) = match padding {
        Padding::Same => (t, (span / 2) as isize),
        Padding::Valid => {
            let len = t as isize - span as isize;
            if len < 1 {
                return Err(Error::EmptyOutput {
                    context: "qconv1d",
                    len,
                });
            }
            (len as usize, 0)
        }
    };
    let d_x = x.params.zero_points[0] as i64;
    let c_x = x.params.scales[0].as_f64();
    let xq = x.values.data();
    let wq = w.values.data();
    let mut out = vec![R::zero(); c_out * t_out];
    let mut acc = vec![0i64; t_out];
    for o in 0..c_out {
        acc.fill(0);
        for ci in 0..c_in {
            let xrow = &xq[ci * t..(ci + 1) * t];
            let wbase = (o * c_in + ci) * k;
            for kk in 0..k {
                let wv = wq[wbase + kk] as i64;
                let shift = (kk * dilation) as isize - pad;
                // zero padding positions carry x_q = -d_x, contributing exactly 0
                let lo = (-shift).max(0) as usize;
                let hi = ((t as isize - shift).min(t_out as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                let xwin = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (dst, &src) in acc[lo..hi].iter_mut().zip(xwin) {
                    *dst += wv * (src as i64 + d_x);
                }
            }
        }
        let scale = c_x * weight_scale(w, o).as_f64();
        let b = bias.data()[o].as_f64();
        for (to, &a) in acc.iter().enumerate() {
            if i32::try_from(a).is_err() {
                return Err(Error::AccumulatorOverflow {
                    kernel: "qconv1d",
                    index: o * t_out + to,
                });
            }
            out[o * t_out + to] = R::from_f64_lossy(scale * a as f64 + b);
        }
    }
    Tensor::new(vec![c_out, t_out], out)
}
