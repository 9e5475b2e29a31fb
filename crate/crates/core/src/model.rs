//! Reduced-scale TDNN speaker encoder with named quantizable layers.
//!
//! The forward graph is: input conv (K=5) -> three squeeze-excitation Res2 blocks with
//! dilations [2, 3, 4] -> channel concat -> 1x1 aggregation conv -> attentive statistics
//! pooling -> linear embedding. Each of the seven named layers can run on the quantized
//! path: the layer quantizes its input activation once and all of its internal kernels
//! run as int8 kernels sharing the layer's activation params.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    concat_channels, conv1d, linear, mean_std_pool, relu, sigmoid, softmax_over_time, tanh,
    Padding, POOL_EPS,
};
use crate::quant::{
    compute_params_from_range, qconv1d, qlinear, quantize, weight_params_per_channel, Scheme,
};
use crate::tensor::Tensor;
use crate::{QuantizedTensorF, TensorF};

/// Kernel size of the input convolution.
pub const CONV1_KERNEL: usize = 5;

/// The seven quantizable layers, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerName {
    Conv1d1,
    SeRes2Block1,
    SeRes2Block2,
    SeRes2Block3,
    Conv1d2,
    AttentiveStatPooling,
    Linear,
}

impl LayerName {
    pub const ALL: [LayerName; 7] = [
        LayerName::Conv1d1,
        LayerName::SeRes2Block1,
        LayerName::SeRes2Block2,
        LayerName::SeRes2Block3,
        LayerName::Conv1d2,
        LayerName::AttentiveStatPooling,
        LayerName::Linear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerName::Conv1d1 => "conv1d_1",
            LayerName::SeRes2Block1 => "se_res2block_1",
            LayerName::SeRes2Block2 => "se_res2block_2",
            LayerName::SeRes2Block3 => "se_res2block_3",
            LayerName::Conv1d2 => "conv1d_2",
            LayerName::AttentiveStatPooling => "attentive_stat_pooling",
            LayerName::Linear => "linear",
        }
    }

    /// Human-facing table label.
    pub fn label(&self) -> &'static str {
        match self {
            LayerName::Conv1d1 => "Conv1d",
            LayerName::SeRes2Block1 => "1st SE-Res2Block",
            LayerName::SeRes2Block2 => "2nd SE-Res2Block",
            LayerName::SeRes2Block3 => "3rd SE-Res2Block",
            LayerName::Conv1d2 => "Conv1d",
            LayerName::AttentiveStatPooling => "Attentive stat pooling",
            LayerName::Linear => "Linear",
        }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LayerName::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

/// Owning layer of a weight tensor, by name prefix.
pub fn layer_of_tensor(tensor_name: &str) -> Option<LayerName> {
    LayerName::ALL
        .into_iter()
        .find(|l| tensor_name.len() > l.as_str().len() + 1
            && tensor_name.starts_with(l.as_str())
            && tensor_name.as_bytes()[l.as_str().len()] == b'.')
}

/// Architecture hyperparameters. All counts are >= 1, `channels` divides into
/// `res2_scale` groups and kernels are odd for same padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub channels: usize,
    pub res2_scale: usize,
    pub dilations: [usize; 3],
    pub kernel_size: usize,
    pub se_bottleneck: usize,
    pub attn_bottleneck: usize,
    /// Output width of the aggregation conv after the channel concat.
    pub mfa_channels: usize,
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            channels: 32,
            res2_scale: 4,
            dilations: [2, 3, 4],
            kernel_size: 3,
            se_bottleneck: 16,
            attn_bottleneck: 16,
            mfa_channels: 384,
            emb_dim: 8,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_dim,
            self.channels,
            self.res2_scale,
            self.kernel_size,
            self.se_bottleneck,
            self.attn_bottleneck,
            self.mfa_channels,
            self.emb_dim,
        ];
        if dims.contains(&0) || self.dilations.contains(&0) {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if !self.channels.is_multiple_of(self.res2_scale) {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by res2_scale {}",
                self.channels, self.res2_scale
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Minimum number of input frames the forward pass accepts.
    pub fn min_frames(&self) -> usize {
        self.kernel_size * self.dilations.iter().copied().max().unwrap_or(1)
    }

    fn group_channels(&self) -> usize {
        self.channels / self.res2_scale
    }

    fn concat_channels(&self) -> usize {
        3 * self.channels
    }

    fn pooled_dim(&self) -> usize {
        2 * self.mfa_channels
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Fan-in-scaled symmetric uniform.
    Weight { fan_in: usize },
    /// Same bound as the owning weight.
    Bias { fan_in: usize },
    /// Near-identity affine norm scale.
    NormScale,
    /// Small affine norm shift.
    NormShift,
}

struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

/// Canonical tensor enumeration: drives initialization, serialization order and
/// parameter accounting.
fn tensor_layout(config: &ModelConfig) -> Vec<TensorSpec> {
    let c = config.channels;
    let g = config.group_channels();
    let k = config.kernel_size;
    let mut specs = Vec::new();
    let conv = |name: String, out: usize, inp: usize, kk: usize, specs: &mut Vec<TensorSpec>| {
        let fan_in = inp * kk;
        specs.push(TensorSpec {
            name: format!("{name}.weight"),
            shape: vec![out, inp, kk],
            kind: ParamKind::Weight { fan_in },
        });
        specs.push(TensorSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            kind: ParamKind::Bias { fan_in },
        });
    };
    let lin = |name: String, out: usize, inp: usize, specs: &mut Vec<TensorSpec>| {
        specs.push(TensorSpec {
            name: format!("{name}.weight"),
            shape: vec![out, inp],
            kind: ParamKind::Weight { fan_in: inp },
        });
        specs.push(TensorSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            kind: ParamKind::Bias { fan_in: inp },
        });
    };
    let norm = |name: String, ch: usize, specs: &mut Vec<TensorSpec>| {
        specs.push(TensorSpec {
            name: format!("{name}.scale"),
            shape: vec![ch],
            kind: ParamKind::NormScale,
        });
        specs.push(TensorSpec {
            name: format!("{name}.shift"),
            shape: vec![ch],
            kind: ParamKind::NormShift,
        });
    };

    conv("conv1d_1".into(), c, config.feat_dim, CONV1_KERNEL, &mut specs);
    norm("conv1d_1.bn".into(), c, &mut specs);
    for b in 1..=3 {
        let p = format!("se_res2block_{b}");
        conv(format!("{p}.conv_in"), c, c, 1, &mut specs);
        norm(format!("{p}.bn_in"), c, &mut specs);
        for i in 1..config.res2_scale {
            conv(format!("{p}.res2.conv{i}"), g, g, k, &mut specs);
        }
        norm(format!("{p}.bn_res"), c, &mut specs);
        conv(format!("{p}.conv_out"), c, c, 1, &mut specs);
        norm(format!("{p}.bn_out"), c, &mut specs);
        lin(format!("{p}.se.squeeze"), config.se_bottleneck, c, &mut specs);
        lin(format!("{p}.se.expand"), c, config.se_bottleneck, &mut specs);
    }
    conv(
        "conv1d_2".into(),
        config.mfa_channels,
        config.concat_channels(),
        1,
        &mut specs,
    );
    conv(
        "attentive_stat_pooling.attn_bottleneck".into(),
        config.attn_bottleneck,
        3 * config.mfa_channels,
        1,
        &mut specs,
    );
    conv(
        "attentive_stat_pooling.attn_scores".into(),
        config.mfa_channels,
        config.attn_bottleneck,
        1,
        &mut specs,
    );
    lin("linear".into(), config.emb_dim, config.pooled_dim(), &mut specs);
    specs
}

/// Named parameter tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    version: u16,
    tensors: BTreeMap<String, TensorF>,
}

impl ModelWeights {
    pub const VERSION: u16 = 1;

    pub fn from_tensors(version: u16, tensors: BTreeMap<String, TensorF>) -> Self {
        Self { version, tensors }
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn get(&self, name: &str) -> Result<&TensorF> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorF> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &TensorF)> {
        self.tensors.iter()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Names of the kernel weight tensors owned by `layer` (the ones that turn int8
    /// when the layer is quantized; biases and norm affines stay float).
    pub fn quantizable_tensors(&self, layer: LayerName) -> Vec<&String> {
        self.tensors
            .keys()
            .filter(|n| layer_of_tensor(n) == Some(layer) && n.ends_with(".weight"))
            .collect()
    }
}

/// Deterministic pseudo-random initialization from `config.seed`.
///
/// Weights and biases draw from a fan-in-scaled symmetric uniform range; norm affines
/// initialize near identity so an untrained forward pass stays well-conditioned.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for spec in tensor_layout(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.kind {
            ParamKind::Weight { fan_in } | ParamKind::Bias { fan_in } => {
                let bound = (1.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            ParamKind::NormScale => (0..n).map(|_| 1.0 + rng.gen_range(-0.1f32..0.1)).collect(),
            ParamKind::NormShift => (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
        };
        tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(ModelWeights {
        version: ModelWeights::VERSION,
        tensors,
    })
}

/// Exact number of parameters attributed to `layer` (biases and norm affines count
/// toward their owning layer).
pub fn layer_param_count(weights: &ModelWeights, layer: LayerName) -> usize {
    weights
        .tensors
        .iter()
        .filter(|(n, _)| layer_of_tensor(n) == Some(layer))
        .map(|(_, t)| t.numel())
        .sum()
}

/// Which layers run on the quantized path. The scheme is fixed: int8, weights
/// symmetric per output channel, activations affine per tensor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantConfig {
    pub layers: BTreeSet<LayerName>,
}

impl QuantConfig {
    pub const BITS: u8 = 8;
    pub const WEIGHT_SCHEME: &'static str = "int8 per-output-channel symmetric";
    pub const ACTIVATION_SCHEME: &'static str = "int8 per-tensor affine";

    pub fn all() -> Self {
        Self {
            layers: LayerName::ALL.into_iter().collect(),
        }
    }

    pub fn single(layer: LayerName) -> Self {
        Self {
            layers: BTreeSet::from([layer]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn contains(&self, layer: LayerName) -> bool {
        self.layers.contains(&layer)
    }
}

/// Prepared per-layer quantization state: shared activation params plus the layer's
/// quantized kernel weights.
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub act: crate::QuantParamsF,
    pub weights: BTreeMap<String, QuantizedTensorF>,
}

/// Everything `forward` needs to run the quantized path.
#[derive(Debug, Clone, Default)]
pub struct QuantContext {
    layers: BTreeMap<LayerName, LayerQuant>,
}

impl QuantContext {
    /// Quantize the kernel weights of every configured layer and derive activation
    /// params from the calibrated `(alpha, beta)` ranges.
    pub fn prepare(
        weights: &ModelWeights,
        qconfig: &QuantConfig,
        ranges: &BTreeMap<LayerName, (f64, f64)>,
    ) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for &layer in &qconfig.layers {
            let &(alpha, beta) = ranges.get(&layer).ok_or(Error::MissingLayerParams {
                layer: layer.to_string(),
            })?;
            let act = compute_params_from_range(alpha as f32, beta as f32, Scheme::Affine)?;
            let mut wq = BTreeMap::new();
            for name in weights.quantizable_tensors(layer) {
                let w = weights.get(name)?;
                wq.insert(name.clone(), quantize(w, &weight_params_per_channel(w)?)?);
            }
            layers.insert(layer, LayerQuant { act, weights: wq });
        }
        Ok(Self { layers })
    }

    pub fn layer(&self, layer: LayerName) -> Option<&LayerQuant> {
        self.layers.get(&layer)
    }

    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            layers: self.layers.keys().copied().collect(),
        }
    }
}

fn bn_apply(weights: &ModelWeights, prefix: &str, x: &TensorF) -> Result<TensorF> {
    let scale = weights.get(&format!("{prefix}.scale"))?;
    let shift = weights.get(&format!("{prefix}.shift"))?;
    let (c, t) = (x.dim(0), x.dim(1));
    if scale.dim(0) != c {
        return Err(Error::ShapeMismatch {
            context: "norm affine",
            axis: "channels",
            expected: c,
            actual: scale.dim(0),
        });
    }
    let mut out = Vec::with_capacity(c * t);
    for ch in 0..c {
        let (s, b) = (scale.data()[ch], shift.data()[ch]);
        for tt in 0..t {
            out.push(s * x.at2(ch, tt) + b);
        }
    }
    Tensor::new(vec![c, t], out)
}

fn time_mean(x: &TensorF) -> TensorF {
    let (c, t) = (x.dim(0), x.dim(1));
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let s: f64 = x.data()[ch * t..(ch + 1) * t]
            .iter()
            .map(|&v| v as f64)
            .sum();
        out.push((s / t as f64) as f32);
    }
    Tensor::new(vec![c], out).expect("non-empty")
}

/// One layer's kernel dispatcher: float kernels normally, int8 kernels with the
/// layer's shared activation params when the layer is quantized.
struct LayerExec<'a> {
    weights: &'a ModelWeights,
    lq: Option<&'a LayerQuant>,
}

impl<'a> LayerExec<'a> {
    fn conv(&self, name: &str, x: &TensorF, dilation: usize, padding: Padding) -> Result<TensorF> {
        let bias = self.weights.get(&format!("{name}.bias"))?;
        match self.lq {
            Some(lq) => {
                let wname = format!("{name}.weight");
                let wq = lq
                    .weights
                    .get(&wname)
                    .ok_or(Error::MissingTensor(wname))?;
                let xq = quantize(x, &lq.act)?;
                qconv1d(&xq, wq, bias, dilation, padding)
            }
            None => conv1d(
                x,
                self.weights.get(&format!("{name}.weight"))?,
                bias,
                dilation,
                padding,
            ),
        }
    }

    fn lin(&self, name: &str, x: &TensorF) -> Result<TensorF> {
        let bias = self.weights.get(&format!("{name}.bias"))?;
        match self.lq {
            Some(lq) => {
                let wname = format!("{name}.weight");
                let wq = lq
                    .weights
                    .get(&wname)
                    .ok_or(Error::MissingTensor(wname))?;
                let xq = quantize(x, &lq.act)?;
                qlinear(&xq, wq, bias)
            }
            None => linear(x, self.weights.get(&format!("{name}.weight"))?, bias),
        }
    }
}

fn se_res2block(
    config: &ModelConfig,
    exec: &LayerExec<'_>,
    prefix: &str,
    dilation: usize,
    x_in: &TensorF,
) -> Result<TensorF> {
    let weights = exec.weights;
    let a = bn_apply(
        weights,
        &format!("{prefix}.bn_in"),
        &relu(&exec.conv(&format!("{prefix}.conv_in"), x_in, 1, Padding::Same)?)?,
    )?;

    // Res2: group 1 passes through, group i convolves (group_i + previous output)
    let g = config.group_channels();
    let t = a.dim(1);
    let group = |i: usize| -> Result<TensorF> {
        Tensor::new(
            vec![g, t],
            a.data()[i * g * t..(i + 1) * g * t].to_vec(),
        )
    };
    let mut outputs: Vec<TensorF> = vec![group(0)?];
    for i in 1..config.res2_scale {
        let prev = &outputs[i - 1];
        let gi = group(i)?;
        let mixed = Tensor::new(
            vec![g, t],
            gi.data()
                .iter()
                .zip(prev.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        outputs.push(exec.conv(
            &format!("{prefix}.res2.conv{i}"),
            &mixed,
            dilation,
            Padding::Same,
        )?);
    }
    let refs: Vec<&TensorF> = outputs.iter().collect();
    let r = bn_apply(
        weights,
        &format!("{prefix}.bn_res"),
        &relu(&concat_channels(&refs)?)?,
    )?;

    let c = bn_apply(
        weights,
        &format!("{prefix}.bn_out"),
        &relu(&exec.conv(&format!("{prefix}.conv_out"), &r, 1, Padding::Same)?)?,
    )?;

    // SE gate: time mean -> bottleneck -> relu -> expand -> sigmoid -> channel scale
    let z = time_mean(&c);
    let u = relu(&exec.lin(&format!("{prefix}.se.squeeze"), &z)?)?;
    let gate = sigmoid(&exec.lin(&format!("{prefix}.se.expand"), &u)?)?;
    let (cc, tt) = (c.dim(0), c.dim(1));
    let mut scaled = Vec::with_capacity(cc * tt);
    for ch in 0..cc {
        let gv = gate.data()[ch];
        for ti in 0..tt {
            scaled.push(c.at2(ch, ti) * gv);
        }
    }

    // residual add
    let out: Vec<f32> = x_in
        .data()
        .iter()
        .zip(&scaled)
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(vec![cc, tt], out)
}

fn attentive_stat_pooling(exec: &LayerExec<'_>, m: &TensorF) -> Result<TensorF> {
    let (c, t) = (m.dim(0), m.dim(1));
    // channel-wise attention context: [h_t; global mean; global std]
    let global = mean_std_pool(m)?;
    let mut ctx = Vec::with_capacity(3 * c * t);
    ctx.extend_from_slice(m.data());
    for ch in 0..c {
        let gm = global.data()[ch];
        ctx.extend(std::iter::repeat_n(gm, t));
    }
    for ch in 0..c {
        let gs = global.data()[c + ch];
        ctx.extend(std::iter::repeat_n(gs, t));
    }
    let ctx = Tensor::new(vec![3 * c, t], ctx)?;

    let u = tanh(&exec.conv(
        "attentive_stat_pooling.attn_bottleneck",
        &ctx,
        1,
        Padding::Same,
    )?)?;
    let scores = exec.conv("attentive_stat_pooling.attn_scores", &u, 1, Padding::Same)?;
    let alpha = softmax_over_time(&scores)?;

    // attention-weighted mean and std per channel
    let mut pooled = vec![0f32; 2 * c];
    for ch in 0..c {
        let mut mu = 0f64;
        let mut ex2 = 0f64;
        for ti in 0..t {
            let w = alpha.at2(ch, ti) as f64;
            let v = m.at2(ch, ti) as f64;
            mu += w * v;
            ex2 += w * v * v;
        }
        let var = (ex2 - mu * mu).max(0.0);
        pooled[ch] = mu as f32;
        pooled[c + ch] = (var + POOL_EPS).sqrt() as f32;
    }
    Tensor::new(vec![2 * c], pooled)
}

/// Pure forward pass; `tap` sees every requested layer's input on the way through
/// (calibration uses this on the float path).
pub fn forward_with_tap(
    config: &ModelConfig,
    weights: &ModelWeights,
    features: &TensorF,
    qctx: Option<&QuantContext>,
    tap: &mut dyn FnMut(LayerName, &TensorF),
) -> Result<TensorF> {
    config.validate()?;
    features.expect_rank("forward features", 2)?;
    if features.dim(0) != config.feat_dim {
        return Err(Error::ShapeMismatch {
            context: "forward",
            axis: "feature dim",
            expected: config.feat_dim,
            actual: features.dim(0),
        });
    }
    let t = features.dim(1);
    if t < config.min_frames() {
        return Err(Error::InputTooShort {
            t,
            min: config.min_frames(),
        });
    }
    let exec_for = |layer: LayerName| LayerExec {
        weights,
        lq: qctx.and_then(|q| q.layer(layer)),
    };

    tap(LayerName::Conv1d1, features);
    let exec = exec_for(LayerName::Conv1d1);
    let h0 = bn_apply(
        weights,
        "conv1d_1.bn",
        &relu(&exec.conv("conv1d_1", features, 1, Padding::Same)?)?,
    )?;

    let blocks = [
        LayerName::SeRes2Block1,
        LayerName::SeRes2Block2,
        LayerName::SeRes2Block3,
    ];
    let mut block_outs = Vec::with_capacity(3);
    let mut x = h0;
    for (i, layer) in blocks.into_iter().enumerate() {
        tap(layer, &x);
        let exec = exec_for(layer);
        let out = se_res2block(
            config,
            &exec,
            layer.as_str(),
            config.dilations[i],
            &x,
        )?;
        block_outs.push(out.clone());
        x = out;
    }

    let refs: Vec<&TensorF> = block_outs.iter().collect();
    let cat = concat_channels(&refs)?;
    tap(LayerName::Conv1d2, &cat);
    let exec = exec_for(LayerName::Conv1d2);
    let m = relu(&exec.conv("conv1d_2", &cat, 1, Padding::Same)?)?;

    tap(LayerName::AttentiveStatPooling, &m);
    let exec = exec_for(LayerName::AttentiveStatPooling);
    let pooled = attentive_stat_pooling(&exec, &m)?;

    tap(LayerName::Linear, &pooled);
    let exec = exec_for(LayerName::Linear);
    exec.lin("linear", &pooled)
}

/// Embed one utterance. Layers present in `qctx` run on the quantized path; all
/// others run in float. `qctx = None` (or an empty context) is the pure float path.
pub fn forward(
    config: &ModelConfig,
    weights: &ModelWeights,
    features: &TensorF,
    qctx: Option<&QuantContext>,
) -> Result<TensorF> {
    forward_with_tap(config, weights, features, qctx, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::default()
    }

    fn test_features(config: &ModelConfig, t: usize) -> TensorF {
        let data: Vec<f32> = (0..config.feat_dim * t)
            .map(|i| ((i * 37 % 101) as f32 - 50.0) / 25.0)
            .collect();
        Tensor::new(vec![config.feat_dim, t], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = small_config();
        let a = init_model(&config).unwrap();
        let b = init_model(&config).unwrap();
        assert_eq!(a, b);

        let mut other = config.clone();
        other.seed = config.seed + 1;
        let c = init_model(&other).unwrap();
        assert!(a.tensors().zip(c.tensors()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn shapes_match_hand_enumeration() {
        // Hand-enumerated from the block definitions at F=16, C=32, s=4, E=8,
        // se/attn bottleneck 16, mfa 384, K=3 (input conv K=5).
        let weights = init_model(&small_config()).unwrap();
        let expect: &[(&str, &[usize])] = &[
            ("conv1d_1.weight", &[32, 16, 5]),
            ("conv1d_1.bias", &[32]),
            ("conv1d_1.bn.scale", &[32]),
            ("conv1d_1.bn.shift", &[32]),
            ("se_res2block_1.conv_in.weight", &[32, 32, 1]),
            ("se_res2block_1.res2.conv1.weight", &[8, 8, 3]),
            ("se_res2block_1.res2.conv3.bias", &[8]),
            ("se_res2block_1.conv_out.weight", &[32, 32, 1]),
            ("se_res2block_1.se.squeeze.weight", &[16, 32]),
            ("se_res2block_1.se.expand.weight", &[32, 16]),
            ("se_res2block_2.bn_res.scale", &[32]),
            ("se_res2block_3.se.expand.bias", &[32]),
            ("conv1d_2.weight", &[384, 96, 1]),
            ("conv1d_2.bias", &[384]),
            ("attentive_stat_pooling.attn_bottleneck.weight", &[16, 1152, 1]),
            ("attentive_stat_pooling.attn_scores.weight", &[384, 16, 1]),
            ("linear.weight", &[8, 768]),
            ("linear.bias", &[8]),
        ];
        for (name, shape) in expect {
            assert_eq!(weights.get(name).unwrap().shape(), *shape, "{name}");
        }
        // 4 + 3*20 + 2 + 4 + 2 named tensors in total
        assert_eq!(weights.tensors().count(), 72);
    }

    #[test]
    fn layer_param_counts() {
        let weights = init_model(&small_config()).unwrap();
        // 16*32*5 weight + 32 bias + 64 norm affine
        assert_eq!(layer_param_count(&weights, LayerName::Conv1d1), 2656);
        // linear: E * 2*mfa + E
        assert_eq!(layer_param_count(&weights, LayerName::Linear), 8 * 768 + 8);
        // the seven layers partition all parameters
        let total: usize = LayerName::ALL
            .iter()
            .map(|&l| layer_param_count(&weights, l))
            .sum();
        assert_eq!(total, weights.total_params());
    }

    #[test]
    fn tensor_names_map_to_exactly_one_layer() {
        let weights = init_model(&small_config()).unwrap();
        for (name, _) in weights.tensors() {
            let owners: Vec<_> = LayerName::ALL
                .into_iter()
                .filter(|l| layer_of_tensor(name) == Some(*l))
                .collect();
            assert_eq!(owners.len(), 1, "{name} owned by {owners:?}");
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let config = small_config();
        let weights = init_model(&config).unwrap();
        let x = test_features(&config, 30);
        let a = forward(&config, &weights, &x, None).unwrap();
        let b = forward(&config, &weights, &x, None).unwrap();
        assert_eq!(a.shape(), &[config.emb_dim]);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_quant_context_is_bit_identical_to_float_path() {
        let config = small_config();
        let weights = init_model(&config).unwrap();
        let x = test_features(&config, 25);
        let float = forward(&config, &weights, &x, None).unwrap();
        let empty = QuantContext::default();
        let quant = forward(&config, &weights, &x, Some(&empty)).unwrap();
        assert_eq!(float, quant);
    }

    #[test]
    fn too_short_input_errors() {
        let config = small_config();
        let weights = init_model(&config).unwrap();
        let x = test_features(&config, config.min_frames() - 1);
        assert!(matches!(
            forward(&config, &weights, &x, None).unwrap_err(),
            Error::InputTooShort { .. }
        ));
    }

    #[test]
    fn missing_layer_params_error_names_the_layer() {
        let weights = init_model(&small_config()).unwrap();
        let err = QuantContext::prepare(
            &weights,
            &QuantConfig::single(LayerName::Conv1d2),
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv1d_2"), "{err}");
    }

    #[test]
    fn zeroed_block_output_path_is_identity() {
        let config = small_config();
        let mut weights = init_model(&config).unwrap();
        let prefix = "se_res2block_2";
        for name in [
            format!("{prefix}.conv_out.weight"),
            format!("{prefix}.conv_out.bias"),
            format!("{prefix}.bn_out.shift"),
        ] {
            let t = weights.get_mut(&name).unwrap();
            t.data_mut().fill(0.0);
        }
        let x = test_features(&config, 20);

        // compare against a forward where block 2 is skipped entirely: taps let us
        // capture block 3's input, which must equal block 2's input
        let mut block2_in: Option<TensorF> = None;
        let mut block3_in: Option<TensorF> = None;
        forward_with_tap(&config, &weights, &x, None, &mut |layer, t| {
            if layer == LayerName::SeRes2Block2 {
                block2_in = Some(t.clone());
            }
            if layer == LayerName::SeRes2Block3 {
                block3_in = Some(t.clone());
            }
        })
        .unwrap();
        assert_eq!(block2_in.unwrap(), block3_in.unwrap());
    }

    /// Crafted integer-valued weights with unit scales: the all-quantized path must
    /// reproduce the float path closely (the only rounding happens on gate outputs
    /// that the crafted weights make irrelevant).
    #[test]
    fn all_layers_quantized_on_integer_grid_matches_float() {
        let config = small_config();
        let mut weights = init_model(&config).unwrap();
        let names: Vec<String> = weights.tensors().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let t = weights.get_mut(name).unwrap();
            let data = t.data_mut();
            if name.ends_with(".weight") {
                data.fill(0.0);
            } else if name.ends_with(".bias") {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = (i % 2) as f32;
                }
            } else if name.ends_with(".scale") {
                data.fill(1.0);
            } else {
                data.fill(0.0);
            }
        }
        // sparse +1 weights: one per output row. Conv taps sit at the kernel center,
        // so constant-in-time inputs stay constant through same padding.
        for name in &names {
            if !name.ends_with(".weight") {
                continue;
            }
            let t = weights.get_mut(name).unwrap();
            let shape = t.shape().to_vec();
            let rows = shape[0];
            let data = t.data_mut();
            match shape.len() {
                3 => {
                    let (ci_n, k) = (shape[1], shape[2]);
                    for r in 0..rows {
                        let ci = (r * 7) % ci_n;
                        data[(r * ci_n + ci) * k + k / 2] = 1.0;
                    }
                }
                2 => {
                    let n = shape[1];
                    // the final linear taps only the mean half of the pooled vector
                    let span = if name == "linear.weight" { n / 2 } else { n };
                    for r in 0..rows {
                        data[r * n + (r * 7) % span] = 1.0;
                    }
                }
                _ => unreachable!("weights are rank 2 or 3"),
            }
        }
        // make gates saturate so rounding them is irrelevant
        for b in 1..=3 {
            weights
                .get_mut(&format!("se_res2block_{b}.se.expand.weight"))
                .unwrap()
                .data_mut()
                .fill(0.0);
            weights
                .get_mut(&format!("se_res2block_{b}.se.expand.bias"))
                .unwrap()
                .data_mut()
                .fill(20.0);
        }
        // constant attention scores: softmax is uniform on both paths
        weights
            .get_mut("attentive_stat_pooling.attn_scores.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);

        // integer features, constant over time
        let t_len = 20;
        let feat: Vec<f32> = (0..config.feat_dim)
            .flat_map(|f| std::iter::repeat_n(((f % 3) as f32) - 1.0, t_len))
            .collect();
        let x = Tensor::new(vec![config.feat_dim, t_len], feat).unwrap();

        let float = forward(&config, &weights, &x, None).unwrap();

        // unit activation scales: range [-128, 127] gives c = 1, d = 0
        let ranges: BTreeMap<LayerName, (f64, f64)> = LayerName::ALL
            .into_iter()
            .map(|l| (l, (-128.0, 127.0)))
            .collect();
        let qctx = QuantContext::prepare(&weights, &QuantConfig::all(), &ranges).unwrap();
        // crafted weights are 0/1 per row, so per-channel scales are exactly 1/127
        let quant = forward(&config, &weights, &x, Some(&qctx)).unwrap();

        for (f, q) in float.data().iter().zip(quant.data()) {
            let rel = (f - q).abs() / f.abs().max(1.0);
            assert!(rel <= 1e-4, "float {f} vs quant {q}");
        }
    }
}
