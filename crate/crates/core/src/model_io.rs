//! Binary model file format.
//!
//! Layout: magic `QSVM`, version `u16` LE, config block, tensor count `u32`, then one
//! record per tensor: length-prefixed UTF-8 name (`u32` LE), dtype byte (0 = f32,
//! 1 = i8), ndim byte, dims as `u32` LE, raw little-endian payload. Int8 records
//! append the per-channel scales (f32) followed by the per-channel zero points (i32),
//! one pair per slice of axis 0.
//!
//! Kernel weight tensors (`*.weight`) of layers selected in a [`QuantConfig`] are
//! written int8 with symmetric per-output-channel params; biases and norm affines
//! always stay f32. Loading an int8 record yields its dequantized f32 tensor.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layer_of_tensor, ModelConfig, ModelWeights, QuantConfig};
use crate::quant::{dequantize, quantize, weight_params_per_channel};
use crate::tensor::Tensor;
use crate::TensorF;

pub const MODEL_MAGIC: &[u8; 4] = b"QSVM";
pub const MODEL_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_config(out: &mut Vec<u8>, config: &ModelConfig) {
    put_u32(out, config.feat_dim as u32);
    put_u32(out, config.channels as u32);
    put_u32(out, config.res2_scale as u32);
    put_u32(out, config.dilations.len() as u32);
    for d in config.dilations {
        put_u32(out, d as u32);
    }
    put_u32(out, config.kernel_size as u32);
    put_u32(out, config.se_bottleneck as u32);
    put_u32(out, config.attn_bottleneck as u32);
    put_u32(out, config.mfa_channels as u32);
    put_u32(out, config.emb_dim as u32);
    out.extend_from_slice(&config.seed.to_le_bytes());
}

/// Serialize to the exact on-disk byte layout. `qconfig` selects which layers' kernel
/// weights are stored int8.
pub fn serialize_model(
    config: &ModelConfig,
    weights: &ModelWeights,
    qconfig: &QuantConfig,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&weights.version().to_le_bytes());
    write_config(&mut out, config);
    put_u32(&mut out, weights.tensors().count() as u32);
    for (name, tensor) in weights.tensors() {
        let quantized = name.ends_with(".weight")
            && layer_of_tensor(name).is_some_and(|l| qconfig.contains(l));
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(if quantized { DTYPE_I8 } else { DTYPE_F32 });
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        if quantized {
            let q = quantize(tensor, &weight_params_per_channel(tensor)?)?;
            for &v in q.values.data() {
                out.push(v as u8);
            }
            for &s in q.params.scales() {
                out.extend_from_slice(&s.to_le_bytes());
            }
            for &z in q.params.zero_points() {
                out.extend_from_slice(&z.to_le_bytes());
            }
        } else {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_model(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    weights: &ModelWeights,
    qconfig: &QuantConfig,
) -> Result<()> {
    let bytes = serialize_model(config, weights, qconfig)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} needs {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Load a model file. Int8 weight records come back dequantized.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "QSVM",
        });
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let feat_dim = r.u32("feat_dim")? as usize;
    let channels = r.u32("channels")? as usize;
    let res2_scale = r.u32("res2_scale")? as usize;
    let n_dil = r.u32("dilation count")? as usize;
    if n_dil != 3 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("expected 3 dilations, file has {n_dil}"),
        });
    }
    let mut dilations = [0usize; 3];
    for d in &mut dilations {
        *d = r.u32("dilation")? as usize;
    }
    let config = ModelConfig {
        feat_dim,
        channels,
        res2_scale,
        dilations,
        kernel_size: r.u32("kernel_size")? as usize,
        se_bottleneck: r.u32("se_bottleneck")? as usize,
        attn_bottleneck: r.u32("attn_bottleneck")? as usize,
        mfa_channels: r.u32("mfa_channels")? as usize,
        emb_dim: r.u32("emb_dim")? as usize,
        seed: r.u64("seed")?,
    };
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|e| {
            Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("tensor name not UTF-8: {e}"),
            }
        })?;
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor: TensorF = match dtype {
            DTYPE_F32 => {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(r.f32("f32 payload")?);
                }
                Tensor::new(shape, data)?
            }
            DTYPE_I8 => {
                let raw = r.take(numel, "i8 payload")?;
                let values =
                    Tensor::new(shape.clone(), raw.iter().map(|&b| b as i8).collect())?;
                let ch = shape[0];
                let mut scales = Vec::with_capacity(ch);
                for _ in 0..ch {
                    scales.push(r.f32("channel scale")?);
                }
                let mut zps = Vec::with_capacity(ch);
                for _ in 0..ch {
                    zps.push(r.i32("channel zero point")?);
                }
                let params = crate::quant::QuantParams::per_channel(0, scales, zps)?;
                dequantize(&crate::quant::QuantizedTensor { values, params })
            }
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: format!("unknown dtype byte {other} for tensor '{name}'"),
                })
            }
        };
        tensors.insert(name, tensor);
    }
    Ok((config, ModelWeights::from_tensors(version, tensors)))
}
