//! Report file format and renderers.
//!
//! The machine-readable report is deterministic JSON-like structured text (fixed key
//! order, shortest-roundtrip floats, no timestamps). EER values are stored in percent
//! at full precision; renderers display percent to three decimals and sizes in MB to
//! three decimals (bytes stay exact in the CSV form).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QuantConfig;

pub const SWEEP_FORMAT: &str = "qsv-sweep-report/1";
pub const CONFIG_FORMAT: &str = "qsv-config-report/1";
pub const GENERATED_BY: &str = concat!("qsv ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub bits: u8,
    pub weights: String,
    pub activations: String,
}

impl Default for SchemeInfo {
    fn default() -> Self {
        Self {
            bits: QuantConfig::BITS,
            weights: QuantConfig::WEIGHT_SCHEME.to_string(),
            activations: QuantConfig::ACTIVATION_SCHEME.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizedEer {
    pub eer_pct: f64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: String,
    pub eer_pct: f64,
    pub size_bytes: u64,
    pub delta_eer_pct: f64,
    pub delta_size_bytes: i64,
}

/// Layer-wise sensitivity report: baseline plus one row per quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub generated_by: String,
    pub scheme: SchemeInfo,
    pub observer: String,
    pub model_seed: u64,
    pub calib_dataset: String,
    pub eval_dataset: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub baseline: SizedEer,
    pub rows: Vec<SweepRow>,
}

/// Combined-configuration report: baseline vs proposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub format: String,
    pub generated_by: String,
    pub scheme: SchemeInfo,
    pub observer: String,
    pub model_seed: u64,
    pub calib_dataset: String,
    pub eval_dataset: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub quantized_layers: Vec<String>,
    pub baseline: SizedEer,
    pub proposed: SizedEer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Sweep(SweepReport),
    Config(ConfigReport),
}

pub fn to_json(report: &Report) -> String {
    let mut s = match report {
        Report::Sweep(r) => serde_json::to_string_pretty(r),
        Report::Config(r) => serde_json::to_string_pretty(r),
    }
    .expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report(text: &str, path: &std::path::Path) -> Result<Report> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| err(format!("invalid report: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(SWEEP_FORMAT) => serde_json::from_value(value)
            .map(Report::Sweep)
            .map_err(|e| err(format!("bad sweep report: {e}"))),
        Some(CONFIG_FORMAT) => serde_json::from_value(value)
            .map(Report::Config)
            .map_err(|e| err(format!("bad config report: {e}"))),
        Some(other) => Err(err(format!("unknown report format '{other}'"))),
        None => Err(err("missing 'format' field".into())),
    }
}

fn pct3(v: f64) -> String {
    format!("{v:.3}")
}

fn mb3(bytes: u64) -> String {
    format!("{:.3}", bytes as f64 / 1e6)
}

/// Table label for a layer name string (falls back to the raw name).
fn label_of(layer: &str) -> String {
    layer
        .parse::<crate::model::LayerName>()
        .map(|l| l.label().to_string())
        .unwrap_or_else(|_| layer.to_string())
}

pub fn to_csv(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Sweep(r) => {
            out.push_str("quantized_layer,eer_pct,size_bytes,delta_eer_pct,delta_size_bytes\n");
            out.push_str(&format!(
                "none,{},{},0,0\n",
                r.baseline.eer_pct, r.baseline.size_bytes
            ));
            for row in &r.rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.layer, row.eer_pct, row.size_bytes, row.delta_eer_pct, row.delta_size_bytes
                ));
            }
        }
        Report::Config(r) => {
            out.push_str("quantized_layer,eer_pct,size_bytes\n");
            out.push_str(&format!(
                "none,{},{}\n",
                r.baseline.eer_pct, r.baseline.size_bytes
            ));
            out.push_str(&format!(
                "{},{},{}\n",
                r.quantized_layers.join("+"),
                r.proposed.eer_pct,
                r.proposed.size_bytes
            ));
        }
    }
    out
}

pub fn to_markdown(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("| Quantized layer | EER (%) | Model Size (MB) |\n");
    out.push_str("| --- | --- | --- |\n");
    match report {
        Report::Sweep(r) => {
            out.push_str(&format!(
                "| No quantization | {} | {} |\n",
                pct3(r.baseline.eer_pct),
                mb3(r.baseline.size_bytes)
            ));
            for row in &r.rows {
                out.push_str(&format!(
                    "| {} | {} | {} |\n",
                    label_of(&row.layer),
                    pct3(row.eer_pct),
                    mb3(row.size_bytes)
                ));
            }
        }
        Report::Config(r) => {
            out.push_str(&format!(
                "| No quantization | {} | {} |\n",
                pct3(r.baseline.eer_pct),
                mb3(r.baseline.size_bytes)
            ));
            out.push_str(&format!(
                "| Proposed | {} | {} |\n",
                pct3(r.proposed.eer_pct),
                mb3(r.proposed.size_bytes)
            ));
        }
    }
    out
}

/// Quant config file: comment header plus one layer name per line.
pub fn quant_config_to_text(qconfig: &QuantConfig) -> String {
    let mut out = String::from("# qsv quant config v1: one layer name per line\n");
    for layer in &qconfig.layers {
        out.push_str(layer.as_str());
        out.push('\n');
    }
    out
}

pub fn quant_config_from_text(text: &str, path: &std::path::Path) -> Result<QuantConfig> {
    let mut qconfig = QuantConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let layer = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("unknown layer name '{line}'"),
        })?;
        qconfig.layers.insert(layer);
    }
    Ok(qconfig)
}
