//! Layer-wise quantization sweep, size accounting and mixed-precision selection.
//!
//! The sweep quantizes one layer at a time against a shared float-path calibration,
//! measures the EER and the exact serialized size, and reports rows in fixed layer
//! order. Selection policies operate on the EER deltas in percentage points. Combined
//! configurations are always measured, never predicted from per-layer deltas.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::calib::{run_calibration, Observer};
use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Trial};
use crate::model::{LayerName, ModelConfig, ModelWeights, QuantConfig, QuantContext};
use crate::model_io::serialize_model;
use crate::report::{SchemeInfo, SizedEer, SweepReport, SweepRow, GENERATED_BY, SWEEP_FORMAT};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub layer: LayerName,
    /// EER as a fraction in [0, 1].
    pub eer: f64,
    pub size_bytes: u64,
    /// Row EER minus baseline EER (fraction, sign preserved).
    pub delta_eer: f64,
    /// Row size minus baseline size (always negative for real layers).
    pub delta_size: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub observer: String,
    pub model_seed: u64,
    pub calib_dataset: String,
    pub eval_dataset: String,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Baseline plus exactly one row per layer, in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub baseline_eer: f64,
    pub baseline_size: u64,
    pub rows: Vec<SensitivityRow>,
    pub meta: ReportMeta,
}

impl SensitivityReport {
    pub fn to_file_form(&self) -> SweepReport {
        SweepReport {
            format: SWEEP_FORMAT.into(),
            generated_by: GENERATED_BY.into(),
            scheme: SchemeInfo::default(),
            observer: self.meta.observer.clone(),
            model_seed: self.meta.model_seed,
            calib_dataset: self.meta.calib_dataset.clone(),
            eval_dataset: self.meta.eval_dataset.clone(),
            n_target: self.meta.n_target,
            n_nontarget: self.meta.n_nontarget,
            baseline: SizedEer {
                eer_pct: self.baseline_eer * 100.0,
                size_bytes: self.baseline_size,
            },
            rows: self
                .rows
                .iter()
                .map(|r| SweepRow {
                    layer: r.layer.to_string(),
                    eer_pct: r.eer * 100.0,
                    size_bytes: r.size_bytes,
                    delta_eer_pct: r.delta_eer * 100.0,
                    delta_size_bytes: r.delta_size,
                })
                .collect(),
        }
    }

    pub fn from_file_form(file: &SweepReport) -> Result<Self> {
        let rows = file
            .rows
            .iter()
            .map(|r| {
                Ok(SensitivityRow {
                    layer: r.layer.parse()?,
                    eer: r.eer_pct / 100.0,
                    size_bytes: r.size_bytes,
                    delta_eer: r.delta_eer_pct / 100.0,
                    delta_size: r.delta_size_bytes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            baseline_eer: file.baseline.eer_pct / 100.0,
            baseline_size: file.baseline.size_bytes,
            rows,
            meta: ReportMeta {
                observer: file.observer.clone(),
                model_seed: file.model_seed,
                calib_dataset: file.calib_dataset.clone(),
                eval_dataset: file.eval_dataset.clone(),
                n_target: file.n_target,
                n_nontarget: file.n_nontarget,
            },
        })
    }
}

/// Mixed-precision layer selection rules. EER deltas are in percentage points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    /// Quantize every layer with `delta_eer < tau`.
    Threshold { tau: f64 },
    /// Exclude the `k` largest deltas (ties exclude the later table row first).
    TopKExclude { k: usize },
    /// Add layers in ascending delta order while the running delta sum stays within
    /// `epsilon`.
    Budget { epsilon: f64 },
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionPolicy::Threshold { tau } => {
                if tau < 0.0 {
                    return Err(Error::InvalidArgument("threshold tau must be >= 0".into()));
                }
            }
            SelectionPolicy::TopKExclude { k } => {
                if k > LayerName::ALL.len() {
                    return Err(Error::InvalidArgument(format!(
                        "top-k-exclude k must be <= {}",
                        LayerName::ALL.len()
                    )));
                }
            }
            SelectionPolicy::Budget { epsilon } => {
                if epsilon < 0.0 {
                    return Err(Error::InvalidArgument("budget epsilon must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionPolicy::Threshold { tau } => write!(f, "threshold:{tau}"),
            SelectionPolicy::TopKExclude { k } => write!(f, "topk:{k}"),
            SelectionPolicy::Budget { epsilon } => write!(f, "budget:{epsilon}"),
        }
    }
}

/// Exact serialized size of the model with `qconfig` layers stored int8.
pub fn model_size(
    config: &ModelConfig,
    weights: &ModelWeights,
    qconfig: &QuantConfig,
) -> Result<u64> {
    Ok(serialize_model(config, weights, qconfig)?.len() as u64)
}

/// Apply a selection policy to a complete sensitivity report.
pub fn select(report: &SensitivityReport, policy: &SelectionPolicy) -> Result<QuantConfig> {
    policy.validate()?;
    let deltas_pct: Vec<f64> = report.rows.iter().map(|r| r.delta_eer * 100.0).collect();
    let mut qconfig = QuantConfig::default();
    match *policy {
        SelectionPolicy::Threshold { tau } => {
            for (row, &d) in report.rows.iter().zip(&deltas_pct) {
                if d < tau {
                    qconfig.layers.insert(row.layer);
                }
            }
        }
        SelectionPolicy::TopKExclude { k } => {
            let mut order: Vec<usize> = (0..report.rows.len()).collect();
            // largest delta first; ties exclude the later table row first
            order.sort_by(|&a, &b| {
                deltas_pct[b]
                    .total_cmp(&deltas_pct[a])
                    .then(b.cmp(&a))
            });
            let excluded: Vec<usize> = order.into_iter().take(k).collect();
            for (i, row) in report.rows.iter().enumerate() {
                if !excluded.contains(&i) {
                    qconfig.layers.insert(row.layer);
                }
            }
        }
        SelectionPolicy::Budget { epsilon } => {
            let mut order: Vec<usize> = (0..report.rows.len()).collect();
            order.sort_by(|&a, &b| deltas_pct[a].total_cmp(&deltas_pct[b]).then(a.cmp(&b)));
            let mut running = 0.0;
            for i in order {
                if running + deltas_pct[i] <= epsilon {
                    running += deltas_pct[i];
                    qconfig.layers.insert(report.rows[i].layer);
                } else {
                    break;
                }
            }
        }
    }
    Ok(qconfig)
}

struct EvalContext<'a> {
    config: &'a ModelConfig,
    weights: &'a ModelWeights,
    eval_set: &'a FeatureSet,
    trials: &'a [Trial],
    ranges: &'a BTreeMap<LayerName, (f64, f64)>,
}

fn measure(ctx: &EvalContext<'_>, qconfig: &QuantConfig) -> Result<(f64, u64)> {
    let qctx = QuantContext::prepare(ctx.weights, qconfig, ctx.ranges)?;
    let report = evaluate_model(
        ctx.config,
        ctx.weights,
        Some(&qctx),
        ctx.eval_set,
        ctx.trials,
    )?;
    let size = model_size(ctx.config, ctx.weights, qconfig)?;
    Ok((report.eer, size))
}

/// Rows for an arbitrary layer subset (row i quantizes only `layers[i]`), optionally
/// computed with a bounded worker pool. Row order and content are independent of
/// `jobs`.
type RowSlot = Option<Result<(f64, u64)>>;

fn sweep_rows(
    ctx: &EvalContext<'_>,
    layers: &[LayerName],
    baseline_eer: f64,
    baseline_size: u64,
    jobs: usize,
) -> Result<Vec<SensitivityRow>> {
    let jobs = jobs.max(1).min(layers.len().max(1));
    let results: Vec<RowSlot> = if jobs == 1 {
        layers
            .iter()
            .map(|&l| Some(measure(ctx, &QuantConfig::single(l))))
            .collect()
    } else {
        let slots: Mutex<Vec<RowSlot>> = Mutex::new((0..layers.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for worker in 0..jobs {
                let slots = &slots;
                scope.spawn(move || {
                    let mut i = worker;
                    while i < layers.len() {
                        let out = measure(ctx, &QuantConfig::single(layers[i]));
                        slots.lock().expect("sweep worker poisoned")[i] = Some(out);
                        i += jobs;
                    }
                });
            }
        });
        slots.into_inner().expect("sweep worker poisoned")
    };
    layers
        .iter()
        .zip(results)
        .map(|(&layer, out)| {
            let (eer, size) = out.expect("row computed")?;
            Ok(SensitivityRow {
                layer,
                eer,
                size_bytes: size,
                delta_eer: eer - baseline_eer,
                delta_size: size as i64 - baseline_size as i64,
            })
        })
        .collect()
}

/// Full sensitivity sweep: calibrate once on the float path, then measure every
/// singleton layer config against the float baseline.
pub fn sweep(
    config: &ModelConfig,
    weights: &ModelWeights,
    calib: &FeatureSet,
    eval_set: &FeatureSet,
    trials: &[Trial],
    observer: Observer,
    jobs: usize,
) -> Result<SensitivityReport> {
    let calib_out = run_calibration(config, weights, calib, &LayerName::ALL, observer)?;
    let ranges = calib_out.ranges()?;
    let baseline = evaluate_model(config, weights, None, eval_set, trials)?;
    let baseline_size = model_size(config, weights, &QuantConfig::default())?;
    let ctx = EvalContext {
        config,
        weights,
        eval_set,
        trials,
        ranges: &ranges,
    };
    let rows = sweep_rows(&ctx, &LayerName::ALL, baseline.eer, baseline_size, jobs)?;
    Ok(SensitivityReport {
        baseline_eer: baseline.eer,
        baseline_size,
        rows,
        meta: ReportMeta {
            observer: observer.to_string(),
            model_seed: config.seed,
            calib_dataset: describe_set(calib),
            eval_dataset: describe_set(eval_set),
            n_target: baseline.n_target,
            n_nontarget: baseline.n_nontarget,
        },
    })
}

fn describe_set(fs: &FeatureSet) -> String {
    format!(
        "{} split, {} utterances, F={}",
        fs.split(),
        fs.len(),
        fs.feat_dim().unwrap_or(0)
    )
}

/// Calibrate all layers of `qconfig` jointly, evaluate once, and return the measured
/// EER plus the exact serialized size.
pub fn evaluate_config(
    config: &ModelConfig,
    weights: &ModelWeights,
    qconfig: &QuantConfig,
    calib: &FeatureSet,
    eval_set: &FeatureSet,
    trials: &[Trial],
    observer: Observer,
) -> Result<(f64, u64)> {
    if qconfig.is_empty() {
        let report = evaluate_model(config, weights, None, eval_set, trials)?;
        let size = model_size(config, weights, qconfig)?;
        return Ok((report.eer, size));
    }
    let layers: Vec<LayerName> = qconfig.layers.iter().copied().collect();
    let calib_out = run_calibration(config, weights, calib, &layers, observer)?;
    let ranges = calib_out.ranges()?;
    let ctx = EvalContext {
        config,
        weights,
        eval_set,
        trials,
        ranges: &ranges,
    };
    measure(&ctx, qconfig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_trials, generate, SpeakerDatasetSpec, Split};
    use crate::model::init_model;
    use proptest::prelude::*;

    fn paper_table1_report() -> SensitivityReport {
        // Baseline 1.665%; rows 1.660, 1.680, 1.716, 1.766, 1.688, 1.681, 1.665.
        let eers = [1.660, 1.680, 1.716, 1.766, 1.688, 1.681, 1.665];
        let baseline = 1.665;
        SensitivityReport {
            baseline_eer: baseline / 100.0,
            baseline_size: 63_571_000,
            rows: LayerName::ALL
                .iter()
                .zip(eers)
                .map(|(&layer, pct)| SensitivityRow {
                    layer,
                    eer: pct / 100.0,
                    size_bytes: 60_000_000,
                    delta_eer: (pct - baseline) / 100.0,
                    delta_size: -3_571_000,
                })
                .collect(),
            meta: ReportMeta {
                observer: "minmax".into(),
                model_seed: 0,
                calib_dataset: "manual".into(),
                eval_dataset: "manual".into(),
                n_target: 1,
                n_nontarget: 1,
            },
        }
    }

    #[test]
    fn threshold_policy_reproduces_published_exclusions() {
        let report = paper_table1_report();
        let qc = select(&report, &SelectionPolicy::Threshold { tau: 0.05 }).unwrap();
        let excluded: Vec<LayerName> = LayerName::ALL
            .into_iter()
            .filter(|l| !qc.contains(*l))
            .collect();
        assert_eq!(
            excluded,
            vec![LayerName::SeRes2Block2, LayerName::SeRes2Block3]
        );
    }

    #[test]
    fn all_policies_agree_on_published_rows() {
        let report = paper_table1_report();
        let expect: std::collections::BTreeSet<LayerName> = LayerName::ALL
            .into_iter()
            .filter(|l| !matches!(l, LayerName::SeRes2Block2 | LayerName::SeRes2Block3))
            .collect();
        for policy in [
            SelectionPolicy::Threshold { tau: 0.05 },
            SelectionPolicy::TopKExclude { k: 2 },
            SelectionPolicy::Budget { epsilon: 0.06 },
        ] {
            let qc = select(&report, &policy).unwrap();
            assert_eq!(qc.layers, expect, "{policy}");
        }
    }

    #[test]
    fn degenerate_policies() {
        let mut report = paper_table1_report();
        for row in &mut report.rows {
            row.delta_eer = 0.0;
        }
        let qc = select(&report, &SelectionPolicy::Threshold { tau: 0.01 }).unwrap();
        assert_eq!(qc.layers.len(), 7);

        let qc = select(&report, &SelectionPolicy::TopKExclude { k: 7 }).unwrap();
        assert!(qc.is_empty());

        // tau = 0 quantizes only strictly negative deltas
        let report = paper_table1_report();
        let qc = select(&report, &SelectionPolicy::Threshold { tau: 0.0 }).unwrap();
        assert_eq!(
            qc.layers.into_iter().collect::<Vec<_>>(),
            vec![LayerName::Conv1d1]
        );

        // tau = infinity quantizes everything
        let qc = select(&report, &SelectionPolicy::Threshold { tau: f64::INFINITY }).unwrap();
        assert_eq!(qc.layers.len(), 7);
    }

    #[test]
    fn size_accounting_hand_arithmetic() {
        // per-tensor payloads: f32 pays 4 bytes/param, int8 pays 1 byte/param plus
        // 8 bytes per output channel
        let config = ModelConfig::default();
        let weights = init_model(&config).unwrap();
        let base = model_size(&config, &weights, &QuantConfig::default()).unwrap();
        let single = model_size(&config, &weights, &QuantConfig::single(LayerName::Conv1d2)).unwrap();
        let w = weights.get("conv1d_2.weight").unwrap();
        let params = w.numel() as u64;
        let channels = w.dim(0) as u64;
        assert_eq!(base - single, 3 * params - 8 * channels);
    }

    #[test]
    fn size_deltas_are_exactly_additive_for_disjoint_layers() {
        let config = ModelConfig::default();
        let weights = init_model(&config).unwrap();
        let base = model_size(&config, &weights, &QuantConfig::default()).unwrap();
        let mut pair = QuantConfig::default();
        pair.layers.insert(LayerName::Conv1d1);
        pair.layers.insert(LayerName::Linear);
        let both = model_size(&config, &weights, &pair).unwrap();
        let a = model_size(&config, &weights, &QuantConfig::single(LayerName::Conv1d1)).unwrap();
        let b = model_size(&config, &weights, &QuantConfig::single(LayerName::Linear)).unwrap();
        assert_eq!(base - both, (base - a) + (base - b));
    }

    #[test]
    fn quantizing_any_layer_strictly_shrinks_the_model() {
        let config = ModelConfig::default();
        let weights = init_model(&config).unwrap();
        let base = model_size(&config, &weights, &QuantConfig::default()).unwrap();
        for layer in LayerName::ALL {
            let size = model_size(&config, &weights, &QuantConfig::single(layer)).unwrap();
            assert!(size < base, "{layer} did not shrink the file");
        }
    }

    fn tiny_setup() -> (
        ModelConfig,
        ModelWeights,
        FeatureSet,
        FeatureSet,
        Vec<Trial>,
    ) {
        let config = ModelConfig {
            channels: 16,
            res2_scale: 4,
            mfa_channels: 48,
            ..ModelConfig::default()
        };
        let weights = init_model(&config).unwrap();
        let calib = generate(
            &SpeakerDatasetSpec {
                n_speakers: 4,
                utts_per_speaker: 2,
                frames: 30,
                seed: 50,
                ..Default::default()
            },
            Split::Calibration,
        )
        .unwrap();
        let eval_set = generate(
            &SpeakerDatasetSpec {
                n_speakers: 4,
                utts_per_speaker: 3,
                frames: 30,
                seed: 51,
                ..Default::default()
            },
            Split::Evaluation,
        )
        .unwrap();
        let trials = build_trials(&eval_set, 30, 30, 5).unwrap();
        (config, weights, calib, eval_set, trials)
    }

    #[test]
    fn two_layer_rows_match_singleton_enumeration() {
        let (config, weights, calib, eval_set, trials) = tiny_setup();
        let layers = [LayerName::Conv1d1, LayerName::Linear];
        let calib_out =
            run_calibration(&config, &weights, &calib, &layers, Observer::MinMax).unwrap();
        let ranges = calib_out.ranges().unwrap();
        let baseline = evaluate_model(&config, &weights, None, &eval_set, &trials).unwrap();
        let baseline_size = model_size(&config, &weights, &QuantConfig::default()).unwrap();
        let ctx = EvalContext {
            config: &config,
            weights: &weights,
            eval_set: &eval_set,
            trials: &trials,
            ranges: &ranges,
        };
        let rows = sweep_rows(&ctx, &layers, baseline.eer, baseline_size, 1).unwrap();

        // brute-force enumeration of the two singleton configs
        for (row, layer) in rows.iter().zip(layers) {
            let (eer, size) = measure(&ctx, &QuantConfig::single(layer)).unwrap();
            assert_eq!(row.eer, eer);
            assert_eq!(row.size_bytes, size);
        }
    }

    #[test]
    fn sweep_has_fixed_shape_and_baseline_identity() {
        let (config, weights, calib, eval_set, trials) = tiny_setup();
        let report = sweep(
            &config,
            &weights,
            &calib,
            &eval_set,
            &trials,
            Observer::MinMax,
            1,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 7);
        let order: Vec<LayerName> = report.rows.iter().map(|r| r.layer).collect();
        assert_eq!(order, LayerName::ALL.to_vec());

        // baseline row equals the unquantized evaluation bit-exactly
        let float = evaluate_model(&config, &weights, None, &eval_set, &trials).unwrap();
        assert_eq!(report.baseline_eer, float.eer);

        // empty-config evaluate matches the baseline numbers exactly
        let (eer, size) = evaluate_config(
            &config,
            &weights,
            &QuantConfig::default(),
            &calib,
            &eval_set,
            &trials,
            Observer::MinMax,
        )
        .unwrap();
        assert_eq!(eer, report.baseline_eer);
        assert_eq!(size, report.baseline_size);
    }

    #[test]
    fn parallel_rows_are_bit_identical_to_serial() {
        let (config, weights, calib, eval_set, trials) = tiny_setup();
        let serial = sweep(
            &config,
            &weights,
            &calib,
            &eval_set,
            &trials,
            Observer::MinMax,
            1,
        )
        .unwrap();
        let parallel = sweep(
            &config,
            &weights,
            &calib,
            &eval_set,
            &trials,
            Observer::MinMax,
            4,
        )
        .unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn file_form_roundtrip() {
        let report = paper_table1_report();
        let file = report.to_file_form();
        let back = SensitivityReport::from_file_form(&file).unwrap();
        assert_eq!(report, back);
        let rendered = crate::report::to_json(&crate::report::Report::Sweep(file));
        assert!(rendered.contains("qsv-sweep-report/1"));
    }

    proptest! {
        /// threshold(inf) quantizes everything; threshold(0) only negative deltas.
        #[test]
        fn threshold_extremes(deltas in proptest::collection::vec(-0.2f64..0.2, 7)) {
            let mut report = paper_table1_report();
            for (row, d) in report.rows.iter_mut().zip(&deltas) {
                row.delta_eer = *d;
            }
            let all = select(&report, &SelectionPolicy::Threshold { tau: f64::INFINITY }).unwrap();
            prop_assert_eq!(all.layers.len(), 7);
            let neg = select(&report, &SelectionPolicy::Threshold { tau: 0.0 }).unwrap();
            for (row, d) in report.rows.iter().zip(&deltas) {
                prop_assert_eq!(neg.contains(row.layer), *d < 0.0);
            }
        }
    }
}
