//! Calibration: streaming per-tensor statistics and range finalization.
//!
//! Running min/max are exact; mean/std use a Welford stream in `f64` with a fixed
//! update order, so identical observation sequences give bit-identical stats. The
//! optional histogram keeps a fixed number of bins over the running min/max and is
//! rebinned (bin centers remapped) whenever the range grows.

use std::collections::BTreeMap;

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{forward_with_tap, LayerName, ModelConfig, ModelWeights};
use crate::num::Real;
use crate::tensor::Tensor;

/// Default histogram resolution for percentile observers.
pub const DEFAULT_HIST_BINS: usize = 2048;

/// Range-selection rule applied when finalizing collected statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observer {
    /// Exact observed extremes.
    MinMax,
    /// Tightest histogram-bin range covering fraction `p` of the observed mass,
    /// trimming `(1 - p) / 2` from each tail.
    Percentile { p: f64, bins: usize },
}

impl Observer {
    pub fn percentile(p: f64) -> Result<Self> {
        Self::validated(Observer::Percentile {
            p,
            bins: DEFAULT_HIST_BINS,
        })
    }

    pub fn validated(self) -> Result<Self> {
        if let Observer::Percentile { p, bins } = self {
            if !(p > 0.5 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "percentile p must lie in (0.5, 1.0], got {p}"
                )));
            }
            if bins == 0 {
                return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
            }
        }
        Ok(self)
    }

    pub fn needs_histogram(&self) -> bool {
        matches!(self, Observer::Percentile { .. })
    }

    pub fn hist_bins(&self) -> Option<usize> {
        match self {
            Observer::MinMax => None,
            Observer::Percentile { bins, .. } => Some(*bins),
        }
    }
}

impl std::fmt::Display for Observer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observer::MinMax => write!(f, "minmax"),
            Observer::Percentile { p, bins } => write!(f, "percentile:{p} (bins={bins})"),
        }
    }
}

/// Fixed-bin histogram over the running `[lo, hi]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            counts: vec![0; bins],
        }
    }

    fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    fn bin_of(&self, v: f64) -> usize {
        if self.hi == self.lo {
            return 0;
        }
        let i = ((v - self.lo) / (self.hi - self.lo) * self.counts.len() as f64).floor();
        (i as usize).min(self.counts.len() - 1)
    }

    /// Grow the range to cover `[lo, hi]`, remapping existing counts by bin center.
    fn grow(&mut self, lo: f64, hi: f64) {
        let (new_lo, new_hi) = (self.lo.min(lo), self.hi.max(hi));
        if self.is_empty() {
            self.lo = new_lo;
            self.hi = new_hi;
            return;
        }
        if new_lo == self.lo && new_hi == self.hi {
            return;
        }
        let old = std::mem::replace(
            self,
            Histogram {
                lo: new_lo,
                hi: new_hi,
                counts: vec![0; self.counts.len()],
            },
        );
        let w = old.bin_width();
        for (i, &c) in old.counts.iter().enumerate() {
            if c > 0 {
                let center = old.lo + (i as f64 + 0.5) * w;
                let j = self.bin_of(center);
                self.counts[j] += c;
            }
        }
    }

    fn add(&mut self, v: f64) {
        let i = self.bin_of(v);
        self.counts[i] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// Streaming statistics for one named tensor site.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    name: String,
    count: u64,
    min: f64,
    max: f64,
    mean: f64,
    m2: f64,
    histogram: Option<Histogram>,
}

impl CalibStats {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            m2: 0.0,
            histogram: None,
        }
    }

    pub fn with_histogram(name: impl Into<String>, bins: usize) -> Self {
        let mut s = Self::new(name);
        s.histogram = Some(Histogram::new(bins));
        s
    }

    /// Stats ready for a given observer kind.
    pub fn for_observer(name: impl Into<String>, observer: &Observer) -> Self {
        match observer.hist_bins() {
            Some(bins) => Self::with_histogram(name, bins),
            None => Self::new(name),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn min_max(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::EmptyStats {
                name: self.name.clone(),
            });
        }
        Ok((self.min, self.max))
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation of everything observed so far.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }

    pub fn histogram(&self) -> Option<&Histogram> {
        self.histogram.as_ref()
    }

    /// Fold a batch of values into the running statistics.
    pub fn observe<R: Real>(&mut self, x: &Tensor<R>) -> Result<()> {
        self.observe_slice(x.data())
    }

    pub fn observe_slice<R: Real>(&mut self, xs: &[R]) -> Result<()> {
        for (i, v) in xs.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "calibration observe",
                    index: i,
                    value: v.as_f64(),
                });
            }
        }
        if let Some(hist) = &mut self.histogram {
            if !xs.is_empty() {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for v in xs {
                    let v = v.as_f64();
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                hist.grow(lo, hi);
                for v in xs {
                    hist.add(v.as_f64());
                }
            }
        }
        for v in xs {
            let v = v.as_f64();
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.count += 1;
            let delta = v - self.mean;
            self.mean += delta / self.count as f64;
            self.m2 += delta * (v - self.mean);
        }
        Ok(())
    }

    /// Combine stats collected on disjoint shards (order-insensitive formulas for
    /// count/min/max/mean/m2; histograms align ranges and add bin counts).
    pub fn merge(&mut self, other: &CalibStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            let name = std::mem::take(&mut self.name);
            *self = other.clone();
            self.name = name;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let delta = other.mean - self.mean;
        let n = n1 + n2;
        self.mean += delta * n2 / n;
        self.m2 += other.m2 + delta * delta * n1 * n2 / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.histogram = match (self.histogram.take(), &other.histogram) {
            (Some(mut a), Some(b)) => {
                let mut b = b.clone();
                a.grow(b.lo, b.hi);
                b.grow(a.lo, a.hi);
                for (dst, src) in a.counts.iter_mut().zip(&b.counts) {
                    *dst += src;
                }
                Some(a)
            }
            (a, _) => a,
        };
    }
}

/// Resolve the calibration range `(alpha, beta)` for one site.
pub fn finalize(stats: &CalibStats, observer: &Observer) -> Result<(f64, f64)> {
    let (min, max) = stats.min_max()?;
    match observer {
        Observer::MinMax => Ok((min, max)),
        Observer::Percentile { p, .. } => {
            let hist = stats.histogram().ok_or(Error::MissingHistogram)?;
            if hist.is_empty() {
                return Err(Error::EmptyStats {
                    name: stats.name().to_string(),
                });
            }
            let total: u64 = hist.counts.iter().sum();
            let trim = (1.0 - p) / 2.0 * total as f64;
            let w = hist.bin_width();
            // drop whole bins from each tail while the dropped mass stays <= trim
            let mut dropped = 0u64;
            let mut i_lo = 0usize;
            for (i, &c) in hist.counts.iter().enumerate() {
                if dropped as f64 + c as f64 <= trim {
                    dropped += c;
                    i_lo = i + 1;
                } else {
                    break;
                }
            }
            let mut dropped = 0u64;
            let mut i_hi = hist.counts.len();
            for (i, &c) in hist.counts.iter().enumerate().rev() {
                if dropped as f64 + c as f64 <= trim {
                    dropped += c;
                    i_hi = i;
                } else {
                    break;
                }
            }
            if i_lo >= i_hi {
                // trimming consumed everything; fall back to the densest single bin
                let best = hist
                    .counts
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                i_lo = best;
                i_hi = best + 1;
            }
            let alpha = (hist.lo + i_lo as f64 * w).max(min);
            let beta = (hist.lo + i_hi as f64 * w).min(max);
            Ok((alpha, beta))
        }
    }
}

/// Activation statistics per instrumented layer input plus direct statistics of the
/// stored weight tensors.
#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub activations: BTreeMap<LayerName, CalibStats>,
    pub weights: BTreeMap<String, CalibStats>,
    pub observer: Observer,
    pub utterances: usize,
}

impl CalibrationOutput {
    /// Finalized `(alpha, beta)` per instrumented layer.
    pub fn ranges(&self) -> Result<BTreeMap<LayerName, (f64, f64)>> {
        self.activations
            .iter()
            .map(|(layer, stats)| Ok((*layer, finalize(stats, &self.observer)?)))
            .collect()
    }
}

/// Run the float model over the calibration set, collecting statistics of each
/// requested layer's input, in utterance-id order.
pub fn run_calibration(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &FeatureSet,
    layers: &[LayerName],
    observer: Observer,
) -> Result<CalibrationOutput> {
    let observer = observer.validated()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut activations: BTreeMap<LayerName, CalibStats> = layers
        .iter()
        .map(|&l| {
            (
                l,
                CalibStats::for_observer(format!("{l}.input"), &observer),
            )
        })
        .collect();
    let mut tap_error = None;
    for (_, _, features) in dataset.iter() {
        forward_with_tap(config, weights, features, None, &mut |layer, tensor| {
            if let Some(stats) = activations.get_mut(&layer) {
                if let Err(e) = stats.observe(tensor) {
                    tap_error.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = tap_error.take() {
            return Err(e);
        }
    }
    let mut weight_stats = BTreeMap::new();
    for (name, tensor) in weights.tensors() {
        let mut stats = CalibStats::new(name.clone());
        stats.observe(tensor)?;
        weight_stats.insert(name.clone(), stats);
    }
    Ok(CalibrationOutput {
        activations,
        weights: weight_stats,
        observer,
        utterances: dataset.len(),
    })
}
