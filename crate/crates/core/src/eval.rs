//! Trial-based speaker verification scoring and equal error rate.
//!
//! The operating point sweeps candidate thresholds at midpoints between consecutive
//! distinct scores (plus infinite sentinels), accepting when `score >= t`, and picks
//! the threshold minimizing `|FAR - FRR|` (ties go to the lower threshold). The EER
//! is `(FAR + FRR) / 2` there.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelWeights, QuantContext};
use crate::num::Real;
use crate::tensor::Tensor;

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Equal error rate as a fraction in [0, 1].
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Cosine similarity of two equal-length embeddings.
pub fn cosine_score<R: Real>(e1: &Tensor<R>, e2: &Tensor<R>) -> Result<R> {
    e1.expect_rank("cosine enroll", 1)?;
    e2.expect_rank("cosine test", 1)?;
    if e1.dim(0) != e2.dim(0) {
        return Err(Error::ShapeMismatch {
            context: "cosine_score",
            axis: "embedding dim",
            expected: e1.dim(0),
            actual: e2.dim(0),
        });
    }
    let mut dot = 0f64;
    let mut n1 = 0f64;
    let mut n2 = 0f64;
    for (a, b) in e1.data().iter().zip(e2.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(R::from_f64_lossy(dot / (n1.sqrt() * n2.sqrt())))
}

/// Equal error rate and its threshold from `(score, is_target)` pairs.
pub fn compute_eer<R: Real>(scores: &[(R, bool)]) -> Result<(f64, f64)> {
    let targets: Vec<f64> = scores
        .iter()
        .filter(|(_, t)| *t)
        .map(|(s, _)| s.as_f64())
        .collect();
    let nontargets: Vec<f64> = scores
        .iter()
        .filter(|(_, t)| !*t)
        .map(|(s, _)| s.as_f64())
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptyClass { class: "target" });
    }
    if nontargets.is_empty() {
        return Err(Error::EmptyClass { class: "nontarget" });
    }

    let mut distinct: Vec<f64> = scores.iter().map(|(s, _)| s.as_f64()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for pair in distinct.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);

    let mut best: Option<(f64, f64, f64)> = None; // (|far - frr|, threshold, eer)
    for &t in &candidates {
        let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
        let frr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
        let gap = (far - frr).abs();
        // candidates ascend, so strict improvement keeps the lowest threshold on ties
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, t, (far + frr) / 2.0));
        }
    }
    let (_, threshold, eer) = best.expect("at least two candidates");
    Ok((eer, threshold))
}

/// Embed every referenced utterance once, score all trials by cosine, and compute
/// the EER. Deterministic for fixed inputs.
pub fn evaluate_model(
    config: &ModelConfig,
    weights: &ModelWeights,
    qctx: Option<&QuantContext>,
    features: &FeatureSet,
    trials: &[Trial],
) -> Result<EvalReport> {
    let mut wanted: Vec<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    wanted.sort();
    wanted.dedup();
    let mut cache = BTreeMap::new();
    for id in wanted {
        let emb = forward(config, weights, features.get(id)?, qctx)?;
        cache.insert(id, emb);
    }
    let mut scores = Vec::with_capacity(trials.len());
    for trial in trials {
        let e1 = &cache[trial.enroll.as_str()];
        let e2 = &cache[trial.test.as_str()];
        scores.push((cosine_score(e1, e2)?, trial.target));
    }
    let (eer, threshold) = compute_eer(&scores)?;
    Ok(EvalReport {
        eer,
        threshold,
        n_target: scores.iter().filter(|(_, t)| *t).count(),
        n_nontarget: scores.iter().filter(|(_, t)| !*t).count(),
    })
}

/// Trial list file: one `"<target 0|1> <enroll_id> <test_id>"` per line.
pub fn save_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for t in trials {
        text.push_str(if t.target { "1 " } else { "0 " });
        text.push_str(&t.enroll);
        text.push(' ');
        text.push_str(&t.test);
        text.push('\n');
    }
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        if parts.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", parts.len())));
        }
        let target = match parts[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("target flag must be 0 or 1, got '{other}'"))),
        };
        trials.push(Trial {
            target,
            enroll: parts[1].to_string(),
            test: parts[2].to_string(),
        });
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(data).unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        let a = t(vec![1.0, 2.0, 3.0]);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-7);

        let x = t(vec![1.0, 0.0]);
        let y = t(vec![0.0, 1.0]);
        assert_eq!(cosine_score(&x, &y).unwrap(), 0.0);

        let neg = t(vec![-1.0, -2.0, -3.0]);
        assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-7);

        assert!(matches!(
            cosine_score(&a, &t(vec![0.0, 0.0, 0.0])).unwrap_err(),
            Error::ZeroNorm
        ));
    }

    #[test]
    fn eer_hand_cases() {
        let (eer, _) = compute_eer(&[
            (0.9f64, true),
            (0.8, true),
            (0.1, false),
            (0.2, false),
        ])
        .unwrap();
        assert_eq!(eer, 0.0);

        // frozen from the brute-force sweep oracle
        let (eer, thr) = compute_eer(&[
            (0.8f64, true),
            (0.2, true),
            (0.7, false),
            (0.1, false),
        ])
        .unwrap();
        assert_eq!(eer, 0.5);
        assert!(thr > 0.2 && thr < 0.7, "threshold {thr}");

        let (eer, _) = compute_eer(&[(0.9f64, true), (0.1, false)]).unwrap();
        assert_eq!(eer, 0.0);

        assert!(matches!(
            compute_eer(&[(0.5f64, true)]).unwrap_err(),
            Error::EmptyClass { class: "nontarget" }
        ));
    }

    /// Exhaustive enumeration over all candidate thresholds, counting rates by direct
    /// scans; independent of the implementation's path.
    fn eer_oracle(scores: &[(f64, bool)]) -> (f64, f64) {
        let mut cands: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
        let mut sorted: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        for w in sorted.windows(2) {
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands.sort_by(f64::total_cmp);
        let nt = scores.iter().filter(|(_, t)| *t).count() as f64;
        let nn = scores.iter().filter(|(_, t)| !*t).count() as f64;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &t in &cands {
            let far = scores.iter().filter(|(s, tt)| !*tt && *s >= t).count() as f64 / nn;
            let frr = scores.iter().filter(|(s, tt)| *tt && *s < t).count() as f64 / nt;
            if (far - frr).abs() < best.0 {
                best = ((far - frr).abs(), t, (far + frr) / 2.0);
            }
        }
        (best.2, best.1)
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..=64);
            let mut scores: Vec<(f64, bool)> = (0..n)
                .map(|i| (rng.gen_range(-1.0..1.0), i % 2 == 0))
                .collect();
            // quantize some scores to provoke ties
            for (s, _) in scores.iter_mut().skip(n / 2) {
                *s = (*s * 4.0).round() / 4.0;
            }
            let (eer, thr) = compute_eer(&scores).unwrap();
            let (oe, ot) = eer_oracle(&scores);
            assert_eq!(eer, oe);
            assert_eq!(thr, ot);
        }
    }

    #[test]
    fn trials_file_roundtrip() {
        let trials = vec![
            Trial {
                target: true,
                enroll: "spk000/utt000".into(),
                test: "spk000/utt001".into(),
            },
            Trial {
                target: false,
                enroll: "spk000/utt000".into(),
                test: "spk001/utt000".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        save_trials(&trials, &path).unwrap();
        assert_eq!(load_trials(&path).unwrap(), trials);

        std::fs::write(&path, "2 a b\n").unwrap();
        assert!(matches!(
            load_trials(&path).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    proptest! {
        /// EER is invariant under strictly increasing transforms of all scores.
        #[test]
        fn monotone_transform_invariance(
            raw in proptest::collection::vec((-1.0f64..1.0, proptest::bool::ANY), 4..48),
        ) {
            let has_t = raw.iter().any(|(_, t)| *t);
            let has_n = raw.iter().any(|(_, t)| !*t);
            prop_assume!(has_t && has_n);
            let (eer, _) = compute_eer(&raw).unwrap();
            let cubed: Vec<(f64, bool)> =
                raw.iter().map(|(s, t)| (s * s * s + 2.0 * s, *t)).collect();
            let (eer2, _) = compute_eer(&cubed).unwrap();
            prop_assert_eq!(eer, eer2);
        }

        /// 0 <= EER <= 1, and perfectly separated classes give 0.
        #[test]
        fn eer_bounds(
            ts in proptest::collection::vec(0.6f64..1.0, 1..20),
            ns in proptest::collection::vec(-1.0f64..0.4, 1..20),
        ) {
            let mut scores: Vec<(f64, bool)> = ts.iter().map(|&s| (s, true)).collect();
            scores.extend(ns.iter().map(|&s| (s, false)));
            let (eer, _) = compute_eer(&scores).unwrap();
            prop_assert_eq!(eer, 0.0);

            // mixing classes keeps the rate in bounds
            let swapped: Vec<(f64, bool)> = scores.iter().map(|(s, t)| (-s, *t)).collect();
            let (worst, _) = compute_eer(&swapped).unwrap();
            prop_assert!((0.0..=1.0).contains(&worst));
        }

        /// Duplicating every trial leaves the EER unchanged.
        #[test]
        fn duplication_invariance(
            raw in proptest::collection::vec((-1.0f64..1.0, proptest::bool::ANY), 2..32),
        ) {
            prop_assume!(raw.iter().any(|(_, t)| *t) && raw.iter().any(|(_, t)| !*t));
            let (eer, thr) = compute_eer(&raw).unwrap();
            let mut doubled = raw.clone();
            doubled.extend(raw.iter().cloned());
            let (eer2, thr2) = compute_eer(&doubled).unwrap();
            prop_assert_eq!(eer, eer2);
            prop_assert_eq!(thr, thr2);
        }
    }
}
