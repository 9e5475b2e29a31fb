//! Deterministic synthetic speaker features and feature-file ingestion.
//!
//! Generation uses ChaCha8 streams only (no transcendental transforms), so outputs
//! are bit-exact across platforms. Speaker `k` draws its mean vector from a stream
//! seeded with `seed ^ k`; each utterance adds per-frame uniform noise and a moving
//! average over time.
//!
//! Feature file: magic `FEAT`, `F` and `T` as `u32` LE, then `F*T` f32 LE values
//! channel-major. Directory layout: `spk<k>/utt<j>.feat`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Trial;
use crate::tensor::Tensor;
use crate::TensorF;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDatasetSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames: usize,
    pub feat_dim: usize,
    /// Per-dim scale of the speaker mean vectors.
    pub inter_speaker_spread: f32,
    /// Per-frame noise scale.
    pub intra_speaker_noise: f32,
    /// Moving-average window over time.
    pub smoothing_window: usize,
    pub seed: u64,
}

impl Default for SpeakerDatasetSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 10,
            frames: 100,
            feat_dim: 16,
            inter_speaker_spread: 1.0,
            intra_speaker_noise: 0.3,
            smoothing_window: 5,
            seed: 42,
        }
    }
}

impl SpeakerDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0
            || self.utts_per_speaker == 0
            || self.frames == 0
            || self.feat_dim == 0
            || self.smoothing_window == 0
        {
            return Err(Error::InvalidArgument(
                "dataset spec counts must be >= 1".into(),
            ));
        }
        if self.inter_speaker_spread.is_nan() || self.inter_speaker_spread <= 0.0 {
            return Err(Error::InvalidArgument(
                "inter_speaker_spread must be positive".into(),
            ));
        }
        if self.intra_speaker_noise < 0.0 {
            return Err(Error::InvalidArgument(
                "intra_speaker_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// One-line description for report metadata.
    pub fn describe(&self) -> String {
        format!(
            "{}spk x {}utt x {}frames, F={}, spread={}, noise={}, smooth={}, seed={}",
            self.n_speakers,
            self.utts_per_speaker,
            self.frames,
            self.feat_dim,
            self.inter_speaker_spread,
            self.intra_speaker_noise,
            self.smoothing_window,
            self.seed
        )
    }
}

/// Which half of the corpus a feature set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Calibration,
    Evaluation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Calibration => write!(f, "calib"),
            Split::Evaluation => write!(f, "eval"),
        }
    }
}

/// Utterance-id keyed feature map. Ids look like `spk003/utt007`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    split: Split,
    utts: BTreeMap<String, (String, TensorF)>,
}

impl FeatureSet {
    pub fn new(split: Split) -> Self {
        Self {
            split,
            utts: BTreeMap::new(),
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.utts.values().next().map(|(_, t)| t.dim(0))
    }

    pub fn insert(&mut self, utt_id: String, speaker_id: String, features: TensorF) {
        self.utts.insert(utt_id, (speaker_id, features));
    }

    pub fn get(&self, utt_id: &str) -> Result<&TensorF> {
        self.utts
            .get(utt_id)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownUtterance(utt_id.to_string()))
    }

    pub fn speaker_of(&self, utt_id: &str) -> Result<&str> {
        self.utts
            .get(utt_id)
            .map(|(s, _)| s.as_str())
            .ok_or_else(|| Error::UnknownUtterance(utt_id.to_string()))
    }

    /// Iterate `(utt_id, speaker_id, features)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &TensorF)> {
        self.utts
            .iter()
            .map(|(id, (spk, t))| (id.as_str(), spk.as_str(), t))
    }

    /// Utterance ids grouped per speaker, in id order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (id, (spk, _)) in &self.utts {
            map.entry(spk.as_str()).or_default().push(id.as_str());
        }
        map
    }
}

fn moving_average(row: &[f32], window: usize) -> Vec<f32> {
    if window <= 1 {
        return row.to_vec();
    }
    let half = window / 2;
    let t = row.len();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(t);
        let sum: f64 = row[lo..hi].iter().map(|&v| v as f64).sum();
        out.push((sum / (hi - lo) as f64) as f32);
    }
    out
}

/// Generate the synthetic feature set for one split.
pub fn generate(spec: &SpeakerDatasetSpec, split: Split) -> Result<FeatureSet> {
    spec.validate()?;
    let mut fs = FeatureSet::new(split);
    let (f, t) = (spec.feat_dim, spec.frames);
    for k in 0..spec.n_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ k as u64);
        let mean: Vec<f32> = (0..f)
            .map(|_| rng.gen_range(-1.0f32..1.0) * spec.inter_speaker_spread)
            .collect();
        for j in 0..spec.utts_per_speaker {
            let mut data = Vec::with_capacity(f * t);
            for &m in &mean {
                let raw: Vec<f32> = (0..t)
                    .map(|_| m + rng.gen_range(-1.0f32..1.0) * spec.intra_speaker_noise)
                    .collect();
                data.extend(moving_average(&raw, spec.smoothing_window));
            }
            fs.insert(
                format!("spk{k:03}/utt{j:03}"),
                format!("spk{k:03}"),
                Tensor::new(vec![f, t], data)?,
            );
        }
    }
    Ok(fs)
}

/// Deterministically sample verification trials: exact requested counts, never
/// pairing an utterance with itself.
pub fn build_trials(
    fs: &FeatureSet,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::TrialSampling(
            "need at least one target and one nontarget trial".into(),
        ));
    }
    let by_speaker = fs.by_speaker();
    let speakers: Vec<&str> = by_speaker.keys().copied().collect();
    let multi: Vec<&str> = by_speaker
        .iter()
        .filter(|(_, utts)| utts.len() >= 2)
        .map(|(s, _)| *s)
        .collect();
    if multi.is_empty() {
        return Err(Error::TrialSampling(
            "no speaker has two utterances for target trials".into(),
        ));
    }
    if speakers.len() < 2 {
        return Err(Error::TrialSampling(
            "need two speakers for nontarget trials".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for _ in 0..n_target {
        let spk = multi[rng.gen_range(0..multi.len())];
        let utts = &by_speaker[spk];
        let a = rng.gen_range(0..utts.len());
        let mut b = rng.gen_range(0..utts.len() - 1);
        if b >= a {
            b += 1;
        }
        trials.push(Trial {
            target: true,
            enroll: utts[a].to_string(),
            test: utts[b].to_string(),
        });
    }
    for _ in 0..n_nontarget {
        let sa = rng.gen_range(0..speakers.len());
        let mut sb = rng.gen_range(0..speakers.len() - 1);
        if sb >= sa {
            sb += 1;
        }
        let ua = &by_speaker[speakers[sa]];
        let ub = &by_speaker[speakers[sb]];
        trials.push(Trial {
            target: false,
            enroll: ua[rng.gen_range(0..ua.len())].to_string(),
            test: ub[rng.gen_range(0..ub.len())].to_string(),
        });
    }
    Ok(trials)
}

/// Write one utterance per file under `dir/spk<k>/utt<j>.feat`.
pub fn save_features(fs: &FeatureSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (id, _, tensor) in fs.iter() {
        let path = dir.join(format!("{id}.feat"));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut bytes = Vec::with_capacity(12 + tensor.numel() * 4);
        bytes.extend_from_slice(FEAT_MAGIC);
        bytes.extend_from_slice(&(tensor.dim(0) as u32).to_le_bytes());
        bytes.extend_from_slice(&(tensor.dim(1) as u32).to_le_bytes());
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn load_feature_file(path: &Path) -> Result<TensorF> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FEAT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FEAT",
        });
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + f * t * 4;
    if bytes.len() != need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} bytes for F={f}, T={t}, got {}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![f, t], data)
}

/// Load every `spk*/utt*.feat` under `dir` (sorted, deterministic).
pub fn load_features(dir: impl AsRef<Path>, split: Split) -> Result<FeatureSet> {
    let dir = dir.as_ref();
    let mut fs = FeatureSet::new(split);
    let mut speaker_dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    speaker_dirs.sort();
    let mut feat_dim: Option<usize> = None;
    for spk_dir in speaker_dirs {
        let speaker = spk_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(&spk_dir)
            .map_err(|e| Error::io(&spk_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "feat"))
            .collect();
        files.sort();
        for file in files {
            let tensor = load_feature_file(&file)?;
            match feat_dim {
                None => feat_dim = Some(tensor.dim(0)),
                Some(f) if f != tensor.dim(0) => {
                    return Err(Error::FeatDimMismatch {
                        path: file,
                        expected: f,
                        actual: tensor.dim(0),
                    })
                }
                _ => {}
            }
            let stem = file
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            fs.insert(format!("{speaker}/{stem}"), speaker.clone(), tensor);
        }
    }
    if fs.is_empty() {
        return Err(Error::NoFeatureFiles(dir.to_path_buf()));
    }
    Ok(fs)
}

/// Mean cosine similarity of raw flattened features over same-speaker pairs minus the
/// mean over different-speaker pairs.
pub fn separation_statistic(fs: &FeatureSet) -> (f64, f64) {
    let cos = |a: &TensorF, b: &TensorF| -> f64 {
        let mut dot = 0f64;
        let mut na = 0f64;
        let mut nb = 0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            dot += *x as f64 * *y as f64;
            na += (*x as f64) * (*x as f64);
            nb += (*y as f64) * (*y as f64);
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let entries: Vec<(&str, &TensorF)> = fs.iter().map(|(id, spk, t)| {
        let _ = id;
        (spk, t)
    }).collect();
    let mut same = (0f64, 0usize);
    let mut diff = (0f64, 0usize);
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let c = cos(entries[i].1, entries[j].1);
            if entries[i].0 == entries[j].0 {
                same.0 += c;
                same.1 += 1;
            } else {
                diff.0 += c;
                diff.1 += 1;
            }
        }
    }
    (
        same.0 / same.1.max(1) as f64,
        diff.0 / diff.1.max(1) as f64,
    )
}
