use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{filter_by_duration, Label, Manifest, Recording, Split};
use crate::eegprep::{crop, preprocess, Crop, Montage, StandardSignal};
use crate::nn::Tensor;
use crate::textseg::{classify_summary, eligible_units, Cluster, ClusterLexicon, Granularity};
use crate::{Error, Result};

pub const CACHE_ENV: &str = "ELMKIT_CACHE";

/// How a manifest is turned into crops and text units.
#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    pub crop_seconds: f64,
    pub max_crops_per_recording: Option<usize>,
    pub clusters: Vec<Cluster>,
    pub granularity: Granularity,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub truncate_s: f64,
    pub cache_dir: Option<PathBuf>,
}

impl DataOptions {
    pub fn from_config(cfg: &super::ExperimentConfig) -> Self {
        Self {
            crop_seconds: cfg.crop_seconds,
            max_crops_per_recording: cfg.max_crops_per_recording,
            clusters: cfg.clusters.clone(),
            granularity: cfg.granularity,
            min_duration_s: cfg.min_duration_s,
            max_duration_s: cfg.max_duration_s,
            truncate_s: cfg.truncate_s,
            cache_dir: cfg.cache_dir.clone(),
        }
    }

    /// Explicit cache directory, else `$ELMKIT_CACHE`.
    pub fn resolved_cache(&self) -> Option<PathBuf> {
        self.cache_dir.clone().or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }
}

#[derive(Debug, Clone)]
pub struct RecordingCrops {
    pub subject_id: String,
    pub session_id: String,
    pub label: Option<Label>,
    pub split: Split,
    pub crops: Vec<Crop>,
}

#[derive(Debug, Clone)]
pub struct SubjectEntry {
    pub id: String,
    /// `(recording, crop)` pairs over all of the subject's sessions.
    pub crops: Vec<(usize, usize)>,
    pub recordings: Vec<usize>,
    /// Eligible report units over all sessions.
    pub texts: Vec<String>,
    pub label: Option<Label>,
}

/// Preprocessed, cropped recordings grouped by subject.
#[derive(Debug, Clone)]
pub struct CropDataset {
    pub crop_len: usize,
    pub recordings: Vec<RecordingCrops>,
    pub subjects: Vec<SubjectEntry>,
}

fn cache_key(path: &Path, truncate_s: Option<f64>) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(path.display().to_string().as_bytes());
    h.update(meta.len().to_le_bytes());
    if let Ok(m) = meta.modified() {
        if let Ok(d) = m.duration_since(std::time::UNIX_EPOCH) {
            h.update(d.as_nanos().to_le_bytes());
        }
    }
    h.update(format!("{truncate_s:?}").as_bytes());
    Ok(h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect())
}

/// Preprocesses one manifest entry, reusing a cached standardized signal when present.
pub fn standardized_signal(
    manifest: &Manifest,
    entry: &crate::corpus::ManifestEntry,
    montage: &Montage,
    cache: Option<&Path>,
) -> Result<StandardSignal> {
    let cached = match cache {
        Some(dir) => {
            let key = cache_key(&manifest.resolve(&entry.signal_path), entry.truncate_s)?;
            Some(dir.join(format!("{key}.f32")))
        }
        None => None,
    };
    if let Some(p) = &cached {
        if p.exists() {
            let rec = Recording::read(&entry.subject_id, &entry.session_id, p, None)?;
            return StandardSignal::from_recording(rec);
        }
    }
    let sig = preprocess(&manifest.load_recording(entry)?, montage)?;
    if let Some(p) = &cached {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        sig.to_recording().write(p)?;
    }
    Ok(sig)
}

impl CropDataset {
    /// Loads the given splits of `manifest`: duration filter, preprocessing,
    /// cropping and report segmentation.
    pub fn load(manifest: &Manifest, splits: &[Split], opts: &DataOptions) -> Result<Self> {
        let part = filter_by_duration(&manifest.split(splits), opts.min_duration_s, opts.max_duration_s, opts.truncate_s)?;
        let montage = Montage::tcp();
        let lexicon = ClusterLexicon::shipped();
        let cache = opts.resolved_cache();
        let mut recordings = Vec::new();
        let mut texts: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &part.entries {
            let sig = standardized_signal(&part, e, &montage, cache.as_deref())?;
            let crops = match crop(&sig, opts.crop_seconds, opts.max_crops_per_recording) {
                Ok(c) => c,
                Err(Error::TooShort { .. }) => {
                    log::warn!("{}/{}: shorter than one crop, skipped", e.subject_id, e.session_id);
                    continue;
                }
                Err(err) => return Err(err),
            };
            let report = part.load_report(e, &lexicon)?;
            let label = e.label.or_else(|| {
                report.as_ref().and_then(|r| r.summary.as_deref()).map(classify_summary).filter(|l| *l != Label::Unknown)
            });
            if let Some(r) = &report {
                texts.entry(e.subject_id.clone()).or_default().extend(eligible_units(r, &opts.clusters, opts.granularity));
            }
            recordings.push(RecordingCrops {
                subject_id: e.subject_id.clone(),
                session_id: e.session_id.clone(),
                label,
                split: e.split,
                crops,
            });
        }
        Ok(Self::assemble(crate::eegprep::check_crop_seconds(opts.crop_seconds)?, recordings, texts))
    }

    /// Groups recordings by subject in first-appearance order.
    pub fn assemble(crop_len: usize, recordings: Vec<RecordingCrops>, mut texts: BTreeMap<String, Vec<String>>) -> Self {
        let mut subjects: Vec<SubjectEntry> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (ri, r) in recordings.iter().enumerate() {
            let si = *index.entry(r.subject_id.clone()).or_insert_with(|| {
                subjects.push(SubjectEntry {
                    id: r.subject_id.clone(),
                    crops: Vec::new(),
                    recordings: Vec::new(),
                    texts: texts.remove(&r.subject_id).unwrap_or_default(),
                    label: None,
                });
                subjects.len() - 1
            });
            let s = &mut subjects[si];
            s.recordings.push(ri);
            s.crops.extend((0..r.crops.len()).map(|c| (ri, c)));
            s.label = s.label.or(r.label);
        }
        Self { crop_len, recordings, subjects }
    }

    pub fn num_crops(&self) -> usize {
        self.recordings.iter().map(|r| r.crops.len()).sum()
    }

    pub fn crop(&self, at: (usize, usize)) -> &Crop {
        &self.recordings[at.0].crops[at.1]
    }

    /// Every `(recording, crop)` index in storage order.
    pub fn all_crops(&self) -> Vec<(usize, usize)> {
        self.recordings.iter().enumerate().flat_map(|(r, rec)| (0..rec.crops.len()).map(move |c| (r, c))).collect()
    }

    /// Subjects with at least one crop and one text unit.
    pub fn multimodal_subjects(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.texts.is_empty() {
                log::warn!("subject {} has no eligible report text and is skipped", s.id);
            } else if !s.crops.is_empty() {
                out.push(i);
            }
        }
        out
    }

    /// Reassigns every subject's report units to another subject (a random
    /// derangement), breaking the EEG/report pairing.
    pub fn shuffle_reports<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.subjects.len();
        if n < 2 {
            return;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        // Rotating a random order by one gives a derangement.
        let texts: Vec<Vec<String>> = self.subjects.iter().map(|s| s.texts.clone()).collect();
        for k in 0..n {
            self.subjects[perm[k]].texts = texts[perm[(k + 1) % n]].clone();
        }
    }

    /// Stacks crops into a `[B, C, L]` tensor.
    pub fn tensor(&self, idx: &[(usize, usize)]) -> Tensor<f32> {
        crops_tensor(&idx.iter().map(|&i| self.crop(i)).collect::<Vec<_>>())
    }
}

pub fn crops_tensor(crops: &[&Crop]) -> Tensor<f32> {
    let (c, l) = crops.first().map_or((0, 0), |k| (k.channels, k.len));
    let mut data = Vec::with_capacity(crops.len() * c * l);
    for k in crops {
        data.extend_from_slice(&k.data);
    }
    Tensor::from_vec(&[crops.len(), c, l], data)
}
