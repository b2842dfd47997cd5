use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::corpus::{DEFAULT_MAX_S, DEFAULT_MIN_S, DEFAULT_TRUNCATE_S};
use crate::eegprep::check_crop_seconds;
use crate::losses::{Aggregation, Direction, DEFAULT_TEMPERATURE};
use crate::ssl::{TemporalWindows, VicregWeights};
use crate::textseg::{parse_clusters, Cluster, Granularity};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    ElmEl,
    ElmL,
    ElmMilEL,
    ElmMilEGivenL,
    ElmMilLGivenE,
    Byol,
    Vicreg,
    Contrawr,
    Rp,
    Ts,
    Cpc,
    Supervised,
}

impl Objective {
    pub const ALL: [Objective; 12] = [
        Objective::ElmEl,
        Objective::ElmL,
        Objective::ElmMilEL,
        Objective::ElmMilEGivenL,
        Objective::ElmMilLGivenE,
        Objective::Byol,
        Objective::Vicreg,
        Objective::Contrawr,
        Objective::Rp,
        Objective::Ts,
        Objective::Cpc,
        Objective::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::ElmEl => "elm_el",
            Objective::ElmL => "elm_l",
            Objective::ElmMilEL => "elm_mil_e_l",
            Objective::ElmMilEGivenL => "elm_mil_eGl",
            Objective::ElmMilLGivenE => "elm_mil_lGe",
            Objective::Byol => "byol",
            Objective::Vicreg => "vicreg",
            Objective::Contrawr => "contrawr",
            Objective::Rp => "rp",
            Objective::Ts => "ts",
            Objective::Cpc => "cpc",
            Objective::Supervised => "supervised",
        }
    }

    /// Objectives trained against report text.
    pub fn is_multimodal(self) -> bool {
        matches!(
            self,
            Objective::ElmEl | Objective::ElmL | Objective::ElmMilEL | Objective::ElmMilEGivenL | Objective::ElmMilLGivenE
        )
    }

    pub fn mil_direction(self) -> Option<Direction> {
        match self {
            Objective::ElmMilEL => Some(Direction::Joint),
            Objective::ElmMilEGivenL => Some(Direction::EGivenL),
            Objective::ElmMilLGivenE => Some(Direction::LGivenE),
            _ => None,
        }
    }

    pub fn default_base_lr(self, crop_seconds: f64) -> f64 {
        let short = crop_seconds <= 5.0;
        match self {
            Objective::Supervised => 1e-3,
            Objective::ElmEl | Objective::ElmL => 0.01,
            Objective::ElmMilEL | Objective::ElmMilEGivenL | Objective::ElmMilLGivenE => {
                if short {
                    0.02
                } else {
                    0.06
                }
            }
            _ => {
                if short {
                    0.1
                } else {
                    0.3
                }
            }
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .iter()
            .copied()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a pretraining run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub objective: Objective,
    pub crop_seconds: f64,
    /// Filters per convolution branch; the representation is three times wider.
    pub width: usize,
    pub n_crops: usize,
    pub m_texts: usize,
    pub clusters: Vec<Cluster>,
    pub granularity: Granularity,
    pub tau: f64,
    pub aggregation: Aggregation,
    pub per_subject_weighting: bool,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub text_seed: u64,
    pub max_crops_per_recording: Option<usize>,
    pub shuffle_reports: bool,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub truncate_s: f64,
    pub ema_decay: f64,
    pub vicreg: VicregWeights,
    pub contrawr_tau: f64,
    pub temporal_windows: TemporalWindows,
    pub between_subject: bool,
    pub cpc_context: usize,
    pub cpc_steps: usize,
    pub cpc_negatives: usize,
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            manifest: None,
            objective,
            crop_seconds: 60.0,
            width: 32,
            n_crops: 32,
            m_texts: 8,
            clusters: Cluster::CONTENT.to_vec(),
            granularity: Granularity::Paragraph,
            tau: DEFAULT_TEMPERATURE,
            aggregation: Aggregation::Mean,
            per_subject_weighting: false,
            base_lr: objective.default_base_lr(60.0),
            batch_size: 1024,
            epochs: 50,
            warmup_epochs: 4,
            weight_decay: 1e-4,
            seed: 0,
            text_seed: 0,
            max_crops_per_recording: None,
            shuffle_reports: false,
            min_duration_s: DEFAULT_MIN_S,
            max_duration_s: DEFAULT_MAX_S,
            truncate_s: DEFAULT_TRUNCATE_S,
            ema_decay: 0.996,
            vicreg: VicregWeights::default(),
            contrawr_tau: 0.1,
            temporal_windows: TemporalWindows::default(),
            between_subject: true,
            cpc_context: 4,
            cpc_steps: 4,
            cpc_negatives: 8,
            cache_dir: None,
        }
    }

    /// Reads every trainer key from `cfg`; unset keys keep their defaults.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let objective: Objective = cfg.get("objective", Objective::ElmMilEL)?;
        let d = Self::new(objective);
        let crop_seconds = cfg.get("crop_seconds", d.crop_seconds)?;
        let clusters = match cfg.raw("clusters") {
            Some(s) => parse_clusters(s)?,
            None => d.clusters.clone(),
        };
        let c = Self {
            manifest: cfg.get_opt("manifest")?,
            objective,
            crop_seconds,
            width: cfg.get("width", d.width)?,
            n_crops: cfg.get("n_crops", d.n_crops)?,
            m_texts: cfg.get("m_texts", d.m_texts)?,
            clusters,
            granularity: cfg.get("granularity", d.granularity)?,
            tau: cfg.get("tau", d.tau)?,
            aggregation: cfg.get("aggregation", d.aggregation)?,
            per_subject_weighting: cfg.get("per_subject_weighting", d.per_subject_weighting)?,
            base_lr: cfg.get("base_lr", objective.default_base_lr(crop_seconds))?,
            batch_size: cfg.get("batch_size", d.batch_size)?,
            epochs: cfg.get("epochs", d.epochs)?,
            warmup_epochs: cfg.get("warmup_epochs", d.warmup_epochs)?,
            weight_decay: cfg.get("weight_decay", d.weight_decay)?,
            seed: cfg.get("seed", d.seed)?,
            text_seed: cfg.get("text_seed", d.text_seed)?,
            max_crops_per_recording: cfg.get_opt("max_crops_per_recording")?,
            shuffle_reports: cfg.get("shuffle_reports", d.shuffle_reports)?,
            min_duration_s: cfg.get("min_duration_s", d.min_duration_s)?,
            max_duration_s: cfg.get("max_duration_s", d.max_duration_s)?,
            truncate_s: cfg.get("truncate_s", d.truncate_s)?,
            ema_decay: cfg.get("ema_decay", d.ema_decay)?,
            vicreg: VicregWeights {
                invariance: cfg.get("vicreg_invariance", d.vicreg.invariance)?,
                variance: cfg.get("vicreg_variance", d.vicreg.variance)?,
                covariance: cfg.get("vicreg_covariance", d.vicreg.covariance)?,
            },
            contrawr_tau: cfg.get("contrawr_tau", d.contrawr_tau)?,
            temporal_windows: TemporalWindows {
                positive: cfg.get("rp_positive_window", d.temporal_windows.positive)?,
                negative: cfg.get("rp_negative_window", d.temporal_windows.negative)?,
            },
            between_subject: cfg.get("between_subject", d.between_subject)?,
            cpc_context: cfg.get("cpc_context", d.cpc_context)?,
            cpc_steps: cfg.get("cpc_steps", d.cpc_steps)?,
            cpc_negatives: cfg.get("cpc_negatives", d.cpc_negatives)?,
            cache_dir: cfg.get_opt("cache_dir")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        check_crop_seconds(self.crop_seconds)?;
        if self.width == 0 || self.n_crops == 0 || self.m_texts == 0 {
            return bad("width, n_crops and m_texts must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if self.objective.mil_direction().is_some() && self.batch_size < 2 * self.n_crops {
            return bad(format!(
                "batch_size {} leaves fewer than two subjects per batch at n_crops {}",
                self.batch_size, self.n_crops
            ));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return bad("need epochs >= 1 and warmup_epochs <= epochs".into());
        }
        if !(self.tau > 0.0) || !(self.contrawr_tau > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("base_lr and weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]".into());
        }
        if self.clusters.is_empty() {
            return bad("clusters must not be empty".into());
        }
        if self.cpc_steps == 0 || self.cpc_context == 0 || self.cpc_negatives == 0 {
            return bad("cpc_context, cpc_steps and cpc_negatives must be positive".into());
        }
        if self.temporal_windows.positive == 0 || self.temporal_windows.negative <= self.temporal_windows.positive {
            return bad("need 0 < rp_positive_window < rp_negative_window".into());
        }
        Ok(())
    }

    /// Subjects per multimodal batch.
    pub fn subjects_per_batch(&self) -> usize {
        if self.objective.mil_direction().is_some() {
            self.batch_size / self.n_crops
        } else {
            self.batch_size
        }
    }

    /// Canonical `key = value` text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let opt = |v: &Option<PathBuf>| v.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let granularity = match self.granularity {
            Granularity::Paragraph => "paragraph",
            Granularity::Sentence => "sentence",
        };
        let clusters: Vec<&str> = self.clusters.iter().map(|c| c.as_str()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("objective", self.objective.to_string());
        kv("manifest", opt(&self.manifest));
        kv("crop_seconds", self.crop_seconds.to_string());
        kv("width", self.width.to_string());
        kv("n_crops", self.n_crops.to_string());
        kv("m_texts", self.m_texts.to_string());
        kv("clusters", clusters.join(","));
        kv("granularity", granularity.into());
        kv("tau", self.tau.to_string());
        kv("aggregation", self.aggregation.as_str().into());
        kv("per_subject_weighting", self.per_subject_weighting.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("seed", self.seed.to_string());
        kv("text_seed", self.text_seed.to_string());
        kv("max_crops_per_recording", self.max_crops_per_recording.map_or("-".into(), |v| v.to_string()));
        kv("shuffle_reports", self.shuffle_reports.to_string());
        kv("min_duration_s", self.min_duration_s.to_string());
        kv("max_duration_s", self.max_duration_s.to_string());
        kv("truncate_s", self.truncate_s.to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("vicreg_invariance", self.vicreg.invariance.to_string());
        kv("vicreg_variance", self.vicreg.variance.to_string());
        kv("vicreg_covariance", self.vicreg.covariance.to_string());
        kv("contrawr_tau", self.contrawr_tau.to_string());
        kv("rp_positive_window", self.temporal_windows.positive.to_string());
        kv("rp_negative_window", self.temporal_windows.negative.to_string());
        kv("between_subject", self.between_subject.to_string());
        kv("cpc_context", self.cpc_context.to_string());
        kv("cpc_steps", self.cpc_steps.to_string());
        kv("cpc_negatives", self.cpc_negatives.to_string());
        kv("cache_dir", opt(&self.cache_dir));
        s
    }

    /// Short hex digest of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
