//! Recordings, reports and the manifest that ties them to subjects and splits.
//!
//! Signals live in raw little-endian `f32` files (channel-major) next to a
//! `<signal>.meta` sidecar of `key=value` lines. The manifest is a
//! tab-separated table with a header row.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use crate::textseg::{segment_report, ClusterLexicon, Segment};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reference {
    Ar,
    Le,
    Other(String),
}

impl Reference {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_uppercase().as_str() {
            "AR" => Reference::Ar,
            "LE" => Reference::Le,
            _ => Reference::Other(s.trim().to_string()),
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Ar => f.write_str("AR"),
            Reference::Le => f.write_str("LE"),
            Reference::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
            Label::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Split::Pretrain),
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Contents of a signal sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMeta {
    pub channels: usize,
    pub samples: usize,
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub reference: Reference,
}

impl SignalMeta {
    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.sampling_rate
    }

    pub fn to_text(&self) -> String {
        format!(
            "channels={}\nsamples={}\nsampling_rate={}\nchannel_names={}\nreference={}\n",
            self.channels,
            self.samples,
            self.sampling_rate,
            self.channel_names.join(","),
            self.reference
        )
    }

    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k).ok_or_else(|| Error::Parse { path: origin.into(), line: 0, message: format!("missing key `{k}`") })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|e| Error::Parse { path: origin.into(), line: 0, message: format!("{k}: {e}") })
        };
        let meta = Self {
            channels: num("channels")? as usize,
            samples: num("samples")? as usize,
            sampling_rate: num("sampling_rate")?,
            channel_names: get("channel_names")?.split(',').map(|s| s.trim().to_string()).collect(),
            reference: Reference::parse(get("reference")?),
        };
        meta.validate(origin)?;
        Ok(meta)
    }

    fn validate(&self, origin: &str) -> Result<()> {
        let bad = |message: String| Err(Error::Parse { path: origin.into(), line: 0, message });
        if self.channels == 0 || self.samples == 0 {
            return bad("channel and sample counts must be positive".into());
        }
        if !(self.sampling_rate > 0.0) {
            return bad(format!("sampling rate must be positive, got {}", self.sampling_rate));
        }
        if self.channel_names.len() != self.channels {
            return bad(format!("{} channel names for {} channels", self.channel_names.len(), self.channels));
        }
        Ok(())
    }

    pub fn read(signal_path: &Path) -> Result<Self> {
        let p = sidecar_path(signal_path);
        let src = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Self::parse(&src, &p.display().to_string())
    }
}

pub fn sidecar_path(signal_path: &Path) -> PathBuf {
    let mut s = signal_path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Path of the one-sentence summary accompanying a report (`x.txt` -> `x.summary.txt`).
pub fn summary_path(report_path: &Path) -> PathBuf {
    let stem = report_path.to_string_lossy();
    let base = stem.strip_suffix(".txt").unwrap_or(&stem);
    PathBuf::from(format!("{base}.summary.txt"))
}

/// One session's multichannel signal in microvolts, `signal[c * samples + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub session_id: String,
    pub signal: Vec<f32>,
    pub channels: usize,
    pub samples: usize,
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub reference: Reference,
}

impl Recording {
    pub fn meta(&self) -> SignalMeta {
        SignalMeta {
            channels: self.channels,
            samples: self.samples,
            sampling_rate: self.sampling_rate,
            channel_names: self.channel_names.clone(),
            reference: self.reference.clone(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.signal[c * self.samples..(c + 1) * self.samples]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.sampling_rate
    }

    /// Writes the binary signal and its sidecar.
    pub fn write(&self, signal_path: &Path) -> Result<()> {
        if let Some(dir) = signal_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes: Vec<u8> = self.signal.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(signal_path, bytes).map_err(|e| Error::io(signal_path, e))?;
        let side = sidecar_path(signal_path);
        std::fs::write(&side, self.meta().to_text()).map_err(|e| Error::io(&side, e))
    }

    /// Reads a signal, keeping at most `max_samples` samples per channel.
    pub fn read(subject_id: &str, session_id: &str, signal_path: &Path, max_samples: Option<usize>) -> Result<Self> {
        let meta = SignalMeta::read(signal_path)?;
        let bytes = std::fs::read(signal_path).map_err(|e| Error::io(signal_path, e))?;
        let expected = meta.channels * meta.samples * 4;
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch {
                what: format!("byte length of {}", signal_path.display()),
                expected,
                actual: bytes.len(),
            });
        }
        let keep = max_samples.map_or(meta.samples, |m| m.min(meta.samples));
        let mut signal = Vec::with_capacity(meta.channels * keep);
        for c in 0..meta.channels {
            let row = &bytes[c * meta.samples * 4..(c * meta.samples + keep) * 4];
            signal.extend(row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            signal,
            channels: meta.channels,
            samples: keep,
            sampling_rate: meta.sampling_rate,
            channel_names: meta.channel_names,
            reference: meta.reference,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub subject_id: String,
    pub session_id: String,
    pub raw_text: String,
    pub segments: Vec<Segment>,
    pub summary: Option<String>,
}

impl Report {
    pub fn from_text(subject_id: &str, session_id: &str, raw: &str, summary: Option<String>, lexicon: &ClusterLexicon) -> Self {
        Self {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            raw_text: raw.to_string(),
            segments: segment_report(raw, lexicon),
            summary,
        }
    }

    /// Whether at least one segment falls in a content cluster.
    pub fn has_content(&self) -> bool {
        self.segments.iter().any(|s| s.cluster != crate::textseg::Cluster::Excluded && !s.body.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub session_id: String,
    /// As written in the manifest, relative to the manifest directory unless absolute.
    pub signal_path: PathBuf,
    pub report_path: Option<PathBuf>,
    pub label: Option<Label>,
    pub split: Split,
    /// Keep only this many seconds of signal when loading.
    pub truncate_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const HEADER: [&str; 6] = ["subject_id", "session_id", "signal_path", "report_path", "label", "split"];
const TRUNCATE_COLUMN: &str = "truncate_s";

pub const DEFAULT_MIN_S: f64 = 70.0;
pub const DEFAULT_MAX_S: f64 = 9000.0;
pub const DEFAULT_TRUNCATE_S: f64 = 2700.0;

impl Manifest {
    pub fn parse(src: &str, root: &Path, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut has_truncate = false;
        let mut seen_header = false;
        for (i, line) in src.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let err = |message: String| Error::Parse { path: origin.into(), line: lineno, message };
            if !seen_header {
                seen_header = true;
                if cols.len() < 6 || cols[..6] != HEADER {
                    return Err(err(format!("expected header `{}`", HEADER.join("\\t"))));
                }
                has_truncate = cols.get(6) == Some(&TRUNCATE_COLUMN);
                continue;
            }
            let want = if has_truncate { 7 } else { 6 };
            if cols.len() != want {
                return Err(err(format!("expected {want} tab-separated columns, found {}", cols.len())));
            }
            let split = Split::parse(cols[5]).ok_or_else(|| err(format!("unknown split `{}`", cols[5])))?;
            let label = match cols[4] {
                "-" => None,
                "normal" => Some(Label::Normal),
                "abnormal" => Some(Label::Abnormal),
                "unknown" => Some(Label::Unknown),
                other => return Err(err(format!("unknown label `{other}`"))),
            };
            let truncate_s = match cols.get(6) {
                None | Some(&"-") => None,
                Some(v) => Some(v.parse::<f64>().map_err(|e| err(format!("truncate_s: {e}")))?),
            };
            if cols[0].is_empty() || cols[2].is_empty() || cols[2] == "-" {
                return Err(err("subject_id and signal_path are required".into()));
            }
            entries.push(ManifestEntry {
                subject_id: cols[0].into(),
                session_id: cols[1].into(),
                signal_path: cols[2].into(),
                report_path: (cols[3] != "-").then(|| cols[3].into()),
                label,
                split,
                truncate_s,
            });
        }
        let m = Self { root: root.to_path_buf(), entries };
        m.check_leakage()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&src, &root, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        let has_truncate = self.entries.iter().any(|e| e.truncate_s.is_some());
        let mut out = HEADER.join("\t");
        if has_truncate {
            out.push('\t');
            out.push_str(TRUNCATE_COLUMN);
        }
        out.push('\n');
        for e in &self.entries {
            let report = e.report_path.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let label = e.label.map_or("-", Label::as_str);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.subject_id,
                e.session_id,
                e.signal_path.display(),
                report,
                label,
                e.split.as_str()
            ));
            if has_truncate {
                out.push('\t');
                out.push_str(&e.truncate_s.map_or("-".to_string(), |t| t.to_string()));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Subjects appearing in the pretrain split and in any evaluation split.
    pub fn leaked_subjects(&self) -> Vec<String> {
        let pre: BTreeSet<&str> =
            self.entries.iter().filter(|e| e.split == Split::Pretrain).map(|e| e.subject_id.as_str()).collect();
        let eval: BTreeSet<&str> =
            self.entries.iter().filter(|e| e.split != Split::Pretrain).map(|e| e.subject_id.as_str()).collect();
        pre.intersection(&eval).map(|s| s.to_string()).collect()
    }

    pub fn check_leakage(&self) -> Result<()> {
        let leaked = self.leaked_subjects();
        if leaked.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage(leaked))
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn signal_meta(&self, e: &ManifestEntry) -> Result<SignalMeta> {
        SignalMeta::read(&self.resolve(&e.signal_path))
    }

    pub fn load_recording(&self, e: &ManifestEntry) -> Result<Recording> {
        let path = self.resolve(&e.signal_path);
        let meta = SignalMeta::read(&path)?;
        let max = e.truncate_s.map(|t| (t * meta.sampling_rate).floor() as usize);
        Recording::read(&e.subject_id, &e.session_id, &path, max)
    }

    /// Loads and segments the entry's report; summaries are picked up when present.
    pub fn load_report(&self, e: &ManifestEntry, lexicon: &ClusterLexicon) -> Result<Option<Report>> {
        let Some(rel) = &e.report_path else { return Ok(None) };
        let path = self.resolve(rel);
        let raw = std::fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
        let sp = summary_path(&path);
        let summary = match std::fs::read_to_string(&sp) {
            Ok(s) => Some(s.trim().to_string()),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => None,
            Err(err) => return Err(Error::io(&sp, err)),
        };
        Ok(Some(Report::from_text(&e.subject_id, &e.session_id, &raw, summary, lexicon)))
    }

    pub fn split(&self, splits: &[Split]) -> Manifest {
        Manifest { root: self.root.clone(), entries: self.entries.iter().filter(|e| splits.contains(&e.split)).cloned().collect() }
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Entry indices grouped by `(subject_id, session_id)`.
    pub fn sessions(&self) -> BTreeMap<(String, String), Vec<usize>> {
        let mut out: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry((e.subject_id.clone(), e.session_id.clone())).or_default().push(i);
        }
        out
    }
}

/// Drops recordings shorter than `min_s` or longer than `max_s` seconds and
/// marks the rest for truncation to `truncate_s`. Durations come from the
/// signal sidecars, so the filter is idempotent.
pub fn filter_by_duration(manifest: &Manifest, min_s: f64, max_s: f64, truncate_s: f64) -> Result<Manifest> {
    if !(min_s < max_s) {
        return Err(Error::InvalidArgument(format!("min duration {min_s} must be below max duration {max_s}")));
    }
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let dur = manifest.signal_meta(e)?.duration_s();
        if dur < min_s || dur > max_s {
            continue;
        }
        let mut kept = e.clone();
        if dur > truncate_s {
            kept.truncate_s = Some(kept.truncate_s.map_or(truncate_s, |t| t.min(truncate_s)));
        }
        entries.push(kept);
    }
    Ok(Manifest { root: manifest.root.clone(), entries })
}
