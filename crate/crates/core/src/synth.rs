//! Deterministic paired corpus of synthetic EEG and templated reports.
//!
//! Each subject has a fingerprint (posterior rhythm frequency, background
//! voltage, laterality) that its report describes, and abnormal subjects
//! carry frontally weighted 3 Hz spike-and-wave bursts whose intervals are
//! written to an events sidecar.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KvConfig;
use crate::corpus::{summary_path, Label, Manifest, ManifestEntry, Recording, Reference, Split};
use crate::{Error, Result};

pub const ELECTRODES: [&str; 19] =
    ["FP1", "FP2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5", "T6", "FZ", "CZ", "PZ"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub seed: u64,
    pub sampling_rate: f64,
    pub duration_s: f64,
    pub sessions_per_subject: usize,
    pub abnormal_fraction: f64,
    pub pretrain_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Background RMS in microvolts at medium voltage.
    pub background_uv: f64,
    /// Peak burst amplitude over the frontal maximum, in microvolts.
    pub burst_uv: f64,
    pub burst_every_s: f64,
    pub burst_duration_s: f64,
    /// Abnormal subjects get one continuous burst interval instead of intermittent bursts.
    pub trace_mode: bool,
    pub trace_interval_s: f64,
    /// Grid (after the initial 10 s) the trace interval is aligned to.
    pub trace_align_s: f64,
    pub subject_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            seed: 0,
            sampling_rate: 250.0,
            duration_s: 190.0,
            sessions_per_subject: 1,
            abnormal_fraction: 0.5,
            pretrain_fraction: 0.5,
            train_fraction: 0.2,
            val_fraction: 0.1,
            background_uv: 12.0,
            burst_uv: 120.0,
            burst_every_s: 12.0,
            burst_duration_s: 3.0,
            trace_mode: false,
            trace_interval_s: 120.0,
            trace_align_s: 60.0,
            subject_prefix: "sub".into(),
        }
    }
}

impl SynthSpec {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            n_subjects: cfg.get("n_subjects", d.n_subjects)?,
            seed: cfg.get("seed", d.seed)?,
            sampling_rate: cfg.get("sampling_rate", d.sampling_rate)?,
            duration_s: cfg.get("duration_s", d.duration_s)?,
            sessions_per_subject: cfg.get("sessions_per_subject", d.sessions_per_subject)?,
            abnormal_fraction: cfg.get("abnormal_fraction", d.abnormal_fraction)?,
            pretrain_fraction: cfg.get("pretrain_fraction", d.pretrain_fraction)?,
            train_fraction: cfg.get("train_fraction", d.train_fraction)?,
            val_fraction: cfg.get("val_fraction", d.val_fraction)?,
            background_uv: cfg.get("background_uv", d.background_uv)?,
            burst_uv: cfg.get("burst_uv", d.burst_uv)?,
            burst_every_s: cfg.get("burst_every_s", d.burst_every_s)?,
            burst_duration_s: cfg.get("burst_duration_s", d.burst_duration_s)?,
            trace_mode: cfg.get("trace_mode", d.trace_mode)?,
            trace_interval_s: cfg.get("trace_interval_s", d.trace_interval_s)?,
            trace_align_s: cfg.get("trace_align_s", d.trace_align_s)?,
            subject_prefix: cfg.get("subject_prefix", d.subject_prefix)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_config_text(&self) -> String {
        format!(
            "n_subjects = {}\nseed = {}\nsampling_rate = {}\nduration_s = {}\nsessions_per_subject = {}\nabnormal_fraction = {}\n\
             pretrain_fraction = {}\ntrain_fraction = {}\nval_fraction = {}\nbackground_uv = {}\nburst_uv = {}\n\
             burst_every_s = {}\nburst_duration_s = {}\ntrace_mode = {}\ntrace_interval_s = {}\ntrace_align_s = {}\nsubject_prefix = {}\n",
            self.n_subjects,
            self.seed,
            self.sampling_rate,
            self.duration_s,
            self.sessions_per_subject,
            self.abnormal_fraction,
            self.pretrain_fraction,
            self.train_fraction,
            self.val_fraction,
            self.background_uv,
            self.burst_uv,
            self.burst_every_s,
            self.burst_duration_s,
            self.trace_mode,
            self.trace_interval_s,
            self.trace_align_s,
            self.subject_prefix
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_subjects == 0 || self.sessions_per_subject == 0 {
            return bad("n_subjects and sessions_per_subject must be positive");
        }
        if self.duration_s <= 20.0 {
            return bad("duration_s must exceed 20 s");
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return bad("abnormal_fraction must lie in [0, 1]");
        }
        let f = [self.pretrain_fraction, self.train_fraction, self.val_fraction];
        if f.iter().any(|v| *v < 0.0) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        if !(self.sampling_rate >= 100.0) {
            return bad("sampling_rate must be at least 100 Hz");
        }
        Ok(())
    }

    /// Split of the `i`-th subject: a contiguous block per split in the order
    /// pretrain, train, val, test.
    pub fn split_of(&self, i: usize) -> Split {
        let n = self.n_subjects as f64;
        let a = (n * self.pretrain_fraction).round() as usize;
        let b = a + (n * self.train_fraction).round() as usize;
        let c = b + (n * self.val_fraction).round() as usize;
        match i {
            i if i < a => Split::Pretrain,
            i if i < b => Split::Train,
            i if i < c => Split::Val,
            _ => Split::Test,
        }
    }

    fn split_start(&self, i: usize) -> usize {
        let s = self.split_of(i);
        (0..=i).find(|&j| self.split_of(j) == s).unwrap_or(i)
    }

    /// Class of the `i`-th subject; abnormal subjects are spread evenly inside each split.
    pub fn label_of(&self, i: usize) -> Label {
        let k = (i - self.split_start(i)) as f64;
        if ((k + 1.0) * self.abnormal_fraction).floor() > (k * self.abnormal_fraction).floor() {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Voltage {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Laterality {
    Left,
    Right,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTraits {
    pub subject_id: String,
    pub label: Label,
    pub split: Split,
    pub pdr_hz: f64,
    pub voltage: Voltage,
    pub laterality: Laterality,
    pub age: u32,
}

/// Planted burst interval in seconds from the start of the raw recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSession {
    pub recording: Recording,
    pub report: String,
    pub summary: String,
    pub events: Vec<Event>,
}

fn subject_rng(seed: u64, i: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 8) | stream);
    rng
}

pub fn subject_traits(spec: &SynthSpec, i: usize) -> SubjectTraits {
    let mut rng = subject_rng(spec.seed, i, 0);
    let pdr_hz = 8.0 + 0.5 * rng.random_range(0..9) as f64;
    let voltage = *[Voltage::Low, Voltage::Medium, Voltage::High].choose(&mut rng).expect("non-empty");
    let laterality = *[Laterality::Left, Laterality::Right, Laterality::Symmetric].choose(&mut rng).expect("non-empty");
    SubjectTraits {
        subject_id: format!("{}{:04}", spec.subject_prefix, i),
        label: spec.label_of(i),
        split: spec.split_of(i),
        pdr_hz,
        voltage,
        laterality,
        age: rng.random_range(18..85),
    }
}

fn pdr_weight(e: &str) -> f64 {
    match e {
        "O1" | "O2" => 1.0,
        "P3" | "P4" | "PZ" => 0.7,
        "T5" | "T6" => 0.6,
        "C3" | "C4" | "CZ" => 0.3,
        "T3" | "T4" => 0.25,
        "F3" | "F4" | "FZ" | "F7" | "F8" => 0.1,
        _ => 0.05,
    }
}

fn burst_weight(e: &str) -> f64 {
    match e {
        "FP1" | "FP2" => 1.0,
        "FZ" => 0.9,
        "F3" | "F4" => 0.85,
        "F7" | "F8" => 0.6,
        "CZ" => 0.55,
        "C3" | "C4" => 0.5,
        "T3" | "T4" => 0.3,
        "P3" | "P4" | "PZ" => 0.25,
        "T5" | "T6" => 0.15,
        _ => 0.1,
    }
}

fn side(e: &str) -> Option<bool> {
    match e.chars().last() {
        Some('Z') => None,
        Some(c) => c.to_digit(10).map(|d| d % 2 == 1),
        None => None,
    }
}

/// One cycle of a spike-and-slow-wave complex, `phase` in `[0, 1)`.
fn spike_wave(phase: f64) -> f64 {
    let spike = -(-((phase - 0.12) / 0.035).powi(2)).exp();
    let wave = 0.55 * (2.0 * PI * (phase - 0.12)).sin();
    spike + wave
}

fn burst_envelope(t: f64, ev: &Event) -> f64 {
    if t < ev.start_s || t >= ev.end_s {
        return 0.0;
    }
    let ramp = 0.2f64.min((ev.end_s - ev.start_s) / 2.0);
    ((t - ev.start_s) / ramp).min((ev.end_s - t) / ramp).min(1.0)
}

/// Pink-ish noise via a three-pole approximation of a 1/f filter, unit RMS.
fn pink_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let rms = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / rms);
    out
}

fn plan_events<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<Event> {
    let start = 10.0;
    if spec.trace_mode {
        let slots = ((spec.duration_s - start - spec.trace_interval_s) / spec.trace_align_s).floor().max(0.0) as usize;
        let k = if slots > 1 { rng.random_range(1..slots) } else { 0 };
        let s = start + k as f64 * spec.trace_align_s;
        return vec![Event { start_s: s, end_s: (s + spec.trace_interval_s).min(spec.duration_s) }];
    }
    let mut events = Vec::new();
    let mut t = start + rng.random_range(0.0..spec.burst_every_s);
    while t + spec.burst_duration_s < spec.duration_s {
        events.push(Event { start_s: t, end_s: t + spec.burst_duration_s });
        t += spec.burst_every_s * rng.random_range(0.7..1.3);
    }
    events
}

fn voltage_scale(v: Voltage) -> f64 {
    match v {
        Voltage::Low => 0.6,
        Voltage::Medium => 1.0,
        Voltage::High => 1.6,
    }
}

fn lateral_scale(l: Laterality, e: &str) -> f64 {
    match (l, side(e)) {
        (Laterality::Symmetric, _) | (_, None) => 1.0,
        (Laterality::Left, Some(true)) | (Laterality::Right, Some(false)) => 1.0,
        _ => 0.45,
    }
}

/// Signal and events of one session.
pub fn synth_signal(spec: &SynthSpec, traits: &SubjectTraits, i: usize, session: usize) -> (Recording, Vec<Event>) {
    let mut rng = subject_rng(spec.seed, i, 1 + session as u64);
    let fs = spec.sampling_rate;
    let n = (spec.duration_s * fs).round() as usize;
    let events = if traits.label == Label::Abnormal { plan_events(spec, &mut rng) } else { Vec::new() };
    let bg = spec.background_uv * voltage_scale(traits.voltage);
    let pdr_phase = rng.random_range(0.0..2.0 * PI);
    let pdr_mod_hz = rng.random_range(0.05..0.15);
    let mut signal = Vec::with_capacity(ELECTRODES.len() * n);
    for e in ELECTRODES {
        let noise = pink_noise(n, &mut rng);
        let pw = 1.8 * bg * pdr_weight(e) * lateral_scale(traits.laterality, e);
        let bw = spec.burst_uv * burst_weight(e);
        let artefact_phase = rng.random_range(0.0..2.0 * PI);
        for (s, nz) in noise.iter().enumerate() {
            let t = s as f64 / fs;
            let mut v = bg * nz;
            v += pw * (0.75 + 0.25 * (2.0 * PI * pdr_mod_hz * t).sin()) * (2.0 * PI * traits.pdr_hz * t + pdr_phase).sin();
            for ev in &events {
                let env = burst_envelope(t, ev);
                if env > 0.0 {
                    v += bw * env * spike_wave(((t - ev.start_s) * 3.0).fract());
                }
            }
            if t < 10.0 {
                v += 250.0 * (2.0 * PI * 0.3 * t + artefact_phase).sin();
            }
            signal.push(v as f32);
        }
    }
    let rec = Recording {
        subject_id: traits.subject_id.clone(),
        session_id: format!("s{}", session + 1),
        signal,
        channels: ELECTRODES.len(),
        samples: n,
        sampling_rate: fs,
        channel_names: ELECTRODES.iter().map(|e| format!("EEG {e}-REF")).collect(),
        reference: Reference::Ar,
    };
    (rec, events)
}

const HISTORY: &[&str] = &[
    "with episodes of staring and unresponsiveness",
    "with a first generalized convulsion last month",
    "with recurrent syncope",
    "with headaches and dizziness",
    "with memory complaints",
    "after a fall with brief loss of consciousness",
    "with episodes of confusion",
];
const MEDS: &[&str] = &["Levetiracetam.", "Lamotrigine.", "None.", "Valproate and sertraline.", "Keppra.", "Topiramate."];
const FINDINGS: &[&str] = &[
    "generalized spike and wave discharges",
    "bursts of spike and wave",
    "epileptiform discharges",
    "spike wave discharges",
    "paroxysmal bursts",
];

fn voltage_phrase(v: Voltage) -> &'static str {
    match v {
        Voltage::Low => "low voltage",
        Voltage::Medium => "medium voltage",
        Voltage::High => "high voltage",
    }
}

fn laterality_phrase(l: Laterality) -> &'static str {
    match l {
        Laterality::Left => "left predominant",
        Laterality::Right => "right predominant",
        Laterality::Symmetric => "symmetric",
    }
}

fn fmt_hz(f: f64) -> String {
    if f.fract() == 0.0 {
        format!("{f:.0}")
    } else {
        format!("{f:.1}")
    }
}

/// Report text and one-sentence summary for one session.
pub fn synth_report(spec: &SynthSpec, traits: &SubjectTraits, i: usize, session: usize) -> (String, String) {
    let mut rng = subject_rng(spec.seed, i, 100 + session as u64);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    let hz = fmt_hz(traits.pdr_hz);
    let volt = voltage_phrase(traits.voltage);
    let lat = laterality_phrase(traits.laterality);
    let abnormal = traits.label == Label::Abnormal;
    let finding = pick(&mut rng, FINDINGS);

    let mut r = String::new();
    let _ = writeln!(r, "INTRODUCTION: Digital video EEG was recorded using the standard 10-20 system of electrode placement.");
    let hist = pick(&mut rng, &["CLINICAL HISTORY", "HISTORY", "REASON FOR STUDY"]);
    let _ = writeln!(r, "{hist}: {} year old patient {}.", traits.age, pick(&mut rng, HISTORY));
    let meds = pick(&mut rng, &["MEDICATIONS", "CURRENT MEDICATIONS"]);
    let _ = writeln!(r, "{meds}: {}", pick(&mut rng, MEDS));
    let desc = pick(&mut rng, &["DESCRIPTION OF THE RECORD", "DESCRIPTION OF RECORD", "EEG DESCRIPTION"]);
    let _ = write!(r, "{desc}: The background is {volt} and {lat}. The posterior dominant rhythm is {hz} Hz.");
    if abnormal {
        let _ = writeln!(r, " There are {finding} at 3 Hz, maximal frontally.");
    } else {
        let _ = writeln!(r, " No epileptiform discharges are seen.");
    }
    let _ = writeln!(r, "TECHNICAL DIFFICULTIES: None.");
    let imp = pick(&mut rng, &["IMPRESSION", "INTERPRETATION"]);
    if abnormal {
        let _ = writeln!(r, "{imp}: Abnormal EEG due to {finding}. Posterior dominant rhythm of {hz} Hz, {volt}, {lat}.");
    } else {
        let lead = pick(&mut rng, &["Normal EEG.", "This EEG is within normal limits.", "Normal awake record."]);
        let _ = writeln!(r, "{imp}: {lead} Posterior dominant rhythm of {hz} Hz, {volt}, {lat}.");
    }
    let summary = if abnormal {
        format!("This EEG is abnormal due to {finding}.")
    } else {
        "The EEG is normal.".to_string()
    };
    (r, summary)
}

pub fn synth_session(spec: &SynthSpec, i: usize, session: usize) -> SyntheticSession {
    let traits = subject_traits(spec, i);
    let (recording, events) = synth_signal(spec, &traits, i, session);
    let (report, summary) = synth_report(spec, &traits, i, session);
    SyntheticSession { recording, report, summary, events }
}

pub fn events_path(signal_path: &Path) -> PathBuf {
    let mut s = signal_path.as_os_str().to_owned();
    s.push(".events");
    PathBuf::from(s)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::from("start_s\tend_s\tlabel\n");
    for e in events {
        let _ = writeln!(out, "{}\t{}\tspike_wave", e.start_s, e.end_s);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 1, message: e.to_string() })
        };
        if cols.len() >= 2 {
            out.push(Event { start_s: parse(cols[0])?, end_s: parse(cols[1])? });
        }
    }
    Ok(out)
}

/// Writes the corpus under `out_dir` and returns its manifest (also saved as `manifest.tsv`).
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("signals")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("reports")).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest { root: out_dir.to_path_buf(), entries: Vec::new() };
    let mut subjects = String::from("subject_id\tsplit\tlabel\tpdr_hz\tvoltage\tlaterality\n");
    for i in 0..spec.n_subjects {
        let traits = subject_traits(spec, i);
        let _ = writeln!(
            subjects,
            "{}\t{}\t{}\t{}\t{:?}\t{:?}",
            traits.subject_id,
            traits.split.as_str(),
            traits.label.as_str(),
            traits.pdr_hz,
            traits.voltage,
            traits.laterality
        );
        for s in 0..spec.sessions_per_subject {
            let sess = synth_session(spec, i, s);
            let stem = format!("{}_{}", traits.subject_id, sess.recording.session_id);
            let sig_rel = PathBuf::from("signals").join(format!("{stem}.f32"));
            let rep_rel = PathBuf::from("reports").join(format!("{stem}.txt"));
            sess.recording.write(&out_dir.join(&sig_rel))?;
            write_events(&events_path(&out_dir.join(&sig_rel)), &sess.events)?;
            let rep_abs = out_dir.join(&rep_rel);
            std::fs::write(&rep_abs, &sess.report).map_err(|e| Error::io(&rep_abs, e))?;
            let sp = summary_path(&rep_abs);
            std::fs::write(&sp, format!("{}\n", sess.summary)).map_err(|e| Error::io(&sp, e))?;
            manifest.entries.push(ManifestEntry {
                subject_id: traits.subject_id.clone(),
                session_id: sess.recording.session_id.clone(),
                signal_path: sig_rel,
                report_path: Some(rep_rel),
                label: Some(traits.label),
                split: traits.split,
                truncate_s: None,
            });
        }
    }
    let sp = out_dir.join("subjects.tsv");
    std::fs::write(&sp, subjects).map_err(|e| Error::io(&sp, e))?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
