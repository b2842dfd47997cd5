//! The `elmkit` command line: one verb per pipeline stage.
//!
//! Every verb reads an optional `key = value` config file plus `--set`
//! overrides, rejects unknown keys, and writes the resolved configuration
//! next to its outputs. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error, 3 validation error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::KvConfig;
use crate::corpus::{Manifest, Split};
use crate::encoders::StubTextEncoder;
use crate::eval::{
    align_trace, embed_recordings, histogram_svg, line_svg, linear_probe, recording_matrix, retrieval_pairs,
    retrieval_ranks, write_columns, write_metrics, zero_shot, Histogram, MetricRecord, ProbeGrid, PromptEnsemble, RecordingEmbeddings,
    SimilarityPairs, ZeroShotMode, LABEL_FRACTIONS,
};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{label_index, pretrain, standardized_signal, CropDataset, DataOptions, ExperimentConfig, Model};
use crate::eegprep::{crop, Montage};
use crate::{Error, Result};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Debug, Parser)]
#[command(name = "elmkit", version, about = "EEG-language contrastive pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "elmkit-out")]
    out: PathBuf,
    /// Also render SVG plots.
    #[arg(long)]
    plot: bool,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a synthetic paired corpus.
    Generate(Common),
    /// Standardize every recording of a manifest into the signal cache.
    Preprocess(Common),
    /// Pretrain an encoder and save a checkpoint.
    Pretrain(Common),
    /// Retrieval, zero-shot, linear probe and similarity statistics.
    Evaluate(WithCheckpoint),
    /// Report-to-EEG retrieval.
    Retrieve(WithCheckpoint),
    /// Prompt-ensemble zero-shot classification.
    Zeroshot(WithCheckpoint),
    /// Cross-validated linear probes on frozen features.
    Probe(WithCheckpoint),
    /// Crop-by-crop similarity of one recording to a text snippet.
    Trace(WithCheckpoint),
}

/// Parses `argv` (including the program name), runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_VALIDATION { "validation" } else { "runtime" };
            eprintln!("error[{kind}]: {e}");
            code
        }
    }
}

/// Validation errors are problems with the inputs that no retry will fix.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Leakage(_)
        | Error::InvalidCropLength(_)
        | Error::InvalidArgument(_)
        | Error::UnsupportedReference(_)
        | Error::MissingChannel(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::Generate(c) => cmd_generate(&c),
        Verb::Preprocess(c) => cmd_preprocess(&c),
        Verb::Pretrain(c) => cmd_pretrain(&c),
        Verb::Evaluate(c) => cmd_eval(&c, &[Task::Retrieval, Task::ZeroShot, Task::Probe, Task::Similarity]),
        Verb::Retrieve(c) => cmd_eval(&c, &[Task::Retrieval]),
        Verb::Zeroshot(c) => cmd_eval(&c, &[Task::ZeroShot]),
        Verb::Probe(c) => cmd_eval(&c, &[Task::Probe]),
        Verb::Trace(c) => cmd_trace(&c),
    }
}

fn load_kv(c: &Common) -> Result<KvConfig> {
    let mut kv = match &c.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    kv.apply_overrides(&c.overrides)?;
    Ok(kv)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_svg(c: &Common, name: &str, svg: String) -> Result<()> {
    if c.plot {
        write_text(&c.out.join(name), &svg)?;
    }
    Ok(())
}

fn cmd_generate(c: &Common) -> Result<()> {
    let kv = load_kv(c)?;
    let spec = SynthSpec::from_config(&kv)?;
    kv.finish()?;
    create_out(&c.out)?;
    write_text(&c.out.join(RESOLVED_CONFIG), &spec.to_config_text())?;
    let m = generate(&spec, &c.out)?;
    log::info!("wrote {} manifest entries to {}", m.entries.len(), c.out.display());
    Ok(())
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let kv = load_kv(c)?;
    let cfg = ExperimentConfig::from_kv(&kv)?;
    kv.finish()?;
    Ok(cfg)
}

fn manifest_of(cfg: &ExperimentConfig) -> Result<Manifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| Error::Config("`manifest` is required".into()))?;
    Manifest::load(path)
}

fn cmd_preprocess(c: &Common) -> Result<()> {
    let mut cfg = experiment(c)?;
    let manifest = manifest_of(&cfg)?;
    create_out(&c.out)?;
    // The output directory is the cache unless one was configured.
    let cache = cfg.cache_dir.clone().or_else(|| std::env::var_os(crate::trainer::CACHE_ENV).map(PathBuf::from)).unwrap_or_else(|| c.out.join("cache"));
    cfg.cache_dir = Some(cache.clone());
    write_text(&c.out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let montage = Montage::tcp();
    let mut table = String::from("subject_id\tsession_id\tsplit\tsamples\tcrops\n");
    for e in &manifest.entries {
        let sig = standardized_signal(&manifest, e, &montage, Some(&cache))?;
        let crops = crop(&sig, cfg.crop_seconds, cfg.max_crops_per_recording).map_or(0, |v| v.len());
        table.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.subject_id, e.session_id, e.split.as_str(), sig.samples, crops));
    }
    write_text(&c.out.join("preprocess.tsv"), &table)
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = experiment(c)?;
    let manifest = manifest_of(&cfg)?;
    create_out(&c.out)?;
    write_text(&c.out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let splits: &[Split] = if cfg.objective == crate::trainer::Objective::Supervised { &[Split::Train] } else { &[Split::Pretrain] };
    let ds = CropDataset::load(&manifest, splits, &DataOptions::from_config(&cfg))?;
    let text = StubTextEncoder::new(cfg.text_seed);
    let log_path = c.out.join(TRAIN_LOG);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let out = pretrain(&cfg, &ds, &text, Some(&mut log))?;
    log.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
    out.model.save(&c.out.join(CHECKPOINT_FILE), Some(&out.rng))?;
    let steps: Vec<f64> = (1..=out.losses.len()).map(|s| s as f64).collect();
    let epochs: Vec<f64> = (1..cfg.epochs).map(|e| (e * out.steps_per_epoch) as f64 + 0.5).collect();
    write_svg(c, "loss.svg", line_svg(&format!("{} loss", cfg.objective), &steps, &[("loss", &out.losses)], &epochs))
}

/// Evaluation keys shared by the checkpoint verbs.
#[derive(Debug, Clone, PartialEq)]
struct EvalSettings {
    manifest: Option<PathBuf>,
    split: Split,
    seed: u64,
    zeroshot_mode: ZeroShotMode,
    leave_one_out: bool,
    probe_fractions: Vec<f64>,
    probe_folds: usize,
    probe_standardize: bool,
    retrieval_k: Vec<usize>,
    snippet: String,
    recording: Option<String>,
    min_duration_s: Option<f64>,
    cache_dir: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))))
        .collect()
}

impl EvalSettings {
    fn from_kv(kv: &KvConfig) -> Result<Self> {
        let split = match kv.raw("split") {
            None => Split::Test,
            Some(s) => Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split `{s}`")))?,
        };
        let zeroshot_mode = match kv.raw("zeroshot_mode").unwrap_or("embedding") {
            "embedding" => ZeroShotMode::AveragedEmbedding,
            "similarity" => ZeroShotMode::AveragedSimilarity,
            other => return Err(Error::Config(format!("zeroshot_mode `{other}` (expected embedding or similarity)"))),
        };
        let probe_fractions = match kv.raw("probe_fractions") {
            None => LABEL_FRACTIONS.to_vec(),
            Some(s) => parse_list("probe_fractions", s)?,
        };
        let retrieval_k = match kv.raw("retrieval_k") {
            None => vec![1, 5, 10],
            Some(s) => parse_list("retrieval_k", s)?,
        };
        Ok(Self {
            manifest: kv.get_opt("manifest")?,
            split,
            seed: kv.get("seed", 0u64)?,
            zeroshot_mode,
            leave_one_out: kv.get("leave_one_out", false)?,
            probe_fractions,
            probe_folds: kv.get("probe_folds", 10usize)?,
            probe_standardize: kv.get("probe_standardize", false)?,
            retrieval_k,
            snippet: kv.get("snippet", "Abnormal EEG.".to_string())?,
            recording: kv.get_opt("recording")?,
            min_duration_s: kv.get_opt("min_duration_s")?,
            cache_dir: kv.get_opt("cache_dir")?,
        })
    }

    fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let join = |v: Vec<String>| v.join(",");
        format!(
            "manifest = {}\nsplit = {}\nseed = {}\nzeroshot_mode = {}\nleave_one_out = {}\nprobe_fractions = {}\nprobe_folds = {}\n\
             probe_standardize = {}\nretrieval_k = {}\nsnippet = {}\nrecording = {}\nmin_duration_s = {}\ncache_dir = {}\n",
            opt(&self.manifest),
            self.split.as_str(),
            self.seed,
            match self.zeroshot_mode {
                ZeroShotMode::AveragedEmbedding => "embedding",
                ZeroShotMode::AveragedSimilarity => "similarity",
            },
            self.leave_one_out,
            join(self.probe_fractions.iter().map(f64::to_string).collect()),
            self.probe_folds,
            self.probe_standardize,
            join(self.retrieval_k.iter().map(usize::to_string).collect()),
            self.snippet,
            self.recording.as_deref().unwrap_or("-"),
            self.min_duration_s.map_or("-".into(), |v| v.to_string()),
            opt(&self.cache_dir),
        )
    }
}

/// A loaded checkpoint with its evaluation data.
struct Session {
    model: Model,
    settings: EvalSettings,
    ds: CropDataset,
    text: StubTextEncoder,
    hash: String,
}

fn open_session(c: &WithCheckpoint) -> Result<Session> {
    let kv = load_kv(&c.common)?;
    let settings = EvalSettings::from_kv(&kv)?;
    kv.finish()?;
    let model = Model::load(&c.checkpoint)?.model;
    let mut cfg = model.config.clone();
    if let Some(m) = &settings.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(v) = settings.min_duration_s {
        cfg.min_duration_s = v;
    }
    if settings.cache_dir.is_some() {
        cfg.cache_dir = settings.cache_dir.clone();
    }
    let manifest = manifest_of(&cfg)?;
    create_out(&c.common.out)?;
    let resolved = format!("{}checkpoint = {}\n{}", settings.to_text(), c.checkpoint.display(), cfg.to_text());
    write_text(&c.common.out.join(RESOLVED_CONFIG), &resolved)?;
    let ds = CropDataset::load(&manifest, &[settings.split], &DataOptions::from_config(&cfg))?;
    let text = StubTextEncoder::new(cfg.text_seed);
    let hash = {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(resolved.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    };
    Ok(Session { model, settings, ds, text, hash })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Retrieval,
    ZeroShot,
    Probe,
    Similarity,
}

fn cmd_eval(c: &WithCheckpoint, tasks: &[Task]) -> Result<()> {
    let s = open_session(c)?;
    let recs = embed_recordings(&s.model, &s.ds)?;
    let mut metrics = Vec::new();
    let rec = |task: &str, metric: &str, v: f64| MetricRecord::new(task, &s.hash, s.settings.seed, metric, v);
    let out = &c.common.out;
    for task in tasks {
        match task {
            Task::Retrieval => {
                let (q, cand, ids) = retrieval_pairs(&s.model, &s.ds, &recs, &s.text)?;
                let ranks = retrieval_ranks(&q, &cand)?;
                for &k in &s.settings.retrieval_k {
                    if k == 0 || k > ranks.len() {
                        return Err(Error::Config(format!("retrieval_k {k} outside 1..={}", ranks.len())));
                    }
                    let hit = ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
                    metrics.push(rec("retrieval", &format!("top{k}"), hit));
                    metrics.push(rec("retrieval", &format!("top{k}_chance"), k as f64 / ranks.len() as f64));
                }
                let mut t = String::from("subject_id\trank\n");
                for (id, r) in ids.iter().zip(&ranks) {
                    t.push_str(&format!("{id}\t{r}\n"));
                }
                write_text(&out.join("retrieval_ranks.tsv"), &t)?;
            }
            Task::ZeroShot => zeroshot_task(&s, &recs, out, c.common.plot, &mut metrics)?,
            Task::Probe => {
                let (x, y) = recording_matrix(&recs, false)?;
                let grid = ProbeGrid { folds: s.settings.probe_folds, standardize: s.settings.probe_standardize, ..ProbeGrid::default() };
                for &f in &s.settings.probe_fractions {
                    let r = linear_probe(&x, &y, f, &grid, s.settings.seed)?;
                    let task = format!("probe_{}pct", f * 100.0);
                    metrics.push(rec(&task, "balanced_accuracy", r.balanced_accuracy));
                    metrics.push(rec(&task, "f1", r.f1));
                    if let Some(a) = r.auroc {
                        metrics.push(rec(&task, "auroc", a));
                    }
                }
            }
            Task::Similarity => {
                let (m, subjects) = crate::eval::stack_crops(&recs);
                let pairs = SimilarityPairs::collect(&m, &subjects);
                metrics.push(rec("similarity", "ws_bs_ratio", pairs.ratio()?));
                let within = Histogram::new(&pairs.within, -1.0, 1.0, 40);
                let between = Histogram::new(&pairs.between, -1.0, 1.0, 40);
                let centers = within.centers();
                write_columns(&out.join("similarity_hist.tsv"), &["center", "within", "between"], &[&centers, &within.density(), &between.density()])?;
                write_svg(&c.common, "similarity_hist.svg", histogram_svg("crop similarity", &[("within subject", &within), ("between subjects", &between)]))?;
                write_embeddings(&out.join("embeddings.tsv"), &recs)?;
            }
        }
    }
    write_metrics(&out.join(METRICS_FILE), &metrics)
}

fn zeroshot_task(s: &Session, recs: &[RecordingEmbeddings], out: &Path, plot: bool, metrics: &mut Vec<MetricRecord>) -> Result<()> {
    let refs: Vec<&RecordingEmbeddings> = recs.iter().filter(|r| r.label.and_then(label_index).is_some()).collect();
    let truth: Vec<usize> = refs.iter().map(|r| r.label.and_then(label_index).expect("filtered")).collect();
    let ensemble = PromptEnsemble::normal_abnormal();
    let rec = |metric: &str, v: f64| MetricRecord::new("zeroshot", &s.hash, s.settings.seed, metric, v);
    let result = zero_shot(&refs, &truth, &ensemble.prototypes(&s.model, &s.text)?, s.settings.zeroshot_mode)?;
    metrics.push(rec("balanced_accuracy", result.metrics.balanced_accuracy));
    metrics.push(rec("f1", result.metrics.f1));
    if let Some(a) = result.metrics.auroc {
        metrics.push(rec("auroc", a));
    }
    if s.settings.leave_one_out {
        for i in 0..ensemble.max_prompts() {
            let r = zero_shot(&refs, &truth, &ensemble.without(i)?.prototypes(&s.model, &s.text)?, s.settings.zeroshot_mode)?;
            metrics.push(rec(&format!("balanced_accuracy_without_{i}"), r.metrics.balanced_accuracy));
        }
    }
    let mut t = String::from("subject_id\tsession_id\tlabel\tsim_normal\tsim_abnormal\tprediction\n");
    for ((r, sims), p) in refs.iter().zip(&result.similarities).zip(&result.metrics.predictions) {
        let label = r.label.map_or("unknown", |l| l.as_str());
        t.push_str(&format!("{}\t{}\t{label}\t{}\t{}\t{}\n", r.subject_id, r.session_id, sims[0], sims[1], ensemble.classes[*p]));
    }
    write_text(&out.join("zeroshot_scores.tsv"), &t)?;
    if plot {
        let margin = |c: usize| -> Vec<f64> {
            result.similarities.iter().zip(&truth).filter(|(_, t)| **t == c).map(|(s, _)| s[1] - s[0]).collect()
        };
        let (normal, abnormal) = (Histogram::new(&margin(0), -1.0, 1.0, 40), Histogram::new(&margin(1), -1.0, 1.0, 40));
        write_text(&out.join("zeroshot_margin.svg"), &histogram_svg("abnormal minus normal similarity", &[("normal", &normal), ("abnormal", &abnormal)]))?;
    }
    Ok(())
}

/// Recording-level aggregated features, one row per recording.
fn write_embeddings(path: &Path, recs: &[RecordingEmbeddings]) -> Result<()> {
    let mut t = String::from("subject_id\tsession_id\tlabel\tfeatures\n");
    for r in recs {
        let rows: Vec<&[f64]> = (0..r.features.rows).map(|i| r.features.row(i)).collect();
        let v = crate::eval::aggregate(&rows)?.vector;
        let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        t.push_str(&format!("{}\t{}\t{}\t{}\n", r.subject_id, r.session_id, r.label.map_or("unknown", |l| l.as_str()), joined.join(",")));
    }
    write_text(path, &t)
}

fn cmd_trace(c: &WithCheckpoint) -> Result<()> {
    let s = open_session(c)?;
    let r = match &s.settings.recording {
        None => 0,
        Some(want) => s
            .ds
            .recordings
            .iter()
            .position(|r| format!("{}/{}", r.subject_id, r.session_id) == *want || r.subject_id == *want)
            .ok_or_else(|| Error::Config(format!("recording `{want}` not in the {} split", s.settings.split.as_str())))?,
    };
    let recording = s.ds.recordings.get(r).ok_or_else(|| Error::Degenerate("no recordings in the split".into()))?;
    let idx: Vec<(usize, usize)> = (0..recording.crops.len()).map(|i| (r, i)).collect();
    let trace = align_trace(&s.model, &s.ds.tensor(&idx), &s.settings.snippet, &s.text)?;
    let crop_s = s.model.config.crop_seconds;
    let starts: Vec<f64> = (0..trace.similarity.len()).map(|i| i as f64 * crop_s).collect();
    write_columns(&c.common.out.join("trace.tsv"), &["start_s", "similarity"], &[&starts, &trace.similarity])?;
    let rec = |metric: &str, v: f64| MetricRecord::new("trace", &s.hash, s.settings.seed, metric, v);
    let metrics = vec![rec("argmax_crop", trace.argmax as f64), rec("argmin_crop", trace.argmin as f64)];
    write_metrics(&c.common.out.join(METRICS_FILE), &metrics)?;
    let title = format!("{}/{}: {}", recording.subject_id, recording.session_id, s.settings.snippet);
    write_svg(&c.common, "trace.svg", line_svg(&title, &starts, &[("similarity", &trace.similarity)], &[trace.argmax as f64 * crop_s]))
}
