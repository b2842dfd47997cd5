//! Report segmentation into heading clusters, text sampling, summary
//! classification and class balancing.

use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use regex::{Regex, RegexBuilder};

use crate::corpus::{Label, Manifest, Report};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cluster {
    ClinicalHistory,
    RecordDescription,
    Medication,
    Interpretation,
    Excluded,
}

impl Cluster {
    pub const CONTENT: [Cluster; 4] =
        [Cluster::ClinicalHistory, Cluster::RecordDescription, Cluster::Medication, Cluster::Interpretation];

    pub fn as_str(self) -> &'static str {
        match self {
            Cluster::ClinicalHistory => "clinical_history",
            Cluster::RecordDescription => "record_description",
            Cluster::Medication => "medication",
            Cluster::Interpretation => "interpretation",
            Cluster::Excluded => "excluded",
        }
    }
}

impl std::str::FromStr for Cluster {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "clinical_history" => Ok(Cluster::ClinicalHistory),
            "record_description" => Ok(Cluster::RecordDescription),
            "medication" => Ok(Cluster::Medication),
            "interpretation" => Ok(Cluster::Interpretation),
            "excluded" => Ok(Cluster::Excluded),
            other => Err(Error::Config(format!("unknown cluster `{other}`"))),
        }
    }
}

/// Parses a comma-separated cluster list such as `interpretation,record_description`.
pub fn parse_clusters(s: &str) -> Result<Vec<Cluster>> {
    if s.trim() == "all" {
        return Ok(Cluster::CONTENT.to_vec());
    }
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    Paragraph,
    Sentence,
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragraph" => Ok(Granularity::Paragraph),
            "sentence" => Ok(Granularity::Sentence),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub heading: String,
    pub body: String,
    pub cluster: Cluster,
    pub sentences: Vec<String>,
    /// Byte range of heading plus body in the raw text.
    pub span: Range<usize>,
}

/// Heading patterns mapped to clusters.
#[derive(Debug, Clone)]
pub struct ClusterLexicon {
    patterns: Vec<(Regex, Cluster)>,
}

const SHIPPED_HEADINGS: &str = include_str!("../data/headings.tsv");

impl ClusterLexicon {
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let mut patterns = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { path: origin.to_string(), line: i + 1, message };
            let (pat, cluster) = line.split_once('\t').ok_or_else(|| err("expected `pattern<TAB>cluster`".into()))?;
            let re = RegexBuilder::new(&format!("^(?:{})$", pat.trim()))
                .case_insensitive(true)
                .build()
                .map_err(|e| err(e.to_string()))?;
            patterns.push((re, cluster.parse().map_err(|e: Error| err(e.to_string()))?));
        }
        Ok(Self { patterns })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_HEADINGS, "headings.tsv").expect("shipped lexicon parses")
    }

    /// Cluster for a heading; unmatched headings are excluded.
    pub fn classify(&self, heading: &str) -> Cluster {
        let norm = heading.split_whitespace().collect::<Vec<_>>().join(" ");
        self.patterns.iter().find(|(re, _)| re.is_match(&norm)).map_or(Cluster::Excluded, |(_, c)| *c)
    }

    /// Clusters of every pattern matching `heading`.
    pub fn all_matches(&self, heading: &str) -> Vec<Cluster> {
        let norm = heading.split_whitespace().collect::<Vec<_>>().join(" ");
        self.patterns.iter().filter(|(re, _)| re.is_match(&norm)).map(|(_, c)| *c).collect()
    }
}

impl Default for ClusterLexicon {
    fn default() -> Self {
        Self::shipped()
    }
}

fn heading_regex() -> Regex {
    Regex::new(r"(?m)^[ \t]*([A-Z][A-Z0-9 /&()\-]*[A-Z)])[ \t]*:").expect("valid heading regex")
}

/// Splits on `.`, `!` or `?` followed by whitespace and an uppercase letter.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j].1.is_uppercase() {
                let end = pos + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = chars[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn make_segment(raw: &str, heading: &str, body_range: Range<usize>, span_start: usize, cluster: Cluster) -> Segment {
    let body = raw[body_range.clone()].trim().to_string();
    Segment { heading: heading.to_string(), sentences: split_sentences(&body), body, cluster, span: span_start..body_range.end }
}

/// Splits a report at its headings. Text before the first heading and under
/// unrecognized headings is kept as excluded segments.
pub fn segment_report(raw: &str, lexicon: &ClusterLexicon) -> Vec<Segment> {
    let re = heading_regex();
    let heads: Vec<(Range<usize>, String)> = re
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            (m.start()..m.end(), c[1].trim().to_string())
        })
        .collect();
    let mut out = Vec::new();
    let first = heads.first().map_or(raw.len(), |h| h.0.start);
    if !raw[..first].trim().is_empty() {
        out.push(make_segment(raw, "", 0..first, 0, Cluster::Excluded));
    }
    for (i, (range, heading)) in heads.iter().enumerate() {
        let end = heads.get(i + 1).map_or(raw.len(), |h| h.0.start);
        out.push(make_segment(raw, heading, range.end..end, range.start, lexicon.classify(heading)));
    }
    out
}

/// Samples up to `m` distinct units from the allowed clusters, uniformly without replacement.
pub fn sample_text<R: Rng + ?Sized>(
    report: &Report,
    clusters: &[Cluster],
    granularity: Granularity,
    m: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if m == 0 {
        return Err(Error::InvalidArgument("text sample count must be at least 1".into()));
    }
    let units = eligible_units(report, clusters, granularity);
    if units.is_empty() {
        return Err(Error::NoEligibleText);
    }
    let k = m.min(units.len());
    Ok(index::sample(rng, units.len(), k).into_iter().map(|i| units[i].clone()).collect())
}

/// Every unit `sample_text` can draw from, in document order.
pub fn eligible_units(report: &Report, clusters: &[Cluster], granularity: Granularity) -> Vec<String> {
    let allowed = |c: Cluster| c != Cluster::Excluded && clusters.contains(&c);
    let segs = report.segments.iter().filter(|s| allowed(s.cluster) && !s.body.is_empty());
    match granularity {
        Granularity::Paragraph => segs.map(|s| s.body.clone()).collect(),
        Granularity::Sentence => segs.flat_map(|s| s.sentences.iter().cloned()).collect(),
    }
}

struct SummaryRules {
    negated_finding: Regex,
    explicit_abnormal: Regex,
    explicit_normal: Regex,
    abnormal_cue: Regex,
    normal_cue: Regex,
}

fn summary_rules() -> &'static SummaryRules {
    static RULES: std::sync::OnceLock<SummaryRules> = std::sync::OnceLock::new();
    RULES.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("valid summary regex");
        SummaryRules {
            negated_finding: re(
                r"\b(no|not|without|absence of|negative for|free of)\s+(?:\w+\s+){0,2}?(abnormal\w*|epileptiform\w*|seizures?|slowing|spikes?|sharp waves?|discharges|asymmetr\w*|focal \w+)(?:\s+(?:discharges|activity|abnormalit\w+|features|waves?|findings))?",
            ),
            explicit_abnormal: re(r"\b(is|was|be|represents)\s+(?:an?\s+)?(?:mildly\s+|moderately\s+|severely\s+)?abnormal\b|\bnot\s+(?:a\s+)?normal\b"),
            explicit_normal: re(r"\b(is|was|be|represents)\s+(?:an?\s+)?(?:entirely\s+|completely\s+)?(normal|unremarkable|within normal limits)\b"),
            abnormal_cue: re(
                r"\babnormal\w*|epileptiform|\bspikes?\b|spike-and-wave|spike and wave|sharp waves?|slowing|seizures?|encephalopathy|asymmetr\w*|discharges",
            ),
            normal_cue: re(r"\bnormal\b|unremarkable|within normal limits"),
        }
    })
}

/// Rule-based normal/abnormal decision on a one-sentence summary.
pub fn classify_summary(summary: &str) -> Label {
    let rules = summary_rules();
    let lower = summary.to_lowercase();
    if rules.explicit_abnormal.is_match(&lower) {
        return Label::Abnormal;
    }
    let stripped = rules.negated_finding.replace_all(&lower, " normal ");
    if rules.explicit_normal.is_match(&stripped) && !rules.abnormal_cue.is_match(&stripped) {
        return Label::Normal;
    }
    match (rules.abnormal_cue.is_match(&stripped), rules.normal_cue.is_match(&stripped)) {
        (true, false) => Label::Abnormal,
        (false, true) => Label::Normal,
        _ => Label::Unknown,
    }
}

/// Drops unlabeled entries and randomly subsamples the majority class to the
/// minority count, preserving entry order.
pub fn balance_subsample<R: Rng + ?Sized>(manifest: &Manifest, rng: &mut R) -> Manifest {
    let normal: Vec<usize> = (0..manifest.entries.len()).filter(|&i| manifest.entries[i].label == Some(Label::Normal)).collect();
    let abnormal: Vec<usize> =
        (0..manifest.entries.len()).filter(|&i| manifest.entries[i].label == Some(Label::Abnormal)).collect();
    let n = normal.len().min(abnormal.len());
    let pick = |idx: &[usize], rng: &mut R| -> Vec<usize> {
        if idx.len() == n {
            idx.to_vec()
        } else {
            index::sample(rng, idx.len(), n).into_iter().map(|i| idx[i]).collect()
        }
    };
    let mut keep = pick(&normal, rng);
    keep.extend(pick(&abnormal, rng));
    keep.sort_unstable();
    let mut out = manifest.clone();
    out.entries = keep.into_iter().map(|i| manifest.entries[i].clone()).collect();
    out
}
