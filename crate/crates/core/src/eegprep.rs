//! Signal standardization (trim, band-pass, resample, clip, bipolar montage)
//! and cropping into fixed-length windows.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::{Recording, Reference};
use crate::{Error, Result};

pub const TARGET_RATE: f64 = 100.0;
pub const CLIP_UV: f32 = 800.0;
pub const TRIM_SECONDS: f64 = 10.0;
pub const BAND_LOW_HZ: f64 = 0.1;
pub const BAND_HIGH_HZ: f64 = 49.0;
pub const CROP_SECONDS: [u32; 5] = [5, 10, 20, 30, 60];

const SHIPPED_MONTAGE: &str = include_str!("../data/tcp_montage.txt");

/// Canonical electrode name: upper case, without `EEG ` prefix or reference
/// suffix, with the modern temporal names mapped to the old ones.
pub fn normalize_channel_name(name: &str) -> String {
    let mut n = name.trim().to_ascii_uppercase();
    if let Some(rest) = n.strip_prefix("EEG ") {
        n = rest.trim().to_string();
    }
    for suffix in ["-REF", "-LE", "-AR", "-AVG"] {
        if let Some(rest) = n.strip_suffix(suffix) {
            n = rest.to_string();
        }
    }
    match n.as_str() {
        "T7" => "T3".into(),
        "T8" => "T4".into(),
        "P7" => "T5".into(),
        "P8" => "T6".into(),
        _ => n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipolarPair {
    pub label: String,
    pub anode: String,
    pub cathode: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    pub pairs: Vec<BipolarPair>,
}

impl Montage {
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = || Error::Parse { path: origin.into(), line: i + 1, message: "expected `LABEL = CH_A - CH_B`".into() };
            let (label, expr) = line.split_once('=').ok_or_else(err)?;
            let (a, b) = expr.split_once(" - ").or_else(|| expr.split_once('-')).ok_or_else(err)?;
            let (label, a, b) = (label.trim(), a.trim(), b.trim());
            if label.is_empty() || a.is_empty() || b.is_empty() {
                return Err(err());
            }
            pairs.push(BipolarPair { label: label.into(), anode: normalize_channel_name(a), cathode: normalize_channel_name(b) });
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }

    /// The default 20-derivation temporal central parasagittal montage.
    pub fn tcp() -> Self {
        Self::parse(SHIPPED_MONTAGE, "tcp_montage.txt").expect("shipped montage parses")
    }

    pub fn labels(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.label.clone()).collect()
    }

    /// Electrodes referenced by the montage, in first-use order.
    pub fn electrodes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.pairs {
            for e in [&p.anode, &p.cathode] {
                if !out.contains(e) {
                    out.push(e.clone());
                }
            }
        }
        out
    }
}

/// A preprocessed recording in montage space at 100 Hz, `data[c * samples + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardSignal {
    pub subject_id: String,
    pub session_id: String,
    pub channels: Vec<String>,
    pub samples: usize,
    pub data: Vec<f32>,
}

impl StandardSignal {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / TARGET_RATE
    }

    pub fn to_recording(&self) -> Recording {
        Recording {
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            signal: self.data.clone(),
            channels: self.channels.len(),
            samples: self.samples,
            sampling_rate: TARGET_RATE,
            channel_names: self.channels.clone(),
            reference: Reference::Other("BIPOLAR".into()),
        }
    }

    /// Reads back a signal written by [`StandardSignal::to_recording`].
    pub fn from_recording(rec: Recording) -> Result<Self> {
        if (rec.sampling_rate - TARGET_RATE).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "preprocessed signal must be at {TARGET_RATE} Hz, found {}",
                rec.sampling_rate
            )));
        }
        Ok(Self { subject_id: rec.subject_id, session_id: rec.session_id, channels: rec.channel_names, samples: rec.samples, data: rec.signal })
    }
}

/// Non-overlapping window of a standardized signal, `data[c * len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub subject_id: String,
    pub session_id: String,
    pub crop_index: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f32>,
}

/// Mirror index with period `2 (n - 1)`, valid for any offset.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc low-pass with unit DC gain; `cutoff` in cycles per sample.
fn lowpass_taps(cutoff: f64, window: &[f64]) -> Vec<f64> {
    let n = window.len();
    let mid = (n - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n).map(|i| 2.0 * cutoff * sinc(2.0 * cutoff * (i as f64 - mid)) * window[i]).collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Linear-phase band-pass FIR taps (Hamming window) for sampling rate `fs`.
pub fn bandpass_taps(fs: f64, low: f64, high: f64) -> Vec<f64> {
    let mut n = (3.3 * fs / low).ceil() as usize;
    if n % 2 == 0 {
        n += 1;
    }
    let w = hamming(n);
    let hi = lowpass_taps((high / fs).min(0.5), &w);
    let lo = lowpass_taps(low / fs, &w);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

/// Zero-phase FIR filtering by forward-backward application of `taps`, with
/// mirror padding at both ends.
pub struct ZeroPhaseFir {
    taps: Vec<f64>,
}

impl ZeroPhaseFir {
    pub fn new(taps: &[f64]) -> Self {
        Self { taps: taps.to_vec() }
    }

    pub fn apply_many(&self, channels: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let Some(n) = channels.first().map(Vec::len) else { return Vec::new() };
        if n == 0 {
            return channels.to_vec();
        }
        let half = self.taps.len() - 1;
        let padded_len = n + 2 * half;
        let size = (padded_len + 2 * half).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        // forward then backward pass = circular correlation with |H|^2, centred at lag 0
        let mut kspec: Vec<Complex<f64>> = self.taps.iter().map(|&v| Complex::new(v, 0.0)).collect();
        kspec.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut kspec);
        kspec.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
        let scale = 1.0 / size as f64;
        channels
            .iter()
            .map(|x| {
                let mut buf: Vec<Complex<f64>> =
                    (0..padded_len).map(|i| Complex::new(x[mirror(i as isize - half as isize, n)], 0.0)).collect();
                buf.resize(size, Complex::new(0.0, 0.0));
                fwd.process(&mut buf);
                buf.iter_mut().zip(&kspec).for_each(|(a, b)| *a *= b);
                inv.process(&mut buf);
                (0..n).map(|t| buf[t + half].re * scale).collect()
            })
            .collect()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Polyphase rational resampler by `up / down`.
pub struct Resampler {
    up: usize,
    down: usize,
    taps: Vec<f64>,
}

impl Resampler {
    /// Resampler from `fs_in` to `fs_out`; both rates must be whole numbers of hertz.
    pub fn new(fs_in: f64, fs_out: f64) -> Result<Self> {
        let whole = |f: f64| f > 0.0 && (f - f.round()).abs() < 1e-9;
        if !whole(fs_in) || !whole(fs_out) {
            return Err(Error::InvalidArgument(format!(
                "rational resampling needs integer rates, got {fs_in} Hz -> {fs_out} Hz"
            )));
        }
        let (a, b) = (fs_out.round() as u64, fs_in.round() as u64);
        let g = gcd(a, b);
        let (up, down) = ((a / g) as usize, (b / g) as usize);
        let half = 10 * up.max(down);
        let w = kaiser(2 * half + 1, 5.0);
        let cutoff = 0.5 / up.max(down) as f64;
        let mut taps = lowpass_taps(cutoff, &w);
        taps.iter_mut().for_each(|t| *t *= up as f64);
        Ok(Self { up, down, taps })
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up).div_ceil(self.down)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return x.to_vec();
        }
        let half = (self.taps.len() - 1) / 2;
        let n = x.len();
        (0..self.output_len(n))
            .map(|m| {
                let t = m * self.down + half;
                let mut acc = 0.0;
                let mut k = t % self.up;
                while k < self.taps.len() && k <= t {
                    let j = (t - k) / self.up;
                    if j < n {
                        acc += self.taps[k] * x[j];
                    }
                    k += self.up;
                }
                acc
            })
            .collect()
    }
}

/// Drop the first 10 s, band-pass 0.1-49 Hz, resample to 100 Hz, clip to
/// ±800 µV and form the bipolar derivations of `montage`.
///
/// Derivations of two clipped channels can reach twice the clip level, so the
/// bipolar output is clipped once more to keep every sample within ±800 µV.
pub fn preprocess(rec: &Recording, montage: &Montage) -> Result<StandardSignal> {
    if !matches!(rec.reference, Reference::Ar | Reference::Le) {
        return Err(Error::UnsupportedReference(rec.reference.to_string()));
    }
    let names: Vec<String> = rec.channel_names.iter().map(|n| normalize_channel_name(n)).collect();
    let electrodes = montage.electrodes();
    let mut source = Vec::with_capacity(electrodes.len());
    for e in &electrodes {
        let idx = names.iter().position(|n| n == e).ok_or_else(|| Error::MissingChannel(e.clone()))?;
        source.push(idx);
    }
    let skip = (TRIM_SECONDS * rec.sampling_rate).round() as usize;
    let min_needed = skip + rec.sampling_rate.ceil() as usize;
    if rec.samples < min_needed {
        return Err(Error::TooShort { needed: min_needed, available: rec.samples });
    }
    let raw: Vec<Vec<f64>> = source.iter().map(|&c| rec.channel(c)[skip..].iter().map(|&v| v as f64).collect()).collect();
    let fir = ZeroPhaseFir::new(&bandpass_taps(rec.sampling_rate, BAND_LOW_HZ, BAND_HIGH_HZ));
    let filtered = fir.apply_many(&raw);
    let resampler = Resampler::new(rec.sampling_rate, TARGET_RATE)?;
    let clip = CLIP_UV as f64;
    let resampled: Vec<Vec<f64>> =
        filtered.iter().map(|x| resampler.apply(x).into_iter().map(|v| v.clamp(-clip, clip)).collect()).collect();
    let samples = resampled[0].len();
    let mut data = Vec::with_capacity(montage.pairs.len() * samples);
    for p in &montage.pairs {
        let a = &resampled[electrodes.iter().position(|e| *e == p.anode).expect("anode collected")];
        let b = &resampled[electrodes.iter().position(|e| *e == p.cathode).expect("cathode collected")];
        data.extend(a.iter().zip(b).map(|(x, y)| ((x - y) as f32).clamp(-CLIP_UV, CLIP_UV)));
    }
    Ok(StandardSignal {
        subject_id: rec.subject_id.clone(),
        session_id: rec.session_id.clone(),
        channels: montage.labels(),
        samples,
        data,
    })
}

pub fn check_crop_seconds(crop_seconds: f64) -> Result<usize> {
    if CROP_SECONDS.iter().any(|&c| (c as f64 - crop_seconds).abs() < 1e-9) {
        Ok((crop_seconds * TARGET_RATE).round() as usize)
    } else {
        Err(Error::InvalidCropLength(crop_seconds))
    }
}

/// Consecutive non-overlapping windows from sample 0; the remainder is discarded.
pub fn crop(sig: &StandardSignal, crop_seconds: f64, max_crops: Option<usize>) -> Result<Vec<Crop>> {
    let len = check_crop_seconds(crop_seconds)?;
    let fit = sig.samples / len;
    if fit == 0 {
        return Err(Error::TooShort { needed: len, available: sig.samples });
    }
    let n = max_crops.map_or(fit, |m| m.min(fit));
    let c = sig.channels.len();
    Ok((0..n)
        .map(|i| {
            let mut data = Vec::with_capacity(c * len);
            for ch in 0..c {
                data.extend_from_slice(&sig.channel(ch)[i * len..(i + 1) * len]);
            }
            Crop { subject_id: sig.subject_id.clone(), session_id: sig.session_id.clone(), crop_index: i, channels: c, len, data }
        })
        .collect())
}

/// Periodogram power of `x` (sampled at `fs`) summed over `[low, high)` Hz.
pub fn band_power(x: &[f32], fs: f64, low: f64, high: f64) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..=n / 2)
        .filter(|&k| {
            let f = k as f64 * fs / n as f64;
            f >= low && f < high
        })
        .map(|k| buf[k].norm_sqr() / n as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ten_twenty() -> Vec<String> {
        ["FP1", "FP2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5", "T6", "FZ", "CZ", "PZ"]
            .iter()
            .map(|s| format!("EEG {s}-REF"))
            .collect()
    }

    fn recording(fs: f64, seconds: f64, f: impl Fn(usize, f64) -> f32) -> Recording {
        let names = ten_twenty();
        let samples = (fs * seconds) as usize;
        let mut signal = Vec::with_capacity(names.len() * samples);
        for c in 0..names.len() {
            signal.extend((0..samples).map(|t| f(c, t as f64 / fs)));
        }
        Recording {
            subject_id: "s".into(),
            session_id: "1".into(),
            signal,
            channels: names.len(),
            samples,
            sampling_rate: fs,
            channel_names: names,
            reference: Reference::Ar,
        }
    }

    #[test]
    fn montage_has_twenty_pairs() {
        let m = Montage::tcp();
        assert_eq!(m.pairs.len(), 20);
        assert_eq!(m.pairs[0], BipolarPair { label: "FP1-F7".into(), anode: "FP1".into(), cathode: "F7".into() });
        assert!(Montage::parse("X = A", "m").is_err());
        assert_eq!(normalize_channel_name("EEG T7-LE"), "T3");
    }

    #[test]
    fn zero_signal_and_output_length() {
        let out = preprocess(&recording(250.0, 70.0, |_, _| 0.0), &Montage::tcp()).unwrap();
        assert_eq!(out.samples, 6000);
        assert_eq!(out.channels.len(), 20);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_spike_is_bounded() {
        let rec = recording(250.0, 30.0, |c, t| if c == 0 && (t - 20.0).abs() < 0.05 { 2000.0 } else if c == 10 { -2000.0 } else { 0.0 });
        let out = preprocess(&rec, &Montage::tcp()).unwrap();
        assert!(out.data.iter().all(|v| v.abs() <= 800.0));
        assert!(out.data.iter().any(|v| v.abs() > 100.0));
    }

    #[test]
    fn reference_and_missing_channel_errors() {
        let mut rec = recording(100.0, 20.0, |_, _| 0.0);
        rec.reference = Reference::Other("CAR".into());
        assert!(matches!(preprocess(&rec, &Montage::tcp()), Err(Error::UnsupportedReference(_))));
        let mut rec = recording(100.0, 20.0, |_, _| 0.0);
        rec.channel_names[7] = "EEG X1-REF".into();
        match preprocess(&rec, &Montage::tcp()) {
            Err(Error::MissingChannel(c)) => assert_eq!(c, "P4"),
            other => panic!("{other:?}"),
        }
    }

    fn energy_after(freq: f64) -> f64 {
        let rec = recording(250.0, 70.0, |c, t| if c == 0 { (2.0 * std::f64::consts::PI * freq * t).sin() as f32 * 50.0 } else { 0.0 });
        let out = preprocess(&rec, &Montage::tcp()).unwrap();
        // ignore edges where filter transients live
        out.channel(0)[500..5500].iter().map(|&v| (v as f64).powi(2)).sum()
    }

    #[test]
    fn out_of_band_tone_is_attenuated() {
        let pass = energy_after(10.0);
        let stop = energy_after(60.0);
        assert!(10.0 * (pass / stop).log10() >= 20.0, "pass {pass} stop {stop}");
        let expected = 5000.0 * 50.0f64.powi(2) / 2.0;
        assert!((pass / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn resampler_preserves_slow_sine() {
        let r = Resampler::new(250.0, 100.0).unwrap();
        let x: Vec<f64> = (0..2500).map(|t| (2.0 * std::f64::consts::PI * 5.0 * t as f64 / 250.0).sin()).collect();
        let y = r.apply(&x);
        assert_eq!(y.len(), 1000);
        for (m, v) in y.iter().enumerate().skip(100).take(800) {
            let want = (2.0 * std::f64::consts::PI * 5.0 * m as f64 / 100.0).sin();
            assert!((v - want).abs() < 1e-2, "{m}: {v} vs {want}");
        }
        assert!(Resampler::new(250.5, 100.0).is_err());
    }

    fn standard(seconds: usize) -> StandardSignal {
        let samples = seconds * 100;
        StandardSignal {
            subject_id: "s".into(),
            session_id: "1".into(),
            channels: Montage::tcp().labels(),
            samples,
            data: (0..20 * samples).map(|v| (v % samples) as f32).collect(),
        }
    }

    #[test]
    fn crop_counts_and_tiling() {
        assert_eq!(crop(&standard(600), 60.0, None).unwrap().len(), 10);
        let c = crop(&standard(61), 60.0, None).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len, 6000);
        let c = crop(&standard(600), 5.0, Some(120)).unwrap();
        assert_eq!(c.len(), 120);
        for (i, w) in c.iter().enumerate() {
            assert_eq!(w.crop_index, i);
            assert_eq!(w.data[0], (i * 500) as f32);
            assert_eq!(w.data[499], (i * 500 + 499) as f32);
        }
        assert!(matches!(crop(&standard(4), 5.0, None), Err(Error::TooShort { .. })));
        assert!(matches!(crop(&standard(60), 7.0, None), Err(Error::InvalidCropLength(_))));
    }
}
