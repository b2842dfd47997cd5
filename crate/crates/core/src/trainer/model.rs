use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ExperimentConfig, Objective};
use crate::config::KvConfig;
use crate::eegprep::check_crop_seconds;
use crate::encoders::{EegEncoder, EncoderSpec, ProjectorKind, ProjectorSpec};
use crate::linalg::Matrix;
use crate::nn::{BatchNorm, Buffer, Dropout, Elu, Gru, Layer, Linear, Module, Param, ParamKind, Relu, Sequential, Tensor};
use crate::{Error, Result};

pub const SSL_HIDDEN: usize = 256;
pub const BYOL_OUT: usize = 32;
pub const VICREG_OUT: usize = 256;
pub const SUPERVISED_HIDDEN: usize = 256;
pub const SUPERVISED_DROPOUT: f64 = 0.5;
pub const NUM_CLASSES: usize = 2;

/// Per-step bilinear maps `W_k: [context, future]` of the CPC objective.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub w: Param<f32>,
}

impl Bilinear {
    pub fn step(&self, k: usize) -> Matrix {
        let (h, d) = (self.w.shape[1], self.w.shape[2]);
        Matrix::from_vec(h, d, self.w.value[k * h * d..(k + 1) * h * d].iter().map(|&v| v as f64).collect())
    }
}

impl Module<f32> for Bilinear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f32>)) {
        f(&self.w)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        f(&mut self.w)
    }
}

/// Objective-specific modules stacked on the shared encoder.
#[derive(Debug, Clone)]
pub enum Heads {
    Elm { eeg: Sequential<f32>, text: Sequential<f32> },
    Mflag { eeg: Sequential<f32> },
    Byol { proj: Sequential<f32>, pred: Sequential<f32>, target_encoder: Box<EegEncoder<f32>>, target_proj: Sequential<f32> },
    Vicreg { proj: Sequential<f32> },
    Contrawr { proj: Sequential<f32> },
    Rp { head: Linear<f32> },
    Ts { head: Linear<f32> },
    Cpc { gru: Gru<f32>, bilinear: Bilinear },
    Supervised { mlp: Sequential<f32> },
}

fn mlp<R: rand::Rng>(name: &str, input: usize, hidden: usize, out: usize, rng: &mut R) -> Sequential<f32> {
    Sequential::new(vec![
        Layer::Linear(Linear::new(&format!("{name}.fc1"), input, hidden, rng)),
        Layer::BatchNorm(BatchNorm::new(&format!("{name}.bn1"), hidden)),
        Layer::Relu(Relu::new()),
        Layer::Linear(Linear::new(&format!("{name}.fc2"), hidden, out, rng)),
    ])
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ExperimentConfig,
    pub encoder: EegEncoder<f32>,
    pub heads: Heads,
}

impl Model {
    /// Fresh model; initialization is driven by `config.seed` alone.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let len = check_crop_seconds(config.crop_seconds)?;
        let spec = EncoderSpec::for_input_len(len, config.width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let encoder = EegEncoder::new(spec, &mut rng);
        let d = encoder.output_dim();
        let heads = match config.objective {
            Objective::ElmEl | Objective::ElmMilEL | Objective::ElmMilEGivenL | Objective::ElmMilLGivenE => Heads::Elm {
                eeg: ProjectorSpec::new(ProjectorKind::EegElm, d).build(&mut rng),
                text: ProjectorSpec::new(ProjectorKind::TextElm, crate::encoders::TEXT_DIM).build(&mut rng),
            },
            Objective::ElmL => Heads::Mflag { eeg: ProjectorSpec::new(ProjectorKind::EegMflag, d).build(&mut rng) },
            Objective::Byol => {
                let proj = mlp("byol_proj", d, SSL_HIDDEN, BYOL_OUT, &mut rng);
                let pred = mlp("byol_pred", BYOL_OUT, SSL_HIDDEN, BYOL_OUT, &mut rng);
                Heads::Byol { target_encoder: Box::new(encoder.clone()), target_proj: proj.clone(), proj, pred }
            }
            Objective::Vicreg => Heads::Vicreg { proj: mlp("vicreg_proj", d, SSL_HIDDEN, VICREG_OUT, &mut rng) },
            Objective::Contrawr => Heads::Contrawr { proj: mlp("contrawr_proj", d, SSL_HIDDEN, BYOL_OUT, &mut rng) },
            Objective::Rp => Heads::Rp { head: Linear::new("rp_head", d, 1, &mut rng) },
            Objective::Ts => Heads::Ts { head: Linear::new("ts_head", 2 * d, 1, &mut rng) },
            Objective::Cpc => {
                let gru = Gru::new("cpc_gru", d, d, &mut rng);
                let w = Param::fan_in_uniform("cpc_bilinear", &[config.cpc_steps, d, d], ParamKind::Weight, d, &mut rng);
                Heads::Cpc { gru, bilinear: Bilinear { w } }
            }
            Objective::Supervised => Heads::Supervised {
                mlp: Sequential::new(vec![
                    Layer::Linear(Linear::new("sup.fc1", d, SUPERVISED_HIDDEN, &mut rng)),
                    Layer::Elu(Elu::new()),
                    Layer::Dropout(Dropout::new(SUPERVISED_DROPOUT, config.seed ^ 0x5eed)),
                    Layer::Linear(Linear::new("sup.fc2", SUPERVISED_HIDDEN, NUM_CLASSES, &mut rng)),
                ]),
            },
        };
        Ok(Self { config: config.clone(), encoder, heads })
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Modules updated by the optimizer, in a fixed order.
    pub fn trainable(&mut self) -> Vec<&mut dyn Module<f32>> {
        let mut out: Vec<&mut dyn Module<f32>> = vec![&mut self.encoder];
        match &mut self.heads {
            Heads::Elm { eeg, text } => {
                out.push(eeg);
                out.push(text);
            }
            Heads::Mflag { eeg } => out.push(eeg),
            Heads::Byol { proj, pred, .. } => {
                out.push(proj);
                out.push(pred);
            }
            Heads::Vicreg { proj } | Heads::Contrawr { proj } => out.push(proj),
            Heads::Rp { head } | Heads::Ts { head } => out.push(head),
            Heads::Cpc { gru, bilinear } => {
                out.push(gru);
                out.push(bilinear);
            }
            Heads::Supervised { mlp } => out.push(mlp),
        }
        out
    }

    /// Every stored module with its checkpoint prefix.
    fn groups(&self) -> Vec<(&'static str, &dyn Module<f32>)> {
        let mut out: Vec<(&'static str, &dyn Module<f32>)> = vec![("", &self.encoder)];
        match &self.heads {
            Heads::Elm { eeg, text } => {
                out.push(("", eeg));
                out.push(("", text));
            }
            Heads::Mflag { eeg } => out.push(("", eeg)),
            Heads::Byol { proj, pred, target_encoder, target_proj } => {
                out.push(("", proj));
                out.push(("", pred));
                out.push(("target.", target_encoder.as_ref()));
                out.push(("target.", target_proj));
            }
            Heads::Vicreg { proj } | Heads::Contrawr { proj } => out.push(("", proj)),
            Heads::Rp { head } | Heads::Ts { head } => out.push(("", head)),
            Heads::Cpc { gru, bilinear } => {
                out.push(("", gru));
                out.push(("", bilinear));
            }
            Heads::Supervised { mlp } => out.push(("", mlp)),
        }
        out
    }

    fn groups_mut(&mut self) -> Vec<(&'static str, &mut dyn Module<f32>)> {
        let mut out: Vec<(&'static str, &mut dyn Module<f32>)> = vec![("", &mut self.encoder)];
        match &mut self.heads {
            Heads::Byol { proj, pred, target_encoder, target_proj } => {
                out.push(("", proj));
                out.push(("", pred));
                out.push(("target.", target_encoder.as_mut()));
                out.push(("target.", target_proj));
            }
            Heads::Elm { eeg, text } => {
                out.push(("", eeg));
                out.push(("", text));
            }
            Heads::Mflag { eeg } => out.push(("", eeg)),
            Heads::Vicreg { proj } | Heads::Contrawr { proj } => out.push(("", proj)),
            Heads::Rp { head } | Heads::Ts { head } => out.push(("", head)),
            Heads::Cpc { gru, bilinear } => {
                out.push(("", gru));
                out.push(("", bilinear));
            }
            Heads::Supervised { mlp } => out.push(("", mlp)),
        }
        out
    }

    pub fn set_training(&mut self, training: bool) {
        for (_, m) in self.groups_mut() {
            m.set_training(training);
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.groups().iter().filter(|(p, _)| p.is_empty()).map(|(_, m)| m.num_params()).sum()
    }

    /// Encoder features `[B, dim]` in inference mode, `chunk` crops at a time.
    pub fn embed(&self, x: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        self.encoder.check_input(x)?;
        let (b, c, l) = x.dims3();
        let d = self.representation_dim();
        let mut out = Vec::with_capacity(b * d);
        for start in (0..b).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(b);
            let part = Tensor::from_vec(&[end - start, c, l], x.data[start * c * l..end * c * l].to_vec());
            out.extend(self.encoder.infer(&part).data);
        }
        Ok(Tensor::from_vec(&[b, d], out))
    }

    /// Shared-space EEG embeddings, for objectives that have an EEG projector.
    pub fn project_eeg(&self, h: &Tensor<f32>) -> Option<Matrix> {
        match &self.heads {
            Heads::Elm { eeg, .. } | Heads::Mflag { eeg } => Some(Matrix::from_tensor(&eeg.infer(h))),
            _ => None,
        }
    }

    /// Shared-space text embeddings from frozen text features.
    pub fn project_text(&self, text_features: &[Vec<f64>]) -> Option<Matrix> {
        let rows: Vec<Vec<f32>> = text_features.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
        match &self.heads {
            Heads::Elm { text, .. } => Some(Matrix::from_tensor(&text.infer(&Tensor::from_rows(&rows)))),
            Heads::Mflag { .. } => Some(Matrix::from_rows(text_features)),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path, rng: Option<&ChaCha8Rng>) -> Result<()> {
        let mut header = String::from("ELMKIT-CHECKPOINT 1\n[config]\n");
        header.push_str(&self.config.to_text());
        header.push_str("[counts]\n");
        let _ = writeln!(header, "encoder_params = {}", self.encoder.num_params());
        let _ = writeln!(header, "trainable_params = {}", self.trainable_params());
        if let Some(r) = rng {
            header.push_str("[rng]\n");
            let seed: String = r.get_seed().iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(header, "seed = {seed}\nstream = {}\nword_pos = {}", r.get_stream(), r.get_word_pos());
        }
        header.push_str("[tensors]\n");
        let mut blob: Vec<u8> = Vec::new();
        for (prefix, m) in self.groups() {
            m.visit_params(&mut |p| {
                let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(header, "param {prefix}{} {} {}", p.name, kind_str(p.kind), dims.join(","));
                blob.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
            });
            m.visit_buffers(&mut |b: &Buffer<f32>| {
                let _ = writeln!(header, "buffer {prefix}{} - {}", b.name, b.value.len());
                blob.extend(b.value.iter().flat_map(|v| v.to_le_bytes()));
            });
        }
        header.push_str("[end]\n");
        let mut bytes = header.into_bytes();
        bytes.extend(blob);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let perr = |line: usize, m: &str| Error::Parse { path: origin.clone(), line, message: m.into() };
        let marker = b"[end]\n";
        let end = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| perr(0, "missing [end] marker"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| perr(0, "header is not UTF-8"))?;
        let mut blob = &bytes[end + marker.len()..];
        let mut section = "";
        let mut config_text = String::new();
        let mut counts = BTreeMap::new();
        let mut rng_kv = BTreeMap::new();
        let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (i, line) in header.lines().enumerate() {
            if i == 0 {
                if line != "ELMKIT-CHECKPOINT 1" {
                    return Err(perr(1, "not an elmkit checkpoint"));
                }
                continue;
            }
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                "[counts]" | "[rng]" => {
                    let (k, v) = line.split_once(" = ").ok_or_else(|| perr(i + 1, "expected key = value"))?;
                    if section == "[counts]" {
                        counts.insert(k.to_string(), v.parse::<usize>().map_err(|_| perr(i + 1, "bad count"))?);
                    } else {
                        rng_kv.insert(k.to_string(), v.to_string());
                    }
                }
                "[tensors]" => {
                    let cols: Vec<&str> = line.split(' ').collect();
                    if cols.len() != 4 {
                        return Err(perr(i + 1, "expected `param|buffer name kind dims`"));
                    }
                    let n: usize = if cols[0] == "param" {
                        cols[3].split(',').map(|d| d.parse::<usize>().map_err(|_| perr(i + 1, "bad dims"))).product::<Result<usize>>()?
                    } else {
                        cols[3].parse().map_err(|_| perr(i + 1, "bad length"))?
                    };
                    if blob.len() < 4 * n {
                        return Err(perr(i + 1, "tensor data truncated"));
                    }
                    let vals = blob[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    blob = &blob[4 * n..];
                    tensors.insert(cols[1].to_string(), vals);
                }
                _ => return Err(perr(i + 1, "content outside a section")),
            }
        }
        let kv = KvConfig::parse(&config_text, &origin)?;
        let config = ExperimentConfig::from_kv(&kv)?;
        kv.finish()?;
        let mut model = Model::new(&config)?;
        let mut missing = Vec::new();
        for (prefix, m) in model.groups_mut() {
            m.visit_params_mut(&mut |p| match tensors.get(&format!("{prefix}{}", p.name)) {
                Some(v) if v.len() == p.value.len() => p.value.clone_from(v),
                _ => missing.push(format!("{prefix}{}", p.name)),
            });
            m.visit_buffers_mut(&mut |b| match tensors.get(&format!("{prefix}{}", b.name)) {
                Some(v) if v.len() == b.value.len() => b.value.clone_from(v),
                _ => missing.push(format!("{prefix}{}", b.name)),
            });
        }
        if !missing.is_empty() {
            return Err(perr(0, &format!("missing or mis-shaped tensors: {}", missing.join(", "))));
        }
        let rng = if rng_kv.is_empty() {
            None
        } else {
            let seed_hex = rng_kv.get("seed").ok_or_else(|| perr(0, "rng seed missing"))?;
            let mut seed = [0u8; 32];
            for (k, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(seed_hex.get(2 * k..2 * k + 2).unwrap_or("zz"), 16).map_err(|_| perr(0, "bad rng seed"))?;
            }
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(rng_kv.get("stream").and_then(|s| s.parse().ok()).unwrap_or(0));
            r.set_word_pos(rng_kv.get("word_pos").and_then(|s| s.parse().ok()).unwrap_or(0));
            Some(r)
        };
        model.set_training(false);
        Ok(Checkpoint { model, rng, counts })
    }
}

fn kind_str(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Norm => "norm",
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub rng: Option<ChaCha8Rng>,
    /// `encoder_params` and `trainable_params` as recorded at save time.
    pub counts: BTreeMap<String, usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_for_every_objective() {
        let dir = tempfile::tempdir().unwrap();
        for obj in Objective::ALL {
            let mut cfg = ExperimentConfig::new(obj);
            cfg.crop_seconds = 5.0;
            cfg.width = 2;
            cfg.cpc_steps = 2;
            cfg.seed = 3;
            let mut m = Model::new(&cfg).unwrap();
            m.encoder.visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.5));
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let _: u64 = rand::Rng::random(&mut rng);
            let path = dir.path().join(format!("{obj}.ckpt"));
            m.save(&path, Some(&rng)).unwrap();
            let back = Model::load(&path).unwrap();
            assert_eq!(back.model.config, cfg);
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (_, g) in m.groups() {
                a.extend(g.param_values());
            }
            for (_, g) in back.model.groups() {
                b.extend(g.param_values());
            }
            assert_eq!(a, b, "{obj}");
            assert_eq!(back.rng.unwrap(), rng);
            assert_eq!(back.counts["encoder_params"], m.encoder.num_params());
        }
    }
}
