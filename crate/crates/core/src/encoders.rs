//! Sensor and label encoders mapping into a shared embedding space.
//!
//! The sensor side runs one small feedforward network per modality
//! (linear, ReLU, linear), concatenates the outputs and fuses them with a
//! single linear layer. The label side averages learned token vectors.
//! Both sides are L2-normalized unless `normalize` is off.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{LabelVocabulary, Modality, ModalitySchema, SensorWindow};

const PARAM_MAGIC: &[u8; 4] = b"SCPM";
const PARAM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("out-of-vocabulary token(s): {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),
    #[error("parameter file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    RawWindow,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Hidden width per modality. A single entry applies to every modality.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub normalize: bool,
    pub feature_mode: FeatureMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            hidden: vec![64],
            activation: Activation::Relu,
            seed: 0,
            normalize: true,
            feature_mode: FeatureMode::RawWindow,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, schema: &ModalitySchema) -> Result<(), EncoderError> {
        if self.embed_dim < 2 {
            return Err(EncoderError::Config("embed_dim must be at least 2".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(EncoderError::Config("hidden widths must be >= 1".into()));
        }
        if self.hidden.len() != 1 && self.hidden.len() != schema.len() {
            return Err(EncoderError::Config(format!(
                "{} hidden widths given for {} modalities",
                self.hidden.len(),
                schema.len()
            )));
        }
        Ok(())
    }

    pub fn hidden_for(&self, modality: usize) -> usize {
        if self.hidden.len() == 1 {
            self.hidden[0]
        } else {
            self.hidden[modality]
        }
    }

    fn input_dim(&self, modality: &Modality) -> usize {
        match self.feature_mode {
            FeatureMode::RawWindow => modality.dim,
            FeatureMode::Statistical => 4,
        }
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-s..s)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += dot(row, x);
        }
        y
    }

    /// Accumulate `dW += dy x^T`, `db += dy`; returns `W^T dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub hidden: Linear,
    pub output: Linear,
}

/// Encoder weights: per-modality networks, fusion layer and token table.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: EncoderConfig,
    pub schema: ModalitySchema,
    pub vocab: LabelVocabulary,
    pub modalities: Vec<ModalityEncoder>,
    pub fusion: Linear,
    pub tokens: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Anything that can embed a label phrase.
pub trait LabelEncoder {
    fn encode_phrase(&self, phrase: &str) -> Result<Embedding, EncoderError>;
    /// True when every token of `phrase` can be embedded.
    fn covers(&self, phrase: &str) -> bool;
}

impl LabelEncoder for Parameters {
    fn encode_phrase(&self, phrase: &str) -> Result<Embedding, EncoderError> {
        encode_label(self, phrase)
    }

    fn covers(&self, phrase: &str) -> bool {
        let toks = tokenize(phrase);
        !toks.is_empty() && toks.iter().all(|t| self.tokens.contains_key(t))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(phrase: &str) -> Vec<String> {
    phrase
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn init_parameters(
    config: &EncoderConfig,
    schema: &ModalitySchema,
    vocab: &LabelVocabulary,
) -> Result<Parameters, EncoderError> {
    schema.validate().map_err(|e| EncoderError::Schema(e.to_string()))?;
    config.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.embed_dim;
    let modalities = schema
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let h = config.hidden_for(i);
            ModalityEncoder {
                hidden: Linear::glorot(config.input_dim(m), h, &mut rng),
                output: Linear::glorot(h, d, &mut rng),
            }
        })
        .collect();
    let fusion = Linear::glorot(schema.len() * d, d, &mut rng);
    let token_set: BTreeSet<String> = vocab.phrases().iter().flat_map(|p| tokenize(p)).collect();
    let s = (6.0 / (1 + d) as f64).sqrt();
    let tokens = token_set
        .into_iter()
        .map(|t| (t, (0..d).map(|_| rng.random_range(-s..s)).collect()))
        .collect();
    Ok(Parameters {
        config: config.clone(),
        schema: schema.clone(),
        vocab: vocab.clone(),
        modalities,
        fusion,
        tokens,
    })
}

/// Per-modality mean, population standard deviation, min and max.
pub fn statistical_features(window: &SensorWindow) -> Vec<f64> {
    window.features.iter().flat_map(|v| modality_stats(v)).collect()
}

fn modality_stats(v: &[f64]) -> [f64; 4] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

/// Intermediate values kept for backpropagation.
pub(crate) struct SensorTrace {
    inputs: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    concat: Vec<f64>,
    pub(crate) fused: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

impl SensorTrace {
    /// Smallest |pre-activation| over all hidden units; distance to a ReLU kink.
    pub(crate) fn min_abs_preactivation(&self) -> f64 {
        self.pre_act
            .iter()
            .flatten()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Norm of the fused vector; normalization is singular at zero.
    pub(crate) fn fused_norm(&self) -> f64 {
        self.fused.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn modality_inputs(params: &Parameters, window: &SensorWindow) -> Result<Vec<Vec<f64>>, EncoderError> {
    let schema = &params.schema;
    if window.features.len() != schema.len() {
        return Err(EncoderError::Schema(format!(
            "window has {} modalities, schema has {}",
            window.features.len(),
            schema.len()
        )));
    }
    window
        .features
        .iter()
        .zip(&schema.modalities)
        .map(|(v, m)| {
            if v.len() != m.dim {
                return Err(EncoderError::Schema(format!(
                    "modality `{}` has {} features, expected {}",
                    m.name,
                    v.len(),
                    m.dim
                )));
            }
            Ok(match params.config.feature_mode {
                FeatureMode::RawWindow => v.clone(),
                FeatureMode::Statistical => modality_stats(v).to_vec(),
            })
        })
        .collect()
}

pub(crate) fn sensor_forward(params: &Parameters, window: &SensorWindow) -> Result<SensorTrace, EncoderError> {
    let inputs = modality_inputs(params, window)?;
    let d = params.config.embed_dim;
    let mut pre_act = Vec::with_capacity(inputs.len());
    let mut act = Vec::with_capacity(inputs.len());
    let mut concat = Vec::with_capacity(inputs.len() * d);
    for (enc, x) in params.modalities.iter().zip(&inputs) {
        let h = enc.hidden.forward(x);
        let a: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
        concat.extend(enc.output.forward(&a));
        pre_act.push(h);
        act.push(a);
    }
    let fused = params.fusion.forward(&concat);
    let output = if params.config.normalize {
        normalized(&fused)
    } else {
        fused.clone()
    };
    Ok(SensorTrace {
        inputs,
        pre_act,
        act,
        concat,
        fused,
        output,
    })
}

pub(crate) fn sensor_backward(params: &Parameters, trace: &SensorTrace, d_out: &[f64], grad: &mut Parameters) {
    let d_fused = if params.config.normalize {
        normalize_backward(&trace.fused, &trace.output, d_out)
    } else {
        d_out.to_vec()
    };
    let d_concat = params.fusion.backward(&trace.concat, &d_fused, &mut grad.fusion);
    let d = params.config.embed_dim;
    for (m, enc) in params.modalities.iter().enumerate() {
        let d_o = &d_concat[m * d..(m + 1) * d];
        let g = &mut grad.modalities[m];
        let d_a = enc.output.backward(&trace.act[m], d_o, &mut g.output);
        let d_h: Vec<f64> = d_a
            .iter()
            .zip(&trace.pre_act[m])
            .map(|(&da, &h)| if h > 0.0 { da } else { 0.0 })
            .collect();
        enc.hidden.backward(&trace.inputs[m], &d_h, &mut g.hidden);
    }
}

pub fn encode_sensor(params: &Parameters, window: &SensorWindow) -> Result<Embedding, EncoderError> {
    Ok(Embedding(sensor_forward(params, window)?.output))
}

pub(crate) struct LabelTrace {
    tokens: Vec<String>,
    mean: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

pub(crate) fn label_forward(params: &Parameters, phrase: &str) -> Result<LabelTrace, EncoderError> {
    let tokens = tokenize(phrase);
    if tokens.is_empty() {
        return Err(EncoderError::OutOfVocabulary(vec![phrase.to_string()]));
    }
    let unknown: Vec<String> = tokens
        .iter()
        .filter(|t| !params.tokens.contains_key(*t))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(EncoderError::OutOfVocabulary(unknown));
    }
    let mut mean = vec![0.0; params.config.embed_dim];
    for t in &tokens {
        for (m, v) in mean.iter_mut().zip(&params.tokens[t]) {
            *m += v;
        }
    }
    let n = tokens.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let output = if params.config.normalize {
        normalized(&mean)
    } else {
        mean.clone()
    };
    Ok(LabelTrace { tokens, mean, output })
}

pub(crate) fn label_backward(params: &Parameters, trace: &LabelTrace, d_out: &[f64], grad: &mut Parameters) {
    let d_mean = if params.config.normalize {
        normalize_backward(&trace.mean, &trace.output, d_out)
    } else {
        d_out.to_vec()
    };
    let n = trace.tokens.len() as f64;
    for t in &trace.tokens {
        let g = grad.tokens.get_mut(t).expect("token present in gradient");
        for (gv, dv) in g.iter_mut().zip(&d_mean) {
            *gv += dv / n;
        }
    }
}

pub fn encode_label(params: &Parameters, phrase: &str) -> Result<Embedding, EncoderError> {
    Ok(Embedding(label_forward(params, phrase)?.output))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Backprop through `y = v / |v|`: `dv = (dy - y (y . dy)) / |v|`.
fn normalize_backward(v: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return dy.to_vec();
    }
    let proj = dot(y, dy);
    dy.iter().zip(y).map(|(g, yi)| (g - yi * proj) / n).collect()
}

impl Parameters {
    /// A copy with every tensor set to zero, used to accumulate gradients.
    pub fn zeros_like(&self) -> Parameters {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit tensors in declaration order: per modality (hidden W, hidden b,
    /// output W, output b), fusion W, fusion b, then tokens in sorted order.
    pub fn for_each_tensor<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        for (i, m) in self.modalities.iter().enumerate() {
            let name = &self.schema.modalities[i].name;
            f(&format!("{name}.hidden.weight"), &m.hidden.weight);
            f(&format!("{name}.hidden.bias"), &m.hidden.bias);
            f(&format!("{name}.output.weight"), &m.output.weight);
            f(&format!("{name}.output.bias"), &m.output.bias);
        }
        f("fusion.weight", &self.fusion.weight);
        f("fusion.bias", &self.fusion.bias);
        for (tok, v) in &self.tokens {
            f(&format!("token.{tok}"), v);
        }
    }

    pub fn for_each_tensor_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        for (i, m) in self.modalities.iter_mut().enumerate() {
            let name = self.schema.modalities[i].name.clone();
            f(&format!("{name}.hidden.weight"), &mut m.hidden.weight);
            f(&format!("{name}.hidden.bias"), &mut m.hidden.bias);
            f(&format!("{name}.output.weight"), &mut m.output.weight);
            f(&format!("{name}.output.bias"), &mut m.output.bias);
        }
        f("fusion.weight", &mut self.fusion.weight);
        f("fusion.bias", &mut self.fusion.bias);
        for (tok, v) in self.tokens.iter_mut() {
            f(&format!("token.{tok}"), v);
        }
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Serialize to the little-endian `SCPM` parameter format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EncoderError> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.schema.len() as u32).to_le_bytes())?;
        for m in &self.schema.modalities {
            write_str(&mut w, &m.name)?;
            w.write_all(&(m.dim as u32).to_le_bytes())?;
        }
        let config = serde_json::to_vec(&self.config).map_err(|e| EncoderError::Format(e.to_string()))?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for p in self.vocab.phrases() {
            write_str(&mut w, p)?;
        }
        w.write_all(&(self.tokens.len() as u32).to_le_bytes())?;
        for tok in self.tokens.keys() {
            write_str(&mut w, tok)?;
        }
        let mut buf = Vec::with_capacity(self.num_scalars() * 4);
        self.for_each_tensor(|_, t| {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        });
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Parameters, EncoderError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(EncoderError::Format("bad magic, expected SCPM".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PARAM_VERSION {
            return Err(EncoderError::Format(format!("unsupported version {version}")));
        }
        let n_mod = read_u32(&mut r)? as usize;
        let mut modalities = Vec::with_capacity(n_mod);
        for _ in 0..n_mod {
            let name = read_str(&mut r)?;
            let dim = read_u32(&mut r)? as usize;
            modalities.push(Modality { name, dim });
        }
        let schema = ModalitySchema::new(modalities).map_err(|e| EncoderError::Format(e.to_string()))?;
        let len = read_u32(&mut r)? as usize;
        let mut config = vec![0u8; len];
        r.read_exact(&mut config)?;
        let config: EncoderConfig =
            serde_json::from_slice(&config).map_err(|e| EncoderError::Format(e.to_string()))?;
        let n_vocab = read_u32(&mut r)? as usize;
        let phrases = (0..n_vocab).map(|_| read_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let vocab = LabelVocabulary::from_phrases(phrases).map_err(|e| EncoderError::Format(e.to_string()))?;
        let n_tok = read_u32(&mut r)? as usize;
        let token_names = (0..n_tok).map(|_| read_str(&mut r)).collect::<Result<Vec<_>, _>>()?;

        let mut params = init_parameters(&config, &schema, &vocab)?;
        params.tokens = token_names
            .into_iter()
            .map(|t| (t, vec![0.0; config.embed_dim]))
            .collect();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != params.num_scalars() * 4 {
            return Err(EncoderError::Format(format!(
                "tensor payload is {} bytes, expected {}",
                bytes.len(),
                params.num_scalars() * 4
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.assign_flat(&flat);
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::store::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Parameters, EncoderError> {
        let bytes = std::fs::read(path)?;
        Parameters::read_from(bytes.as_slice())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "string too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, EncoderError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let mut s = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut s)?;
    String::from_utf8(s).map_err(|e| EncoderError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> ModalitySchema {
        ModalitySchema::new(vec![
            Modality { name: "imu".into(), dim: 3 },
            Modality { name: "audio".into(), dim: 2 },
        ])
        .unwrap()
    }

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::from_phrases(["at home", "walking", "doing computer work"]).unwrap()
    }

    fn window(values: [f64; 5]) -> SensorWindow {
        SensorWindow {
            timestamp: 0,
            user_id: "u".into(),
            features: vec![values[..3].to_vec(), values[3..].to_vec()],
            missing: vec![false, false],
            missing_cells: vec![],
            labels: Default::default(),
        }
    }

    fn config(dim: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: dim,
            hidden: vec![6],
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let b = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_parameters(&EncoderConfig { seed: 8, ..config(8) }, &schema(), &vocab()).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn default_output_width_is_512() {
        let p = init_parameters(&EncoderConfig::default(), &schema(), &vocab()).unwrap();
        assert!(p.modalities.iter().all(|m| m.output.out_dim == 512));
        assert_eq!(p.fusion.out_dim, 512);
        assert!(p.tokens.values().all(|v| v.len() == 512));
    }

    #[test]
    fn token_table_covers_vocab_tokens() {
        let v = LabelVocabulary::from_phrases(["at home", "walking"]).unwrap();
        let p = init_parameters(&config(4), &schema(), &v).unwrap();
        let keys: Vec<&str> = p.tokens.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["at", "home", "walking"]);
    }

    #[test]
    fn glorot_bounds_respected() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let s = (6.0f64 / (3 + 6) as f64).sqrt();
        assert!(p.modalities[0].hidden.weight.iter().all(|w| w.abs() <= s));
        assert!(p.modalities[0].hidden.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_vector() {
        let mut p = init_parameters(&EncoderConfig { normalize: false, ..config(4) }, &schema(), &vocab()).unwrap();
        p = p.zeros_like();
        let e = encode_sensor(&p, &window([1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(e.0, vec![0.0; 4]);
    }

    #[test]
    fn sensor_embedding_unit_norm_and_deterministic() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let w = window([0.3, -1.0, 2.0, 0.5, 0.1]);
        let a = encode_sensor(&p, &w).unwrap();
        let b = encode_sensor(&p, &w).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_schema_error() {
        let p = init_parameters(&config(4), &schema(), &vocab()).unwrap();
        let mut w = window([0.0; 5]);
        w.features[1].push(1.0);
        assert!(matches!(encode_sensor(&p, &w), Err(EncoderError::Schema(_))));
    }

    #[test]
    fn single_token_label_is_normalized_token() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let e = encode_label(&p, "walking").unwrap();
        let t = &p.tokens["walking"];
        let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in e.0.iter().zip(t) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_token_label_is_normalized_mean() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let e = encode_label(&p, "at home").unwrap();
        let m: Vec<f64> = p.tokens["at"].iter().zip(&p.tokens["home"]).map(|(u, v)| (u + v) / 2.0).collect();
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in e.0.iter().zip(&m) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn label_embedding_ignores_token_order() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let a = encode_label(&p, "doing computer work").unwrap();
        let b = encode_label(&p, "computer work doing").unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_token_listed() {
        let p = init_parameters(&config(4), &schema(), &vocab()).unwrap();
        match encode_label(&p, "walking on mars") {
            Err(EncoderError::OutOfVocabulary(t)) => assert_eq!(t, vec!["on".to_string(), "mars".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!p.covers("walking on mars"));
        assert!(p.covers("Walking"));
    }

    #[test]
    fn label_scale_invariance() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let mut scaled = p.clone();
        scaled.tokens.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= 3.7));
        let a = encode_label(&p, "at home").unwrap();
        let b = encode_label(&scaled, "at home").unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn statistical_features_per_modality() {
        let w = window([1.0, 2.0, 3.0, 4.0, 4.0]);
        let f = statistical_features(&w);
        assert_eq!(f.len(), 8);
        assert_eq!(f[0], 2.0);
        assert!((f[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!((f[2], f[3]), (1.0, 3.0));
        assert_eq!(&f[4..], &[4.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn statistical_mode_encodes() {
        let cfg = EncoderConfig {
            feature_mode: FeatureMode::Statistical,
            ..config(4)
        };
        let p = init_parameters(&cfg, &schema(), &vocab()).unwrap();
        assert_eq!(p.modalities[0].hidden.in_dim, 4);
        let e = encode_sensor(&p, &window([1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parameter_file_round_trip() {
        let p = init_parameters(&config(8), &schema(), &vocab()).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCPM");
        let q = Parameters::read_from(buf.as_slice()).unwrap();
        assert_eq!(q.schema, p.schema);
        assert_eq!(q.config, p.config);
        assert_eq!(q.vocab, p.vocab);
        for (a, b) in p.flatten().iter().zip(q.flatten()) {
            assert_eq!(*a as f32, b as f32);
        }
        let mut again = Vec::new();
        q.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn parameter_file_rejects_bad_magic_and_version() {
        let p = init_parameters(&config(4), &schema(), &vocab()).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Parameters::read_from(bad.as_slice()), Err(EncoderError::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(Parameters::read_from(bad.as_slice()), Err(EncoderError::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(Parameters::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = EncoderConfig { embed_dim: 1, ..config(4) };
        assert!(init_parameters(&bad, &schema(), &vocab()).is_err());
        let bad = EncoderConfig { hidden: vec![2, 2, 2], ..config(4) };
        assert!(init_parameters(&bad, &schema(), &vocab()).is_err());
    }
}
