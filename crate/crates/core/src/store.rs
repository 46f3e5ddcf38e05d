//! Persisted window embeddings, the similarity scorer and thresholded matching.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{is_sorted_disjoint, Interval};
use crate::encoders::{dot, encode_label, encode_sensor, EncoderError, Embedding, Parameters};
use crate::ingest::Timeline;
use crate::optim::Adam;
use crate::pretrain::labeled_windows;

const STORE_MAGIC: &[u8; 4] = b"SCEM";
const STORE_VERSION: u32 = 1;
const SIM_MAGIC: &[u8; 4] = b"SCFS";
/// Logits are clamped so the sigmoid stays strictly inside (0, 1) in f64.
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
    #[error("intervals must be non-empty, sorted and disjoint")]
    InvalidIntervals,
    #[error("no record for user {user} at timestamp {timestamp}")]
    NotFound { user: String, timestamp: i64 },
    #[error("no labeled windows to train the similarity model")]
    NoTrainingData,
    #[error("store file: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub timestamp: i64,
    pub user_id: String,
    pub vector: Vec<f32>,
}

/// Embeddings for every window, sorted by `(user_id, timestamp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub embed_dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn build_store(params: &Parameters, timeline: &Timeline) -> Result<EmbeddingStore, StoreError> {
    let records = timeline
        .windows
        .iter()
        .map(|w| {
            Ok(EmbeddingRecord {
                timestamp: w.timestamp,
                user_id: w.user_id.clone(),
                vector: encode_sensor(params, w)?.0.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(EmbeddingStore {
        embed_dim: params.config.embed_dim,
        records,
    })
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index range of `user`'s records.
    pub fn user_range(&self, user: &str) -> Range<usize> {
        let start = self.records.partition_point(|r| r.user_id.as_str() < user);
        let end = self.records.partition_point(|r| r.user_id.as_str() <= user);
        start..end
    }

    /// Index range of `user`'s records with timestamps in `interval`.
    pub fn range_in(&self, user: &str, interval: &Interval) -> Range<usize> {
        let r = self.user_range(user);
        let slice = &self.records[r.clone()];
        let lo = slice.partition_point(|x| x.timestamp < interval.from);
        let hi = slice.partition_point(|x| x.timestamp < interval.to);
        r.start + lo..r.start + hi.max(lo)
    }

    pub fn find(&self, user: &str, timestamp: i64) -> Option<usize> {
        let r = self.user_range(user);
        self.records[r.clone()]
            .binary_search_by_key(&timestamp, |x| x.timestamp)
            .ok()
            .map(|i| r.start + i)
    }

    pub fn users(&self) -> Vec<&str> {
        let mut users: Vec<&str> = self.records.iter().map(|r| r.user_id.as_str()).collect();
        users.dedup();
        users
    }

    /// First and last timestamp for `user`.
    pub fn bounds(&self, user: &str) -> Option<(i64, i64)> {
        let r = self.user_range(user);
        if r.is_empty() {
            return None;
        }
        Some((self.records[r.start].timestamp, self.records[r.end - 1].timestamp))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.embed_dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            if r.vector.len() != self.embed_dim {
                return Err(StoreError::Dimension(format!(
                    "record has {} dims, store has {}",
                    r.vector.len(),
                    self.embed_dim
                )));
            }
            w.write_all(&r.timestamp.to_le_bytes())?;
            let len: u16 = r
                .user_id
                .len()
                .try_into()
                .map_err(|_| StoreError::Format("user id longer than 65535 bytes".into()))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(r.user_id.as_bytes())?;
            for v in &r.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<EmbeddingStore, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::Format("bad magic, expected SCEM".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != STORE_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let embed_dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 24));
        let mut vec_bytes = vec![0u8; embed_dim * 4];
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let timestamp = i64::from_le_bytes(b8);
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut id)?;
            let user_id = String::from_utf8(id).map_err(|e| StoreError::Format(e.to_string()))?;
            r.read_exact(&mut vec_bytes)?;
            let vector = vec_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(EmbeddingRecord {
                timestamp,
                user_id,
                vector,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(StoreError::Format("trailing bytes after last record".into()));
        }
        let sorted = records
            .windows(2)
            .all(|w| (&w[0].user_id, w[0].timestamp) < (&w[1].user_id, w[1].timestamp));
        if !sorted {
            return Err(StoreError::Format("records not sorted by (user, timestamp)".into()));
        }
        Ok(EmbeddingStore { embed_dim, records })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut buf = Vec::with_capacity(24 + self.records.len() * (10 + 4 * self.embed_dim));
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        atomic_write(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingStore, StoreError> {
        let bytes = std::fs::read(path)?;
        EmbeddingStore::read_from(bytes.as_slice())
    }
}

/// A label phrase and its embedding, as handed to a scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTarget {
    pub phrase: String,
    pub embedding: Embedding,
}

/// Scores `(record, label)` pairs in (0, 1).
pub trait Scorer: Send + Sync {
    /// Returns a scoring function for one label; its arguments are the
    /// record's index in the store and the record itself.
    fn prepare<'a>(&'a self, target: &'a LabelTarget) -> Box<dyn Fn(usize, &EmbeddingRecord) -> f64 + 'a>;
}

fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub embed_dim: usize,
    pub hidden: usize,
    /// `hidden x (2 * embed_dim)`, row-major; the first half of each row
    /// multiplies the sensor embedding, the second half the label embedding.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpHead {
    fn new(embed_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let s1 = (6.0 / (2 * embed_dim + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + 1) as f64).sqrt();
        Self {
            embed_dim,
            hidden,
            w1: (0..hidden * 2 * embed_dim).map(|_| rng.random_range(-s1..s1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.random_range(-s2..s2)).collect(),
            b2: 0.0,
        }
    }

    fn row(&self, j: usize) -> (&[f64], &[f64]) {
        let d = self.embed_dim;
        let row = &self.w1[j * 2 * d..(j + 1) * 2 * d];
        row.split_at(d)
    }

    /// `W1_label z_w + b1`, shared by every record scored against one label.
    fn label_half(&self, z_w: &[f64]) -> Vec<f64> {
        (0..self.hidden).map(|j| self.b1[j] + dot(self.row(j).1, z_w)).collect()
    }

    fn sensor_half(&self, z_s: &[f32]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| self.row(j).0.iter().zip(z_s).map(|(w, &x)| w * x as f64).sum())
            .collect()
    }

    fn logit_from_halves(&self, sensor: impl Iterator<Item = f64>, label: &[f64]) -> f64 {
        let mut out = self.b2;
        for ((s, l), w) in sensor.zip(label).zip(&self.w2) {
            let h = s + l;
            if h > 0.0 {
                out += w * h;
            }
        }
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.hidden + 1);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    fn assign(&mut self, flat: &[f64]) {
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden);
        let (c, rest) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityModel {
    Mlp(MlpHead),
    CosineSigmoid { scale: f64 },
}

impl SimilarityModel {
    pub fn score(&self, z_s: &[f32], z_w: &[f64]) -> f64 {
        match self {
            SimilarityModel::Mlp(m) => {
                let label = m.label_half(z_w);
                sigmoid(m.logit_from_halves(m.sensor_half(z_s).into_iter(), &label))
            }
            SimilarityModel::CosineSigmoid { scale } => {
                let c: f64 = z_s.iter().zip(z_w).map(|(&a, b)| a as f64 * b).sum();
                sigmoid(scale * c)
            }
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            SimilarityModel::Mlp(_) => "mlp",
            SimilarityModel::CosineSigmoid { .. } => "cosine_sigmoid",
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(SIM_MAGIC)?;
        match self {
            SimilarityModel::Mlp(m) => {
                w.write_all(&[0u8])?;
                w.write_all(&(m.embed_dim as u32).to_le_bytes())?;
                w.write_all(&(m.hidden as u32).to_le_bytes())?;
                for v in m.flatten() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            SimilarityModel::CosineSigmoid { scale } => {
                w.write_all(&[1u8])?;
                w.write_all(&(*scale as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<SimilarityModel, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SIM_MAGIC {
            return Err(StoreError::Format("bad magic, expected SCFS".into()));
        }
        let mut mode = [0u8; 1];
        r.read_exact(&mut mode)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let floats = |bytes: &[u8]| -> Vec<f64> {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        };
        match mode[0] {
            0 => {
                if rest.len() < 8 {
                    return Err(StoreError::Format("truncated mlp header".into()));
                }
                let embed_dim = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
                let hidden = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
                let expected = hidden * 2 * embed_dim + 2 * hidden + 1;
                if rest.len() - 8 != expected * 4 {
                    return Err(StoreError::Format("mlp tensor payload has wrong length".into()));
                }
                let mut head = MlpHead {
                    embed_dim,
                    hidden,
                    w1: vec![0.0; hidden * 2 * embed_dim],
                    b1: vec![0.0; hidden],
                    w2: vec![0.0; hidden],
                    b2: 0.0,
                };
                head.assign(&floats(&rest[8..]));
                Ok(SimilarityModel::Mlp(head))
            }
            1 => {
                if rest.len() != 4 {
                    return Err(StoreError::Format("cosine payload has wrong length".into()));
                }
                Ok(SimilarityModel::CosineSigmoid { scale: floats(&rest)[0] })
            }
            m => Err(StoreError::Format(format!("unknown similarity mode {m}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SimilarityModel, StoreError> {
        let bytes = std::fs::read(path)?;
        SimilarityModel::read_from(bytes.as_slice())
    }
}

impl Scorer for SimilarityModel {
    fn prepare<'a>(&'a self, target: &'a LabelTarget) -> Box<dyn Fn(usize, &EmbeddingRecord) -> f64 + 'a> {
        match self {
            SimilarityModel::Mlp(m) => {
                let label = m.label_half(&target.embedding.0);
                Box::new(move |_, r| sigmoid(m.logit_from_halves(m.sensor_half(&r.vector).into_iter(), &label)))
            }
            SimilarityModel::CosineSigmoid { .. } => Box::new(move |_, r| self.score(&r.vector, &target.embedding.0)),
        }
    }
}

/// A similarity model bound to one store, with the sensor half of the MLP's
/// first layer precomputed for every record.
pub struct IndexedScorer {
    model: SimilarityModel,
    sensor_hidden: Vec<f32>,
}

impl IndexedScorer {
    pub fn new(model: SimilarityModel, store: &EmbeddingStore) -> Self {
        let sensor_hidden = match &model {
            SimilarityModel::Mlp(m) => store
                .records
                .iter()
                .flat_map(|r| m.sensor_half(&r.vector).into_iter().map(|v| v as f32))
                .collect(),
            SimilarityModel::CosineSigmoid { .. } => Vec::new(),
        };
        Self { model, sensor_hidden }
    }

    pub fn model(&self) -> &SimilarityModel {
        &self.model
    }
}

impl Scorer for IndexedScorer {
    fn prepare<'a>(&'a self, target: &'a LabelTarget) -> Box<dyn Fn(usize, &EmbeddingRecord) -> f64 + 'a> {
        match &self.model {
            SimilarityModel::Mlp(m) => {
                let label = m.label_half(&target.embedding.0);
                let h = m.hidden;
                Box::new(move |idx, _| {
                    let sensor = &self.sensor_hidden[idx * h..(idx + 1) * h];
                    sigmoid(m.logit_from_halves(sensor.iter().map(|&v| v as f64), &label))
                })
            }
            SimilarityModel::CosineSigmoid { .. } => self.model.prepare(target),
        }
    }
}

/// Scores from ground-truth labels: 0.99 when the window carries the phrase,
/// 0.01 otherwise. Used to validate query logic independently of learning.
pub struct GroundTruthScorer {
    labels: HashMap<String, HashMap<i64, BTreeSet<String>>>,
}

impl GroundTruthScorer {
    pub const POSITIVE: f64 = 0.99;
    pub const NEGATIVE: f64 = 0.01;

    pub fn new(timeline: &Timeline) -> Self {
        let mut labels: HashMap<String, HashMap<i64, BTreeSet<String>>> = HashMap::new();
        for w in &timeline.windows {
            labels
                .entry(w.user_id.clone())
                .or_default()
                .insert(w.timestamp, w.labels.clone());
        }
        Self { labels }
    }
}

impl Scorer for GroundTruthScorer {
    fn prepare<'a>(&'a self, target: &'a LabelTarget) -> Box<dyn Fn(usize, &EmbeddingRecord) -> f64 + 'a> {
        Box::new(move |_, r| {
            let hit = self
                .labels
                .get(r.user_id.as_str())
                .and_then(|m| m.get(&r.timestamp))
                .is_some_and(|l| l.contains(&target.phrase));
            if hit {
                Self::POSITIVE
            } else {
                Self::NEGATIVE
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Mlp,
    CosineSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimTrainConfig {
    pub mode: SimilarityMode,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives sampled per positive for each window.
    pub negative_ratio: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::Mlp,
            hidden: 512,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            negative_ratio: 3,
            threshold: 0.5,
            seed: 0,
        }
    }
}

pub const COSINE_SCALE_GRID: [f64; 5] = [1.0, 2.0, 5.0, 10.0, 20.0];

/// `(sensor embedding, label index, target)` triples.
struct PairSet {
    sensors: Vec<Vec<f32>>,
    positives: Vec<Vec<usize>>,
}

/// Fraction of pairs whose thresholded score matches the target.
pub fn pair_accuracy(
    model: &SimilarityModel,
    sensors: &[Vec<f32>],
    labels: &[Embedding],
    pairs: &[(usize, usize, bool)],
    h: f64,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|&&(s, l, t)| (model.score(&sensors[s], &labels[l].0) > h) == t)
        .count();
    correct as f64 / pairs.len() as f64
}

fn bce(p: f64, target: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Train the similarity scorer on frozen embeddings.
pub fn train_similarity(
    params: &Parameters,
    timeline: &Timeline,
    config: &SimTrainConfig,
) -> Result<SimilarityModel, StoreError> {
    let windows = labeled_windows(timeline);
    if windows.is_empty() {
        return Err(StoreError::NoTrainingData);
    }
    let vocab = &params.vocab;
    let labels = vocab
        .phrases()
        .iter()
        .map(|p| encode_label(params, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut set = PairSet {
        sensors: Vec::with_capacity(windows.len()),
        positives: Vec::with_capacity(windows.len()),
    };
    for w in &windows {
        set.sensors
            .push(encode_sensor(params, w)?.0.iter().map(|&v| v as f32).collect());
        set.positives
            .push(w.labels.iter().filter_map(|l| vocab.index_of(l)).collect());
    }
    match config.mode {
        SimilarityMode::CosineSigmoid => Ok(fit_cosine(&set, &labels, config.threshold)),
        SimilarityMode::Mlp => Ok(fit_mlp(&set, &labels, params.config.embed_dim, config)),
    }
}

fn all_pairs(set: &PairSet, n_labels: usize) -> Vec<(usize, usize, bool)> {
    let mut pairs = Vec::with_capacity(set.sensors.len() * n_labels);
    for (s, pos) in set.positives.iter().enumerate() {
        for l in 0..n_labels {
            pairs.push((s, l, pos.contains(&l)));
        }
    }
    pairs
}

/// Grid search over the cosine scale: best pair accuracy at `h`, ties broken
/// by lower mean cross-entropy, then by grid order.
fn fit_cosine(set: &PairSet, labels: &[Embedding], h: f64) -> SimilarityModel {
    let pairs = all_pairs(set, labels.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &scale in &COSINE_SCALE_GRID {
        let model = SimilarityModel::CosineSigmoid { scale };
        let acc = pair_accuracy(&model, &set.sensors, labels, &pairs, h);
        let loss = pairs
            .iter()
            .map(|&(s, l, t)| bce(model.score(&set.sensors[s], &labels[l].0), t))
            .sum::<f64>()
            / pairs.len() as f64;
        let better = match best {
            None => true,
            Some((_, a, b)) => acc > a || (acc == a && loss < b),
        };
        if better {
            best = Some((scale, acc, loss));
        }
    }
    SimilarityModel::CosineSigmoid {
        scale: best.expect("non-empty grid").0,
    }
}

fn fit_mlp(set: &PairSet, labels: &[Embedding], embed_dim: usize, config: &SimTrainConfig) -> SimilarityModel {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = MlpHead::new(embed_dim, config.hidden, &mut rng);
    let mut flat = head.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate, 0.9, 0.999, 1e-8);
    let n_labels = labels.len();
    let d = embed_dim;
    let h = config.hidden;
    let batch_size = config.batch_size.max(1);
    for _ in 0..config.epochs {
        let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
        for (s, pos) in set.positives.iter().enumerate() {
            for &p in pos {
                pairs.push((s, p, true));
            }
            let negatives: Vec<usize> = (0..n_labels).filter(|l| !pos.contains(l)).collect();
            let k = (config.negative_ratio * pos.len()).min(negatives.len());
            for i in sample(&mut rng, negatives.len(), k).into_iter() {
                pairs.push((s, negatives[i], false));
            }
        }
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut rng);
        for chunk in pairs.chunks(batch_size) {
            let mut grad = vec![0.0; flat.len()];
            let (gw1, rest) = grad.split_at_mut(h * 2 * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h);
            for &(s, l, target) in chunk {
                let zs = &set.sensors[s];
                let zw = &labels[l].0;
                let input: Vec<f64> = zs.iter().map(|&v| v as f64).chain(zw.iter().copied()).collect();
                let pre: Vec<f64> = (0..h)
                    .map(|j| head.b1[j] + dot(&head.w1[j * 2 * d..(j + 1) * 2 * d], &input))
                    .collect();
                let logit = head.b2
                    + pre
                        .iter()
                        .zip(&head.w2)
                        .map(|(&p, w)| if p > 0.0 { w * p } else { 0.0 })
                        .sum::<f64>();
                let p = sigmoid(logit);
                // d BCE / d logit = p - y, averaged over the batch
                let g = (p - if target { 1.0 } else { 0.0 }) / chunk.len() as f64;
                gb2[0] += g;
                for j in 0..h {
                    if pre[j] <= 0.0 {
                        continue;
                    }
                    gw2[j] += g * pre[j];
                    let gh = g * head.w2[j];
                    gb1[j] += gh;
                    let row = &mut gw1[j * 2 * d..(j + 1) * 2 * d];
                    for (r, x) in row.iter_mut().zip(&input) {
                        *r += gh * x;
                    }
                }
            }
            adam.step(&mut flat, &grad);
            head.assign(&flat);
        }
    }
    SimilarityModel::Mlp(head)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub timestamps: Vec<i64>,
    pub scores: Vec<f64>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

pub fn check_threshold(h: f64) -> Result<(), StoreError> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        Err(StoreError::InvalidThreshold(h))
    }
}

/// Records of `user` inside `intervals` whose score exceeds `h` (strictly).
pub fn match_windows(
    store: &EmbeddingStore,
    scorer: &dyn Scorer,
    target: &LabelTarget,
    user: &str,
    intervals: &[Interval],
    h: f64,
) -> Result<MatchResult, StoreError> {
    check_threshold(h)?;
    if !is_sorted_disjoint(intervals) {
        return Err(StoreError::InvalidIntervals);
    }
    let score = scorer.prepare(target);
    let mut out = MatchResult::default();
    for interval in intervals {
        for idx in store.range_in(user, interval) {
            let r = &store.records[idx];
            let s = score(idx, r);
            if s > h {
                out.timestamps.push(r.timestamp);
                out.scores.push(s);
            }
        }
    }
    Ok(out)
}

/// Top-`k` labels for one record by score, descending; ties keep vocabulary order.
pub fn predict_labels(
    store: &EmbeddingStore,
    scorer: &dyn Scorer,
    targets: &[LabelTarget],
    user: &str,
    timestamp: i64,
    k: usize,
) -> Result<Vec<(String, f64)>, StoreError> {
    let idx = store.find(user, timestamp).ok_or_else(|| StoreError::NotFound {
        user: user.to_string(),
        timestamp,
    })?;
    Ok(rank_record(store, scorer, targets, idx, k))
}

pub(crate) fn rank_record(
    store: &EmbeddingStore,
    scorer: &dyn Scorer,
    targets: &[LabelTarget],
    idx: usize,
    k: usize,
) -> Vec<(String, f64)> {
    let record = &store.records[idx];
    let mut scored: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (i, scorer.prepare(t)(idx, record)))
        .collect();
    // stable sort keeps vocabulary order among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (targets[i].phrase.clone(), s))
        .collect()
}

/// Embed every vocabulary phrase.
pub fn vocabulary_targets(params: &Parameters) -> Result<Vec<LabelTarget>, StoreError> {
    params
        .vocab
        .phrases()
        .iter()
        .map(|p| {
            Ok(LabelTarget {
                phrase: p.clone(),
                embedding: encode_label(params, p)?,
            })
        })
        .collect()
}
