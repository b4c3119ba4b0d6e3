//! Synthetic paired corpora.
//!
//! A sticky Markov chain over `C` latent classes drives two streams: frames
//! `x_t = μ(z_t) + σ·ε_t` and tokens drawn from a per-class band of the
//! vocabulary. Everything is reproducible from the spec's seed; sequence
//! `i` draws from its own ChaCha stream, so sequences can be generated
//! independently.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSequence, TokenSequence, FIRST_CONTENT_ID, PAD_ID};
use crate::error::{CbtError, Result};
use crate::tensor::Tensor;
use crate::transformer::MaskPattern;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub num_latent_classes: usize,
    pub p_stay: f64,
    pub noise_sigma: f64,
    pub alignment_shift: usize,
    pub seed: u64,
    /// Distance between every pair of class means.
    pub class_separation: f64,
    /// Shortest real length; lengths are uniform in `min_len..=seq_len`.
    /// `None` means every sequence is full length.
    pub min_len: Option<usize>,
    /// When set, the continuation step returns to the opening class
    /// (`next_label = z_0`), so the label depends on long-range context.
    pub closing_recall: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_sequences: 5000,
            seq_len: 48,
            feature_dim: 16,
            vocab: 64,
            num_latent_classes: 8,
            p_stay: 0.9,
            noise_sigma: 1.2,
            alignment_shift: 0,
            seed: 0,
            class_separation: 3.0,
            min_len: None,
            closing_recall: false,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CbtError::Config(m));
        let c = self.num_latent_classes;
        if c < 2 {
            return bad(format!("num_latent_classes must be >= 2, got {c}"));
        }
        if self.vocab < FIRST_CONTENT_ID + c {
            return bad(format!("vocab {} leaves fewer than {c} content ids", self.vocab));
        }
        // p_stay = 1 and sigma = 0 are accepted as degenerate limits
        if !(self.p_stay > 0.0 && self.p_stay <= 1.0) {
            return bad(format!("p_stay must lie in (0, 1], got {}", self.p_stay));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be positive".into());
        }
        if self.num_sequences == 0 || self.seq_len == 0 || self.feature_dim == 0 {
            return bad("num_sequences, seq_len and feature_dim must be positive".into());
        }
        if let Some(m) = self.min_len {
            if m == 0 || m > self.seq_len {
                return bad(format!("min_len {m} must lie in 1..={}", self.seq_len));
            }
        }
        Ok(())
    }

    /// Canonical (sorted-key, compact) JSON.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// Width of each class's token band.
    pub fn band_width(&self) -> usize {
        (self.vocab - FIRST_CONTENT_ID) / self.num_latent_classes
    }

    /// The token band `[start, start + width)` emitted for class `c`.
    pub fn band(&self, c: usize) -> (usize, usize) {
        let w = self.band_width();
        (FIRST_CONTENT_ID + c * w, w)
    }

    /// Class mean vectors: orthonormalized Gaussian draws scaled so that
    /// every pair is `class_separation` apart (when `C <= D_in`; otherwise
    /// each mean is scaled to norm `class_separation / sqrt(2)`). Values are
    /// rounded to f32 like the frames themselves.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let (c, d) = (self.num_latent_classes, self.feature_dim);
        let mut rng = stream_rng(self.seed, 0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
        for _ in 0..c {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if means.len() < d {
                for m in &means {
                    let p: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(m).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            means.push(v);
        }
        let radius = self.class_separation / 2f64.sqrt();
        means
            .into_iter()
            .map(|v| v.into_iter().map(|a| (a * radius) as f32 as f64).collect())
            .collect()
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so this sorts them
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One generated example with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub x: FeatureSequence,
    pub y: TokenSequence,
    /// Latent class per position (real positions only).
    pub latents: Vec<usize>,
    /// Majority latent class (ties go to the smallest id).
    pub seq_label: usize,
    /// Latent class at the held-out continuation step.
    pub next_label: usize,
}

impl LabeledSequence {
    pub fn real_len(&self) -> usize {
        self.latents.len()
    }
}

fn majority(latents: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &z in latents {
        counts[z] += 1;
    }
    let best = *counts.iter().max().unwrap_or(&0);
    counts.iter().position(|&n| n == best).unwrap_or(0)
}

fn step_chain(rng: &mut ChaCha8Rng, z: usize, spec: &CorpusSpec) -> usize {
    if rng.random::<f64>() < spec.p_stay {
        z
    } else {
        // uniform over the other classes
        let k = rng.random_range(0..spec.num_latent_classes - 1);
        if k >= z {
            k + 1
        } else {
            k
        }
    }
}

fn generate_one(spec: &CorpusSpec, means: &[Vec<f64>], index: usize) -> Result<LabeledSequence> {
    let mut rng = stream_rng(spec.seed, index as u64 + 1);
    let (t_max, d, c) = (spec.seq_len, spec.feature_dim, spec.num_latent_classes);
    let len = match spec.min_len {
        Some(m) if m < t_max => rng.random_range(m..=t_max),
        _ => t_max,
    };
    let mut latents = Vec::with_capacity(len);
    let mut z = rng.random_range(0..c);
    for t in 0..len {
        if t > 0 {
            z = step_chain(&mut rng, z, spec);
        }
        latents.push(z);
    }
    let continuation = step_chain(&mut rng, z, spec);
    let next_label = if spec.closing_recall { latents[0] } else { continuation };

    let mut values = vec![0.0; t_max * d];
    for (t, &zt) in latents.iter().enumerate() {
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            values[t * d + j] = (means[zt][j] + spec.noise_sigma * eps) as f32 as f64;
        }
    }
    let width = spec.band_width();
    let mut ids = vec![PAD_ID; t_max];
    for (t, id) in ids.iter_mut().enumerate().take(len) {
        let offset = rng.random_range(0..width);
        let zc = latents[(t + spec.alignment_shift) % len];
        *id = spec.band(zc).0 + offset;
    }
    let mut pad = vec![true; len];
    pad.resize(t_max, false);
    Ok(LabeledSequence {
        x: FeatureSequence::new(Tensor::matrix(t_max, d, values)?, pad.clone())?,
        y: TokenSequence::new(ids, pad, spec.vocab)?,
        seq_label: majority(&latents, c),
        latents,
        next_label,
    })
}

/// A generated (or loaded) corpus together with the spec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub sequences: Vec<LabeledSequence>,
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let means = spec.class_means();
    let sequences = (0..spec.num_sequences)
        .into_par_iter()
        .map(|i| generate_one(spec, &means, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        sequences,
    })
}

/// Uniform sample of `k` distinct positions among the first `real_len`.
pub fn sample_masks<R: Rng + ?Sized>(real_len: usize, seq_len: usize, k: usize, rng: &mut R) -> Result<MaskPattern> {
    if k == 0 || k > real_len || real_len > seq_len {
        return Err(CbtError::Config(format!(
            "cannot mask {k} of {real_len} real positions (sequence length {seq_len})"
        )));
    }
    let picked = rand::seq::index::sample(rng, real_len, k).into_vec();
    MaskPattern::new(picked, seq_len)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    len: usize,
    x: String,
    y: Vec<usize>,
    latents: Vec<usize>,
    seq_label: usize,
    next_label: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits off the last `test_fraction` of sequences as a test set.
    pub fn split(&self, test_fraction: f64) -> Result<(&[LabeledSequence], &[LabeledSequence])> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(CbtError::Config(format!("test_fraction {test_fraction} outside [0, 1)")));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        Ok(self.sequences.split_at(self.len() - n_test))
    }

    /// Writes the line-oriented corpus format: the canonical spec JSON, then
    /// one JSON record per sequence with frames as base64 little-endian f32.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "{}", self.spec.to_canonical_json()?)?;
        for s in &self.sequences {
            let bytes: Vec<u8> = s
                .x
                .values()
                .data()
                .iter()
                .flat_map(|v| (*v as f32).to_le_bytes())
                .collect();
            let rec = Record {
                len: s.real_len(),
                x: B64.encode(bytes),
                y: s.y.ids().to_vec(),
                latents: s.latents.clone(),
                seq_label: s.seq_label,
                next_label: s.next_label,
            };
            writeln!(w, "{}", canonical_json(&rec)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| CbtError::Data("empty corpus file".into()))??;
        let spec: CorpusSpec = serde_json::from_str(&header)
            .map_err(|e| CbtError::Data(format!("corpus header: {e}")))?;
        spec.validate()?;
        let (t, d) = (spec.seq_len, spec.feature_dim);
        let mut sequences = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| CbtError::Data(format!("corpus record {i}: {m}"));
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
            let bytes = B64.decode(&rec.x).map_err(|e| bad(&e.to_string()))?;
            if bytes.len() != t * d * 4 || rec.len == 0 || rec.len > t || rec.latents.len() != rec.len {
                return Err(bad("inconsistent sizes"));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let mut pad = vec![true; rec.len];
            pad.resize(t, false);
            let c = spec.num_latent_classes;
            if rec.latents.iter().chain([&rec.seq_label, &rec.next_label]).any(|z| *z >= c) {
                return Err(bad("label outside the class range"));
            }
            sequences.push(LabeledSequence {
                x: FeatureSequence::new(Tensor::matrix(t, d, values)?, pad.clone())?,
                y: TokenSequence::new(rec.y, pad, spec.vocab)?,
                latents: rec.latents,
                seq_label: rec.seq_label,
                next_label: rec.next_label,
            });
        }
        if sequences.len() != spec.num_sequences {
            return Err(CbtError::Data(format!(
                "header promises {} sequences, file holds {}",
                spec.num_sequences,
                sequences.len()
            )));
        }
        Ok(Self { spec, sequences })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Per-frame Bayes classifier from `x_t` alone: with a uniform class prior
/// and isotropic noise this is the nearest class mean.
pub fn frame_bayes_class(means: &[Vec<f64>], frame: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, m) in means.iter().enumerate() {
        let d: f64 = m.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Accuracy of [`frame_bayes_class`] over every real frame.
pub fn frame_bayes_accuracy(corpus_means: &[Vec<f64>], seqs: &[LabeledSequence]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in seqs {
        for (t, &z) in s.latents.iter().enumerate() {
            hit += (frame_bayes_class(corpus_means, s.x.values().row(t)) == z) as usize;
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}
