//! Downstream probes: a zero-initialized linear head on pooled, last
//! position, or per-position features, trained either on fixed features
//! (frozen) or jointly with the frame encoder and visual transformer
//! (fine-tuned).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::encoders::{FeatureSequence, ENCODER_GROUP};
use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::model::{encode_visual, visual_features, ModelConfig, VISUAL_GROUP};
use crate::params::ParamStore;
use crate::synthdata::LabeledSequence;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig};
use crate::transformer::MaskPattern;

pub const PROBE_GROUP: &str = "probe";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    #[default]
    Frozen,
    FineTuned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    #[default]
    SeqClass,
    Anticipation,
    DenseLabel,
}

/// How a sequence becomes one feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over real positions.
    Mean,
    /// Row at the last real position.
    Last,
}

/// What the head reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Outputs of the visual transformer.
    #[default]
    Contextual,
    /// Raw input frames, averaged over time (the AvgPool baseline).
    InputAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub task: ProbeTask,
    pub features: FeatureSource,
    /// Keep only the last this-many real frames of every sequence.
    pub observed_window: Option<usize>,
    /// Sequence pooling; `None` picks the task default (last position for
    /// anticipation, mean otherwise).
    pub pooling: Option<Pooling>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Encoder learning rate as a fraction of the head's (fine-tuned mode).
    pub encoder_lr_ratio: f64,
    pub batch_size: usize,
    /// Standardize each feature dimension with train-split statistics
    /// measured once before probe training.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Frozen,
            task: ProbeTask::SeqClass,
            features: FeatureSource::Contextual,
            observed_window: None,
            pooling: None,
            epochs: 30,
            learning_rate: 1e-2,
            encoder_lr_ratio: 0.1,
            batch_size: 64,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CbtError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("probe epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.encoder_lr_ratio >= 0.0) {
            return bad("probe learning rates must be non-negative");
        }
        if self.observed_window == Some(0) {
            return bad("observation window must be positive");
        }
        if self.features == FeatureSource::InputAverage {
            if self.mode == ProbeMode::FineTuned {
                return bad("the input-average baseline has nothing to fine-tune");
            }
            if self.task == ProbeTask::DenseLabel {
                return bad("the input-average baseline has no per-position features");
            }
        }
        Ok(())
    }

    pub fn resolved_pooling(&self) -> Pooling {
        self.pooling.unwrap_or(match self.task {
            ProbeTask::Anticipation => Pooling::Last,
            _ => Pooling::Mean,
        })
    }

    fn method(&self) -> String {
        match self.features {
            FeatureSource::InputAverage => "avgpool".into(),
            FeatureSource::Contextual => "cbt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub method: String,
    pub task: ProbeTask,
    pub mode: ProbeMode,
    pub window: Option<usize>,
    pub accuracy: f64,
    /// Exact (Clopper-Pearson) 95% interval for the test accuracy.
    pub ci95: (f64, f64),
    /// `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub train_accuracy: f64,
    pub num_examples: usize,
    pub seed: u64,
}

impl ProbeReport {
    pub fn to_canonical_json(&self) -> Result<String> {
        crate::synthdata::canonical_json(self)
    }

    /// Whether the 95% interval lies strictly above `rate`.
    pub fn above(&self, rate: f64) -> bool {
        self.ci95.0 > rate
    }
}

/// CSV with one `method,window,accuracy,seed` row per report.
pub fn reports_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from("method,window,accuracy,seed\n");
    for r in reports {
        let w = r.window.map_or_else(|| "full".to_string(), |w| w.to_string());
        out.push_str(&format!("{},{},{},{}\n", r.method, w, r.accuracy, r.seed));
    }
    out
}

/// Clopper-Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - confidence;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0).map_or(0.0, |b| b.inverse_cdf(alpha / 2.0))
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf).map_or(1.0, |b| b.inverse_cdf(1.0 - alpha / 2.0))
    };
    (lo, hi)
}

/// Mean of the real rows of `h`.
pub fn avgpool_features(h: &Tensor, pad_mask: &[bool]) -> Result<Vec<f64>> {
    let real: Vec<usize> = (0..pad_mask.len()).filter(|&t| pad_mask[t]).collect();
    if real.is_empty() {
        return Err(CbtError::Data("cannot pool an all-padding sequence".into()));
    }
    if h.rows() != pad_mask.len() {
        return Err(CbtError::Shape(format!("{} mask flags for {:?}", pad_mask.len(), h.shape())));
    }
    let mut out = vec![0.0; h.cols()];
    for &t in &real {
        out.iter_mut().zip(h.row(t)).for_each(|(o, v)| *o += v);
    }
    let n = real.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Row of `h` at the last real position.
pub fn anticipation_feature(h: &Tensor, pad_mask: &[bool]) -> Result<Vec<f64>> {
    if h.rows() != pad_mask.len() {
        return Err(CbtError::Shape(format!("{} mask flags for {:?}", pad_mask.len(), h.shape())));
    }
    let last = pad_mask
        .iter()
        .rposition(|&r| r)
        .ok_or_else(|| CbtError::Data("no real position in an all-padding sequence".into()))?;
    Ok(h.row(last).to_vec())
}

/// Train and test sequences plus the label range.
#[derive(Clone, Copy, Debug)]
pub struct ProbeData<'a> {
    pub train: &'a [LabeledSequence],
    pub test: &'a [LabeledSequence],
    pub num_classes: usize,
}

/// Probe head (and, in fine-tuned mode, the updated encoder groups).
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub report: ProbeReport,
    pub head: ParamStore,
    pub encoder: Option<ParamStore>,
}

fn windowed(x: &FeatureSequence, cfg: &ProbeConfig) -> Result<FeatureSequence> {
    match cfg.observed_window {
        Some(w) => x.last_window(w),
        None => Ok(x.clone()),
    }
}

/// Labels of one sequence: one per sequence, or one per real position.
fn labels_of(s: &LabeledSequence, task: ProbeTask, classes: usize) -> Result<Vec<usize>> {
    let labels = match task {
        ProbeTask::SeqClass => vec![s.seq_label],
        ProbeTask::Anticipation => vec![s.next_label],
        ProbeTask::DenseLabel => s.latents.clone(),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CbtError::Data(format!("label {bad} outside 0..{classes}")));
    }
    Ok(labels)
}

/// Rows fed to the head for one sequence, from its feature matrix.
fn reduce(h: &Tensor, x: &FeatureSequence, cfg: &ProbeConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.task {
        ProbeTask::DenseLabel => {
            let real = x.real_len();
            Ok((0..real).map(|t| h.row(t).to_vec()).collect())
        }
        _ => Ok(vec![match cfg.resolved_pooling() {
            Pooling::Mean => avgpool_features(h, x.pad_mask())?,
            Pooling::Last => anticipation_feature(h, x.pad_mask())?,
        }]),
    }
}

fn sequence_rows(store: &ParamStore, model: &ModelConfig, s: &LabeledSequence, cfg: &ProbeConfig) -> Result<Vec<Vec<f64>>> {
    let x = windowed(&s.x, cfg)?;
    match cfg.features {
        FeatureSource::InputAverage => Ok(vec![avgpool_features(x.values(), x.pad_mask())?]),
        FeatureSource::Contextual => {
            let h = visual_features(store, model, &x)?;
            reduce(&h, &x, cfg)
        }
    }
}

/// Feature rows and labels of a split, in sequence order.
fn extract(
    store: &ParamStore,
    model: &ModelConfig,
    seqs: &[LabeledSequence],
    cfg: &ProbeConfig,
    classes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let parts = seqs
        .par_iter()
        .map(|s| Ok((sequence_rows(store, model, s, cfg)?, labels_of(s, cfg.task, classes)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, l) in parts {
        if r.len() != l.len() {
            return Err(CbtError::Shape("feature rows and labels disagree".into()));
        }
        rows.extend(r);
        labels.extend(l);
    }
    Ok((rows, labels))
}

/// Per-dimension affine map `(v - mean) / std` fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
struct Standardizer {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        let scale = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Self { shift: mean, scale }
    }

    fn apply_rows(&self, rows: &mut [Vec<f64>]) {
        for r in rows {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - self.shift[j]) * self.scale[j];
            }
        }
    }

    fn apply_graph(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let shift = g.constant(Tensor::vector(self.shift.iter().map(|s| -s).collect())?);
        let centered = g.add_row(v, shift)?;
        let n = g.value(centered).rows();
        let scale: Vec<f64> = (0..n).flat_map(|_| self.scale.iter().copied()).collect();
        let scale = g.constant(Tensor::matrix(n, self.scale.len(), scale)?);
        g.mul(centered, scale)
    }
}

fn head_store(d: usize, classes: usize) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.insert("probe.w", Tensor::zeros(&[d, classes]))?;
    s.insert("probe.b", Tensor::zeros(&[classes]))?;
    Ok(s)
}

fn apply_head(g: &mut Graph, store: &ParamStore, feats: Var) -> Result<Var> {
    let w = g.param(store, "probe.w")?;
    let b = g.param(store, "probe.b")?;
    let z = g.matmul(feats, w)?;
    g.add_row(z, b)
}

fn predict(head: &ParamStore, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    let w = head.get("probe.w")?;
    let b = head.get("probe.b")?;
    let c = w.cols();
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..c {
                let z = b.data()[k] + r.iter().enumerate().map(|(i, v)| v * w.at(i, k)).sum::<f64>();
                if z > best.0 {
                    best = (z, k);
                }
            }
            best.1
        })
        .collect())
}

fn adam_cfg() -> TrainConfig {
    TrainConfig {
        lr_decay_fraction: 0.0,
        ..Default::default()
    }
}

fn score(pred: &[usize], labels: &[usize], classes: usize) -> (usize, Vec<Option<f64>>) {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (p, l) in pred.iter().zip(labels) {
        count[*l] += 1;
        hit[*l] += (p == l) as usize;
    }
    let per_class = hit
        .iter()
        .zip(&count)
        .map(|(h, c)| (*c > 0).then(|| *h as f64 / *c as f64))
        .collect();
    (hit.iter().sum(), per_class)
}

fn report(cfg: &ProbeConfig, classes: usize, test_pred: &[usize], test_labels: &[usize], train_acc: f64) -> ProbeReport {
    let (hits, per_class) = score(test_pred, test_labels, classes);
    let n = test_labels.len();
    ProbeReport {
        method: cfg.method(),
        task: cfg.task,
        mode: cfg.mode,
        window: cfg.observed_window,
        accuracy: hits as f64 / n.max(1) as f64,
        ci95: clopper_pearson(hits, n, 0.95),
        per_class_accuracy: per_class,
        train_accuracy: train_acc,
        num_examples: n,
        seed: cfg.seed,
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

fn train_frozen(data: ProbeData, store: &ParamStore, model: &ModelConfig, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let c = data.num_classes;
    let (mut train_rows, train_labels) = extract(store, model, data.train, cfg, c)?;
    let (mut test_rows, test_labels) = extract(store, model, data.test, cfg, c)?;
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(CbtError::Data("probe needs non-empty train and test splits".into()));
    }
    if cfg.standardize {
        let st = Standardizer::fit(&train_rows);
        st.apply_rows(&mut train_rows);
        st.apply_rows(&mut test_rows);
    }
    let d = train_rows[0].len();
    let mut head = head_store(d, c)?;
    let mut adam = Adam::default();
    let acfg = adam_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let flat: Vec<f64> = chunk.iter().flat_map(|&i| train_rows[i].iter().copied()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(chunk.len(), d, flat)?);
            let z = apply_head(&mut g, &head, x)?;
            let nll = g.nll_rows(z, &targets, None)?;
            let loss = g.mean(nll);
            let grads = g.param_grads(&g.backward(loss)?);
            adam.update(&mut head, &grads, cfg.learning_rate, &acfg)?;
        }
    }
    let train_acc = accuracy(&predict(&head, &train_rows)?, &train_labels);
    let test_pred = predict(&head, &test_rows)?;
    Ok(ProbeOutcome {
        report: report(cfg, c, &test_pred, &test_labels, train_acc),
        head,
        encoder: None,
    })
}

/// Head inputs of one sequence built inside `g`, so gradients reach the
/// encoder groups.
fn sequence_graph_rows(g: &mut Graph, store: &ParamStore, model: &ModelConfig, x: &FeatureSequence, cfg: &ProbeConfig) -> Result<Var> {
    let out = encode_visual(g, store, model, x, &MaskPattern::empty(x.len()))?;
    match cfg.task {
        ProbeTask::DenseLabel => {
            let rows: Vec<usize> = (0..x.real_len()).collect();
            g.select_rows(out.h, &rows)
        }
        _ => match cfg.resolved_pooling() {
            Pooling::Last => g.select_rows(out.h, &[x.real_len() - 1]),
            Pooling::Mean => {
                let n = x.real_len() as f64;
                let w: Vec<f64> = x.pad_mask().iter().map(|&r| if r { 1.0 / n } else { 0.0 }).collect();
                let w = g.constant(Tensor::matrix(1, x.len(), w)?);
                g.matmul(w, out.h)
            }
        },
    }
}

fn train_fine_tuned(data: ProbeData, store: &ParamStore, model: &ModelConfig, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let c = data.num_classes;
    let standardizer = if cfg.standardize {
        let (rows, _) = extract(store, model, data.train, cfg, c)?;
        Standardizer::fit(&rows)
    } else {
        Standardizer::identity(model.visual.hidden)
    };
    let mut work = store.clone();
    for (name, t) in head_store(model.visual.hidden, c)?.iter() {
        work.insert(name.clone(), t.clone())?;
    }
    work.freeze_all_but(&[ENCODER_GROUP, VISUAL_GROUP, PROBE_GROUP]);
    let mut adam_head = Adam::default();
    let mut adam_enc = Adam::default();
    let acfg = adam_cfg();
    let train_x = data
        .train
        .iter()
        .map(|s| windowed(&s.x, cfg))
        .collect::<Result<Vec<_>>>()?;
    let train_y = data
        .train
        .iter()
        .map(|s| labels_of(s, cfg.task, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            for &i in chunk {
                parts.push(sequence_graph_rows(&mut g, &work, model, &train_x[i], cfg)?);
                targets.extend_from_slice(&train_y[i]);
            }
            let feats = g.concat_rows(&parts)?;
            let feats = standardizer.apply_graph(&mut g, feats)?;
            let z = apply_head(&mut g, &work, feats)?;
            let nll = g.nll_rows(z, &targets, None)?;
            let loss = g.mean(nll);
            let grads = g.param_grads(&g.backward(loss)?);
            let (head_g, enc_g): (std::collections::BTreeMap<_, _>, std::collections::BTreeMap<_, _>) =
                grads.into_iter().partition(|(k, _)| k.starts_with("probe."));
            adam_head.update(&mut work, &head_g, cfg.learning_rate, &acfg)?;
            adam_enc.update(&mut work, &enc_g, cfg.learning_rate * cfg.encoder_lr_ratio, &acfg)?;
        }
    }
    let mut head = ParamStore::new();
    let mut encoder = ParamStore::new();
    for (name, t) in work.iter() {
        if name.starts_with("probe.") {
            head.insert(name.clone(), t.clone())?;
        } else {
            encoder.insert(name.clone(), t.clone())?;
        }
    }
    let eval = |seqs: &[LabeledSequence]| -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut rows, labels) = extract(&encoder, model, seqs, cfg, c)?;
        standardizer.apply_rows(&mut rows);
        Ok((predict(&head, &rows)?, labels))
    };
    let (train_pred, train_labels) = eval(data.train)?;
    let (test_pred, test_labels) = eval(data.test)?;
    Ok(ProbeOutcome {
        report: report(cfg, c, &test_pred, &test_labels, accuracy(&train_pred, &train_labels)),
        head,
        encoder: Some(encoder),
    })
}

/// Trains a linear head on `data.train` and reports test accuracy. The
/// input `store` is never modified; in fine-tuned mode the updated encoder
/// groups are returned separately. Text and cross-modal parameters are not
/// used.
pub fn train_probe(data: ProbeData, store: &ParamStore, model: &ModelConfig, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    model.check_store(store)?;
    if data.num_classes < 2 {
        return Err(CbtError::Config("probe needs at least two classes".into()));
    }
    match cfg.mode {
        ProbeMode::Frozen => train_frozen(data, store, model, cfg),
        ProbeMode::FineTuned => train_fine_tuned(data, store, model, cfg),
    }
}

/// Per-position head over the contextual features; reports frame accuracy.
pub fn dense_label_probe(data: ProbeData, store: &ParamStore, model: &ModelConfig, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let cfg = ProbeConfig {
        task: ProbeTask::DenseLabel,
        ..cfg.clone()
    };
    Ok(train_probe(data, store, model, &cfg)?.report)
}

/// Anticipation probes at each observation window, for the contextual
/// features (mode from `cfg`) and for the input-average baseline (frozen).
/// Returns the reports ordered `cbt@w1, avgpool@w1, cbt@w2, ...`.
pub fn window_ablation(
    data: ProbeData,
    store: &ParamStore,
    model: &ModelConfig,
    cfg: &ProbeConfig,
    windows: &[usize],
) -> Result<Vec<ProbeReport>> {
    if windows.is_empty() || windows.contains(&0) {
        return Err(CbtError::Config("windows must be positive and non-empty".into()));
    }
    if windows.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CbtError::Config(format!("windows {windows:?} must be strictly ascending")));
    }
    let seq_len = data.train.first().map_or(0, |s| s.x.len());
    if let Some(w) = windows.iter().find(|&&w| w > seq_len) {
        return Err(CbtError::Config(format!("window {w} exceeds the sequence length {seq_len}")));
    }
    let mut out = Vec::with_capacity(2 * windows.len());
    for &w in windows {
        let cbt = ProbeConfig {
            task: ProbeTask::Anticipation,
            features: FeatureSource::Contextual,
            observed_window: Some(w),
            ..cfg.clone()
        };
        out.push(train_probe(data, store, model, &cbt)?.report);
        let base = ProbeConfig {
            task: ProbeTask::Anticipation,
            features: FeatureSource::InputAverage,
            mode: ProbeMode::Frozen,
            observed_window: Some(w),
            ..cfg.clone()
        };
        out.push(train_probe(data, store, model, &base)?.report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use crate::synthdata::{generate, CorpusSpec};
    use rand::Rng;

    #[test]
    fn pooling_examples() {
        let h = Tensor::from_rows(&[vec![2.0, 3.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(avgpool_features(&h, &[true, true]).unwrap(), vec![2.0, 3.0]);
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(avgpool_features(&h, &[true, true]).unwrap(), vec![0.5, 0.5]);
        assert!(avgpool_features(&h, &[false, false]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::matrix(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mask = [true, true, true, false, false];
        let got = avgpool_features(&h, &mask).unwrap();
        for j in 0..3 {
            let want = (h.at(0, j) + h.at(1, j) + h.at(2, j)) / 3.0;
            assert!((got[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn last_position_examples() {
        let h = Tensor::matrix(48, 1, (0..48).map(f64::from).collect()).unwrap();
        assert_eq!(anticipation_feature(&h, &[true; 48]).unwrap(), vec![47.0]);
        let mut m = vec![false; 48];
        m[..3].fill(true);
        assert_eq!(anticipation_feature(&h, &m).unwrap(), vec![2.0]);
        assert!(anticipation_feature(&h, &[false; 48]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let real = rng.random_range(1..=48);
            let mut m = vec![false; 48];
            m[..real].fill(true);
            let mut scan = 0;
            for (t, r) in m.iter().enumerate() {
                if *r {
                    scan = t;
                }
            }
            assert_eq!(anticipation_feature(&h, &m).unwrap(), vec![scan as f64]);
        }
    }

    #[test]
    fn interval() {
        let (lo, hi) = clopper_pearson(50, 100, 0.95);
        assert!((lo - 0.3983).abs() < 1e-3 && (hi - 0.6017).abs() < 1e-3, "{lo} {hi}");
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
    }

    fn small_model() -> ModelConfig {
        let mut m = ModelConfig::default();
        m.encoder.input_dim = 4;
        m.visual.layers = 1;
        m.visual.hidden = 16;
        m.visual.ff_width = 32;
        m.encoder.output_dim = 16;
        m.encoder.hidden_dim = 16;
        m.text = m.visual.clone();
        m.cross.hidden = 16;
        m.cross.ff_width = 32;
        m
    }

    fn degenerate_corpus() -> (Vec<LabeledSequence>, CorpusSpec) {
        let spec = CorpusSpec {
            num_sequences: 120,
            seq_len: 10,
            feature_dim: 4,
            num_latent_classes: 4,
            noise_sigma: 0.0,
            p_stay: 0.8,
            ..Default::default()
        };
        (generate(&spec).unwrap().sequences, spec)
    }

    #[test]
    fn dense_probe_on_noise_free_frames() {
        let (seqs, spec) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 0).unwrap();
        let data = ProbeData { train: &seqs[..80], test: &seqs[80..], num_classes: spec.num_latent_classes };
        let cfg = ProbeConfig { epochs: 200, learning_rate: 0.05, ..Default::default() };
        let r = dense_label_probe(data, &store, &model, &cfg).unwrap();
        assert!(r.accuracy > 0.99, "{r:?}");
        assert_eq!(r.num_examples, 400);
    }

    #[test]
    fn separable_features_fit_and_zero_head_is_chance() {
        let (seqs, spec) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 0).unwrap();
        let data = ProbeData { train: &seqs[..80], test: &seqs[80..], num_classes: spec.num_latent_classes };
        // noise-free single-class sequences: the input average identifies the class
        let one_class: Vec<LabeledSequence> = {
            let spec1 = CorpusSpec { p_stay: 1.0, ..spec.clone() };
            generate(&spec1).unwrap().sequences
        };
        let d1 = ProbeData { train: &one_class[..80], test: &one_class[80..], num_classes: 4 };
        let cfg = ProbeConfig { features: FeatureSource::InputAverage, epochs: 50, ..Default::default() };
        let r = train_probe(d1, &store, &model, &cfg).unwrap();
        assert!(r.report.train_accuracy > 0.99, "{:?}", r.report);

        let cfg0 = ProbeConfig { learning_rate: 0.0, epochs: 1, ..Default::default() };
        let r0 = train_probe(data, &store, &model, &cfg0).unwrap();
        // an all-zero head predicts class 0 everywhere
        let share0 = seqs[80..].iter().filter(|s| s.seq_label == 0).count() as f64 / 40.0;
        assert!((r0.report.accuracy - share0).abs() < 1e-12);
    }

    #[test]
    fn frozen_probe_leaves_encoder_alone_and_is_deterministic() {
        let (seqs, spec) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 3).unwrap();
        let before = store.clone();
        let data = ProbeData { train: &seqs[..80], test: &seqs[80..], num_classes: spec.num_latent_classes };
        let cfg = ProbeConfig { epochs: 3, task: ProbeTask::Anticipation, ..Default::default() };
        let a = train_probe(data, &store, &model, &cfg).unwrap();
        let b = train_probe(data, &store, &model, &cfg).unwrap();
        assert!(store.bit_eq(&before));
        assert!(a.encoder.is_none());
        assert_eq!(a.report, b.report);
        assert!(a.head.bit_eq(&b.head));
    }

    #[test]
    fn fine_tuning_moves_only_visual_groups() {
        let (seqs, spec) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 4).unwrap();
        let data = ProbeData { train: &seqs[..40], test: &seqs[80..], num_classes: spec.num_latent_classes };
        let cfg = ProbeConfig { epochs: 1, mode: ProbeMode::FineTuned, batch_size: 16, ..Default::default() };
        let out = train_probe(data, &store, &model, &cfg).unwrap();
        let enc = out.encoder.unwrap();
        assert!(!enc.group_bit_eq(&store, "visual"));
        assert!(!enc.group_bit_eq(&store, "encoder"));
        assert!(enc.group_bit_eq(&store, "text"));
        assert!(enc.group_bit_eq(&store, "cross"));
    }

    #[test]
    fn bad_labels_and_windows() {
        let (seqs, _) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 0).unwrap();
        let data = ProbeData { train: &seqs[..80], test: &seqs[80..], num_classes: 2 };
        let cfg = ProbeConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train_probe(data, &store, &model, &cfg), Err(CbtError::Data(_))));
        let data = ProbeData { num_classes: 4, ..data };
        assert!(window_ablation(data, &store, &model, &cfg, &[0]).is_err());
        assert!(window_ablation(data, &store, &model, &cfg, &[5, 3]).is_err());
        assert!(window_ablation(data, &store, &model, &cfg, &[11]).is_err());
    }

    #[test]
    fn window_ablation_shape_and_full_window_identity() {
        let (seqs, spec) = degenerate_corpus();
        let model = small_model();
        let store = init_params(&model.param_specs(), 0).unwrap();
        let data = ProbeData { train: &seqs[..80], test: &seqs[80..], num_classes: spec.num_latent_classes };
        let cfg = ProbeConfig { epochs: 2, ..Default::default() };
        let reports = window_ablation(data, &store, &model, &cfg, &[3, 6, 10]).unwrap();
        assert_eq!(reports.len(), 6);
        assert_eq!(reports.iter().filter(|r| r.method == "cbt").count(), 3);
        let plain = train_probe(
            data,
            &store,
            &model,
            &ProbeConfig { task: ProbeTask::Anticipation, ..cfg.clone() },
        )
        .unwrap();
        assert_eq!(reports[4].accuracy, plain.report.accuracy);
        assert_eq!(reports[4].per_class_accuracy, plain.report.per_class_accuracy);
        let csv = reports_csv(&reports);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("method,window,accuracy,seed\n"));
    }
}
