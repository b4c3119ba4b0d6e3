//! Optimization: loss assembly for a batch, Adam with linear learning-rate
//! decay, the text warm-up phase, and the resumable training loop.
//!
//! Every step draws its batch and masks from a ChaCha stream keyed by
//! `(seed, phase, step)`, so a run resumed from a checkpoint sees exactly
//! the batches the uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{score_matrix, Stream};
use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    bert_pseudo_nll, build_batch_view, combined_loss, gather_nce_inputs, in_batch_nce, visual_nce, LossWeights,
    NceOptions,
};
use crate::model::{encode_text, encode_visual, ModelConfig, TEXT_GROUP};
use crate::params::{init_params, ParamStore};
use crate::synthdata::{sample_masks, LabeledSequence};
use crate::tensor::{FiniteReport, Tensor};
use crate::transformer::MaskPattern;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// The rate decays linearly to `lr·(1 - lr_decay_fraction)` at the end
    /// of the budget; `1.0` decays to zero.
    pub lr_decay_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mask_count: usize,
    pub nce: NceOptions,
    /// Global L2 norm limit on the gradient; off when `None`.
    pub grad_clip: Option<f64>,
    /// Token-only pseudo-likelihood steps on the text group before the
    /// main phase.
    pub text_warmup_steps: usize,
    /// Groups held fixed during the main phase.
    pub frozen_groups: Vec<String>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 200,
            learning_rate: 1e-3,
            lr_decay_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            mask_count: 6,
            nce: NceOptions::default(),
            grad_clip: None,
            text_warmup_steps: 0,
            frozen_groups: vec![TEXT_GROUP.to_string()],
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(CbtError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weights.w_cross > 0.0 && self.batch_size < 2 {
            return bad("the cross-modal loss needs batch_size >= 2".into());
        }
        if self.mask_count == 0 && (self.weights.w_visual > 0.0 || self.weights.w_bert > 0.0) {
            return bad("masked objectives need mask_count >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_fraction) {
            return bad("lr_decay_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam moments need beta in [0, 1) and eps > 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if !(self.nce.temperature > 0.0) {
            return bad("NCE temperature must be positive".into());
        }
        Ok(())
    }

    /// Learning rate at 0-based `step` of a `total`-step phase.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        self.learning_rate * (1.0 - self.lr_decay_fraction * frac)
    }
}

/// Adam moments with a per-parameter update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let mut p = store.get(name)?.clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - cfg.beta1.powi(*t as i32);
            let c2 = 1.0 - cfg.beta2.powi(*t as i32);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let step = (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.adam_eps);
                pd[i] -= lr * step;
            }
            store.set(name, p)?;
        }
        Ok(())
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Graph nodes of the weighted loss terms of one batch.
pub struct LossTerms {
    pub bert: Option<Var>,
    pub visual: Option<Var>,
    pub cross: Option<Var>,
    pub total: Var,
}

/// One batch's inputs: sequences plus the frame and token mask patterns.
pub struct BatchInputs<'a> {
    pub seqs: Vec<&'a LabeledSequence>,
    pub visual_masks: Vec<MaskPattern>,
    pub text_masks: Vec<MaskPattern>,
}

impl<'a> BatchInputs<'a> {
    /// Draws masks for `seqs` from `rng`: `k` frame positions per sequence
    /// when the frame loss is on, `min(k, len)` token positions when the
    /// token loss is on, and empty patterns otherwise.
    pub fn sample(seqs: Vec<&'a LabeledSequence>, k: usize, weights: &LossWeights, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut visual_masks = Vec::with_capacity(seqs.len());
        let mut text_masks = Vec::with_capacity(seqs.len());
        for s in &seqs {
            visual_masks.push(if weights.w_visual > 0.0 {
                sample_masks(s.x.real_len(), s.x.len(), k, rng)?
            } else {
                MaskPattern::empty(s.x.len())
            });
            text_masks.push(if weights.w_bert > 0.0 {
                let n = s.y.real_len();
                sample_masks(n, s.y.len(), k.min(n), rng)?
            } else {
                MaskPattern::empty(s.y.len())
            });
        }
        Ok(Self {
            seqs,
            visual_masks,
            text_masks,
        })
    }
}

/// Builds every positively weighted loss term for a batch in one graph.
/// Zero-weighted terms are not built, so their subgraphs contribute
/// nothing.
pub fn compute_losses(
    g: &mut Graph,
    store: &ParamStore,
    model: &ModelConfig,
    weights: &LossWeights,
    nce: &NceOptions,
    batch: &BatchInputs,
) -> Result<LossTerms> {
    let need_visual = weights.w_visual > 0.0 || weights.w_cross > 0.0;
    let need_text = weights.w_bert > 0.0 || weights.w_cross > 0.0;

    let mut vis = Vec::new();
    if need_visual {
        for (s, m) in batch.seqs.iter().zip(&batch.visual_masks) {
            vis.push(encode_visual(g, store, model, &s.x, m)?);
        }
    }
    let mut txt = Vec::new();
    if need_text {
        for (s, m) in batch.seqs.iter().zip(&batch.text_masks) {
            txt.push(encode_text(g, store, model, &s.y, m)?);
        }
    }

    let visual = if weights.w_visual > 0.0 {
        let items: Vec<(&[bool], &MaskPattern)> = batch
            .seqs
            .iter()
            .zip(&batch.visual_masks)
            .map(|(s, m)| (s.x.pad_mask(), m))
            .collect();
        let view = build_batch_view(&items)?;
        let es: Vec<Var> = vis.iter().map(|v| v.e).collect();
        let hs: Vec<Var> = vis.iter().map(|v| v.h).collect();
        let (pred, pool) = gather_nce_inputs(g, &view, &es, &hs)?;
        Some(visual_nce(g, &view, pred, pool, nce)?)
    } else {
        None
    };

    let bert = if weights.w_bert > 0.0 {
        let table = g.param(store, &model.text_table().name)?;
        let items: Vec<(Var, &crate::encoders::TokenSequence, &MaskPattern)> = txt
            .iter()
            .zip(&batch.seqs)
            .zip(&batch.text_masks)
            .map(|((h, s), m)| (*h, &s.y, m))
            .collect();
        Some(bert_pseudo_nll(g, &items, table)?)
    } else {
        None
    };

    let cross = if weights.w_cross > 0.0 {
        let xs: Vec<Stream> = vis
            .iter()
            .zip(&batch.seqs)
            .map(|(v, s)| Stream::new(v.h, s.x.pad_mask()))
            .collect();
        let ys: Vec<Stream> = txt
            .iter()
            .zip(&batch.seqs)
            .map(|(h, s)| Stream::new(*h, s.y.pad_mask()))
            .collect();
        let scores = score_matrix(g, store, &model.cross, &xs, &ys)?;
        Some(in_batch_nce(g, scores)?)
    } else {
        None
    };

    let total = combined_loss(g, bert, visual, cross, weights)?;
    Ok(LossTerms {
        bert,
        visual,
        cross,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TextWarmup,
    Main,
}

/// Loss components after one step's forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub phase: Phase,
    /// 1-based index of the step within its phase.
    pub step: usize,
    pub l_bert: f64,
    pub l_visual: f64,
    pub l_cross: f64,
    pub l_total: f64,
    pub learning_rate: f64,
}

fn step_rng(seed: u64, phase: Phase, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag: u64 = match phase {
        Phase::TextWarmup => 1,
        Phase::Main => 2,
    };
    rng.set_stream((tag << 40) | step as u64);
    rng
}

/// Model, optimizer state, and progress of one pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed warm-up steps.
    pub warmup_done: usize,
    /// Completed main-phase steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh parameters from `train.seed`.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let store = init_params(&model.param_specs(), train.seed)?;
        Self::from_parts(model, train, store, Adam::default(), 0, 0)
    }

    pub fn from_parts(
        model: ModelConfig,
        train: TrainConfig,
        store: ParamStore,
        adam: Adam,
        warmup_done: usize,
        step: usize,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        model.check_store(&store)?;
        let groups = store.groups();
        if let Some(bad) = train.frozen_groups.iter().find(|g| !groups.contains(*g)) {
            return Err(CbtError::Config(format!("unknown parameter group {bad} in frozen_groups")));
        }
        let mut t = Self {
            model,
            train,
            store,
            adam,
            warmup_done,
            step,
        };
        t.set_phase_freezing();
        Ok(t)
    }

    pub fn warmup_finished(&self) -> bool {
        self.warmup_done >= self.train.text_warmup_steps
    }

    fn set_phase_freezing(&mut self) {
        if self.warmup_finished() {
            self.store.freeze_all_but(&[]);
            for g in self.store.groups() {
                if !self.train.frozen_groups.contains(&g) {
                    self.store.unfreeze_group(&g);
                }
            }
        } else {
            self.store.freeze_all_but(&[TEXT_GROUP]);
        }
    }

    fn one_step(&mut self, data: &[LabeledSequence], phase: Phase) -> Result<StepReport> {
        if data.len() < self.train.batch_size {
            return Err(CbtError::Data(format!(
                "{} training sequences cannot fill a batch of {}",
                data.len(),
                self.train.batch_size
            )));
        }
        let (index, weights, total) = match phase {
            Phase::TextWarmup => (self.warmup_done, LossWeights::new(1.0, 0.0, 0.0)?, self.train.text_warmup_steps),
            Phase::Main => (self.step, self.train.weights, self.train.steps),
        };
        let mut rng = step_rng(self.train.seed, phase, index);
        let picked = rand::seq::index::sample(&mut rng, data.len(), self.train.batch_size).into_vec();
        let seqs: Vec<&LabeledSequence> = picked.iter().map(|&i| &data[i]).collect();
        let batch = BatchInputs::sample(seqs, self.train.mask_count, &weights, &mut rng)?;

        let mut g = Graph::new();
        let terms = compute_losses(&mut g, &self.store, &self.model, &weights, &self.train.nce, &batch)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let (l_bert, l_visual, l_cross) = (value(terms.bert), value(terms.visual), value(terms.cross));
        let l_total = g.value(terms.total).item();
        for (component, v) in [("bert", l_bert), ("visual", l_visual), ("cross", l_cross), ("total", l_total)] {
            if !v.is_finite() {
                return Err(CbtError::NonFinite {
                    component: component.to_string(),
                    step: index + 1,
                });
            }
        }
        let grads = g.backward(terms.total)?;
        let mut grads = g.param_grads(&grads);
        if let Some(clip) = self.train.grad_clip {
            let norm = global_norm(&grads);
            if norm > clip {
                let s = clip / norm;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = self.train.lr_at(index, total);
        let mut next = self.store.clone();
        self.adam.update(&mut next, &grads, lr, &self.train)?;
        for name in grads.keys() {
            if let FiniteReport::Fail { .. } = next.get(name)?.assert_finite() {
                return Err(CbtError::NonFinite {
                    component: format!("parameter {name}"),
                    step: index + 1,
                });
            }
        }
        self.store = next;
        match phase {
            Phase::TextWarmup => self.warmup_done += 1,
            Phase::Main => self.step += 1,
        }
        if phase == Phase::TextWarmup && self.warmup_finished() {
            self.set_phase_freezing();
        }
        Ok(StepReport {
            phase,
            step: index + 1,
            l_bert,
            l_visual,
            l_cross,
            l_total,
            learning_rate: lr,
        })
    }

    /// Runs the next pending step: warm-up first, then the main phase.
    /// Returns `None` when the budget is spent.
    pub fn step(&mut self, data: &[LabeledSequence]) -> Result<Option<StepReport>> {
        if !self.warmup_finished() {
            return self.one_step(data, Phase::TextWarmup).map(Some);
        }
        if self.step >= self.train.steps {
            return Ok(None);
        }
        self.one_step(data, Phase::Main).map(Some)
    }

    /// Steps until the main phase has completed `until` steps (capped at the
    /// budget), calling `on_step` after each.
    pub fn run_until<F>(&mut self, data: &[LabeledSequence], until: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepReport) -> Result<()>,
    {
        let until = until.min(self.train.steps);
        while !self.warmup_finished() || self.step < until {
            match self.step(data)? {
                Some(r) => on_step(self, &r)?,
                None => break,
            }
        }
        Ok(())
    }

    pub fn run<F>(&mut self, data: &[LabeledSequence], on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepReport) -> Result<()>,
    {
        self.run_until(data, self.train.steps, on_step)
    }

    /// Loss terms at the current parameters on the batch step `index` of
    /// the main phase would use, without updating anything.
    pub fn evaluate_step(&self, data: &[LabeledSequence], index: usize) -> Result<StepReport> {
        let mut probe = self.clone();
        probe.step = index;
        probe.warmup_done = probe.train.text_warmup_steps;
        probe.train.learning_rate = 0.0;
        probe.one_step(data, Phase::Main)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub step: usize,
    pub l_bert: f64,
    pub l_visual: f64,
    pub l_cross: f64,
    pub l_total: f64,
    pub learning_rate: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn new(r: &StepReport, wall_ms: u64) -> Self {
        Self {
            phase: r.phase,
            step: r.step,
            l_bert: r.l_bert,
            l_visual: r.l_visual,
            l_cross: r.l_cross,
            l_total: r.l_total,
            learning_rate: r.learning_rate,
            wall_ms,
        }
    }

    pub fn write_line<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", crate::synthdata::canonical_json(self)?)?;
        Ok(())
    }
}
