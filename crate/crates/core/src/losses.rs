//! Training objectives: masked-token pseudo log-likelihood, the softmax
//! NCE over frame embeddings, the sequence-level cross-modal NCE, and their
//! weighted sum.
//!
//! All per-anchor losses are averaged, never summed, so magnitudes are
//! comparable across mask counts and batch sizes.

use serde::{Deserialize, Serialize};

use crate::encoders::{MASK_ID, PAD_ID};
use crate::encoders::TokenSequence;
use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::transformer::MaskPattern;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_bert: f64,
    pub w_visual: f64,
    pub w_cross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bert: 0.0,
            w_visual: 1.0,
            w_cross: 0.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_bert: f64, w_visual: f64, w_cross: f64) -> Result<Self> {
        let w = Self {
            w_bert,
            w_visual,
            w_cross,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_bert, self.w_visual, self.w_cross];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CbtError::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(CbtError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Scoring options shared by the frame-level NCE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceOptions {
    /// Logits are divided by this.
    pub temperature: f64,
    /// L2-normalize predictions and embeddings before the dot product.
    pub normalize: bool,
}

impl Default for NceOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalize: false,
        }
    }
}

/// One masked position scored by the frame NCE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    /// Sequence index within the batch.
    pub seq: usize,
    /// Position within that sequence.
    pub pos: usize,
    /// Index of the anchor's own frame embedding in the pool.
    pub pool_index: usize,
}

/// Index structure of a frame-NCE batch: a pool of frame embeddings, the
/// anchors (masked positions), and for each anchor the pool indices of its
/// negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NceBatchView {
    pool: Vec<(usize, usize)>,
    anchors: Vec<Anchor>,
    negatives: Vec<Vec<usize>>,
}

impl NceBatchView {
    /// Assembles a view from explicit parts. `pool` lists `(seq, pos)` of
    /// every pooled frame.
    pub fn from_parts(pool: Vec<(usize, usize)>, anchors: Vec<Anchor>, negatives: Vec<Vec<usize>>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(CbtError::Data("NCE needs at least one positive".into()));
        }
        if anchors.len() != negatives.len() {
            return Err(CbtError::Shape("one negative set per anchor".into()));
        }
        for (a, negs) in anchors.iter().zip(&negatives) {
            if a.pool_index >= pool.len() || pool[a.pool_index] != (a.seq, a.pos) {
                return Err(CbtError::Data(format!("anchor {a:?} does not match its pool entry")));
            }
            if negs.contains(&a.pool_index) {
                return Err(CbtError::Data(format!("anchor {a:?} lists itself as a negative")));
            }
            if negs.iter().any(|&j| j >= pool.len()) {
                return Err(CbtError::Data("negative index outside the pool".into()));
            }
        }
        Ok(Self {
            pool,
            anchors,
            negatives,
        })
    }

    pub fn pool(&self) -> &[(usize, usize)] {
        &self.pool
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn negatives(&self) -> &[Vec<usize>] {
        &self.negatives
    }

    /// Row-major `anchors x pool` candidate mask (positive plus negatives).
    fn allowed(&self) -> Vec<bool> {
        let n = self.pool.len();
        let mut out = vec![false; self.anchors.len() * n];
        for (r, (a, negs)) in self.anchors.iter().zip(&self.negatives).enumerate() {
            out[r * n + a.pool_index] = true;
            for &j in negs {
                out[r * n + j] = true;
            }
        }
        out
    }
}

/// Anchors are every masked position in the batch; each anchor's negatives
/// are every other real frame of the batch, from its own sequence and from
/// the others.
pub fn build_batch_view(items: &[(&[bool], &MaskPattern)]) -> Result<NceBatchView> {
    if items.is_empty() {
        return Err(CbtError::Data("empty batch".into()));
    }
    let mut pool = Vec::new();
    let mut index_of = Vec::with_capacity(items.len());
    for (s, (pad, m)) in items.iter().enumerate() {
        m.check_against(pad)?;
        let mut row = vec![None; pad.len()];
        for (t, &real) in pad.iter().enumerate() {
            if real {
                row[t] = Some(pool.len());
                pool.push((s, t));
            }
        }
        index_of.push(row);
    }
    let mut anchors = Vec::new();
    for (s, (_, m)) in items.iter().enumerate() {
        for &t in m.positions() {
            let pool_index = index_of[s][t].expect("masked positions are real");
            anchors.push(Anchor { seq: s, pos: t, pool_index });
        }
    }
    if anchors.is_empty() {
        return Err(CbtError::Data("batch has no masked positions".into()));
    }
    let negatives = anchors
        .iter()
        .map(|a| (0..pool.len()).filter(|&j| j != a.pool_index).collect())
        .collect();
    NceBatchView::from_parts(pool, anchors, negatives)
}

/// Gathers the predictions `ê_t` (one row per anchor) and the pooled frame
/// embeddings `e_j` from per-sequence encoder outputs.
pub fn gather_nce_inputs(g: &mut Graph, view: &NceBatchView, embeddings: &[Var], predictions: &[Var]) -> Result<(Var, Var)> {
    let pick = |g: &mut Graph, src: &[Var], rows: &[(usize, usize)]| -> Result<Var> {
        let mut offsets = Vec::with_capacity(src.len());
        let mut total = 0;
        for &v in src {
            offsets.push(total);
            total += g.value(v).rows();
        }
        let stacked = g.concat_rows(src)?;
        let index: Vec<usize> = rows.iter().map(|(s, t)| offsets[*s] + t).collect();
        g.select_rows(stacked, &index)
    };
    let anchor_rows: Vec<(usize, usize)> = view.anchors.iter().map(|a| (a.seq, a.pos)).collect();
    let pred = pick(g, predictions, &anchor_rows)?;
    let pool = pick(g, embeddings, &view.pool)?;
    Ok((pred, pool))
}

/// Mean over anchors of
/// `-log exp(e_t·ê_t) / (exp(e_t·ê_t) + Σ_{j∈neg(t)} exp(e_j·ê_t))`,
/// evaluated with a stable log-sum-exp. `predictions` has one row per
/// anchor, `pool` one row per pooled frame.
pub fn visual_nce(g: &mut Graph, view: &NceBatchView, predictions: Var, pool: Var, opts: &NceOptions) -> Result<Var> {
    if g.value(predictions).rows() != view.anchors.len() || g.value(pool).rows() != view.pool.len() {
        return Err(CbtError::Shape(format!(
            "NCE view has {} anchors / {} pooled frames; got {:?} / {:?}",
            view.anchors.len(),
            view.pool.len(),
            g.value(predictions).shape(),
            g.value(pool).shape()
        )));
    }
    let (p, e) = if opts.normalize {
        (g.l2_normalize_rows(predictions), g.l2_normalize_rows(pool))
    } else {
        (predictions, pool)
    };
    let mut logits = g.matmul_t(p, e)?;
    if opts.temperature != 1.0 {
        logits = g.scale(logits, 1.0 / opts.temperature);
    }
    let targets: Vec<usize> = view.anchors.iter().map(|a| a.pool_index).collect();
    let allowed = view.allowed();
    let per_anchor = g.nll_rows(logits, &targets, Some(&allowed))?;
    Ok(g.mean(per_anchor))
}

/// Masked-token pseudo negative log-likelihood, averaged over every masked
/// position of every sequence. The softmax runs over the full vocabulary
/// table except the reserved PAD and MASK rows.
pub fn bert_pseudo_nll(g: &mut Graph, items: &[(Var, &TokenSequence, &MaskPattern)], table: Var) -> Result<Var> {
    let vocab = g.value(table).rows();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (h, y, m) in items {
        m.check_against(y.pad_mask())?;
        if m.is_empty() {
            continue;
        }
        for &t in m.positions() {
            let id = y.ids()[t];
            if id == PAD_ID || id == MASK_ID {
                return Err(CbtError::Data(format!(
                    "masked position {t} has reserved target id {id}"
                )));
            }
            targets.push(id);
        }
        rows.push(g.select_rows(*h, m.positions())?);
    }
    if rows.is_empty() {
        return Err(CbtError::Data("no masked tokens".into()));
    }
    let pred = g.concat_rows(&rows)?;
    let logits = g.matmul_t(pred, table)?;
    let allowed: Vec<bool> = (0..targets.len())
        .flat_map(|_| (0..vocab).map(|k| k != PAD_ID && k != MASK_ID))
        .collect();
    let nll = g.nll_rows(logits, &targets, Some(&allowed))?;
    Ok(g.mean(nll))
}

/// `-log exp(s⁺) / (exp(s⁺) + Σ exp(s⁻))` for one example's slate of
/// one-element score nodes.
pub fn cross_modal_nce(g: &mut Graph, positive: Var, candidates: &[Var]) -> Result<Var> {
    if candidates.is_empty() {
        return Err(CbtError::Data("cross-modal NCE needs at least one negative".into()));
    }
    let mut slate = vec![positive];
    slate.extend_from_slice(candidates);
    let mut parts = Vec::with_capacity(slate.len());
    for s in slate {
        parts.push(g.reshape(s, &[1, 1])?);
    }
    let col = g.concat_rows(&parts)?;
    let row = g.reshape(col, &[1, candidates.len() + 1])?;
    let nll = g.nll_rows(row, &[0], None)?;
    Ok(g.mean(nll))
}

/// In-batch NCE over a square score matrix whose diagonal holds the
/// positives: row `i` scores candidate `j` for anchor `i`. Averaged over rows.
pub fn in_batch_nce(g: &mut Graph, scores: Var) -> Result<Var> {
    let s = g.value(scores);
    let b = s.rows();
    if s.shape().len() != 2 || s.cols() != b {
        return Err(CbtError::Shape(format!("score matrix must be square, got {:?}", s.shape())));
    }
    if b < 2 {
        return Err(CbtError::Data("in-batch NCE needs at least two examples".into()));
    }
    let targets: Vec<usize> = (0..b).collect();
    let nll = g.nll_rows(scores, &targets, None)?;
    Ok(g.mean(nll))
}

/// `w_bert·l_bert + w_visual·l_visual + w_cross·l_cross`. A term may be
/// omitted only when its weight is zero; a zero-weighted term that is
/// present contributes exactly zero gradient.
pub fn combined_loss(
    g: &mut Graph,
    l_bert: Option<Var>,
    l_visual: Option<Var>,
    l_cross: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total: Option<Var> = None;
    for (name, term, weight) in [
        ("bert", l_bert, w.w_bert),
        ("visual", l_visual, w.w_visual),
        ("cross", l_cross, w.w_cross),
    ] {
        let Some(v) = term else {
            if weight > 0.0 {
                return Err(CbtError::Data(format!("{name} loss has weight {weight} but was not computed")));
            }
            continue;
        };
        let scaled = g.scale(v, weight);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| CbtError::Data("no loss terms".into()))
}

/// Scalar form of [`combined_loss`].
pub fn combine_values(l_bert: f64, l_visual: f64, l_cross: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.w_bert * l_bert + w.w_visual * l_visual + w.w_cross * l_cross)
}
