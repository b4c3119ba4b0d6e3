//! Sequence-level cross-modal scoring.
//!
//! The two contextual streams are concatenated behind a learned aggregate
//! slot, tagged with per-modality type vectors, given continuous positions
//! (`0` for the slot, then `1..=T` for frames and `T+1..` for tokens), run
//! through a shallow transformer, and the slot-0 output (or the mean over
//! real rows) goes through a two-layer MLP to give an unbounded score.

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSequence, TokenSequence};
use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{self, feed_forward, norm, TransformerConfig};

pub const CROSS_GROUP: &str = "cross";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Slot0,
    AvgPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    pub mlp_hidden: usize,
    pub readout: Readout,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 4,
            hidden: 64,
            ff_width: 256,
            max_positions: 128,
            mlp_hidden: 64,
            readout: Readout::Slot0,
        }
    }
}

impl CrossModalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CbtError::Config("cross-modal transformer needs at least one layer".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(CbtError::Config("mlp_hidden must be positive".into()));
        }
        self.transformer().validate()
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ff_width: self.ff_width,
            max_positions: self.max_positions,
        }
    }

    fn fast_path(&self) -> bool {
        self.layers == 1 && self.readout == Readout::Slot0
    }
}

pub fn param_specs(cfg: &CrossModalConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let mut out = vec![
        ParamSpec::new("cross.aggregate", &[d], Init::Normal),
        ParamSpec::new("cross.type_x", &[d], Init::Normal),
        ParamSpec::new("cross.type_y", &[d], Init::Normal),
    ];
    out.extend(transformer::param_specs(CROSS_GROUP, &cfg.transformer(), false));
    out.extend([
        ParamSpec::new("cross.head.w1", &[d, cfg.mlp_hidden], Init::Normal),
        ParamSpec::new("cross.head.b1", &[cfg.mlp_hidden], Init::Zeros),
        ParamSpec::new("cross.head.w2", &[cfg.mlp_hidden, 1], Init::Normal),
        ParamSpec::new("cross.head.b2", &[1], Init::Zeros),
    ]);
    out
}

/// A contextual sequence `h` (`T x D`) and its padding mask.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub h: Var,
    pub valid: &'a [bool],
}

impl<'a> Stream<'a> {
    pub fn new(h: Var, valid: &'a [bool]) -> Self {
        Self { h, valid }
    }
}

/// One aligned pair of streams.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub x: FeatureSequence,
    pub y: TokenSequence,
    /// Ground truth for synthetic-data tests; never read by the model.
    pub aligned: bool,
}

impl PairedExample {
    pub fn new(x: FeatureSequence, y: TokenSequence, aligned: bool) -> Result<Self> {
        if x.real_len() == 0 || y.real_len() == 0 {
            return Err(CbtError::Data("paired example with an empty stream".into()));
        }
        Ok(Self { x, y, aligned })
    }
}

/// For every example `i`, the in-batch negatives `{ j : j != i }`.
pub fn build_cross_batch(batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(CbtError::Data(format!(
            "cross-modal batch of {batch_size} has no negatives"
        )));
    }
    Ok((0..batch_size)
        .map(|i| (0..batch_size).filter(|&j| j != i).collect())
        .collect())
}

fn mlp_head(g: &mut Graph, store: &ParamStore, r: Var) -> Result<Var> {
    let w1 = g.param(store, "cross.head.w1")?;
    let b1 = g.param(store, "cross.head.b1")?;
    let w2 = g.param(store, "cross.head.w2")?;
    let b2 = g.param(store, "cross.head.b2")?;
    let u = g.matmul(r, w1)?;
    let u = g.add_row(u, b1)?;
    let u = g.gelu(u);
    let s = g.matmul(u, w2)?;
    g.add_row(s, b2)
}

fn check_length(cfg: &CrossModalConfig, n: usize) -> Result<()> {
    if n > cfg.max_positions {
        return Err(CbtError::Shape(format!(
            "cross-modal input of {n} positions exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    Ok(())
}

fn pair_valid(x: &Stream, y: &Stream) -> Vec<bool> {
    let mut v = Vec::with_capacity(1 + x.valid.len() + y.valid.len());
    v.push(true);
    v.extend_from_slice(x.valid);
    v.extend_from_slice(y.valid);
    v
}

/// `s(x, y)` as a `1 x 1` node, evaluated by running the full stack on the
/// concatenated sequence.
pub fn mi_score(g: &mut Graph, store: &ParamStore, cfg: &CrossModalConfig, x: Stream, y: Stream) -> Result<Var> {
    let (tx, ty) = (g.value(x.h).rows(), g.value(y.h).rows());
    check_length(cfg, 1 + tx + ty)?;
    let agg = g.param(store, "cross.aggregate")?;
    let agg = g.reshape(agg, &[1, cfg.hidden])?;
    let type_x = g.param(store, "cross.type_x")?;
    let type_y = g.param(store, "cross.type_y")?;
    let xr = g.add_row(x.h, type_x)?;
    let yr = g.add_row(y.h, type_y)?;
    let rows = g.concat_rows(&[agg, xr, yr])?;
    let rows = transformer::add_positions(g, store, CROSS_GROUP, rows, 0)?;
    let valid = pair_valid(&x, &y);
    let out = transformer::run_layers(g, store, CROSS_GROUP, rows, &valid, &cfg.transformer())?;
    let r = match cfg.readout {
        Readout::Slot0 => g.select_rows(out, &[0])?,
        Readout::AvgPool => {
            let n = valid.iter().filter(|v| **v).count() as f64;
            let w: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
            let w = g.constant(Tensor::matrix(1, valid.len(), w)?);
            g.matmul(w, out)?
        }
    };
    mlp_head(g, store, r)
}

/// Keys and values of one stream under every head, after type tagging,
/// positions, and the first layer norm.
struct StreamKv {
    logits: Vec<Var>,
    values: Vec<Var>,
}

fn stream_kv(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &CrossModalConfig,
    h: Var,
    type_name: &str,
    offset: usize,
    q0: &[Var],
) -> Result<StreamKv> {
    let pre = "cross.layer0";
    let tv = g.param(store, type_name)?;
    let rows = g.add_row(h, tv)?;
    let rows = transformer::add_positions(g, store, CROSS_GROUP, rows, offset)?;
    let n = norm(g, store, &format!("{pre}.ln1"), rows)?;
    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let proj = |g: &mut Graph, w: &str| -> Result<Var> {
        let wt = g.param(store, &format!("{pre}.attn.w{w}"))?;
        let bt = g.param(store, &format!("{pre}.attn.b{w}"))?;
        let p = g.matmul(n, wt)?;
        g.add_row(p, bt)
    };
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let mut out = StreamKv {
        logits: Vec::with_capacity(cfg.heads),
        values: Vec::with_capacity(cfg.heads),
    };
    for (a, &qa) in q0.iter().enumerate() {
        let (ka, va) = if cfg.heads == 1 {
            (k, v)
        } else {
            (g.slice_cols(k, a * dh, dh)?, g.slice_cols(v, a * dh, dh)?)
        };
        let l = g.matmul_t(qa, ka)?;
        out.logits.push(g.scale(l, scale));
        out.values.push(va);
    }
    Ok(out)
}

/// Scores of every `(x_i, y_j)` combination as a `|xs| x |ys|` node.
///
/// With one layer and slot-0 readout only the slot-0 query matters, so keys
/// and values are computed once per stream and shared across pairs. Other
/// configurations run [`mi_score`] per pair.
pub fn score_matrix(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &CrossModalConfig,
    xs: &[Stream],
    ys: &[Stream],
) -> Result<Var> {
    if xs.is_empty() || ys.is_empty() {
        return Err(CbtError::Data("score matrix over an empty batch".into()));
    }
    let tx = g.value(xs[0].h).rows();
    let same_len = xs.iter().all(|x| g.value(x.h).rows() == tx);
    if !(cfg.fast_path() && same_len) {
        let mut rows = Vec::with_capacity(xs.len());
        for x in xs {
            let mut row = Vec::with_capacity(ys.len());
            for y in ys {
                row.push(mi_score(g, store, cfg, *x, *y)?);
            }
            rows.push(g.concat_cols(&row)?);
        }
        return g.concat_rows(&rows);
    }
    for y in ys {
        check_length(cfg, 1 + tx + g.value(y.h).rows())?;
    }
    let pre = "cross.layer0";
    let (d, dh) = (cfg.hidden, cfg.hidden / cfg.heads);

    let agg = g.param(store, "cross.aggregate")?;
    let agg = g.reshape(agg, &[1, d])?;
    let slot = transformer::add_positions(g, store, CROSS_GROUP, agg, 0)?;
    let n0 = norm(g, store, &format!("{pre}.ln1"), slot)?;
    let proj0 = |g: &mut Graph, w: &str| -> Result<Var> {
        let wt = g.param(store, &format!("{pre}.attn.w{w}"))?;
        let bt = g.param(store, &format!("{pre}.attn.b{w}"))?;
        let p = g.matmul(n0, wt)?;
        g.add_row(p, bt)
    };
    let (q, k, v) = (proj0(g, "q")?, proj0(g, "k")?, proj0(g, "v")?);
    let split = |g: &mut Graph, t: Var| -> Result<Vec<Var>> {
        if cfg.heads == 1 {
            return Ok(vec![t]);
        }
        (0..cfg.heads).map(|a| g.slice_cols(t, a * dh, dh)).collect()
    };
    let q0 = split(g, q)?;
    let k0 = split(g, k)?;
    let v0 = split(g, v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut l0 = Vec::with_capacity(cfg.heads);
    for a in 0..cfg.heads {
        let l = g.matmul_t(q0[a], k0[a])?;
        l0.push(g.scale(l, scale));
    }

    let xkv = xs
        .iter()
        .map(|x| stream_kv(g, store, cfg, x.h, "cross.type_x", 1, &q0))
        .collect::<Result<Vec<_>>>()?;
    let ykv = ys
        .iter()
        .map(|y| stream_kv(g, store, cfg, y.h, "cross.type_y", 1 + tx, &q0))
        .collect::<Result<Vec<_>>>()?;

    let mut joined = Vec::with_capacity(xs.len() * ys.len());
    for (x, xk) in xs.iter().zip(&xkv) {
        for (y, yk) in ys.iter().zip(&ykv) {
            let valid = pair_valid(x, y);
            let mut heads = Vec::with_capacity(cfg.heads);
            for a in 0..cfg.heads {
                let logits = g.concat_cols(&[l0[a], xk.logits[a], yk.logits[a]])?;
                let p = g.row_softmax_masked(logits, Some(&valid));
                let vals = g.concat_rows(&[v0[a], xk.values[a], yk.values[a]])?;
                heads.push(g.matmul(p, vals)?);
            }
            joined.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
    }
    let joined = g.concat_rows(&joined)?;
    let wo = g.param(store, &format!("{pre}.attn.wo"))?;
    let bo = g.param(store, &format!("{pre}.attn.bo"))?;
    let att = g.matmul(joined, wo)?;
    let att = g.add_row(att, bo)?;
    let h1 = g.add_row(att, slot)?;
    let n2 = norm(g, store, &format!("{pre}.ln2"), h1)?;
    let ff = feed_forward(g, store, pre, n2)?;
    let h2 = g.add(h1, ff)?;
    let s = mlp_head(g, store, h2)?;
    g.reshape(s, &[xs.len(), ys.len()])
}

/// Fraction of rows whose strict argmax is the diagonal entry.
pub fn retrieval_accuracy(scores: &Tensor) -> Result<f64> {
    let (n, m) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || n != m || n == 0 {
        return Err(CbtError::Shape(format!("retrieval needs a square slate, got {:?}", scores.shape())));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = scores.row(i);
            (0..m).all(|j| j == i || row[j] < row[i])
        })
        .count();
    Ok(hits as f64 / n as f64)
}
