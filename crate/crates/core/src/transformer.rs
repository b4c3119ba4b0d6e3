//! Bidirectional context encoder: input masking, learned positions, and a
//! stack of pre-norm multi-head self-attention layers.

use serde::{Deserialize, Serialize};

use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_width: usize,
    pub max_positions: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ff_width: 256,
            max_positions: 64,
        }
    }
}

impl TransformerConfig {
    /// Structural checks. `layers == 0` is accepted here (it is useful in
    /// tests); run configurations reject it separately.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || self.ff_width == 0 || self.max_positions == 0 {
            return Err(CbtError::Config(format!("degenerate transformer config {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(CbtError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Positions hidden from the encoder during masked prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    masked: Vec<usize>,
    seq_len: usize,
}

impl MaskPattern {
    /// Sorts and validates `masked`; indices must be distinct and `< seq_len`.
    pub fn new(mut masked: Vec<usize>, seq_len: usize) -> Result<Self> {
        masked.sort_unstable();
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(CbtError::Data("mask positions must be distinct".into()));
        }
        if let Some(&last) = masked.last() {
            if last >= seq_len {
                return Err(CbtError::Data(format!(
                    "mask position {last} is outside a sequence of length {seq_len}"
                )));
            }
        }
        Ok(Self { masked, seq_len })
    }

    pub fn empty(seq_len: usize) -> Self {
        Self {
            masked: Vec::new(),
            seq_len,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.masked
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }

    /// Rejects patterns that touch padded positions.
    pub fn check_against(&self, pad_mask: &[bool]) -> Result<()> {
        if pad_mask.len() != self.seq_len {
            return Err(CbtError::Shape(format!(
                "mask pattern for length {} applied to length {}",
                self.seq_len,
                pad_mask.len()
            )));
        }
        for &t in &self.masked {
            if !pad_mask[t] {
                return Err(CbtError::Data(format!("mask position {t} is a padded position")));
            }
        }
        Ok(())
    }
}

fn layer_specs(prefix: &str, cfg: &TransformerConfig) -> Vec<ParamSpec> {
    let (d, f) = (cfg.hidden, cfg.ff_width);
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        out.push(ParamSpec::new(format!("{p}.ln1.gain"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.ln1.bias"), &[d], Init::Zeros));
        for w in ["q", "k", "v", "o"] {
            out.push(ParamSpec::new(format!("{p}.attn.w{w}"), &[d, d], Init::Normal));
            out.push(ParamSpec::new(format!("{p}.attn.b{w}"), &[d], Init::Zeros));
        }
        out.push(ParamSpec::new(format!("{p}.ln2.gain"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.ln2.bias"), &[d], Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.ff.w1"), &[d, f], Init::Normal));
        out.push(ParamSpec::new(format!("{p}.ff.b1"), &[f], Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.ff.w2"), &[f, d], Init::Normal));
        out.push(ParamSpec::new(format!("{p}.ff.b2"), &[d], Init::Zeros));
    }
    out
}

/// Parameters of a context encoder rooted at `prefix`: positional table,
/// optional learned mask vector, and the layer stack.
pub fn param_specs(prefix: &str, cfg: &TransformerConfig, with_mask_vec: bool) -> Vec<ParamSpec> {
    let mut out = vec![ParamSpec::new(
        format!("{prefix}.pos"),
        &[cfg.max_positions, cfg.hidden],
        Init::Normal,
    )];
    if with_mask_vec {
        out.push(ParamSpec::new(format!("{prefix}.mask_vec"), &[cfg.hidden], Init::Normal));
    }
    out.extend(layer_specs(prefix, cfg));
    out
}

/// Parameters of a bare layer stack (no positions, no mask vector).
pub fn stack_param_specs(prefix: &str, cfg: &TransformerConfig) -> Vec<ParamSpec> {
    layer_specs(prefix, cfg)
}

/// Replaces the masked rows of `e` by `mask_vec`; masked positions must be
/// real (non-padded) positions.
pub fn apply_mask(g: &mut Graph, e: Var, m: &MaskPattern, mask_vec: Var, pad_mask: &[bool]) -> Result<Var> {
    m.check_against(pad_mask)?;
    if m.is_empty() {
        return Ok(e);
    }
    g.replace_rows(e, m.positions(), mask_vec)
}

/// Output of [`multi_head_attention`].
pub struct Attention {
    pub output: Var,
    /// One `T x T` attention matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention over `h` (`T x D`). Keys at padded
/// positions are excluded before the softmax and outputs at padded query
/// positions are zeroed.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    h: Var,
    valid: &[bool],
    cfg: &TransformerConfig,
) -> Result<Attention> {
    let proj = |g: &mut Graph, w: &str| -> Result<Var> {
        let wt = g.param(store, &format!("{prefix}.attn.w{w}"))?;
        let bt = g.param(store, &format!("{prefix}.attn.b{w}"))?;
        let p = g.matmul(h, wt)?;
        g.add_row(p, bt)
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for a in 0..cfg.heads {
        let (qa, ka, va) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, a * dh, dh)?,
                g.slice_cols(k, a * dh, dh)?,
                g.slice_cols(v, a * dh, dh)?,
            )
        };
        let logits = g.matmul_t(qa, ka)?;
        let logits = g.scale(logits, scale);
        let p = g.row_softmax_masked(logits, Some(valid));
        weights.push(p);
        heads.push(g.matmul(p, va)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(store, &format!("{prefix}.attn.wo"))?;
    let bo = g.param(store, &format!("{prefix}.attn.bo"))?;
    let out = g.matmul(joined, wo)?;
    let out = g.add_row(out, bo)?;
    let output = g.mask_rows(out, valid)?;
    Ok(Attention { output, weights })
}

pub(crate) fn norm(g: &mut Graph, store: &ParamStore, name: &str, h: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{name}.gain"))?;
    let bias = g.param(store, &format!("{name}.bias"))?;
    g.layer_norm(h, gain, bias, LN_EPS)
}

pub(crate) fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, h: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.ff.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.ff.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.ff.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.ff.b2"))?;
    let u = g.matmul(h, w1)?;
    let u = g.add_row(u, b1)?;
    let u = g.gelu(u);
    let o = g.matmul(u, w2)?;
    g.add_row(o, b2)
}

/// One pre-norm layer: `h + attn(ln1(h))`, then `h + ff(ln2(h))`.
pub fn layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    h: Var,
    valid: &[bool],
    cfg: &TransformerConfig,
) -> Result<Var> {
    let n1 = norm(g, store, &format!("{prefix}.ln1"), h)?;
    let att = multi_head_attention(g, store, prefix, n1, valid, cfg)?;
    let h = g.add(h, att.output)?;
    let n2 = norm(g, store, &format!("{prefix}.ln2"), h)?;
    let ff = feed_forward(g, store, prefix, n2)?;
    g.add(h, ff)
}

/// Runs the layer stack under `prefix` and zeroes padded rows.
pub fn run_layers(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    mut h: Var,
    valid: &[bool],
    cfg: &TransformerConfig,
) -> Result<Var> {
    for l in 0..cfg.layers {
        h = layer(g, store, &format!("{prefix}.layer{l}"), h, valid, cfg)?;
    }
    g.mask_rows(h, valid)
}

/// Adds rows `offset..offset + T` of the positional table `{prefix}.pos`.
pub fn add_positions(g: &mut Graph, store: &ParamStore, prefix: &str, h: Var, offset: usize) -> Result<Var> {
    let table = g.param(store, &format!("{prefix}.pos"))?;
    let t = g.value(h).rows();
    let max = g.value(table).rows();
    if offset + t > max {
        return Err(CbtError::Shape(format!(
            "sequence of {} positions exceeds max_positions {max}",
            offset + t
        )));
    }
    let rows: Vec<usize> = (offset..offset + t).collect();
    let pos = g.select_rows(table, &rows)?;
    g.add(h, pos)
}

/// `h_{1:T} = g_context(e_{-m})`: mask, add positions, run the stack.
/// Bidirectional; no causal restriction. For masked `t`, `h_t` is the
/// prediction of the hidden embedding.
#[allow(clippy::too_many_arguments)]
pub fn encode_context(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
    e: Var,
    m: &MaskPattern,
    pad_mask: &[bool],
    mask_vec: Var,
) -> Result<Var> {
    let t = g.value(e).rows();
    if t > cfg.max_positions {
        return Err(CbtError::Shape(format!(
            "sequence length {t} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if pad_mask.len() != t {
        return Err(CbtError::Shape(format!("{} mask flags for {t} positions", pad_mask.len())));
    }
    let masked = apply_mask(g, e, m, mask_vec, pad_mask)?;
    let h = add_positions(g, store, prefix, masked, 0)?;
    run_layers(g, store, prefix, h, pad_mask, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(specs: &[ParamSpec], seed: u64, scale: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Ones => (0..n).map(|_| 1.0 + rng.random_range(-0.2..0.2)).collect(),
                _ => (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
            };
            s.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data).unwrap()).unwrap();
        }
        s
    }

    fn cfg(layers: usize, heads: usize, hidden: usize) -> TransformerConfig {
        TransformerConfig {
            layers,
            heads,
            hidden,
            ff_width: 2 * hidden,
            max_positions: 8,
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 3, 8).validate().is_err());
        assert!(cfg(2, 4, 8).validate().is_ok());
        assert!(cfg(0, 1, 8).validate().is_ok());
    }

    #[test]
    fn mask_pattern_rules() {
        let m = MaskPattern::new(vec![3, 1], 5).unwrap();
        assert_eq!(m.positions(), &[1, 3]);
        assert!(MaskPattern::new(vec![1, 1], 5).is_err());
        assert!(MaskPattern::new(vec![5], 5).is_err());
        assert!(m.check_against(&[true, true, true, false, false]).is_err());
        assert!(m.check_against(&[true; 5]).is_ok());
    }

    #[test]
    fn apply_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let e = g.constant(rand_matrix(&mut rng, 5, 3));
        let mv = g.constant(Tensor::vector(vec![7.0, 8.0, 9.0]).unwrap());
        let valid = [true; 5];
        let out = apply_mask(&mut g, e, &MaskPattern::empty(5), mv, &valid).unwrap();
        assert_eq!(g.value(out), g.value(e));
        let all = MaskPattern::new((0..5).collect(), 5).unwrap();
        let out = apply_mask(&mut g, e, &all, mv, &valid).unwrap();
        for t in 0..5 {
            assert_eq!(g.value(out).row(t), &[7.0, 8.0, 9.0]);
        }
        let m = MaskPattern::new(vec![1, 3], 5).unwrap();
        let out = apply_mask(&mut g, e, &m, mv, &valid).unwrap();
        for t in 0..5 {
            let want = if t == 1 || t == 3 { g.value(mv).data() } else { g.value(e).row(t) };
            assert_eq!(g.value(out).row(t), want);
        }
        let padded = [true, true, true, false, false];
        assert!(apply_mask(&mut g, e, &m, mv, &padded).is_err());
    }

    #[test]
    fn single_position_attention() {
        let c = cfg(1, 2, 4);
        let store = random_store(&param_specs("v", &c, true), 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let h = g.constant(rand_matrix(&mut rng, 1, 4));
        let att = multi_head_attention(&mut g, &store, "v.layer0", h, &[true], &c).unwrap();
        for w in &att.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // output = (h Wv + bv) Wo + bo
        let hv = g.value(h).clone();
        let v = hv.matmul(store.get("v.layer0.attn.wv").unwrap()).unwrap();
        let bv = store.get("v.layer0.attn.bv").unwrap();
        let v: Vec<f64> = v.data().iter().zip(bv.data()).map(|(a, b)| a + b).collect();
        let o = Tensor::matrix(1, 4, v).unwrap().matmul(store.get("v.layer0.attn.wo").unwrap()).unwrap();
        let bo = store.get("v.layer0.attn.bo").unwrap();
        for j in 0..4 {
            assert!((g.value(att.output).data()[j] - (o.data()[j] + bo.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_rows_give_uniform_weights_over_real_keys() {
        let c = cfg(1, 2, 4);
        let store = random_store(&param_specs("v", &c, true), 4, 0.5);
        let row = vec![0.3, -0.2, 0.9, 0.1];
        let mut data = row.repeat(3);
        data.extend([0.0; 4]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(4, 4, data).unwrap());
        let valid = [true, true, true, false];
        let att = multi_head_attention(&mut g, &store, "v.layer0", h, &valid, &c).unwrap();
        for w in &att.weights {
            for q in 0..4 {
                let r = g.value(*w).row(q);
                for k in 0..3 {
                    assert!((r[k] - 1.0 / 3.0).abs() < 1e-12);
                }
                assert_eq!(r[3], 0.0);
            }
        }
        assert!(g.value(att.output).row(3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_matches_scalar_loop() {
        let c = cfg(1, 1, 4);
        let store = random_store(&param_specs("v", &c, true), 5, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ht = rand_matrix(&mut rng, 3, 4);
        let mut g = Graph::new();
        let h = g.constant(ht.clone());
        let att = multi_head_attention(&mut g, &store, "v.layer0", h, &[true; 3], &c).unwrap();

        let p = |n: &str| store.get(&format!("v.layer0.attn.{n}")).unwrap().clone();
        let project = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            (0..3)
                .map(|t| {
                    (0..4)
                        .map(|j| b.data()[j] + (0..4).map(|i| ht.at(t, i) * w.at(i, j)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let q = project(&p("wq"), &p("bq"));
        let k = project(&p("wk"), &p("bk"));
        let v = project(&p("wv"), &p("bv"));
        let (wo, bo) = (p("wo"), p("bo"));
        for t in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|s| (0..4).map(|j| q[t][j] * k[s][j]).sum::<f64>() / 2.0)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
            let mixed: Vec<f64> = (0..4).map(|j| (0..3).map(|s| w[s] * v[s][j]).sum()).collect();
            for j in 0..4 {
                let want = bo.data()[j] + (0..4).map(|i| mixed[i] * wo.at(i, j)).sum::<f64>();
                assert!((g.value(att.output).at(t, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_layers_is_masked_plus_positions() {
        let c = cfg(0, 1, 4);
        let store = random_store(&param_specs("v", &c, true), 7, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let e = g.constant(rand_matrix(&mut rng, 3, 4));
        let mv = g.param(&store, "v.mask_vec").unwrap();
        let m = MaskPattern::new(vec![1], 3).unwrap();
        let h = encode_context(&mut g, &store, "v", &c, e, &m, &[true; 3], mv).unwrap();
        let pos = store.get("v.pos").unwrap();
        for t in 0..3 {
            let base = if t == 1 { g.value(mv).data().to_vec() } else { g.value(e).row(t).to_vec() };
            for j in 0..4 {
                assert_eq!(g.value(h).at(t, j), base[j] + pos.at(t, j));
            }
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let c = cfg(1, 1, 4);
        let store = random_store(&param_specs("v", &c, true), 7, 0.5);
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[9, 4]));
        let mv = g.param(&store, "v.mask_vec").unwrap();
        let err = encode_context(&mut g, &store, "v", &c, e, &MaskPattern::empty(9), &[true; 9], mv);
        assert!(matches!(err, Err(CbtError::Shape(_))));
    }

    /// d(sum_j r_j h_t[j]) / d e, as a T x D tensor.
    fn jacobian_probe(
        store: &ParamStore,
        c: &TransformerConfig,
        et: &Tensor,
        m: &MaskPattern,
        valid: &[bool],
        t: usize,
        r: &Tensor,
    ) -> Tensor {
        let mut g = Graph::new();
        let e = g.variable(et.clone());
        let mv = g.param(store, "v.mask_vec").unwrap();
        let h = encode_context(&mut g, store, "v", c, e, m, valid, mv).unwrap();
        let ht = g.select_rows(h, &[t]).unwrap();
        let rv = g.constant(r.clone());
        let prod = g.mul(ht, rv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap().get_or_zeros(e)
    }

    #[test]
    fn no_leakage_and_bidirectional() {
        let c = cfg(2, 2, 4);
        let store = random_store(&param_specs("v", &c, true), 9, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let et = rand_matrix(&mut rng, 4, 4);
        let r = rand_matrix(&mut rng, 1, 4);
        let m = MaskPattern::new(vec![2], 4).unwrap();
        let j = jacobian_probe(&store, &c, &et, &m, &[true; 4], 2, &r);
        assert!(j.row(2).iter().all(|v| *v == 0.0));
        assert!(j.row(0).iter().any(|v| *v != 0.0));
        assert!(j.row(3).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn padding_isolation_and_determinism() {
        let c = cfg(2, 2, 4);
        let store = random_store(&param_specs("v", &c, true), 11, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut a = rand_matrix(&mut rng, 5, 4);
        let valid = [true, true, true, false, false];
        let run = |e: &Tensor| {
            let mut g = Graph::new();
            let e = g.constant(e.clone());
            let mv = g.param(&store, "v.mask_vec").unwrap();
            let m = MaskPattern::new(vec![1], 5).unwrap();
            let h = encode_context(&mut g, &store, "v", &c, e, &m, &valid, mv).unwrap();
            g.value(h).clone()
        };
        let h1 = run(&a);
        assert!(h1.bit_eq(&run(&a)));
        for v in &mut a.data_mut()[12..] {
            *v += 3.0;
        }
        let h2 = run(&a);
        assert!(h1.bit_eq(&h2));
        assert!(h1.data()[12..].iter().all(|v| *v == 0.0));
    }
}
