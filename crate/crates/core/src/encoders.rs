//! Input sequences and the per-position encoders that embed them.

use serde::{Deserialize, Serialize};

use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
/// Ids below this are reserved and never emitted as content tokens.
pub const FIRST_CONTENT_ID: usize = 2;

/// A `T x D_in` matrix of real-valued frames, right-padded with zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
    pad_mask: Vec<bool>,
}

fn check_prefix(mask: &[bool]) -> Result<usize> {
    let real = mask.iter().take_while(|m| **m).count();
    if mask[real..].iter().any(|m| *m) {
        return Err(CbtError::Data("padding must be a suffix (right padding only)".into()));
    }
    Ok(real)
}

impl FeatureSequence {
    pub fn new(values: Tensor, pad_mask: Vec<bool>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != pad_mask.len() {
            return Err(CbtError::Shape(format!(
                "feature sequence {:?} with {} mask flags",
                values.shape(),
                pad_mask.len()
            )));
        }
        let real = check_prefix(&pad_mask)?;
        for t in real..pad_mask.len() {
            if values.row(t).iter().any(|v| *v != 0.0) {
                return Err(CbtError::Data(format!("padded position {t} is not a zero row")));
            }
        }
        Ok(Self { values, pad_mask })
    }

    /// A sequence with no padding.
    pub fn unpadded(values: Tensor) -> Result<Self> {
        let t = values.rows();
        Self::new(values, vec![true; t])
    }

    /// Zero-pads `real` (`n x D_in`) up to `len` positions.
    pub fn padded(real: &Tensor, len: usize) -> Result<Self> {
        let (n, d) = (real.rows(), real.cols());
        if n > len {
            return Err(CbtError::Shape(format!("{n} frames do not fit in {len} positions")));
        }
        let mut data = real.data().to_vec();
        data.resize(len * d, 0.0);
        let mut mask = vec![true; n];
        mask.resize(len, false);
        Self::new(Tensor::matrix(len, d, data)?, mask)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Keeps the last `window` real frames, moved to the front, and pads the
    /// rest. Sequences shorter than the window are returned unchanged.
    pub fn last_window(&self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(CbtError::Config("observation window must be positive".into()));
        }
        let real = self.real_len();
        let keep = window.min(real);
        let d = self.dim();
        let start = real - keep;
        let rows = Tensor::matrix(keep, d, self.values.data()[start * d..real * d].to_vec())?;
        Self::padded(&rows, self.len())
    }
}

/// Vocabulary ids with a right-padding mask; padded ids are [`PAD_ID`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, pad_mask: Vec<bool>, vocab: usize) -> Result<Self> {
        if ids.len() != pad_mask.len() {
            return Err(CbtError::Shape(format!(
                "{} token ids with {} mask flags",
                ids.len(),
                pad_mask.len()
            )));
        }
        let real = check_prefix(&pad_mask)?;
        for (t, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(CbtError::Data(format!(
                    "token id {id} at position {t} is outside the vocabulary of {vocab}"
                )));
            }
            if t >= real && id != PAD_ID {
                return Err(CbtError::Data(format!("padded position {t} holds id {id}, not PAD")));
            }
        }
        Ok(Self { ids, pad_mask })
    }

    pub fn unpadded(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        let n = ids.len();
        Self::new(ids, vec![true; n], vocab)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }
}

/// Widths of the position-wise feature encoder `D_in -> hidden -> D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 64,
            output_dim: 64,
        }
    }
}

pub const ENCODER_GROUP: &str = "encoder";

pub fn encoder_param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("encoder.w1", &[cfg.input_dim, cfg.hidden_dim], Init::Normal),
        ParamSpec::new("encoder.b1", &[cfg.hidden_dim], Init::Zeros),
        ParamSpec::new("encoder.w2", &[cfg.hidden_dim, cfg.output_dim], Init::Normal),
        ParamSpec::new("encoder.b2", &[cfg.output_dim], Init::Zeros),
    ]
}

/// `e_t = W2 · gelu(W1 · x_t + b1) + b2` at every real position; padded
/// positions map to zero rows.
pub fn encode_features(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    x: &FeatureSequence,
) -> Result<Var> {
    if x.dim() != cfg.input_dim {
        return Err(CbtError::Shape(format!(
            "feature width {} does not match encoder input width {}",
            x.dim(),
            cfg.input_dim
        )));
    }
    let input = g.constant(x.values().clone());
    encode_rows(g, store, input, x.pad_mask())
}

/// The same map applied to an arbitrary graph node (used when the input
/// itself must be differentiated).
pub fn encode_rows(g: &mut Graph, store: &ParamStore, input: Var, pad_mask: &[bool]) -> Result<Var> {
    let w1 = g.param(store, "encoder.w1")?;
    let b1 = g.param(store, "encoder.b1")?;
    let w2 = g.param(store, "encoder.w2")?;
    let b2 = g.param(store, "encoder.b2")?;
    let h = g.matmul(input, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let e = g.matmul(h, w2)?;
    let e = g.add_row(e, b2)?;
    g.mask_rows(e, pad_mask)
}

/// Token embedding table: a `V x D` parameter whose [`PAD_ID`] row is zero
/// and receives no gradient.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn param_spec(&self) -> ParamSpec {
        ParamSpec::new(self.name.clone(), &[self.vocab, self.dim], Init::NormalPadRow)
    }
}

/// Row `t` is `table[ids[t]]`; PAD positions are zero rows.
pub fn embed_tokens(
    g: &mut Graph,
    store: &ParamStore,
    table: &EmbeddingTable,
    y: &TokenSequence,
) -> Result<Var> {
    let t = g.param(store, &table.name)?;
    let vocab = g.value(t).rows();
    let mut index = Vec::with_capacity(y.len());
    for (pos, &id) in y.ids().iter().enumerate() {
        if id >= vocab {
            return Err(CbtError::Data(format!(
                "token id {id} at position {pos} is outside the vocabulary of {vocab}"
            )));
        }
        index.push((id != PAD_ID).then_some(id));
    }
    g.gather_rows(t, &index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gelu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(cfg: &EncoderConfig, seed: u64, zero_bias: bool) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for spec in encoder_param_specs(cfg) {
            let n = spec.shape.iter().product();
            let data = if zero_bias && spec.init == Init::Zeros {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            s.insert(spec.name, Tensor::new(spec.shape, data).unwrap()).unwrap();
        }
        s
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dim: 5,
            output_dim: 4,
        }
    }

    #[test]
    fn sequence_invariants() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert!(FeatureSequence::new(v.clone(), vec![true, false]).is_ok());
        assert!(FeatureSequence::new(v.clone(), vec![false, true]).is_err());
        let nz = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.5]]).unwrap();
        assert!(FeatureSequence::new(nz, vec![true, false]).is_err());
        assert!(TokenSequence::new(vec![3, 0], vec![true, false], 8).is_ok());
        assert!(TokenSequence::new(vec![3, 4], vec![true, false], 8).is_err());
        let err = TokenSequence::new(vec![3, 9], vec![true, true], 8).unwrap_err().to_string();
        assert!(err.contains("id 9") && err.contains("position 1"), "{err}");
    }

    #[test]
    fn last_window_keeps_recent_frames() {
        let rows: Vec<Vec<f64>> = (1..=4).map(|i| vec![i as f64]).collect();
        let real = Tensor::from_rows(&rows).unwrap();
        let x = FeatureSequence::padded(&real, 6).unwrap();
        let w = x.last_window(2).unwrap();
        assert_eq!(w.values().data(), &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(w.real_len(), 2);
        assert_eq!(x.last_window(6).unwrap(), x);
        assert!(x.last_window(0).is_err());
    }

    #[test]
    fn zero_row_maps_to_zero() {
        let cfg = small();
        let store = random_store(&cfg, 1, true);
        let x = FeatureSequence::unpadded(Tensor::zeros(&[2, 3])).unwrap();
        let mut g = Graph::new();
        let e = encode_features(&mut g, &store, &cfg, &x).unwrap();
        assert!(g.value(e).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn padded_rows_are_zero() {
        let cfg = small();
        let store = random_store(&cfg, 2, false);
        let real = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let x = FeatureSequence::padded(&real, 3).unwrap();
        let mut g = Graph::new();
        let e = encode_features(&mut g, &store, &cfg, &x).unwrap();
        assert!(g.value(e).row(0).iter().any(|v| *v != 0.0));
        assert!(g.value(e).data()[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn width_mismatch() {
        let cfg = small();
        let store = random_store(&cfg, 1, false);
        let x = FeatureSequence::unpadded(Tensor::zeros(&[2, 4])).unwrap();
        assert!(encode_features(&mut Graph::new(), &store, &cfg, &x).is_err());
    }

    #[test]
    fn rows_match_single_row_oracle_and_permute() {
        let cfg = small();
        let store = random_store(&cfg, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let x = FeatureSequence::unpadded(Tensor::from_rows(&rows).unwrap()).unwrap();
        let mut g = Graph::new();
        let e = encode_features(&mut g, &store, &cfg, &x).unwrap();
        let (w1, b1) = (store.get("encoder.w1").unwrap(), store.get("encoder.b1").unwrap());
        let (w2, b2) = (store.get("encoder.w2").unwrap(), store.get("encoder.b2").unwrap());
        for (t, row) in rows.iter().enumerate() {
            for o in 0..4 {
                let mut acc = b2.data()[o];
                for h in 0..5 {
                    let mut pre = b1.data()[h];
                    for i in 0..3 {
                        pre += row[i] * w1.at(i, h);
                    }
                    acc += gelu(pre) * w2.at(h, o);
                }
                assert!((g.value(e).at(t, o) - acc).abs() < 1e-12);
            }
        }
        let perm = [2, 0, 3, 1];
        let prow: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let xp = FeatureSequence::unpadded(Tensor::from_rows(&prow).unwrap()).unwrap();
        let mut g2 = Graph::new();
        let ep = encode_features(&mut g2, &store, &cfg, &xp).unwrap();
        for (t, &p) in perm.iter().enumerate() {
            assert_eq!(g2.value(ep).row(t), g.value(e).row(p));
        }
    }

    #[test]
    fn jacobian_is_block_diagonal() {
        let cfg = small();
        let store = random_store(&cfg, 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..4 {
            let mut g = Graph::new();
            let input = g.variable(Tensor::matrix(4, 3, data.clone()).unwrap());
            let e = encode_rows(&mut g, &store, input, &[true; 4]).unwrap();
            let row = g.select_rows(e, &[t]).unwrap();
            let loss = g.sum(row);
            let grad = g.backward(loss).unwrap().get_or_zeros(input);
            for s in 0..4 {
                let nonzero = grad.row(s).iter().any(|v| *v != 0.0);
                assert_eq!(nonzero, s == t, "row {s} for output {t}");
            }
        }
    }

    #[test]
    fn embedding_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = EmbeddingTable::new("text.embed", 10, 3);
        let mut data: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        data[..3].fill(0.0);
        let mut store = ParamStore::new();
        store.insert("text.embed", Tensor::matrix(10, 3, data).unwrap()).unwrap();
        let tv = store.get("text.embed").unwrap().clone();

        let mut g = Graph::new();
        let y = TokenSequence::new(vec![0, 0], vec![true, true], 10).unwrap();
        let e = embed_tokens(&mut g, &store, &table, &y).unwrap();
        assert!(g.value(e).data().iter().all(|v| *v == 0.0));

        let y = TokenSequence::unpadded(vec![5, 5], 10).unwrap();
        let e = embed_tokens(&mut g, &store, &table, &y).unwrap();
        assert_eq!(g.value(e).row(0), g.value(e).row(1));

        let y = TokenSequence::unpadded(vec![2, 7, 3], 10).unwrap();
        let e = embed_tokens(&mut g, &store, &table, &y).unwrap();
        for (r, id) in [2, 7, 3].into_iter().enumerate() {
            assert_eq!(g.value(e).row(r), tv.row(id));
        }

        // PAD rows receive no gradient even when PAD ids appear.
        let y = TokenSequence::new(vec![4, 0, 0], vec![true, false, false], 10).unwrap();
        let mut g = Graph::new();
        let e = embed_tokens(&mut g, &store, &table, &y).unwrap();
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        let t = g.bound_params()["text.embed"];
        let gt = grads.get(t).unwrap();
        assert!(gt.row(0).iter().all(|v| *v == 0.0));
        assert!(gt.row(4).iter().all(|v| *v == 1.0));

        let mut small = ParamStore::new();
        small.insert("text.embed", Tensor::zeros(&[4, 3])).unwrap();
        let y = TokenSequence::unpadded(vec![2, 6], 10).unwrap();
        let err = embed_tokens(&mut Graph::new(), &small, &table, &y).unwrap_err().to_string();
        assert!(err.contains("id 6") && err.contains("position 1"), "{err}");
    }
}
