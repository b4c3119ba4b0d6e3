//! The full parameter layout and the per-sequence forward passes.
//!
//! Groups: `encoder` (frame encoder), `visual` (visual context
//! transformer), `text` (token table and text transformer), `cross`
//! (cross-modal transformer and scoring head).

use serde::{Deserialize, Serialize};

use crate::crossmodal::{self, CrossModalConfig, Stream};
use crate::encoders::{
    embed_tokens, encode_features, encoder_param_specs, EmbeddingTable, EncoderConfig, FeatureSequence,
    TokenSequence, MASK_ID,
};
use crate::error::{CbtError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamSpec, ParamStore};
use crate::synthdata::LabeledSequence;
use crate::tensor::Tensor;
use crate::transformer::{self, MaskPattern, TransformerConfig};

pub const VISUAL_GROUP: &str = "visual";
pub const TEXT_GROUP: &str = "text";
pub const TEXT_TABLE: &str = "text.embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub visual: TransformerConfig,
    pub text: TransformerConfig,
    pub cross: CrossModalConfig,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            visual: TransformerConfig::default(),
            text: TransformerConfig::default(),
            cross: CrossModalConfig::default(),
            vocab: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        self.cross.validate()?;
        if self.visual.layers == 0 || self.text.layers == 0 {
            return Err(CbtError::Config("visual and text transformers need at least one layer".into()));
        }
        let d = self.visual.hidden;
        if self.encoder.output_dim != d || self.text.hidden != d || self.cross.hidden != d {
            return Err(CbtError::Config(format!(
                "hidden widths disagree: encoder {}, visual {d}, text {}, cross {}",
                self.encoder.output_dim, self.text.hidden, self.cross.hidden
            )));
        }
        if self.vocab <= MASK_ID + 1 {
            return Err(CbtError::Config(format!("vocab {} has no content ids", self.vocab)));
        }
        Ok(())
    }

    pub fn text_table(&self) -> EmbeddingTable {
        EmbeddingTable::new(TEXT_TABLE, self.vocab, self.text.hidden)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = encoder_param_specs(&self.encoder);
        out.extend(transformer::param_specs(VISUAL_GROUP, &self.visual, true));
        out.push(self.text_table().param_spec());
        out.extend(transformer::param_specs(TEXT_GROUP, &self.text, false));
        out.extend(crossmodal::param_specs(&self.cross));
        out
    }

    /// Errors unless `store` holds exactly this layout.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        for s in &specs {
            let t = store.get(&s.name).map_err(|_| CbtError::CheckpointShape {
                name: s.name.clone(),
                stored: vec![],
                expected: s.shape.clone(),
            })?;
            if t.shape() != s.shape.as_slice() {
                return Err(CbtError::CheckpointShape {
                    name: s.name.clone(),
                    stored: t.shape().to_vec(),
                    expected: s.shape.clone(),
                });
            }
        }
        if store.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = store.names().find(|n| !known.contains(n.as_str())).cloned().unwrap_or_default();
            return Err(CbtError::CheckpointShape {
                name: extra,
                stored: vec![],
                expected: vec![],
            });
        }
        Ok(())
    }
}

/// Frame embeddings `e` and contextual outputs `h` of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct VisualOut {
    pub e: Var,
    pub h: Var,
}

pub fn encode_visual(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &FeatureSequence,
    m: &MaskPattern,
) -> Result<VisualOut> {
    let e = encode_features(g, store, &cfg.encoder, x)?;
    let mask_vec = g.param(store, &format!("{VISUAL_GROUP}.mask_vec"))?;
    let h = transformer::encode_context(g, store, VISUAL_GROUP, &cfg.visual, e, m, x.pad_mask(), mask_vec)?;
    Ok(VisualOut { e, h })
}

/// Text transformer over `y` with the positions in `m` replaced by the
/// MASK token.
pub fn encode_text(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, y: &TokenSequence, m: &MaskPattern) -> Result<Var> {
    m.check_against(y.pad_mask())?;
    if y.len() > cfg.text.max_positions {
        return Err(CbtError::Shape(format!(
            "token sequence of {} exceeds max_positions {}",
            y.len(),
            cfg.text.max_positions
        )));
    }
    let mut ids = y.ids().to_vec();
    for &t in m.positions() {
        ids[t] = MASK_ID;
    }
    let masked = TokenSequence::new(ids, y.pad_mask().to_vec(), cfg.vocab)?;
    let e = embed_tokens(g, store, &cfg.text_table(), &masked)?;
    let h = transformer::add_positions(g, store, TEXT_GROUP, e, 0)?;
    transformer::run_layers(g, store, TEXT_GROUP, h, y.pad_mask(), &cfg.text)
}

/// Unmasked contextual features `h_{1:T}` of one sequence.
pub fn visual_features(store: &ParamStore, cfg: &ModelConfig, x: &FeatureSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = encode_visual(&mut g, store, cfg, x, &MaskPattern::empty(x.len()))?;
    Ok(g.value(out.h).clone())
}

/// Unmasked text features of one token sequence.
pub fn text_features(store: &ParamStore, cfg: &ModelConfig, y: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = encode_text(&mut g, store, cfg, y, &MaskPattern::empty(y.len()))?;
    Ok(g.value(h).clone())
}

/// Mean `group`-way retrieval accuracy over consecutive groups of `seqs`,
/// scored on unmasked features. A trailing partial group is dropped.
pub fn retrieval_eval(store: &ParamStore, cfg: &ModelConfig, seqs: &[LabeledSequence], group: usize) -> Result<f64> {
    if group < 2 || seqs.len() < group {
        return Err(CbtError::Config(format!("{} sequences cannot form {group}-way slates", seqs.len())));
    }
    let mut total = 0.0;
    let chunks = seqs.chunks_exact(group);
    let n = chunks.len();
    for chunk in chunks {
        let mut g = Graph::new();
        let mut hx = Vec::with_capacity(group);
        let mut hy = Vec::with_capacity(group);
        for s in chunk {
            let vx = visual_features(store, cfg, &s.x)?;
            let vy = text_features(store, cfg, &s.y)?;
            hx.push(g.constant(vx));
            hy.push(g.constant(vy));
        }
        let xs: Vec<Stream> = hx.iter().zip(chunk).map(|(h, s)| Stream::new(*h, s.x.pad_mask())).collect();
        let ys: Vec<Stream> = hy.iter().zip(chunk).map(|(h, s)| Stream::new(*h, s.y.pad_mask())).collect();
        let scores = crossmodal::score_matrix(&mut g, store, &cfg.cross, &xs, &ys)?;
        total += crossmodal::retrieval_accuracy(g.value(scores))?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;

    #[test]
    fn layout_is_consistent() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let store = init_params(&cfg.param_specs(), 0).unwrap();
        cfg.check_store(&store).unwrap();
        let groups: Vec<String> = store.groups().into_iter().collect();
        assert_eq!(groups, ["cross", "encoder", "text", "visual"]);
        let other = ModelConfig {
            vocab: 70,
            ..Default::default()
        };
        assert!(matches!(other.check_store(&store), Err(CbtError::CheckpointShape { .. })));
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.text.hidden = 32;
        cfg.text.heads = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_masking_uses_mask_token() {
        let cfg = ModelConfig {
            text: TransformerConfig {
                layers: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let store = init_params(&cfg.param_specs(), 1).unwrap();
        let y = TokenSequence::new(vec![5, 6, 7, 0], vec![true, true, true, false], 64).unwrap();
        let y_masked = TokenSequence::new(vec![5, MASK_ID, 7, 0], vec![true, true, true, false], 64).unwrap();
        let mut g = Graph::new();
        let a = encode_text(&mut g, &store, &cfg, &y, &MaskPattern::new(vec![1], 4).unwrap()).unwrap();
        let b = encode_text(&mut g, &store, &cfg, &y_masked, &MaskPattern::empty(4)).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
        assert!(g.value(a).row(3).iter().all(|v| *v == 0.0));
    }
}
