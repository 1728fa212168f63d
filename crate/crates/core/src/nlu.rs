//! Intent/slot module, semantic-text extraction and the cross-attention
//! block that injects NLU features into the text encoder input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{check_bio, semantic_subsequence, AnnotatedQuery, Intent, SlotLabel};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::lexicon::TokenSeq;
use crate::nn::{
    join, masked_mean, masked_mean_backward, trunc_normal, Attention, AttnCache, LayerNorm, Linear, LnCache,
    ParamSet, Trunk, TrunkCache,
};
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct NluModel<F> {
    pub tok: Mat<F>,
    pub pos: Mat<F>,
    pub trunk: Trunk<F>,
    pub intent_head: Linear<F>,
    pub slot_head: Linear<F>,
    /// Per-token projection into the text encoder's input width.
    pub sem_proj: Linear<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NluOutput<F> {
    pub intent_logits: Vec<F>,
    /// tokens × slot labels
    pub slot_logits: Mat<F>,
    /// tokens × text d_model
    pub semantic_features: Mat<F>,
}

pub struct NluCache<F> {
    ids: Vec<u32>,
    mask: Option<Vec<bool>>,
    n: usize,
    trunk: TrunkCache<F>,
    hidden: Mat<F>,
    pooled: Mat<F>,
}

impl<F: Real> NluModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(&[seed, 0x41c]));
        let d = cfg.nlu_d_model;
        Ok(NluModel {
            tok: trunc_normal(&mut rng, cfg.vocab_size, d, 0.02),
            pos: trunc_normal(&mut rng, cfg.query_t_max, d, 0.02),
            trunk: Trunk::new(d, cfg.nlu_n_layer, cfg.nlu_n_head, &mut rng),
            intent_head: Linear::new(d, cfg.n_intents, &mut rng),
            slot_head: Linear::new(d, cfg.n_slot_labels, &mut rng),
            sem_proj: Linear::new(d, cfg.d_model, &mut rng),
        })
    }

    pub fn forward(&self, seq: &TokenSeq) -> Result<(NluOutput<F>, NluCache<F>)> {
        if seq.is_empty() || seq.len() > self.pos.rows {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.pos.rows,
            });
        }
        let d = self.tok.cols;
        let mut x = Mat::zeros(seq.len(), d);
        for (t, &id) in seq.ids().iter().enumerate() {
            if id as usize >= self.tok.rows {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.tok.rows,
                });
            }
            for ((o, &a), &b) in x.row_mut(t).iter_mut().zip(self.tok.row(id as usize)).zip(self.pos.row(t)) {
                *o = a + b;
            }
        }
        let mask = seq.mask();
        let mask = mask.iter().any(|m| !m).then_some(mask);
        let (hidden, trunk) = self.trunk.forward(&x, mask.as_deref());
        let (pooled, n) = masked_mean(&hidden, mask.as_deref());
        let pooled = Mat::from_vec(1, pooled.len(), pooled);
        let intent_logits = self.intent_head.forward(&pooled).data;
        let slot_logits = self.slot_head.forward(&hidden);
        let semantic_features = self.sem_proj.forward(&hidden);
        Ok((
            NluOutput {
                intent_logits,
                slot_logits,
                semantic_features,
            },
            NluCache {
                ids: seq.ids().to_vec(),
                mask,
                n,
                trunk,
                hidden,
                pooled,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &NluCache<F>,
        d_intent: &[F],
        d_slots: &Mat<F>,
        d_semantic: &Mat<F>,
        grad: &mut NluModel<F>,
    ) {
        let d_intent = Mat::from_vec(1, d_intent.len(), d_intent.to_vec());
        let dpooled = self.intent_head.backward(&cache.pooled, &d_intent, &mut grad.intent_head);
        let mut dh = masked_mean_backward(&dpooled.data, cache.hidden.rows, cache.mask.as_deref(), cache.n);
        dh.add_assign(&self.slot_head.backward(&cache.hidden, d_slots, &mut grad.slot_head));
        dh.add_assign(&self.sem_proj.backward(&cache.hidden, d_semantic, &mut grad.sem_proj));
        let dx = self.trunk.backward(&cache.trunk, &dh, &mut grad.trunk);
        for (t, &id) in cache.ids.iter().enumerate() {
            for (g, &v) in grad.tok.row_mut(id as usize).iter_mut().zip(dx.row(t)) {
                *g += v;
            }
            for (g, &v) in grad.pos.row_mut(t).iter_mut().zip(dx.row(t)) {
                *g += v;
            }
        }
    }
}

impl<F: Real> ParamSet<F> for NluModel<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((join(prefix, "tok"), &self.tok));
        out.push((join(prefix, "pos"), &self.pos));
        self.trunk.visit(&join(prefix, "trunk"), out);
        self.intent_head.visit(&join(prefix, "intent_head"), out);
        self.slot_head.visit(&join(prefix, "slot_head"), out);
        self.sem_proj.visit(&join(prefix, "sem_proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((join(prefix, "tok"), &mut self.tok));
        out.push((join(prefix, "pos"), &mut self.pos));
        self.trunk.visit_mut(&join(prefix, "trunk"), out);
        self.intent_head.visit_mut(&join(prefix, "intent_head"), out);
        self.slot_head.visit_mut(&join(prefix, "slot_head"), out);
        self.sem_proj.visit_mut(&join(prefix, "sem_proj"), out);
    }
}

/// Tokens carrying a non-O gold label, in order. This is the text whose
/// plain encoding is the alignment target for the fused query.
pub fn extract_semantic_text(query: &AnnotatedQuery) -> Result<Vec<String>> {
    if query.slots.len() != query.tokens.len() {
        return Err(Error::Shape(format!(
            "{} slot labels for {} tokens",
            query.slots.len(),
            query.tokens.len()
        )));
    }
    check_bio(&query.slots)?;
    Ok(semantic_subsequence(&query.tokens, &query.slots))
}

/// Cross-attention from the query's input embeddings onto the NLU semantic
/// features, added residually. The query side is layer-normalized because
/// raw token embeddings are small. The output projection starts at zero so
/// the block is the identity before training.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<F> {
    pub ln: LayerNorm<F>,
    pub attn: Attention<F>,
}

pub struct FusionCache<F> {
    ln: LnCache<F>,
    attn: AttnCache<F>,
}

impl<F: Real> Fusion<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(&[seed, 0xf05e]));
        let mut attn = Attention::new(cfg.d_model, cfg.n_head, &mut rng);
        attn.o = Linear::zeros(cfg.d_model, cfg.d_model);
        Ok(Fusion {
            ln: LayerNorm::new(cfg.d_model),
            attn,
        })
    }

    pub fn forward(&self, input: &Mat<F>, semantic: &Mat<F>) -> Result<(Mat<F>, FusionCache<F>)> {
        let d = self.attn.q.input_dim();
        if input.cols != d || semantic.cols != d || input.rows != semantic.rows {
            return Err(Error::Shape(format!(
                "fuse expects matching (len, {d}) inputs, got {:?} and {:?}",
                input.shape(),
                semantic.shape()
            )));
        }
        let (xn, ln) = self.ln.forward(input);
        let (delta, attn) = self.attn.forward(&xn, semantic, None);
        let mut out = input.clone();
        out.add_assign(&delta);
        Ok((out, FusionCache { ln, attn }))
    }

    pub fn fuse(&self, input: &Mat<F>, semantic: &Mat<F>) -> Result<Mat<F>> {
        Ok(self.forward(input, semantic)?.0)
    }

    /// Returns `(dL/d input, dL/d semantic)`.
    pub fn backward(&self, cache: &FusionCache<F>, dy: &Mat<F>, grad: &mut Fusion<F>) -> (Mat<F>, Mat<F>) {
        let (dxn, ds) = self.attn.backward(&cache.attn, dy, &mut grad.attn);
        let mut dx = self.ln.backward(&cache.ln, &dxn, &mut grad.ln);
        dx.add_assign(dy);
        (dx, ds)
    }
}

impl<F: Real> ParamSet<F> for Fusion<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.ln.visit(&join(prefix, "ln"), out);
        self.attn.visit(&join(prefix, "attn"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.ln.visit_mut(&join(prefix, "ln"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding of both heads.
pub fn predict<F: Real>(out: &NluOutput<F>) -> (Intent, Vec<SlotLabel>) {
    let intent = Intent::from_index(argmax(&out.intent_logits)).expect("intent head width");
    let slots = (0..out.slot_logits.rows)
        .map(|r| SlotLabel::from_index(argmax(out.slot_logits.row(r))).expect("slot head width"))
        .collect();
    (intent, slots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotType;
    use crate::lexicon::LanguageTag;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_follow_token_count() {
        let nlu: NluModel<f32> = NluModel::new(&cfg(), 0).unwrap();
        let seq = TokenSeq::new(vec![2, 9, 11, 3], 30, 24).unwrap();
        let (out, _) = nlu.forward(&seq).unwrap();
        assert_eq!(out.intent_logits.len(), 3);
        assert_eq!(out.slot_logits.shape(), (4, 11));
        assert_eq!(out.semantic_features.shape(), (4, 64));
        let (again, _) = nlu.forward(&seq).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zero_init_fusion_is_identity() {
        let fusion: Fusion<f32> = Fusion::new(&cfg(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Mat<f32> = trunc_normal(&mut rng, 5, 64, 1.0);
        let s: Mat<f32> = trunc_normal(&mut rng, 5, 64, 1.0);
        let y = fusion.fuse(&x, &s).unwrap();
        assert_eq!(y, x);
        assert!(fusion.fuse(&x, &Mat::zeros(4, 64)).is_err());
    }

    #[test]
    fn semantic_text_keeps_labelled_tokens() {
        let q = AnnotatedQuery {
            tokens: ["please", "find", "red", "circle"].map(String::from).to_vec(),
            lang: LanguageTag::new(0),
            intent: Intent::FindPhoto,
            slots: vec![
                SlotLabel::O,
                SlotLabel::O,
                SlotLabel::B(SlotType::Color),
                SlotLabel::B(SlotType::Object),
            ],
            semantic_text: vec![],
        };
        assert_eq!(extract_semantic_text(&q).unwrap(), vec!["red", "circle"]);
        let chat = AnnotatedQuery {
            slots: vec![SlotLabel::O; 4],
            ..q.clone()
        };
        assert!(extract_semantic_text(&chat).unwrap().is_empty());
        let broken = AnnotatedQuery {
            slots: vec![SlotLabel::O, SlotLabel::I(SlotType::Time), SlotLabel::O, SlotLabel::O],
            ..q
        };
        assert!(matches!(extract_semantic_text(&broken), Err(Error::InvalidBio(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[2.0f64, 0.1, 0.1]), 0);
        assert_eq!(argmax(&[1.0f64, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f64, 1.0, 1.0]), 1);
    }
}
