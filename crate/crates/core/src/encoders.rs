//! The two towers: a word-level transformer text encoder shared by captions,
//! chunks and queries, and a patch transformer image encoder. Both end in
//! mean pooling, a linear projection and L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageGrid, CHANNELS, IMAGE_SIZE, NUM_INTENTS, NUM_SLOT_LABELS};
use crate::error::{Error, Result};
use crate::lexicon::{TokenSeq, LONG_T_MAX, SHORT_T_MAX};
use crate::nn::{
    join, l2_normalize, l2_normalize_backward, masked_mean, masked_mean_backward, trunc_normal,
    Linear, ParamSet, Trunk, TrunkCache,
};
use crate::tensor::{Mat, Real};

/// Architecture hyperparameters shared by every component of a bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_emb: usize,
    pub text_t_max: usize,
    pub query_t_max: usize,
    pub patch: usize,
    pub nlu_d_model: usize,
    pub nlu_n_layer: usize,
    pub nlu_n_head: usize,
    pub n_intents: usize,
    pub n_slot_labels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layer: 2,
            n_head: 4,
            d_emb: 64,
            text_t_max: LONG_T_MAX,
            query_t_max: SHORT_T_MAX,
            patch: 4,
            nlu_d_model: 64,
            nlu_n_layer: 2,
            nlu_n_head: 4,
            n_intents: NUM_INTENTS,
            n_slot_labels: NUM_SLOT_LABELS,
        }
    }
}

impl ModelConfig {
    /// Reduced configuration used by gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 8,
            n_layer: 1,
            n_head: 2,
            d_emb: 8,
            text_t_max: 8,
            query_t_max: 8,
            patch: 8,
            nlu_d_model: 8,
            nlu_n_layer: 1,
            nlu_n_head: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must include the four special tokens");
        }
        if self.d_model == 0 || self.n_head == 0 || self.d_model % self.n_head != 0 {
            return bad("d_model must be a positive multiple of n_head");
        }
        if self.nlu_d_model == 0 || self.nlu_n_head == 0 || self.nlu_d_model % self.nlu_n_head != 0 {
            return bad("nlu_d_model must be a positive multiple of nlu_n_head");
        }
        if self.patch == 0 || IMAGE_SIZE % self.patch != 0 {
            return bad("patch size must divide the image size");
        }
        if self.d_emb == 0 || self.text_t_max < 2 || self.query_t_max < 2 {
            return bad("embedding and sequence sizes must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (IMAGE_SIZE / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// Unit-L2-norm vector emitted by either tower.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<F> {
    values: Vec<F>,
}

impl<F: Real> Embedding<F> {
    pub fn as_slice(&self) -> &[F] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<F> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> F {
        crate::tensor::l2_norm(&self.values)
    }
}

/// Stacks embeddings as rows of a matrix.
pub fn stack<F: Real>(embs: &[Embedding<F>]) -> Mat<F> {
    let cols = embs.first().map_or(0, Embedding::dim);
    let mut m = Mat::zeros(embs.len(), cols);
    for (i, e) in embs.iter().enumerate() {
        m.row_mut(i).copy_from_slice(e.as_slice());
    }
    m
}

/// Pool → project → normalize, shared by both towers.
struct HeadCache<F> {
    rows: usize,
    mask: Option<Vec<bool>>,
    n: usize,
    pooled: Mat<F>,
    emb: Vec<F>,
    norm: F,
}

fn head_forward<F: Real>(
    hidden: &Mat<F>,
    mask: Option<Vec<bool>>,
    proj: &Linear<F>,
) -> Result<(Embedding<F>, HeadCache<F>)> {
    let (pooled, n) = masked_mean(hidden, mask.as_deref());
    let pooled = Mat::from_vec(1, pooled.len(), pooled);
    let z = proj.forward(&pooled).data;
    let (emb, norm) = l2_normalize(&z);
    if !norm.is_finite() || norm == F::zero() || emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok((
        Embedding {
            values: emb.clone(),
        },
        HeadCache {
            rows: hidden.rows,
            mask,
            n,
            pooled,
            emb,
            norm,
        },
    ))
}

fn head_backward<F: Real>(
    cache: &HeadCache<F>,
    d_emb: &[F],
    proj: &Linear<F>,
    grad: &mut Linear<F>,
) -> Mat<F> {
    let dz = l2_normalize_backward(&cache.emb, cache.norm, d_emb);
    let dz = Mat::from_vec(1, dz.len(), dz);
    let dpooled = proj.backward(&cache.pooled, &dz, grad);
    masked_mean_backward(&dpooled.data, cache.rows, cache.mask.as_deref(), cache.n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<F> {
    /// vocab × d_model
    pub tok: Mat<F>,
    /// text_t_max × d_model
    pub pos: Mat<F>,
    pub trunk: Trunk<F>,
    pub proj: Linear<F>,
}

pub struct TextCache<F> {
    ids: Vec<u32>,
    fused: bool,
    trunk: TrunkCache<F>,
    head: HeadCache<F>,
}

impl<F: Real> TextEncoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        TextEncoder {
            tok: trunc_normal(rng, cfg.vocab_size, cfg.d_model, 0.02),
            pos: trunc_normal(rng, cfg.text_t_max, cfg.d_model, 0.02),
            trunk: Trunk::new(cfg.d_model, cfg.n_layer, cfg.n_head, rng),
            proj: Linear::new(cfg.d_model, cfg.d_emb, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok.cols
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.len() > self.pos.rows {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.pos.rows,
            });
        }
        if let Some(&id) = seq.ids().iter().find(|&&id| id as usize >= self.tok.rows) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.tok.rows,
            });
        }
        if seq.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        Ok(())
    }

    /// Token plus position embeddings, one row per token.
    pub fn input_embeddings(&self, seq: &TokenSeq) -> Result<Mat<F>> {
        self.check_seq(seq)?;
        let d = self.d_model();
        let mut x = Mat::zeros(seq.len(), d);
        for (t, &id) in seq.ids().iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, &a), &b) in row.iter_mut().zip(self.tok.row(id as usize)).zip(self.pos.row(t)) {
                *o = a + b;
            }
        }
        Ok(x)
    }

    /// Encodes `seq`. When `fused` is given it replaces the token + position
    /// input embeddings (shape `len(seq) × d_model`).
    pub fn forward(
        &self,
        seq: &TokenSeq,
        fused: Option<&Mat<F>>,
    ) -> Result<(Embedding<F>, TextCache<F>)> {
        let x = match fused {
            Some(f) => {
                self.check_seq(seq)?;
                if f.shape() != (seq.len(), self.d_model()) {
                    return Err(Error::Shape(format!(
                        "fused input is {:?}, expected ({}, {})",
                        f.shape(),
                        seq.len(),
                        self.d_model()
                    )));
                }
                f.clone()
            }
            None => self.input_embeddings(seq)?,
        };
        let mask = seq.mask();
        let has_pad = mask.iter().any(|m| !m);
        let (hidden, trunk) = self.trunk.forward(&x, has_pad.then_some(mask.as_slice()));
        let (emb, head) = head_forward(&hidden, has_pad.then_some(mask), &self.proj)?;
        Ok((
            emb,
            TextCache {
                ids: seq.ids().to_vec(),
                fused: fused.is_some(),
                trunk,
                head,
            },
        ))
    }

    pub fn encode(&self, seq: &TokenSeq, fused: Option<&Mat<F>>) -> Result<Embedding<F>> {
        Ok(self.forward(seq, fused)?.0)
    }

    /// Accumulates parameter gradients and returns `dL/d(input embeddings)`.
    /// For unfused forwards the input gradient is also scattered into the
    /// token and position tables.
    pub fn backward(&self, cache: &TextCache<F>, d_emb: &[F], grad: &mut TextEncoder<F>) -> Mat<F> {
        let dh = head_backward(&cache.head, d_emb, &self.proj, &mut grad.proj);
        let dx = self.trunk.backward(&cache.trunk, &dh, &mut grad.trunk);
        if !cache.fused {
            self.accumulate_input_grad(&cache.ids, &dx, grad);
        }
        dx
    }

    /// Scatters a gradient w.r.t. [`Self::input_embeddings`] into the tables.
    pub fn accumulate_input_grad(&self, ids: &[u32], dx: &Mat<F>, grad: &mut TextEncoder<F>) {
        for (t, &id) in ids.iter().enumerate() {
            let src = dx.row(t);
            for (g, &d) in grad.tok.row_mut(id as usize).iter_mut().zip(src) {
                *g += d;
            }
            for (g, &d) in grad.pos.row_mut(t).iter_mut().zip(src) {
                *g += d;
            }
        }
    }
}

impl<F: Real> ParamSet<F> for TextEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((join(prefix, "tok"), &self.tok));
        out.push((join(prefix, "pos"), &self.pos));
        self.trunk.visit(&join(prefix, "trunk"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((join(prefix, "tok"), &mut self.tok));
        out.push((join(prefix, "pos"), &mut self.pos));
        self.trunk.visit_mut(&join(prefix, "trunk"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder<F> {
    pub patch_size: usize,
    pub patch: Linear<F>,
    /// n_patches × d_model
    pub pos: Mat<F>,
    pub trunk: Trunk<F>,
    pub proj: Linear<F>,
}

pub struct ImageCache<F> {
    patches: Mat<F>,
    trunk: TrunkCache<F>,
    head: HeadCache<F>,
}

impl<F: Real> ImageEncoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        ImageEncoder {
            patch_size: cfg.patch,
            patch: Linear::new(cfg.patch_dim(), cfg.d_model, rng),
            pos: trunc_normal(rng, cfg.n_patches(), cfg.d_model, 0.02),
            trunk: Trunk::new(cfg.d_model, cfg.n_layer, cfg.n_head, rng),
            proj: Linear::new(cfg.d_model, cfg.d_emb, rng),
        }
    }

    /// Non-overlapping square patches in raster order; each row holds the
    /// patch pixels as (row, col, channel).
    pub fn patchify(&self, img: &ImageGrid) -> Result<Mat<F>> {
        if img.pixels.len() != ImageGrid::LEN {
            return Err(Error::Shape(format!("image has {} values", img.pixels.len())));
        }
        if img.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        let p = self.patch_size;
        let per_side = IMAGE_SIZE / p;
        let mut out = Mat::zeros(per_side * per_side, p * p * CHANNELS);
        for py in 0..per_side {
            for px in 0..per_side {
                let row = out.row_mut(py * per_side + px);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for &v in img.pixel(py * p + y, px * p + x) {
                            row[k] = F::lit(v as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, img: &ImageGrid) -> Result<(Embedding<F>, ImageCache<F>)> {
        let patches = self.patchify(img)?;
        let mut x = self.patch.forward(&patches);
        x.add_assign(&self.pos);
        let (hidden, trunk) = self.trunk.forward(&x, None);
        let (emb, head) = head_forward(&hidden, None, &self.proj)?;
        Ok((
            emb,
            ImageCache {
                patches,
                trunk,
                head,
            },
        ))
    }

    pub fn encode(&self, img: &ImageGrid) -> Result<Embedding<F>> {
        Ok(self.forward(img)?.0)
    }

    pub fn backward(&self, cache: &ImageCache<F>, d_emb: &[F], grad: &mut ImageEncoder<F>) {
        let dh = head_backward(&cache.head, d_emb, &self.proj, &mut grad.proj);
        let dx = self.trunk.backward(&cache.trunk, &dh, &mut grad.trunk);
        grad.pos.add_assign(&dx);
        self.patch.backward(&cache.patches, &dx, &mut grad.patch);
    }
}

impl<F: Real> ParamSet<F> for ImageEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.patch.visit(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), &self.pos));
        self.trunk.visit(&join(prefix, "trunk"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.patch.visit_mut(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), &mut self.pos));
        self.trunk.visit_mut(&join(prefix, "trunk"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

/// Seeded initialization of both towers: embedding tables ~ N(0, 0.02²),
/// linear maps ~ N(0, 1/fan_in), both truncated at two standard deviations.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(TextEncoder<F>, ImageEncoder<F>)> {
    cfg.validate()?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(&[seed, 0x7e47]));
    let mut image_rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(&[seed, 0x1a6e]));
    Ok((TextEncoder::new(cfg, &mut text_rng), ImageEncoder::new(cfg, &mut image_rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{decode_scene, render_image};
    use crate::lexicon::TokenSeq;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let (t1, i1) = init_params::<f32>(&cfg(), 4).unwrap();
        let (t2, i2) = init_params::<f32>(&cfg(), 4).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(i1, i2);
        let (t3, _) = init_params::<f32>(&cfg(), 5).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn init_values_are_small_and_finite() {
        let (t, i) = init_params::<f32>(&cfg(), 0).unwrap();
        let all = t.tensors().into_iter().chain(i.tensors());
        for (name, m) in all {
            let gain = name.ends_with("gamma");
            for &v in &m.data {
                assert!(v.is_finite());
                if gain {
                    assert_eq!(v, 1.0, "{name}");
                } else {
                    assert!(v.abs() < 1.0, "{name} has {v}");
                }
            }
        }
    }

    #[test]
    fn text_embeddings_are_unit_norm_and_deterministic() {
        let (t, _) = init_params::<f32>(&cfg(), 1).unwrap();
        let seq = TokenSeq::new(vec![2, 7, 9, 3], 20, 24).unwrap();
        let a = t.encode(&seq, None).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, t.encode(&seq, None).unwrap());
    }

    #[test]
    fn fused_input_equal_to_plain_input_is_identical() {
        let (t, _) = init_params::<f32>(&cfg(), 1).unwrap();
        let seq = TokenSeq::new(vec![2, 7, 9, 3], 20, 24).unwrap();
        let x = t.input_embeddings(&seq).unwrap();
        assert_eq!(t.encode(&seq, Some(&x)).unwrap(), t.encode(&seq, None).unwrap());
        let bad = Mat::zeros(3, 64);
        assert!(matches!(t.encode(&seq, Some(&bad)), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_is_ignored_by_pooling() {
        let (t, _) = init_params::<f64>(&cfg(), 1).unwrap();
        let plain = TokenSeq::new(vec![2, 7, 3], 20, 24).unwrap();
        let padded = TokenSeq::new(vec![2, 7, 3, 0, 0], 20, 24).unwrap();
        let a = t.encode(&plain, None).unwrap();
        let b = t.encode(&padded, None).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_embeddings_are_unit_norm() {
        let (_, i) = init_params::<f32>(&cfg(), 2).unwrap();
        let img = render_image(&decode_scene(77).unwrap(), 3);
        let e = i.encode(&img).unwrap();
        assert_eq!(e.dim(), 64);
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, i.encode(&img).unwrap());
        let mut bad = img.clone();
        bad.pixels[5] = f32::NAN;
        assert!(i.encode(&bad).is_err());
    }
}
