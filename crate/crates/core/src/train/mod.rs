//! Three-stage training: parameter bundle, batch assembly, composite
//! objectives with full gradients, stage runners and checkpoints.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRecord, Dataset, ImageGrid, Intent, SlotLabel, Split};
use crate::encoders::{init_params, stack, Embedding, ImageEncoder, ModelConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::lexicon::{tokenize, TokenSeq, Vocab};
use crate::losses::{
    alignment_mse_grad, info_nce_symmetric_grad, nlu_ce_loss_grad, similarity_backward, similarity_matrix,
    tau_from_log, LossWeights, NluSample, TAU_INIT,
};
use crate::nlu::{Fusion, NluModel};
use crate::nn::{join, ParamSet};
use crate::tensor::{Mat, Real};

pub use checkpoint::{load_checkpoint, read_tensor_dir, save_checkpoint, write_tensor_dir, FORMAT_VERSION};
pub use optim::{adamw_step, lr_schedule, AdamW, OptimState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Text,
    Image,
    Nlu,
    Fusion,
    Temperature,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Text, Group::Image, Group::Nlu, Group::Fusion, Group::Temperature];

    pub fn name(self) -> &'static str {
        match self {
            Group::Text => "text",
            Group::Image => "image",
            Group::Nlu => "nlu",
            Group::Fusion => "fusion",
            Group::Temperature => "temperature",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Group owning a fully qualified tensor name.
    pub fn of_tensor(name: &str) -> Option<Group> {
        Group::parse(name.split('.').next()?)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Every trainable component plus per-group freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F> {
    pub config: ModelConfig,
    pub text: TextEncoder<F>,
    pub image: ImageEncoder<F>,
    pub nlu: NluModel<F>,
    pub fusion: Fusion<F>,
    /// 1×1, natural log of the contrastive temperature.
    pub log_tau: Mat<F>,
    pub frozen: [bool; 5],
    /// Highest stage whose runner has returned successfully.
    pub stage_completed: u8,
}

impl<F: Real> ModelBundle<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (text, image) = init_params(config, seed)?;
        Ok(ModelBundle {
            config: config.clone(),
            text,
            image,
            nlu: NluModel::new(config, seed)?,
            fusion: Fusion::new(config, seed)?,
            log_tau: Mat::from_vec(1, 1, vec![F::lit(TAU_INIT.ln())]),
            frozen: [false; 5],
            stage_completed: 0,
        })
    }

    pub fn tau(&self) -> F {
        tau_from_log(self.log_tau.data[0]).0
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen[g.index()]
    }

    pub fn set_frozen(&mut self, groups: &[Group]) {
        self.frozen = [false; 5];
        for g in groups {
            self.frozen[g.index()] = true;
        }
    }

    pub fn group_tensors(&self, g: Group) -> Vec<(String, &Mat<F>)> {
        self.tensors()
            .into_iter()
            .filter(|(n, _)| Group::of_tensor(n) == Some(g))
            .collect()
    }

    /// CRC32 over the little-endian f64 image of every value in the group;
    /// exact for both f32 and f64 parameters.
    pub fn group_checksum(&self, g: Group) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.group_tensors(g) {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(&v.as_f64().to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Whether queries should go through the NLU module and fusion block:
    /// true once stage 2 has run, unless a later stage froze the module.
    pub fn uses_nlu(&self) -> bool {
        self.stage_completed >= 2 && !self.is_frozen(Group::Nlu)
    }

    pub fn checksums(&self) -> [u32; 5] {
        Group::ALL.map(|g| self.group_checksum(g))
    }
}

impl<F: Real> ParamSet<F> for ModelBundle<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.text.visit(&join(prefix, "text"), out);
        self.image.visit(&join(prefix, "image"), out);
        self.nlu.visit(&join(prefix, "nlu"), out);
        self.fusion.visit(&join(prefix, "fusion"), out);
        out.push((join(prefix, "temperature.log_tau"), &self.log_tau));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.text.visit_mut(&join(prefix, "text"), out);
        self.image.visit_mut(&join(prefix, "image"), out);
        self.nlu.visit_mut(&join(prefix, "nlu"), out);
        self.fusion.visit_mut(&join(prefix, "fusion"), out);
        out.push((join(prefix, "temperature.log_tau"), &mut self.log_tau));
    }
}

/// One tokenized training or evaluation element.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene_id: u32,
    pub class_id: u32,
    pub lang: usize,
    pub caption: TokenSeq,
    pub chunk: TokenSeq,
    pub query: TokenSeq,
    /// Gold semantic text, tokenized with the query length cap.
    pub semantic: TokenSeq,
    pub intent: usize,
    /// One label index per query token; BOS/EOS carry `O`.
    pub slots: Vec<usize>,
    pub image: ImageGrid,
}

impl Example {
    pub fn is_chitchat(&self) -> bool {
        self.intent == Intent::Chitchat.index()
    }

    fn gold_slots(&self) -> Vec<Option<usize>> {
        self.query
            .ids()
            .iter()
            .zip(&self.slots)
            .map(|(&id, &s)| (id != crate::lexicon::PAD).then_some(s))
            .collect()
    }
}

/// Examples of one split grouped by scene, one per language.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub examples: Vec<Example>,
    /// For each scene (in record order), indices into `examples`.
    pub by_scene: Vec<Vec<usize>>,
    pub n_langs: usize,
}

pub fn prepare_records(
    records: &[CorpusRecord],
    ds: &Dataset,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<PreparedSplit> {
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} entries but the model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut examples = Vec::with_capacity(records.len());
    let mut by_scene: Vec<Vec<usize>> = Vec::new();
    let mut scene_slot = std::collections::HashMap::new();
    for r in records {
        let spec = r.spec()?;
        let lang = r.language()?;
        let labels = r.slot_labels()?;
        let mut slots = Vec::with_capacity(labels.len() + 2);
        slots.push(SlotLabel::O.index());
        slots.extend(labels.iter().map(|l| l.index()));
        slots.push(SlotLabel::O.index());
        let ex = Example {
            scene_id: r.scene_id,
            class_id: spec.class_id(),
            lang: lang.index,
            caption: tokenize(&r.caption, vocab, cfg.query_t_max)?,
            chunk: tokenize(&r.chunk, vocab, cfg.text_t_max)?,
            query: tokenize(&r.query_tokens, vocab, cfg.query_t_max)?,
            semantic: tokenize(&r.semantic_text, vocab, cfg.query_t_max)?,
            intent: r.intent()?.index(),
            slots,
            image: ds.image(r.scene_id)?.clone(),
        };
        let slot = *scene_slot.entry(r.scene_id).or_insert_with(|| {
            by_scene.push(Vec::new());
            by_scene.len() - 1
        });
        by_scene[slot].push(examples.len());
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(PreparedSplit {
        examples,
        by_scene,
        n_langs: ds.n_langs(),
    })
}

pub fn prepare_split(ds: &Dataset, split: Split, cfg: &ModelConfig) -> Result<PreparedSplit> {
    prepare_records(ds.split(split), ds, &ds.vocab, cfg)
}

impl PreparedSplit {
    fn rounds(&self) -> usize {
        self.by_scene.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn scenes_in_round(&self, round: usize) -> usize {
        self.by_scene.iter().filter(|v| v.len() > round).count()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        (0..self.rounds())
            .map(|r| self.scenes_in_round(r).div_ceil(batch_size))
            .sum()
    }

    /// One epoch of batches. Each round visits every scene once in shuffled
    /// order, in one of its languages, so no batch holds two records of the
    /// same scene; across rounds every record is used exactly once.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let lang_orders: Vec<Vec<usize>> = self
            .by_scene
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v.shuffle(rng);
                v
            })
            .collect();
        let mut batches = Vec::new();
        for round in 0..self.rounds() {
            let mut scenes: Vec<usize> = (0..self.by_scene.len()).filter(|&s| lang_orders[s].len() > round).collect();
            scenes.shuffle(rng);
            for chunk in scenes.chunks(batch_size) {
                batches.push(chunk.iter().map(|&s| lang_orders[s][round]).collect());
            }
        }
        batches
    }
}

/// Unweighted loss components plus the weighted total. In stage 3 the
/// `ti`/`tc` slots hold the query–image and query–chunk terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<F> {
    pub total: F,
    pub ti: F,
    pub tc: F,
    pub ce: F,
    pub mse: F,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_ti: f64,
    pub loss_tc: f64,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "step,loss_total,loss_ti,loss_tc,loss_ce,loss_mse,lr";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.loss_total, r.loss_ti, r.loss_tc, r.loss_ce, r.loss_mse, r.lr
        ));
    }
    s
}

/// Contrastive term between two embedding lists; returns the loss and the
/// gradients w.r.t. both lists and `log tau`, all scaled by `weight`.
fn contrastive<F: Real>(
    a: &[Embedding<F>],
    b: &[Embedding<F>],
    tau: F,
    weight: F,
) -> Result<(F, Mat<F>, Mat<F>, F)> {
    let (ma, mb) = (stack(a), stack(b));
    let s = similarity_matrix(&ma, &mb, tau)?;
    let (loss, mut ds) = info_nce_symmetric_grad(&s)?;
    ds.scale(weight);
    let (da, db, dlt) = similarity_backward(&ma, &mb, &s, &ds);
    Ok((loss, da, db, dlt))
}

fn set_tau_grad<F: Real>(b: &ModelBundle<F>, g: &mut ModelBundle<F>, d_log_tau: F) {
    let clamped = tau_from_log(b.log_tau.data[0]).1;
    g.log_tau.data[0] = if clamped { F::zero() } else { d_log_tau };
}

/// `L_TI + alpha * L_TC` on caption↔image and caption↔chunk pairs of the
/// same elements. Chunks are not encoded when `alpha == 0`.
pub fn stage1_loss_grad<F: Real>(
    b: &ModelBundle<F>,
    batch: &[&Example],
    w: &LossWeights,
) -> Result<(LossParts<F>, ModelBundle<F>)> {
    w.validate()?;
    let mut g = b.zeros_like();
    let tau = b.tau();
    let caps = batch
        .iter()
        .map(|e| b.text.forward(&e.caption, None))
        .collect::<Result<Vec<_>>>()?;
    let imgs = batch
        .iter()
        .map(|e| b.image.forward(&e.image))
        .collect::<Result<Vec<_>>>()?;
    let cap_e: Vec<_> = caps.iter().map(|c| c.0.clone()).collect();
    let img_e: Vec<_> = imgs.iter().map(|c| c.0.clone()).collect();
    let (l_ti, mut d_cap, d_img, mut d_lt) = contrastive(&cap_e, &img_e, tau, F::one())?;
    let mut l_tc = F::zero();
    if w.alpha > 0.0 {
        let chunks = batch
            .iter()
            .map(|e| b.text.forward(&e.chunk, None))
            .collect::<Result<Vec<_>>>()?;
        let chunk_e: Vec<_> = chunks.iter().map(|c| c.0.clone()).collect();
        let (l, d_cap2, d_chunk, d_lt2) = contrastive(&cap_e, &chunk_e, tau, F::lit(w.alpha))?;
        l_tc = l;
        d_cap.add_assign(&d_cap2);
        d_lt += d_lt2;
        for (i, (_, cache)) in chunks.iter().enumerate() {
            b.text.backward(cache, d_chunk.row(i), &mut g.text);
        }
    }
    for (i, (_, cache)) in caps.iter().enumerate() {
        b.text.backward(cache, d_cap.row(i), &mut g.text);
    }
    for (i, (_, cache)) in imgs.iter().enumerate() {
        b.image.backward(cache, d_img.row(i), &mut g.image);
    }
    set_tau_grad(b, &mut g, d_lt);
    let parts = LossParts {
        total: l_ti + F::lit(w.alpha) * l_tc,
        ti: l_ti,
        tc: l_tc,
        ..Default::default()
    };
    Ok((parts, g))
}

/// Query encoding through the NLU module and fusion block (Vector 2).
struct FusedQuery<F> {
    nlu_out: crate::nlu::NluOutput<F>,
    nlu_cache: crate::nlu::NluCache<F>,
    fusion_cache: crate::nlu::FusionCache<F>,
    emb: Embedding<F>,
    text_cache: crate::encoders::TextCache<F>,
}

fn fused_query<F: Real>(b: &ModelBundle<F>, q: &TokenSeq) -> Result<FusedQuery<F>> {
    let (nlu_out, nlu_cache) = b.nlu.forward(q)?;
    let x = b.text.input_embeddings(q)?;
    let (fused, fusion_cache) = b.fusion.forward(&x, &nlu_out.semantic_features)?;
    let (emb, text_cache) = b.text.forward(q, Some(&fused))?;
    Ok(FusedQuery {
        nlu_out,
        nlu_cache,
        fusion_cache,
        emb,
        text_cache,
    })
}

/// Backpropagates `d_emb` (and optional NLU head gradients) through the
/// fused query path into text, fusion and NLU gradients.
fn fused_query_backward<F: Real>(
    b: &ModelBundle<F>,
    fq: &FusedQuery<F>,
    q: &TokenSeq,
    d_emb: &[F],
    d_intent: &[F],
    d_slots: &Mat<F>,
    g: &mut ModelBundle<F>,
) {
    let d_fused = b.text.backward(&fq.text_cache, d_emb, &mut g.text);
    let (d_input, d_sem) = b.fusion.backward(&fq.fusion_cache, &d_fused, &mut g.fusion);
    b.text.accumulate_input_grad(q.ids(), &d_input, &mut g.text);
    b.nlu.backward(&fq.nlu_cache, d_intent, d_slots, &d_sem, &mut g.nlu);
}

fn nlu_samples<'a, F: Real>(
    outs: impl Iterator<Item = &'a crate::nlu::NluOutput<F>>,
    batch: &[&Example],
    gold: &'a [Vec<Option<usize>>],
) -> Vec<NluSample<'a, F>> {
    outs.zip(batch)
        .zip(gold)
        .map(|((o, e), g)| NluSample {
            intent_logits: &o.intent_logits,
            gold_intent: e.intent,
            slot_logits: &o.slot_logits,
            gold_slots: g,
        })
        .collect()
}

/// `L_CE + mse_weight * L_MSE` where the MSE compares the fused query
/// embedding against the plain embedding of the gold semantic text.
/// Gradients are returned for every group the loss depends on, including
/// the text encoder; freezing is the caller's concern.
pub fn stage2_loss_grad<F: Real>(
    b: &ModelBundle<F>,
    batch: &[&Example],
    mse_weight: f64,
) -> Result<(LossParts<F>, ModelBundle<F>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut g = b.zeros_like();
    let fqs = batch
        .iter()
        .map(|e| fused_query(b, &e.query))
        .collect::<Result<Vec<_>>>()?;
    let sems = batch
        .iter()
        .map(|e| b.text.forward(&e.semantic, None))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<_> = batch.iter().map(|e| e.gold_slots()).collect();
    let samples = nlu_samples(fqs.iter().map(|f| &f.nlu_out), batch, &gold);
    let (ce, nlu_grads) = nlu_ce_loss_grad(&samples)?;
    let m = stack(&fqs.iter().map(|f| f.emb.clone()).collect::<Vec<_>>());
    let t = stack(&sems.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    let (mse, mut dm) = alignment_mse_grad(&m, &t)?;
    dm.scale(F::lit(mse_weight));
    for (i, (fq, e)) in fqs.iter().zip(batch).enumerate() {
        let ng = &nlu_grads[i];
        fused_query_backward(b, fq, &e.query, dm.row(i), &ng.d_intent, &ng.d_slots, &mut g);
        let dt: Vec<F> = dm.row(i).iter().map(|&v| -v).collect();
        b.text.backward(&sems[i].1, &dt, &mut g.text);
    }
    let parts = LossParts {
        total: ce + F::lit(mse_weight) * mse,
        ce,
        mse,
        ..Default::default()
    };
    Ok((parts, g))
}

/// Stage-3 objective options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage3Options {
    pub weights: LossWeights,
    /// Route queries through NLU + fusion; when off, queries are encoded
    /// plainly and no NLU term is computed.
    pub fused_queries: bool,
    /// Add `mse_weight * L_MSE` inside the NLU term.
    pub include_mse: bool,
    pub mse_weight: f64,
}

/// `L_QI + a * L_QC + b * L_NLU`. Retrieval terms use the non-chitchat
/// elements of the batch; the NLU term uses all of them.
pub fn stage3_loss_grad<F: Real>(
    b: &ModelBundle<F>,
    batch: &[&Example],
    opt: &Stage3Options,
) -> Result<(LossParts<F>, ModelBundle<F>)> {
    let w = &opt.weights;
    w.validate()?;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut g = b.zeros_like();
    let tau = b.tau();
    let d = b.config.d_emb;
    let n = batch.len();
    let retrieval: Vec<usize> = (0..n).filter(|&i| !batch[i].is_chitchat()).collect();

    let (fqs, plain) = if opt.fused_queries {
        let f = batch
            .iter()
            .map(|e| fused_query(b, &e.query))
            .collect::<Result<Vec<_>>>()?;
        (f, Vec::new())
    } else {
        let p = batch
            .iter()
            .map(|e| b.text.forward(&e.query, None))
            .collect::<Result<Vec<_>>>()?;
        (Vec::new(), p)
    };
    let q_emb = |i: usize| if opt.fused_queries { fqs[i].emb.clone() } else { plain[i].0.clone() };

    let mut dq = Mat::zeros(n, d);
    let mut d_lt = F::zero();
    let (mut l_qi, mut l_qc) = (F::zero(), F::zero());
    if !retrieval.is_empty() {
        let qs: Vec<_> = retrieval.iter().map(|&i| q_emb(i)).collect();
        let imgs = retrieval
            .iter()
            .map(|&i| b.image.forward(&batch[i].image))
            .collect::<Result<Vec<_>>>()?;
        let img_e: Vec<_> = imgs.iter().map(|c| c.0.clone()).collect();
        let (l, dq_r, d_img, dlt) = contrastive(&qs, &img_e, tau, F::one())?;
        l_qi = l;
        d_lt += dlt;
        for (r, &i) in retrieval.iter().enumerate() {
            dq.row_mut(i).copy_from_slice(dq_r.row(r));
            b.image.backward(&imgs[r].1, d_img.row(r), &mut g.image);
        }
        if w.a > 0.0 {
            let chunks = retrieval
                .iter()
                .map(|&i| b.text.forward(&batch[i].chunk, None))
                .collect::<Result<Vec<_>>>()?;
            let chunk_e: Vec<_> = chunks.iter().map(|c| c.0.clone()).collect();
            let (l, dq_r, d_chunk, dlt) = contrastive(&qs, &chunk_e, tau, F::lit(w.a))?;
            l_qc = l;
            d_lt += dlt;
            for (r, &i) in retrieval.iter().enumerate() {
                for (o, &v) in dq.row_mut(i).iter_mut().zip(dq_r.row(r)) {
                    *o += v;
                }
                b.text.backward(&chunks[r].1, d_chunk.row(r), &mut g.text);
            }
        }
    }

    let (mut ce, mut mse) = (F::zero(), F::zero());
    if opt.fused_queries {
        let gold: Vec<_> = batch.iter().map(|e| e.gold_slots()).collect();
        let samples = nlu_samples(fqs.iter().map(|f| &f.nlu_out), batch, &gold);
        let (l, mut nlu_grads) = nlu_ce_loss_grad(&samples)?;
        ce = l;
        let wb = F::lit(w.b);
        for ng in &mut nlu_grads {
            ng.d_intent.iter_mut().for_each(|v| *v *= wb);
            ng.d_slots.scale(wb);
        }
        if opt.include_mse {
            let sems = batch
                .iter()
                .map(|e| b.text.forward(&e.semantic, None))
                .collect::<Result<Vec<_>>>()?;
            let m = stack(&fqs.iter().map(|f| f.emb.clone()).collect::<Vec<_>>());
            let t = stack(&sems.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
            let (l, mut dm) = alignment_mse_grad(&m, &t)?;
            mse = l;
            dm.scale(wb * F::lit(opt.mse_weight));
            dq.add_assign(&dm);
            for (i, s) in sems.iter().enumerate() {
                let dt: Vec<F> = dm.row(i).iter().map(|&v| -v).collect();
                b.text.backward(&s.1, &dt, &mut g.text);
            }
        }
        for (i, (fq, e)) in fqs.iter().zip(batch).enumerate() {
            let ng = &nlu_grads[i];
            fused_query_backward(b, fq, &e.query, dq.row(i), &ng.d_intent, &ng.d_slots, &mut g);
        }
    } else {
        for (i, p) in plain.iter().enumerate() {
            if dq.row(i).iter().any(|&v| v != F::zero()) {
                b.text.backward(&p.1, dq.row(i), &mut g.text);
            }
        }
    }
    set_tau_grad(b, &mut g, d_lt);
    let nlu_term = if opt.include_mse { ce + F::lit(opt.mse_weight) * mse } else { ce };
    let parts = LossParts {
        total: l_qi + F::lit(w.a) * l_qc + F::lit(w.b) * nlu_term,
        ti: l_qi,
        tc: l_qc,
        ce,
        mse,
    };
    Ok((parts, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// λ in `L_CE + λ L_MSE` for stage 2.
    pub stage2_mse_weight: f64,
    pub stage3_include_mse: bool,
    /// Stage 3 only: encode queries through NLU + fusion.
    pub fused_queries: bool,
    pub optimizer: AdamW,
}

/// Peak learning rates for stages 1, 2 and 3.
pub const DEFAULT_BASE_LR: [f64; 3] = [2e-3, 5e-3, 2e-3];

impl StageConfig {
    pub fn for_stage(stage: u8) -> Self {
        StageConfig {
            stage,
            epochs: match stage {
                2 => 15,
                _ => 20,
            },
            batch_size: 32,
            base_lr: DEFAULT_BASE_LR[(stage.clamp(1, 3) - 1) as usize],
            warmup_ratio: 0.1,
            weights: LossWeights::default(),
            seed: 0,
            stage2_mse_weight: 1.0,
            stage3_include_mse: false,
            fused_queries: true,
            optimizer: AdamW::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr {} must be finite and non-negative", self.base_lr)));
        }
        if !(self.stage2_mse_weight.is_finite() && self.stage2_mse_weight >= 0.0) {
            return Err(Error::Config("stage2_mse_weight must be finite and non-negative".into()));
        }
        self.weights.validate()
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::for_stage(1)
    }
}

pub struct StageOutput<F> {
    pub bundle: ModelBundle<F>,
    pub optim: OptimState<F>,
    pub trace: Vec<TraceRow>,
}

/// Stream that orders a stage's batches; one per (seed, stage).
pub fn batch_rng(cfg: &StageConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(&[cfg.seed, 0x57a9e, cfg.stage as u64]))
}

fn trainable_names<F: Real>(b: &ModelBundle<F>) -> Vec<(String, &Mat<F>)> {
    b.tensors()
        .into_iter()
        .filter(|(n, _)| Group::of_tensor(n).is_some_and(|g| !b.is_frozen(g)))
        .collect()
}

/// Shared optimization loop. Frozen groups are excluded from the optimizer
/// and verified unchanged by checksum afterwards.
fn run_loop<F, S>(
    mut bundle: ModelBundle<F>,
    data: &PreparedSplit,
    cfg: &StageConfig,
    frozen: &[Group],
    step_fn: S,
) -> Result<StageOutput<F>>
where
    F: Real,
    S: Fn(&ModelBundle<F>, &[&Example]) -> Result<(LossParts<F>, ModelBundle<F>)>,
{
    cfg.validate()?;
    bundle.set_frozen(frozen);
    let before = bundle.checksums();
    let mut optim = OptimState::new(&trainable_names(&bundle));
    let total = cfg.epochs * data.steps_per_epoch(cfg.batch_size);
    let mut rng = batch_rng(cfg);
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in data.epoch_batches(cfg.batch_size, &mut rng) {
            let batch: Vec<&Example> = batch.iter().map(|&i| &data.examples[i]).collect();
            let lr = lr_schedule(step, total, cfg.base_lr, cfg.warmup_ratio);
            let (parts, grad) = step_fn(&bundle, &batch)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            trace.push(TraceRow {
                step,
                loss_total: parts.total.as_f64(),
                loss_ti: parts.ti.as_f64(),
                loss_tc: parts.tc.as_f64(),
                loss_ce: parts.ce.as_f64(),
                loss_mse: parts.mse.as_f64(),
                lr,
            });
            let frozen_now = bundle.frozen;
            let keep = |n: &str| Group::of_tensor(n).is_some_and(|g| !frozen_now[g.index()]);
            let grads: Vec<_> = grad.tensors().into_iter().filter(|(n, _)| keep(n)).collect();
            let mut params: Vec<_> = bundle.tensors_mut().into_iter().filter(|(n, _)| keep(n)).collect();
            adamw_step(&mut params, &grads, &mut optim, lr, &cfg.optimizer)?;
            step += 1;
        }
    }
    let after = bundle.checksums();
    for g in frozen {
        if before[g.index()] != after[g.index()] {
            return Err(Error::FreezeViolation(g.name().into()));
        }
    }
    bundle.stage_completed = bundle.stage_completed.max(cfg.stage);
    Ok(StageOutput { bundle, optim, trace })
}

fn expect_stage(cfg: &StageConfig, stage: u8) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!("stage {stage} runner given a stage {} config", cfg.stage)));
    }
    Ok(())
}

/// Text and image towers plus temperature on caption↔image and
/// caption↔chunk pairs.
pub fn run_stage1<F: Real>(bundle: ModelBundle<F>, data: &PreparedSplit, cfg: &StageConfig) -> Result<StageOutput<F>> {
    expect_stage(cfg, 1)?;
    let w = cfg.weights;
    run_loop(bundle, data, cfg, &[Group::Nlu, Group::Fusion], |b, batch| {
        stage1_loss_grad(b, batch, &w)
    })
}

/// NLU module and fusion block; both towers and the temperature frozen.
pub fn run_stage2<F: Real>(bundle: ModelBundle<F>, data: &PreparedSplit, cfg: &StageConfig) -> Result<StageOutput<F>> {
    expect_stage(cfg, 2)?;
    if bundle.stage_completed < 1 {
        return Err(Error::Config("stage 1 checkpoint required".into()));
    }
    let lambda = cfg.stage2_mse_weight;
    run_loop(
        bundle,
        data,
        cfg,
        &[Group::Text, Group::Image, Group::Temperature],
        |b, batch| stage2_loss_grad(b, batch, lambda),
    )
}

/// Joint fine-tuning of every group. With `fused_queries` off the NLU
/// module and fusion block stay frozen and only stage 1 is required.
pub fn run_stage3<F: Real>(bundle: ModelBundle<F>, data: &PreparedSplit, cfg: &StageConfig) -> Result<StageOutput<F>> {
    expect_stage(cfg, 3)?;
    let required = if cfg.fused_queries { 2 } else { 1 };
    if bundle.stage_completed < required {
        return Err(Error::Config(format!("stage {required} checkpoint required")));
    }
    let opt = Stage3Options {
        weights: cfg.weights,
        fused_queries: cfg.fused_queries,
        include_mse: cfg.stage3_include_mse,
        mse_weight: cfg.stage2_mse_weight,
    };
    let frozen: &[Group] = if cfg.fused_queries { &[] } else { &[Group::Nlu, Group::Fusion] };
    run_loop(bundle, data, cfg, frozen, |b, batch| stage3_loss_grad(b, batch, &opt))
}

pub fn run_stage<F: Real>(bundle: ModelBundle<F>, data: &PreparedSplit, cfg: &StageConfig) -> Result<StageOutput<F>> {
    match cfg.stage {
        1 => run_stage1(bundle, data, cfg),
        2 => run_stage2(bundle, data, cfg),
        3 => run_stage3(bundle, data, cfg),
        s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
    }
}
