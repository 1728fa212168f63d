//! Retrieval and NLU metrics, offline corpus encoding and the ablation
//! report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SlotLabel;
use crate::encoders::{stack, Embedding};
use crate::error::{Error, Result};
use crate::lexicon::LanguageTag;
use crate::nlu::{argmax, NluOutput};
use crate::tensor::{Mat, Real};
use crate::train::{read_tensor_dir, write_tensor_dir, Example, ModelBundle, PreparedSplit};

pub const DEFAULT_K: usize = 5;

/// Queries against a corpus with a non-empty gold set per query.
#[derive(Clone, Debug)]
pub struct RetrievalTask<'a, F> {
    queries: &'a Mat<F>,
    corpus: &'a Mat<F>,
    gold: Vec<Vec<usize>>,
}

impl<'a, F: Real> RetrievalTask<'a, F> {
    pub fn new(queries: &'a Mat<F>, corpus: &'a Mat<F>, gold: Vec<Vec<usize>>) -> Result<Self> {
        if queries.rows != gold.len() {
            return Err(Error::Shape(format!("{} queries but {} gold sets", queries.rows, gold.len())));
        }
        if queries.cols != corpus.cols {
            return Err(Error::Shape(format!(
                "query dim {} differs from corpus dim {}",
                queries.cols, corpus.cols
            )));
        }
        for (i, g) in gold.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Config(format!("query {i} has an empty gold set")));
            }
            if let Some(&bad) = g.iter().find(|&&j| j >= corpus.rows) {
                return Err(Error::Config(format!("gold index {bad} of query {i} out of range")));
            }
        }
        Ok(RetrievalTask { queries, corpus, gold })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Fraction of queries with a gold item among the top `k` by dot product.
/// Ties rank the lower corpus index first.
pub fn recall_at_k<F: Real>(task: &RetrievalTask<'_, F>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let m = task.corpus.rows;
    if k > m {
        return Err(Error::KTooLarge { k, m });
    }
    if task.is_empty() {
        return Err(Error::Config("retrieval task has no queries".into()));
    }
    let scores = task.queries.matmul_t(task.corpus);
    let mut hits = 0usize;
    for (q, gold) in task.gold.iter().enumerate() {
        let row = scores.row(q);
        // An item outranks gold item g iff its score is higher, or equal
        // with a lower index; g is in the top k iff fewer than k do.
        let hit = gold.iter().any(|&g| {
            let sg = row[g];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > sg || (s == sg && j < g))
                .count();
            above < k
        });
        hits += hit as usize;
    }
    Ok(hits as f64 / task.len() as f64)
}

pub fn intent_accuracy<T: PartialEq>(preds: &[T], gold: &[T]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Config("no intents to score".into()));
    }
    let correct = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Token-level micro F1 over non-O labels. When neither side has a non-O
/// label the score is 1.
pub fn slot_f1(preds: &[Vec<SlotLabel>], gold: &[Vec<SlotLabel>]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(Error::Shape(format!("{} predicted sequences for {} gold", preds.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in preds.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("sequence {i}: {} predicted labels for {} gold", p.len(), g.len())));
        }
        for (&p, &g) in p.iter().zip(g) {
            if p == g && !g.is_o() {
                tp += 1;
            } else {
                fp += !p.is_o() as usize;
                fneg += !g.is_o() as usize;
            }
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Caption,
    Chunk,
    QueryPlain,
    QueryFused,
    /// One row per scene, in the split's scene order.
    Image,
}

/// Encodes one view of a prepared split, row-aligned with its examples
/// (or scenes for [`View::Image`]).
pub fn encode_corpus<F: Real>(split: &PreparedSplit, bundle: &ModelBundle<F>, view: View) -> Result<Mat<F>> {
    let embs: Vec<Embedding<F>> = match view {
        View::Image => split
            .by_scene
            .iter()
            .map(|ids| bundle.image.encode(&split.examples[ids[0]].image))
            .collect::<Result<_>>()?,
        _ => split
            .examples
            .iter()
            .map(|e| encode_text_view(bundle, e, view))
            .collect::<Result<_>>()?,
    };
    Ok(stack(&embs))
}

fn encode_text_view<F: Real>(b: &ModelBundle<F>, e: &Example, view: View) -> Result<Embedding<F>> {
    match view {
        View::Caption => b.text.encode(&e.caption, None),
        View::Chunk => b.text.encode(&e.chunk, None),
        View::QueryPlain => b.text.encode(&e.query, None),
        View::QueryFused => {
            let (out, _) = b.nlu.forward(&e.query)?;
            let x = b.text.input_embeddings(&e.query)?;
            let fused = b.fusion.fuse(&x, &out.semantic_features)?;
            b.text.encode(&e.query, Some(&fused))
        }
        View::Image => b.image.encode(&e.image),
    }
}

/// Argmax NLU predictions per example: intent index and one slot label per
/// query word (BOS/EOS stripped).
pub fn predict_nlu<F: Real>(split: &PreparedSplit, bundle: &ModelBundle<F>) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut intents = Vec::with_capacity(split.examples.len());
    let mut slots = Vec::with_capacity(split.examples.len());
    for e in &split.examples {
        let (out, _): (NluOutput<F>, _) = bundle.nlu.forward(&e.query)?;
        intents.push(argmax(&out.intent_logits));
        let n = out.slot_logits.rows;
        slots.push((1..n.saturating_sub(1)).map(|r| argmax(out.slot_logits.row(r))).collect());
    }
    Ok((intents, slots))
}

/// Every embedding table and prediction a report is computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantTables {
    pub name: String,
    pub caption: Mat<f32>,
    pub query: Mat<f32>,
    pub chunk: Mat<f32>,
    pub image: Mat<f32>,
    pub nlu: Option<(Vec<usize>, Vec<Vec<usize>>)>,
}

/// A model to evaluate and how its queries are encoded.
pub struct Variant<'a> {
    pub name: String,
    pub bundle: &'a ModelBundle<f32>,
    pub fused_queries: bool,
    pub has_nlu: bool,
}

pub fn encode_variant(split: &PreparedSplit, v: &Variant<'_>) -> Result<VariantTables> {
    let query_view = if v.fused_queries { View::QueryFused } else { View::QueryPlain };
    Ok(VariantTables {
        name: v.name.clone(),
        caption: encode_corpus(split, v.bundle, View::Caption)?,
        query: encode_corpus(split, v.bundle, query_view)?,
        chunk: encode_corpus(split, v.bundle, View::Chunk)?,
        image: encode_corpus(split, v.bundle, View::Image)?,
        nlu: if v.has_nlu { Some(predict_nlu(split, v.bundle)?) } else { None },
    })
}

impl VariantTables {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut extra = Vec::new();
        if let Some((intents, slots)) = &self.nlu {
            let flat: Vec<f32> = slots.iter().flatten().map(|&s| s as f32).collect();
            extra.push(("intent_pred".to_string(), Mat::from_vec(1, intents.len(), intents.iter().map(|&i| i as f32).collect())));
            extra.push(("slot_len".to_string(), Mat::from_vec(1, slots.len(), slots.iter().map(|s| s.len() as f32).collect())));
            extra.push(("slot_pred".to_string(), Mat::from_vec(1, flat.len(), flat)));
        }
        let mut tensors: Vec<(String, &Mat<f32>)> = vec![
            ("caption".into(), &self.caption),
            ("query".into(), &self.query),
            ("chunk".into(), &self.chunk),
            ("image".into(), &self.image),
        ];
        tensors.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
        write_tensor_dir(dir, &tensors, serde_json::json!({ "variant": self.name }))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors) = read_tensor_dir(dir)?;
        let name = meta
            .get("variant")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("embedding table without variant name".into()))?
            .to_string();
        let get = |key: &str| -> Option<Mat<f32>> {
            tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t.clone())
        };
        let need = |m: Option<Mat<f32>>, key: &str| m.ok_or_else(|| Error::Checkpoint(format!("missing table {key}")));
        let caption = need(get("caption"), "caption")?;
        let query = need(get("query"), "query")?;
        let chunk = need(get("chunk"), "chunk")?;
        let image = need(get("image"), "image")?;
        let nlu = match (get("intent_pred"), get("slot_len"), get("slot_pred")) {
            (Some(i), Some(l), Some(s)) => {
                let mut slots = Vec::with_capacity(l.data.len());
                let mut at = 0;
                for &len in &l.data {
                    let len = len as usize;
                    let seq = s
                        .data
                        .get(at..at + len)
                        .ok_or_else(|| Error::Checkpoint("slot predictions truncated".into()))?;
                    slots.push(seq.iter().map(|&v| v as usize).collect());
                    at += len;
                }
                Some((i.data.iter().map(|&v| v as usize).collect(), slots))
            }
            _ => None,
        };
        Ok(VariantTables {
            name,
            caption,
            query,
            chunk,
            image,
            nlu,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub language: String,
    pub task: String,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

pub const MEAN: &str = "Mean";

/// Per-variant, per-language, per-task metrics. `Mean` rows average the
/// languages with equal weight.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
}

fn select<F: Real>(m: &Mat<F>, rows: &[usize]) -> Mat<F> {
    let mut out = Mat::zeros(rows.len(), m.cols);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

/// Metrics for one variant from its tables. Languages are evaluated
/// separately; text corpora are restricted to the query's language while the
/// image corpus is shared.
pub fn report_rows(split: &PreparedSplit, t: &VariantTables, k: usize) -> Result<Vec<ReportRow>> {
    let n = split.examples.len();
    for (name, m) in [("caption", &t.caption), ("query", &t.query), ("chunk", &t.chunk)] {
        if m.rows != n {
            return Err(Error::Shape(format!("{name} table has {} rows for {n} examples", m.rows)));
        }
    }
    if t.image.rows != split.by_scene.len() {
        return Err(Error::Shape("image table does not match the split's scenes".into()));
    }
    let scene_class: Vec<u32> = split.by_scene.iter().map(|ids| split.examples[ids[0]].class_id).collect();
    let langs: BTreeSet<usize> = split.examples.iter().map(|e| e.lang).collect();
    let mut rows = Vec::new();
    let row = |lang: usize, task: &str, metric: &str, k: Option<usize>, value: f64| ReportRow {
        variant: t.name.clone(),
        language: LanguageTag::new(lang).name,
        task: task.into(),
        metric: metric.into(),
        k,
        value,
    };
    for &lang in &langs {
        let ex: Vec<usize> = (0..n).filter(|&i| split.examples[i].lang == lang).collect();
        let non_chat: Vec<usize> = ex.iter().copied().filter(|&i| !split.examples[i].is_chitchat()).collect();
        let class_gold = |i: usize| -> Vec<usize> {
            let c = split.examples[i].class_id;
            (0..scene_class.len()).filter(|&s| scene_class[s] == c).collect()
        };

        let q = select(&t.caption, &ex);
        let task = RetrievalTask::new(&q, &t.image, ex.iter().map(|&i| class_gold(i)).collect())?;
        rows.push(row(lang, "T2I", "recall", Some(k), recall_at_k(&task, k)?));

        let q = select(&t.query, &non_chat);
        let task = RetrievalTask::new(&q, &t.image, non_chat.iter().map(|&i| class_gold(i)).collect())?;
        rows.push(row(lang, "Q2I", "recall", Some(k), recall_at_k(&task, k)?));

        let corpus = select(&t.chunk, &ex);
        let gold = non_chat
            .iter()
            .map(|&i| {
                let s = split.examples[i].scene_id;
                ex.iter().position(|&j| split.examples[j].scene_id == s).into_iter().collect()
            })
            .collect();
        let task = RetrievalTask::new(&q, &corpus, gold)?;
        rows.push(row(lang, "T2T", "recall", Some(k), recall_at_k(&task, k)?));

        if let Some((intents, slots)) = &t.nlu {
            let pred: Vec<usize> = ex.iter().map(|&i| intents[i]).collect();
            let gold: Vec<usize> = ex.iter().map(|&i| split.examples[i].intent).collect();
            rows.push(row(lang, "NLU", "intent_acc", None, intent_accuracy(&pred, &gold)?));
            let to_labels = |v: &[usize]| -> Result<Vec<SlotLabel>> {
                v.iter()
                    .map(|&s| SlotLabel::from_index(s).ok_or(Error::LabelOutOfRange { label: s, classes: crate::corpus::NUM_SLOT_LABELS }))
                    .collect()
            };
            let pred = ex.iter().map(|&i| to_labels(&slots[i])).collect::<Result<Vec<_>>>()?;
            let gold = ex
                .iter()
                .map(|&i| {
                    let s = &split.examples[i].slots;
                    to_labels(&s[1..s.len() - 1])
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row(lang, "NLU", "slot_f1", None, slot_f1(&pred, &gold)?));
        }
    }
    Ok(rows)
}

/// Evaluates every variant on `split` (normally the test split).
pub fn run_ablation(split: &PreparedSplit, variants: &[Variant<'_>], k: usize) -> Result<(AblationReport, Vec<VariantTables>)> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let tables = variants
        .iter()
        .map(|v| encode_variant(split, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((report_from_tables(split, &tables, k)?, tables))
}

pub fn report_from_tables(split: &PreparedSplit, tables: &[VariantTables], k: usize) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for t in tables {
        rows.extend(report_rows(split, t, k)?);
    }
    Ok(AblationReport { k, rows })
}

impl AblationReport {
    /// Per-language value of one cell.
    pub fn value(&self, variant: &str, language: &str, task: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.language == language && r.task == task && r.metric == metric)
            .map(|r| r.value)
    }

    /// Equal-weight mean over languages.
    pub fn mean(&self, variant: &str, task: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.task == task && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn languages(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.language.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Ordered unique (variant, task, metric) keys.
    fn keys(&self) -> Vec<(String, String, String)> {
        let mut keys: Vec<(String, String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.variant.clone(), r.task.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys
    }

    /// Rows plus one `Mean` row per (variant, task, metric).
    pub fn rows_with_mean(&self) -> Vec<ReportRow> {
        let mut out = self.rows.clone();
        for (v, t, m) in self.keys() {
            let k = self.rows.iter().find(|r| r.variant == v && r.task == t && r.metric == m).and_then(|r| r.k);
            out.push(ReportRow {
                value: self.mean(&v, &t, &m).unwrap_or(f64::NAN),
                variant: v,
                language: MEAN.into(),
                task: t,
                metric: m,
                k,
            });
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows_with_mean())? + "\n")
    }

    pub fn render_table(&self) -> String {
        let langs = self.languages();
        let keys = self.keys();
        let vw = keys.iter().map(|k| k.0.len()).max().unwrap_or(0).max("variant".len());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# recall@{} (dot product, ties by corpus index); slot F1 is token-level micro F1",
            self.k
        );
        let _ = write!(s, "{:<vw$}  {:<4}  {:<10}", "variant", "task", "metric");
        for l in langs.iter().map(String::as_str).chain([MEAN]) {
            let _ = write!(s, "  {l:>7}");
        }
        s.push('\n');
        for (v, t, m) in keys {
            let _ = write!(s, "{v:<vw$}  {t:<4}  {m:<10}");
            for l in &langs {
                match self.value(&v, l, &t, &m) {
                    Some(x) => {
                        let _ = write!(s, "  {:>7.4}", x);
                    }
                    None => {
                        let _ = write!(s, "  {:>7}", "-");
                    }
                }
            }
            let _ = write!(s, "  {:>7.4}", self.mean(&v, &t, &m).unwrap_or(f64::NAN));
            s.push('\n');
        }
        s
    }
}
