//! Brute-force reference implementations compared against the library on
//! random instances. Shared by the core test suite and the acceptance
//! harness through `#[path]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unisearch_core::corpus::{SlotLabel, NUM_SLOT_LABELS};
use unisearch_core::eval::{recall_at_k, slot_f1, RetrievalTask};
use unisearch_core::losses::{nlu_ce_loss, similarity_matrix, NluSample};
use unisearch_core::Mat;

pub struct OracleOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Largest absolute difference from the oracle.
    pub max_diff: f64,
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn similarity_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut s = 0.0;
            for k in 0..a[i].len() {
                s += a[i][k] * b[j][k];
            }
            out[i][j] = s / tau;
        }
    }
    out
}

/// Full descending sort with a stable tie rule, then a top-k scan.
pub fn recall_oracle(q: &[Vec<f64>], c: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (qi, qv) in q.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = c
            .iter()
            .enumerate()
            .map(|(j, cv)| (qv.iter().zip(cv).map(|(x, y)| x * y).sum(), j))
            .collect();
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        if scored[..k].iter().any(|&(_, j)| gold[qi].contains(&j)) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

/// Summed per-sequence cross-entropy with an unshifted log-sum-exp,
/// divided by the batch size.
pub fn ce_oracle(intents: &[Vec<f64>], gold_intent: &[usize], slots: &[Vec<Vec<f64>>], gold_slots: &[Vec<Option<usize>>]) -> f64 {
    let ce = |logits: &[f64], g: usize| logits.iter().map(|x| x.exp()).sum::<f64>().ln() - logits[g];
    let mut total = 0.0;
    for i in 0..intents.len() {
        total += ce(&intents[i], gold_intent[i]);
        for (row, g) in slots[i].iter().zip(&gold_slots[i]) {
            if let Some(g) = g {
                total += ce(row, *g);
            }
        }
    }
    total / intents.len() as f64
}

/// Precision and recall from per-position counts, combined harmonically.
pub fn slot_f1_oracle(pred: &[Vec<SlotLabel>], gold: &[Vec<SlotLabel>]) -> f64 {
    let (mut tp, mut pred_pos, mut gold_pos) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        for i in 0..p.len() {
            if p[i] != SlotLabel::O {
                pred_pos += 1.0;
            }
            if g[i] != SlotLabel::O {
                gold_pos += 1.0;
                if p[i] == g[i] {
                    tp += 1.0;
                }
            }
        }
    }
    if pred_pos == 0.0 && gold_pos == 0.0 {
        return 1.0;
    }
    let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
    let recall = if gold_pos > 0.0 { tp / gold_pos } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn random_label(rng: &mut ChaCha8Rng) -> SlotLabel {
    if rng.random_bool(0.5) {
        SlotLabel::O
    } else {
        SlotLabel::from_index(rng.random_range(0..NUM_SLOT_LABELS)).unwrap()
    }
}

pub fn run_oracles(instances: usize, seed: u64) -> Vec<OracleOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut max_diff: f64 = 0.0;
    for _ in 0..instances {
        let (n, d) = (rng.random_range(1..9), rng.random_range(1..17));
        let (a, b) = (unit_rows(&mut rng, n, d), unit_rows(&mut rng, n, d));
        let tau = rng.random_range(0.01..2.0);
        let s = similarity_matrix(&Mat::from_rows(&a), &Mat::from_rows(&b), tau).unwrap();
        for (i, row) in similarity_oracle(&a, &b, tau).iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                max_diff = max_diff.max((s.values.get(i, j) - v).abs());
            }
        }
    }
    out.push(OracleOutcome { name: "similarity_matrix", instances, max_diff });

    let mut max_diff: f64 = 0.0;
    for _ in 0..instances {
        let (nq, m, d) = (5, 20, rng.random_range(2..6));
        // Coarse integer embeddings make exact score ties common.
        let coarse = rng.random_bool(0.5);
        let mut emb = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| if coarse { rng.random_range(-2..3) as f64 } else { rng.random_range(-1.0..1.0) })
                        .collect()
                })
                .collect()
        };
        let (q, c) = (emb(nq), emb(m));
        let gold: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let mut g: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..m)).collect();
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        let k = rng.random_range(1..=m);
        let (qm, cm) = (Mat::from_rows(&q), Mat::from_rows(&c));
        let task = RetrievalTask::new(&qm, &cm, gold.clone()).unwrap();
        let got = recall_at_k(&task, k).unwrap();
        max_diff = max_diff.max((got - recall_oracle(&q, &c, &gold, k)).abs());
    }
    out.push(OracleOutcome { name: "recall_at_k", instances, max_diff });

    let mut max_diff: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..5);
        let mut intents = Vec::new();
        let mut gold_intent = Vec::new();
        let mut slots = Vec::new();
        let mut gold_slots = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(1..7);
            intents.push((0..3).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>());
            gold_intent.push(rng.random_range(0..3));
            slots.push(
                (0..t)
                    .map(|_| (0..NUM_SLOT_LABELS).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            );
            gold_slots.push(
                (0..t)
                    .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..NUM_SLOT_LABELS)))
                    .collect::<Vec<_>>(),
            );
        }
        let slot_mats: Vec<Mat<f64>> = slots.iter().map(|s| Mat::from_rows(s)).collect();
        let batch: Vec<NluSample<'_, f64>> = (0..n)
            .map(|i| NluSample {
                intent_logits: &intents[i],
                gold_intent: gold_intent[i],
                slot_logits: &slot_mats[i],
                gold_slots: &gold_slots[i],
            })
            .collect();
        let got = nlu_ce_loss(&batch).unwrap();
        max_diff = max_diff.max((got - ce_oracle(&intents, &gold_intent, &slots, &gold_slots)).abs());
    }
    out.push(OracleOutcome { name: "nlu_ce_loss", instances, max_diff });

    let mut max_diff: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..6);
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(0..8);
            gold.push((0..t).map(|_| random_label(&mut rng)).collect::<Vec<_>>());
            // Mostly copy gold so true positives are frequent.
            pred.push(
                gold.last()
                    .unwrap()
                    .iter()
                    .map(|&g| if rng.random_bool(0.6) { g } else { random_label(&mut rng) })
                    .collect::<Vec<_>>(),
            );
        }
        let got = slot_f1(&pred, &gold).unwrap();
        max_diff = max_diff.max((got - slot_f1_oracle(&pred, &gold)).abs());
    }
    out.push(OracleOutcome { name: "slot_f1", instances, max_diff });
    out
}
