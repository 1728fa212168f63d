//! Contrastive, cross-entropy and alignment objectives with closed-form
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
pub const TAU_INIT: f64 = 0.07;
const UNIT_NORM_TOL: f64 = 1e-4;

/// Temperature stored as a log; returns `(tau, clamped)`.
pub fn tau_from_log<F: Real>(log_tau: F) -> (F, bool) {
    let tau = log_tau.exp();
    let (lo, hi) = (F::lit(TAU_MIN), F::lit(TAU_MAX));
    if tau < lo {
        (lo, true)
    } else if tau > hi {
        (hi, true)
    } else {
        (tau, false)
    }
}

/// Temperature-scaled cosine similarities between two equally sized,
/// row-normalized embedding sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMatrix<F> {
    pub values: Mat<F>,
    pub tau: F,
}

fn check_unit_rows<F: Real>(m: &Mat<F>) -> Result<()> {
    for r in 0..m.rows {
        let norm = crate::tensor::l2_norm(m.row(r)).as_f64();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { row: r, norm });
        }
    }
    Ok(())
}

/// `values[r][c] = <a_r, b_c> / tau`.
pub fn similarity_matrix<F: Real>(a: &Mat<F>, b: &Mat<F>, tau: F) -> Result<SimMatrix<F>> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape(format!(
            "similarity of {:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if !(tau.is_finite() && tau >= F::lit(TAU_MIN) && tau <= F::lit(TAU_MAX)) {
        return Err(Error::Config(format!("temperature {tau:?} outside [{TAU_MIN}, {TAU_MAX}]")));
    }
    check_unit_rows(a)?;
    check_unit_rows(b)?;
    let mut values = a.matmul_t(b);
    values.scale(F::one() / tau);
    Ok(SimMatrix { values, tau })
}

/// Gradients of a loss w.r.t. both embedding sets and `log tau`, given the
/// gradient w.r.t. the similarity values.
pub fn similarity_backward<F: Real>(
    a: &Mat<F>,
    b: &Mat<F>,
    sim: &SimMatrix<F>,
    d_values: &Mat<F>,
) -> (Mat<F>, Mat<F>, F) {
    let inv = F::one() / sim.tau;
    let mut da = d_values.matmul(b);
    da.scale(inv);
    let mut db = Mat::zeros(b.rows, b.cols);
    db.add_t_matmul(d_values, a);
    db.scale(inv);
    // d values / d log tau = -values
    let d_log_tau = -d_values
        .data
        .iter()
        .zip(&sim.values.data)
        .map(|(&g, &s)| g * s)
        .sum::<F>();
    (da, db, d_log_tau)
}

fn log_sum_exp<F: Real>(xs: impl Iterator<Item = F> + Clone) -> F {
    let max = xs.clone().fold(F::neg_infinity(), F::max);
    max + xs.map(|x| (x - max).exp()).sum::<F>().ln()
}

fn check_square<F: Real>(s: &SimMatrix<F>) -> Result<usize> {
    let (r, c) = s.values.shape();
    if r != c || r == 0 {
        return Err(Error::Shape(format!("InfoNCE needs a non-empty square matrix, got {r}x{c}")));
    }
    Ok(r)
}

/// Batch-mean symmetric InfoNCE with the diagonal as positives.
pub fn info_nce_symmetric<F: Real>(s: &SimMatrix<F>) -> Result<F> {
    Ok(info_nce_symmetric_grad(s)?.0)
}

/// Loss and its gradient w.r.t. the similarity values.
pub fn info_nce_symmetric_grad<F: Real>(s: &SimMatrix<F>) -> Result<(F, Mat<F>)> {
    let n = check_square(s)?;
    let v = &s.values;
    let scale = F::one() / F::lit(2.0 * n as f64);
    let mut loss = F::zero();
    let mut grad = Mat::zeros(n, n);
    for r in 0..n {
        let lse = log_sum_exp(v.row(r).iter().copied());
        loss += lse - v.get(r, r);
        for c in 0..n {
            let p = (v.get(r, c) - lse).exp();
            let g = grad.get(r, c) + p * scale;
            grad.set(r, c, g);
        }
    }
    for c in 0..n {
        let lse = log_sum_exp((0..n).map(|r| v.get(r, c)));
        loss += lse - v.get(c, c);
        for r in 0..n {
            let p = (v.get(r, c) - lse).exp();
            let g = grad.get(r, c) + p * scale;
            grad.set(r, c, g);
        }
    }
    for i in 0..n {
        let g = grad.get(i, i) - F::lit(2.0) * scale;
        grad.set(i, i, g);
    }
    Ok((loss * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the text–chunk term in the stage-1 objective.
    pub alpha: f64,
    /// Weight of the query–chunk term in the stage-3 objective.
    pub a: f64,
    /// Weight of the NLU term in the stage-3 objective.
    pub b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            a: 1.0,
            b: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("a", self.a), ("b", self.b)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `L_TI + alpha * L_TC`.
pub fn stage1_loss<F: Real>(ti: &SimMatrix<F>, tc: &SimMatrix<F>, w: &LossWeights) -> Result<F> {
    w.validate()?;
    Ok(info_nce_symmetric(ti)? + F::lit(w.alpha) * info_nce_symmetric(tc)?)
}

/// One sequence worth of NLU predictions and gold labels. `gold_slots`
/// holds `None` for masked (padding) positions.
#[derive(Clone, Debug)]
pub struct NluSample<'a, F> {
    pub intent_logits: &'a [F],
    pub gold_intent: usize,
    pub slot_logits: &'a Mat<F>,
    pub gold_slots: &'a [Option<usize>],
}

/// Gradients of [`nlu_ce_loss`] for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NluGrad<F> {
    pub d_intent: Vec<F>,
    pub d_slots: Mat<F>,
}

/// Cross-entropy of `logits` against `gold`; adds `scale * dCE/dlogits`
/// into `grad`.
fn ce_with_grad<F: Real>(logits: &[F], gold: usize, scale: F, grad: &mut [F]) -> Result<F> {
    if gold >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: gold,
            classes: logits.len(),
        });
    }
    let lse = log_sum_exp(logits.iter().copied());
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g += (l - lse).exp() * scale;
    }
    grad[gold] -= scale;
    Ok(lse - logits[gold])
}

/// Summed intent and slot cross-entropy over the batch, divided by the
/// batch size.
pub fn nlu_ce_loss<F: Real>(batch: &[NluSample<'_, F>]) -> Result<F> {
    Ok(nlu_ce_loss_grad(batch)?.0)
}

pub fn nlu_ce_loss_grad<F: Real>(batch: &[NluSample<'_, F>]) -> Result<(F, Vec<NluGrad<F>>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty NLU batch".into()));
    }
    let scale = F::one() / F::lit(batch.len() as f64);
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        if s.slot_logits.rows != s.gold_slots.len() {
            return Err(Error::Shape(format!(
                "{} slot rows for {} gold labels",
                s.slot_logits.rows,
                s.gold_slots.len()
            )));
        }
        let mut d_intent = vec![F::zero(); s.intent_logits.len()];
        total += ce_with_grad(s.intent_logits, s.gold_intent, scale, &mut d_intent)?;
        let mut d_slots = s.slot_logits.zeros_like();
        for (j, gold) in s.gold_slots.iter().enumerate() {
            if let Some(g) = *gold {
                total += ce_with_grad(s.slot_logits.row(j), g, scale, d_slots.row_mut(j))?;
            }
        }
        grads.push(NluGrad { d_intent, d_slots });
    }
    Ok((total * scale, grads))
}

/// Squared difference averaged over the batch and the embedding dimension.
pub fn alignment_mse<F: Real>(m: &Mat<F>, t: &Mat<F>) -> Result<F> {
    Ok(alignment_mse_grad(m, t)?.0)
}

/// Loss and gradient w.r.t. `m`.
pub fn alignment_mse_grad<F: Real>(m: &Mat<F>, t: &Mat<F>) -> Result<(F, Mat<F>)> {
    if m.shape() != t.shape() || m.rows == 0 {
        return Err(Error::Shape(format!("MSE of {:?} against {:?}", m.shape(), t.shape())));
    }
    let inv = F::one() / F::lit((m.rows * m.cols) as f64);
    let mut loss = F::zero();
    let mut grad = m.zeros_like();
    for ((g, &a), &b) in grad.data.iter_mut().zip(&m.data).zip(&t.data) {
        let d = a - b;
        loss += d * d;
        *g = F::lit(2.0) * d * inv;
    }
    Ok((loss * inv, grad))
}

/// `L_QI + a * L_QC + b * L_NLU` with the cross-entropy NLU term.
pub fn stage3_loss<F: Real>(
    qi: &SimMatrix<F>,
    qc: &SimMatrix<F>,
    nlu: &[NluSample<'_, F>],
    w: &LossWeights,
) -> Result<F> {
    w.validate()?;
    Ok(info_nce_symmetric(qi)? + F::lit(w.a) * info_nce_symmetric(qc)? + F::lit(w.b) * nlu_ce_loss(nlu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(values: Vec<Vec<f64>>) -> SimMatrix<f64> {
        SimMatrix {
            values: Mat::from_rows(&values),
            tau: 1.0,
        }
    }

    #[test]
    fn self_similarity_and_scaling() {
        let a = Mat::from_vec(1, 2, vec![0.6f64, 0.8]);
        let s = similarity_matrix(&a, &a, 1.0).unwrap();
        assert!((s.values.get(0, 0) - 1.0).abs() < 1e-15);
        let e = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let s = similarity_matrix(&e, &e, 0.5).unwrap();
        assert_eq!(s.values.data, vec![2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn rejects_non_unit_rows_and_bad_shapes() {
        let a = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        assert!(matches!(similarity_matrix(&a, &a, 1.0), Err(Error::NotUnitNorm { .. })));
        let b = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        assert!(similarity_matrix(&b, &c, 1.0).is_err());
        assert!(info_nce_symmetric(&SimMatrix { values: Mat::<f64>::zeros(2, 3), tau: 1.0 }).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        let uniform = sim(vec![vec![3.0, 3.0], vec![3.0, 3.0]]);
        assert!((info_nce_symmetric(&uniform).unwrap() - 2f64.ln()).abs() < 1e-12);
        let mut sat = vec![vec![-30.0; 4]; 4];
        for (i, row) in sat.iter_mut().enumerate() {
            row[i] = 30.0;
        }
        assert!(info_nce_symmetric(&sim(sat)).unwrap().abs() < 1e-9);
        let eye = sim(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((info_nce_symmetric(&eye).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn row_shift_leaves_loss_direction_unchanged() {
        let base = sim(vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.4, -0.5], vec![0.7, 0.0, 0.2]]);
        let mut shifted = base.clone();
        for c in 0..3 {
            let v = shifted.values.get(1, c) + 5.0;
            shifted.values.set(1, c, v);
        }
        // the row-softmax term of row 1 is unchanged; check it directly
        let row_term = |s: &SimMatrix<f64>| log_sum_exp(s.values.row(1).iter().copied()) - s.values.get(1, 1);
        assert!((row_term(&base) - row_term(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn stage1_weighting() {
        let ti = sim(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tc = sim(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let w0 = LossWeights { alpha: 0.0, ..Default::default() };
        assert_eq!(stage1_loss(&ti, &tc, &w0).unwrap(), info_nce_symmetric(&ti).unwrap());
        let w1 = LossWeights { alpha: 1.0, ..Default::default() };
        let both = stage1_loss(&tc, &tc, &w1).unwrap();
        assert!((both - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(stage1_loss(&ti, &tc, &LossWeights { alpha: -1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn nlu_ce_closed_forms() {
        let slots = Mat::from_rows(&[vec![40.0f64, 0.0, 0.0], vec![0.0, 40.0, 0.0]]);
        let gold = [Some(0), Some(1)];
        let s = NluSample {
            intent_logits: &[0.0, 40.0, 0.0],
            gold_intent: 1,
            slot_logits: &slots,
            gold_slots: &gold,
        };
        assert!(nlu_ce_loss(&[s]).unwrap().abs() < 1e-9);
        let empty = Mat::<f64>::zeros(0, 11);
        let u = NluSample {
            intent_logits: &[0.5, 0.5, 0.5],
            gold_intent: 2,
            slot_logits: &empty,
            gold_slots: &[],
        };
        assert!((nlu_ce_loss(&[u]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nlu_ce_masks_padding_and_checks_labels() {
        let slots = Mat::from_rows(&[vec![1.0, 2.0], vec![5.0, -5.0]]);
        let masked = [Some(1), None];
        let s = NluSample {
            intent_logits: &[0.0, 0.0, 0.0],
            gold_intent: 0,
            slot_logits: &slots,
            gold_slots: &masked,
        };
        let expected = 3f64.ln() + (1f64.exp() + 2f64.exp()).ln() - 2.0;
        assert!((nlu_ce_loss(&[s.clone()]).unwrap() - expected).abs() < 1e-12);
        let bad = NluSample { gold_intent: 3, ..s };
        assert!(matches!(nlu_ce_loss(&[bad]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn mse_closed_forms() {
        let m = Mat::from_vec(2, 3, vec![0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(alignment_mse(&m, &m).unwrap(), 0.0);
        let mut t = m.clone();
        for v in &mut t.data {
            *v += 1.0;
        }
        assert!((alignment_mse::<f64>(&m, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(alignment_mse(&m, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn tau_is_clamped() {
        assert_eq!(tau_from_log((0.001f64).ln()), (0.01, true));
        assert_eq!(tau_from_log((1000f64).ln()), (100.0, true));
        let (t, c) = tau_from_log((0.07f64).ln());
        assert!((t - 0.07).abs() < 1e-15 && !c);
    }
}
