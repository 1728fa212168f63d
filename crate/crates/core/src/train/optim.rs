//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for each trainable tensor, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F> {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Mat<F>>,
    pub v: Vec<Mat<F>>,
}

impl<F: Real> OptimState<F> {
    pub fn new(params: &[(String, &Mat<F>)]) -> Self {
        OptimState {
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, p)| p.zeros_like()).collect(),
            v: params.iter().map(|(_, p)| p.zeros_like()).collect(),
        }
    }
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// One AdamW update over matching `(name, tensor)` lists. Every gradient
/// is checked before any parameter is touched.
pub fn adamw_step<F: Real>(
    params: &mut [(String, &mut Mat<F>)],
    grads: &[(String, &Mat<F>)],
    state: &mut OptimState<F>,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
    }
    if params.len() != grads.len() || params.len() != state.names.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.names.len()
        )));
    }
    for (i, ((pn, p), (gn, g))) in params.iter().zip(grads).enumerate() {
        if pn != gn || *pn != state.names[i] || p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("parameter {pn} does not match gradient {gn}")));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(group_of(gn).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (F::lit(hp.beta1), F::lit(hp.beta2));
    let bc1 = F::lit(1.0 - hp.beta1.powf(t));
    let bc2 = F::lit(1.0 - hp.beta2.powf(t));
    let decay = F::lit(1.0 - lr * hp.weight_decay);
    let (lr, eps) = (F::lit(lr), F::lit(hp.eps));
    for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup over `ceil(warmup_ratio * total)` steps, then cosine decay
/// reaching zero at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: &mut Mat<f64>, g: &Mat<f64>, state: &mut OptimState<f64>, lr: f64, hp: &AdamW) -> Result<()> {
        let mut params = vec![("x.w".to_string(), p)];
        let grads = vec![("x.w".to_string(), g)];
        adamw_step(&mut params, &grads, state, lr, hp)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let g = p.zeros_like();
        let mut st = OptimState::new(&[("x.w".to_string(), &p)]);
        let hp = AdamW { weight_decay: 0.0, ..Default::default() };
        run(&mut p, &g, &mut st, 0.1, &hp).unwrap();
        assert_eq!(p.data, vec![0.5, -1.0, 2.0]);
        assert!(st.m[0].data.iter().chain(&st.v[0].data).all(|&x| x == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut p = Mat::from_vec(1, 2, vec![1.0, -3.0]);
        let g = p.zeros_like();
        let mut st = OptimState::new(&[("x.w".to_string(), &p)]);
        run(&mut p, &g, &mut st, 0.1, &AdamW::default()).unwrap();
        assert!((p.data[0] - 0.999).abs() < 1e-15);
        assert!((p.data[1] + 3.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Mat::from_vec(1, 1, vec![0.0]);
        let g = Mat::from_vec(1, 1, vec![1.0]);
        let mut st = OptimState::new(&[("x.w".to_string(), &p)]);
        let hp = AdamW { weight_decay: 0.0, ..Default::default() };
        run(&mut p, &g, &mut st, 1e-3, &hp).unwrap();
        assert!((p.data[0] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_group_and_leaves_params() {
        let mut p = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let g = Mat::from_vec(1, 2, vec![0.0, f64::NAN]);
        let mut st = OptimState::new(&[("x.w".to_string(), &p)]);
        let err = run(&mut p, &g, &mut st, 0.1, &AdamW::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref grp) if grp == "x"));
        assert_eq!(p.data, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let g = Mat::from_vec(2, 1, vec![0.0, 0.0]);
        let mut st = OptimState::new(&[("x.w".to_string(), &p)]);
        assert!(run(&mut p, &g, &mut st, 0.1, &AdamW::default()).is_err());
    }

    #[test]
    fn schedule_shape() {
        let base = 5e-5;
        assert_eq!(lr_schedule(0, 100, base, 0.1), 0.0);
        assert!((lr_schedule(5, 100, base, 0.1) - base / 2.0).abs() < 1e-18);
        assert!((lr_schedule(10, 100, base, 0.1) - base).abs() < 1e-18);
        assert!(lr_schedule(100, 100, base, 0.1).abs() < 1e-18);
        let mut prev = base;
        for s in 10..=100 {
            let lr = lr_schedule(s, 100, base, 0.1);
            assert!(lr <= prev + 1e-20);
            prev = lr;
        }
        assert_eq!(lr_schedule(0, 10, base, 0.0), base);
    }
}
