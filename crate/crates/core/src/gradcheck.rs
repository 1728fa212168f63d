//! Finite-difference verification of the training objectives. Used by the
//! test suites; kept in the library so every harness shares one checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ImageGrid, Intent, SlotLabel, SlotType};
use crate::encoders::ModelConfig;
use crate::error::Result;
use crate::lexicon::{TokenSeq, BOS, EOS};
use crate::nn::ParamSet;
use crate::train::{Example, Group, LossParts, ModelBundle};

/// Stencil half-width.
pub const H: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

pub const FIXTURE_VOCAB: usize = 12;

/// Worst error and gradient presence for one parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupReport {
    pub group: Group,
    pub max_rel_err: f64,
    pub has_gradient: bool,
}

/// Compares the analytic gradient of `f` with a five-point central
/// difference (truncation O(H^4)) for every scalar parameter.
/// Relative error is `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn check_gradients<L>(b: &ModelBundle<f64>, f: L) -> Result<Vec<GroupReport>>
where
    L: Fn(&ModelBundle<f64>) -> Result<(LossParts<f64>, ModelBundle<f64>)>,
{
    let (_, grad) = f(b)?;
    let analytic: Vec<(String, Vec<f64>)> = grad.tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let mut out: Vec<GroupReport> = Group::ALL
        .iter()
        .map(|&group| GroupReport {
            group,
            max_rel_err: 0.0,
            has_gradient: false,
        })
        .collect();
    let mut probe = b.clone();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let gi = Group::of_tensor(name).map_or(0, |g| g as usize);
        for (j, &av) in a.iter().enumerate() {
            let orig = probe.tensors()[ti].1.data[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.tensors_mut()[ti].1.data[j] = x;
                Ok(f(&probe)?.0.total)
            };
            let num = (at(orig - 2.0 * H)? - 8.0 * at(orig - H)? + 8.0 * at(orig + H)? - at(orig + 2.0 * H)?) / (12.0 * H);
            probe.tensors_mut()[ti].1.data[j] = orig;
            let err = (av - num).abs() / av.abs().max(num.abs()).max(FLOOR);
            let r = &mut out[gi];
            r.max_rel_err = r.max_rel_err.max(err);
            r.has_gradient |= av.abs() > FLOOR;
        }
    }
    Ok(out)
}

fn three(word: u32) -> TokenSeq {
    TokenSeq::new(vec![BOS, word, EOS], FIXTURE_VOCAB, 8).expect("fixture ids are in range")
}

/// `n` three-token examples with random images over a 12-word vocabulary.
/// Element 1 is chitchat, so retrieval-only and all-element terms differ.
pub fn fixture_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = FIXTURE_VOCAB as u32 - 4;
    (0..n)
        .map(|i| {
            let w = 4 + i as u32 % span;
            let chat = i == 1;
            let intent = match (chat, i % 2) {
                (true, _) => Intent::Chitchat,
                (false, 0) => Intent::FindPhoto,
                _ => Intent::FindDocument,
            };
            let mid = if chat { SlotLabel::O } else { SlotLabel::B(SlotType::Color) };
            let pixels = (0..ImageGrid::LEN).map(|_| rng.random::<f32>()).collect();
            Example {
                scene_id: i as u32,
                class_id: i as u32,
                lang: 0,
                caption: three(w),
                chunk: three(4 + (i as u32 + 3) % span),
                query: three(w),
                semantic: if chat {
                    TokenSeq::new(vec![BOS, EOS], FIXTURE_VOCAB, 8).expect("fixture ids are in range")
                } else {
                    three(w)
                },
                intent: intent.index(),
                slots: vec![SlotLabel::O.index(), mid.index(), SlotLabel::O.index()],
                image: ImageGrid::new(pixels).expect("fixture image size"),
            }
        })
        .collect()
}

/// Tiny f64 bundle (`d_model = 8`, one layer) whose fusion output
/// projection is non-zero, so every fusion parameter receives gradient.
pub fn fixture_bundle(seed: u64) -> Result<ModelBundle<f64>> {
    let mut b = ModelBundle::<f64>::new(&ModelConfig::tiny(FIXTURE_VOCAB), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in b.fusion.attn.o.w.data.iter_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    Ok(b)
}
