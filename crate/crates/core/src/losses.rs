//! Region-weighted distillation losses over a student's prompt contexts.
//!
//! Every loss is recorded on one [`Tape`] whose single parameter leaf holds
//! `[positive contexts; negative contexts]`, so a single backward pass yields
//! the gradient of any term or of the weighted total.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Flagged, Tape, Var};
use crate::student::{StudentState, TextGraph};

/// One training crop: feature, densified soft label, information weight and
/// pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub feature: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: f64,
    pub pseudo_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_neg: f64,
    pub lambda_diff1: f64,
    pub lambda_diff2: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_neg: 1.0,
            lambda_diff1: 0.5,
            lambda_diff2: 0.5,
            alpha: 1.0,
            delta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loss.lambda_neg", self.lambda_neg),
            ("loss.lambda_diff1", self.lambda_diff1),
            ("loss.lambda_diff2", self.lambda_diff2),
            ("loss.alpha", self.alpha),
            ("loss.delta", self.delta),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.delta >= 1.0 {
            return Err(Error::config("loss.delta must be below 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_diff1: f64,
    pub l_diff2: f64,
    pub l_total: f64,
    pub gradient: Vec<f64>,
    /// Items dropped from the first-order term for a degenerate difference.
    pub diff1_skipped: usize,
    /// Label-distinct ordered pairs dropped for a degenerate difference.
    pub diff2_skipped: usize,
    /// Set when the batch is too small for the pairwise term.
    pub diff2_undefined: bool,
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub pos: Var,
    pub neg: Var,
    pub diff1: Var,
    pub diff2: Var,
    pub total: Var,
    pub diff1_skipped: usize,
    pub diff2_skipped: usize,
    pub diff2_undefined: bool,
}

/// `Σᵢ wᵢ·KL(tᵢ ‖ pᵢ)`
pub fn pos_term(tape: &mut Tape, targets: &[Vec<f64>], weights: &[f64], probs: &[Var]) -> Var {
    let parts: Vec<Var> = targets
        .iter()
        .zip(weights)
        .zip(probs)
        .map(|((t, &w), &p)| {
            let kl = tape.kl_div(t, p);
            tape.scale(kl, w)
        })
        .collect();
    tape.sum(&parts)
}

/// `Σᵢ (1−wᵢ)·KL(U ‖ p̄ᵢ)`
pub fn neg_term(tape: &mut Tape, weights: &[f64], probs: &[Var]) -> Var {
    let parts: Vec<Var> = weights
        .iter()
        .zip(probs)
        .map(|(&w, &p)| {
            let c = tape.value(p).len();
            let kl = tape.kl_div(&vec![1.0 / c as f64; c], p);
            tape.scale(kl, 1.0 - w)
        })
        .collect();
    tape.sum(&parts)
}

/// `−(1/N)·Σᵢ [(1−wᵢ)·Sᵢ + α·wᵢ·(1 − Sᵢ)]` over the items whose similarity
/// exists; `N` counts only those items.
pub fn diff1_term(tape: &mut Tape, sims: &[Option<Var>], weights: &[f64], alpha: f64) -> Var {
    let mut parts = Vec::new();
    for (s, &w) in sims.iter().zip(weights) {
        let Some(s) = *s else { continue };
        // (1−w)·S + αw·(1−S) = (1 − w − αw)·S + αw
        let lin = tape.scale(s, 1.0 - w - alpha * w);
        let c = tape.constant_scalar(alpha * w);
        parts.push(tape.add(lin, c));
    }
    if parts.is_empty() {
        return tape.constant_scalar(0.0);
    }
    let n = parts.len() as f64;
    let total = tape.sum(&parts);
    tape.scale(total, -1.0 / n)
}

/// One ordered pair of the second-order term.
#[derive(Debug, Clone, Copy)]
pub struct PairTerm {
    pub similarity: Var,
    pub weight_i: f64,
    pub weight_j: f64,
}

/// `(1/(N(N−1)))·Σ wᵢ·wⱼ·max(0, S + δ)` over the supplied label-distinct
/// ordered pairs.
pub fn diff2_term(tape: &mut Tape, pairs: &[PairTerm], batch_size: usize, delta: f64) -> Var {
    if batch_size < 2 {
        return tape.constant_scalar(0.0);
    }
    let d = tape.constant_scalar(delta);
    let parts: Vec<Var> = pairs
        .iter()
        .map(|p| {
            let shifted = tape.add(p.similarity, d);
            let hinge = tape.relu(shifted);
            tape.scale(hinge, p.weight_i * p.weight_j)
        })
        .collect();
    let total = tape.sum(&parts);
    tape.scale(total, 1.0 / (batch_size * (batch_size - 1)) as f64)
}

/// Per-class first-order differences between the positive and negative
/// text spaces.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub raw: Vec<Vec<f64>>,
    pub unit: Vec<Flagged<Vec<f64>>>,
}

pub fn first_order_diffs(state: &StudentState) -> FirstOrder {
    let pos = state.text_embeddings(crate::student::PromptKind::Positive);
    let neg = state.text_embeddings(crate::student::PromptKind::Negative);
    let raw: Vec<Vec<f64>> = pos
        .iter()
        .zip(&neg)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let unit = raw.iter().map(|d| l2_normalize(d)).collect();
    FirstOrder { raw, unit }
}

/// Normalized `D⁽¹⁾_c − D⁽¹⁾_{c′}` from unnormalized first-order vectors.
pub fn second_order_diff(first: &FirstOrder, c: usize, c_prime: usize) -> Result<Flagged<Vec<f64>>> {
    if c == c_prime {
        return Err(Error::InvalidInput("second-order difference needs two distinct classes".into()));
    }
    let n = first.raw.len();
    if c >= n || c_prime >= n {
        return Err(Error::InvalidInput(format!("class pair ({c}, {c_prime}) out of range for {n} classes")));
    }
    let d: Vec<f64> = first.raw[c].iter().zip(&first.raw[c_prime]).map(|(a, b)| a - b).collect();
    Ok(l2_normalize(&d))
}

fn validate_batch(state: &StudentState, batch: &[BatchItem]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let c = state.class_count();
    for (i, item) in batch.iter().enumerate() {
        if item.target.len() != c {
            return Err(Error::Shape { expected: c, actual: item.target.len() });
        }
        if item.pseudo_label >= c {
            return Err(Error::InvalidInput(format!("item {i}: pseudo-label {} out of range", item.pseudo_label)));
        }
        if !(0.0..=1.0).contains(&item.weight) {
            return Err(Error::InvalidInput(format!("item {i}: weight {} outside [0, 1]", item.weight)));
        }
    }
    Ok(())
}

/// Records the class probabilities of every item under one prompt.
fn record_probs(tape: &mut Tape, feats: &[Var], text: &[Var], tau: f64) -> Vec<Var> {
    feats
        .iter()
        .map(|&f| {
            let sims: Vec<Var> = text.iter().map(|&t| tape.cosine(f, t)).collect();
            let logits = tape.concat(&sims);
            tape.softmax(logits, tau)
        })
        .collect()
}

fn record_features(tape: &mut Tape, state: &StudentState, batch: &[BatchItem]) -> Result<Vec<Var>> {
    batch
        .iter()
        .map(|item| {
            let f = state.image_embedding(&item.feature)?.value;
            Ok(tape.constant(f))
        })
        .collect()
}

/// Records all four terms and their weighted total.
pub fn record_terms(
    tape: &mut Tape,
    state: &StudentState,
    theta: Var,
    batch: &[BatchItem],
    config: &LossConfig,
) -> Result<LossTerms> {
    validate_batch(state, batch)?;
    let text: TextGraph = state.record_text(tape, theta);
    let feats = record_features(tape, state, batch)?;
    let weights: Vec<f64> = batch.iter().map(|b| b.weight).collect();
    let targets: Vec<Vec<f64>> = batch.iter().map(|b| b.target.clone()).collect();

    let p = record_probs(tape, &feats, &text.positive, state.tau);
    let pos = pos_term(tape, &targets, &weights, &p);
    let p_bar = record_probs(tape, &feats, &text.negative, state.tau);
    let neg = neg_term(tape, &weights, &p_bar);

    // first-order differences, raw and unit, per class
    let c = state.class_count();
    let raw: Vec<Var> = (0..c).map(|k| tape.sub(text.positive[k], text.negative[k])).collect();
    let unit: Vec<(Var, bool)> = raw.iter().map(|&d| tape.normalize(d)).collect();
    let mut diff1_skipped = 0;
    let sims1: Vec<Option<Var>> = batch
        .iter()
        .zip(&feats)
        .map(|(item, &f)| {
            let (d, degenerate) = unit[item.pseudo_label];
            if degenerate {
                diff1_skipped += 1;
                None
            } else {
                Some(tape.cosine(f, d))
            }
        })
        .collect();
    let diff1 = diff1_term(tape, &sims1, &weights, config.alpha);

    let n = batch.len();
    let mut second: HashMap<(usize, usize), (Var, bool)> = HashMap::new();
    let mut pairs = Vec::new();
    let mut diff2_skipped = 0;
    if n >= 2 {
        for (i, a) in batch.iter().enumerate() {
            for (j, b) in batch.iter().enumerate() {
                if a.pseudo_label == b.pseudo_label || i == j {
                    continue;
                }
                // zero-weight pairs contribute nothing and need no graph
                if a.weight == 0.0 || b.weight == 0.0 {
                    continue;
                }
                let key = (a.pseudo_label, b.pseudo_label);
                let (d2, degenerate) = *second.entry(key).or_insert_with(|| {
                    let d = tape.sub(raw[key.0], raw[key.1]);
                    tape.normalize(d)
                });
                if degenerate {
                    diff2_skipped += 1;
                    continue;
                }
                pairs.push(PairTerm {
                    similarity: tape.cosine(feats[i], d2),
                    weight_i: a.weight,
                    weight_j: b.weight,
                });
            }
        }
    }
    let diff2 = diff2_term(tape, &pairs, n, config.delta);

    let parts = [
        pos,
        tape.scale(neg, config.lambda_neg),
        tape.scale(diff1, config.lambda_diff1),
        tape.scale(diff2, config.lambda_diff2),
    ];
    let total = tape.sum(&parts);
    Ok(LossTerms {
        pos,
        neg,
        diff1,
        diff2,
        total,
        diff1_skipped,
        diff2_skipped,
        diff2_undefined: n < 2,
    })
}

fn evaluate_term(
    state: &StudentState,
    batch: &[BatchItem],
    config: &LossConfig,
    pick: impl Fn(&LossTerms) -> Var,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta = tape.param(state.params());
    let terms = record_terms(&mut tape, state, theta, batch, config)?;
    let out = pick(&terms);
    let grads = tape.backward(out);
    Ok((tape.scalar(out), grads.wrt(theta)))
}

pub fn loss_pos(state: &StudentState, batch: &[BatchItem]) -> Result<(f64, Vec<f64>)> {
    evaluate_term(state, batch, &LossConfig::default(), |t| t.pos)
}

pub fn loss_neg(state: &StudentState, batch: &[BatchItem]) -> Result<(f64, Vec<f64>)> {
    evaluate_term(state, batch, &LossConfig::default(), |t| t.neg)
}

pub fn loss_diff1(state: &StudentState, batch: &[BatchItem], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let config = LossConfig { alpha, ..LossConfig::default() };
    evaluate_term(state, batch, &config, |t| t.diff1)
}

pub fn loss_diff2(state: &StudentState, batch: &[BatchItem], delta: f64) -> Result<(f64, Vec<f64>)> {
    let config = LossConfig { delta, ..LossConfig::default() };
    evaluate_term(state, batch, &config, |t| t.diff2)
}

/// Weighted total with its parts and the gradient from one backward pass.
pub fn loss_total(state: &StudentState, batch: &[BatchItem], config: &LossConfig) -> Result<LossReport> {
    config.validate()?;
    let mut tape = Tape::new();
    let theta = tape.param(state.params());
    let t = record_terms(&mut tape, state, theta, batch, config)?;
    let grads = tape.backward(t.total);
    let l_total = tape.scalar(t.total);
    if !l_total.is_finite() {
        return Err(Error::Numeric {
            coordinate: 0,
            detail: format!("total loss {l_total}"),
        });
    }
    Ok(LossReport {
        l_pos: tape.scalar(t.pos),
        l_neg: tape.scalar(t.neg),
        l_diff1: tape.scalar(t.diff1),
        l_diff2: tape.scalar(t.diff2),
        l_total,
        gradient: grads.wrt(theta),
        diff1_skipped: t.diff1_skipped,
        diff2_skipped: t.diff2_skipped,
        diff2_undefined: t.diff2_undefined,
    })
}

/// Records `−mean log pᵢ(lᵢ)` under the positive prompt.
pub fn record_native_ce(
    tape: &mut Tape,
    state: &StudentState,
    theta: Var,
    batch: &[(Vec<f64>, usize)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let c = state.class_count();
    if let Some((_, l)) = batch.iter().find(|(_, l)| *l >= c) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {c} classes")));
    }
    let text = state.record_text(tape, theta);
    let mut parts = Vec::with_capacity(batch.len());
    for (x, label) in batch {
        let f = state.image_embedding(x)?.value;
        let f = tape.constant(f);
        let p = record_probs(tape, &[f], &text.positive, state.tau)[0];
        let lp = tape.log(p);
        let pick = tape.slice(lp, *label, 1);
        parts.push(pick);
    }
    let total = tape.sum(&parts);
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

pub fn loss_native_ce(state: &StudentState, batch: &[(Vec<f64>, usize)]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta = tape.param(state.params());
    let out = record_native_ce(&mut tape, state, theta, batch)?;
    let grads = tape.backward(out);
    Ok((tape.scalar(out), grads.wrt(theta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, Matrix};
    use crate::student::DualEncoder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(c: usize, n: usize, l: usize, d: usize, seed: u64) -> (StudentState, Vec<BatchItem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || rng.gen_range(-1.0..1.0);
        let tokens: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| normal()).collect()).collect();
        let pos: Vec<f64> = (0..l * d).map(|_| 0.5 * normal()).collect();
        let neg: Vec<f64> = (0..l * d).map(|_| 0.5 * normal()).collect();
        let state = StudentState::from_parts(
            DualEncoder::random(6, d, seed ^ 0xABCD),
            Matrix::from_rows(&tokens).unwrap(),
            pos,
            neg,
            l,
            // moderate temperature keeps finite differences well conditioned
            0.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let batch = (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                BatchItem {
                    feature: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    target: raw.iter().map(|v| v / s).collect(),
                    weight: rng.gen_range(0.0..1.0),
                    pseudo_label: i % c,
                }
            })
            .collect();
        (state, batch)
    }

    fn value(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.scalar(v)
    }

    #[test]
    fn pos_term_hand_values() {
        let v = value(|t| {
            let p = t.constant(vec![0.5, 0.5]);
            pos_term(t, &[vec![1.0, 0.0]], &[1.0], &[p])
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = value(|t| {
            let p = t.constant(vec![0.2, 0.8]);
            pos_term(t, &[vec![0.2, 0.8]], &[1.0], &[p])
        });
        assert!(v.abs() < 1e-15);
        let v = value(|t| {
            let p = t.constant(vec![0.9, 0.1]);
            pos_term(t, &[vec![0.1, 0.9]], &[0.0], &[p])
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn neg_term_hand_values() {
        let v = value(|t| {
            let p = t.constant(vec![0.9, 0.1]);
            neg_term(t, &[0.0], &[p])
        });
        let want = 0.5 * (25.0f64 / 9.0).ln();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        let v = value(|t| {
            let p = t.constant(vec![0.25; 4]);
            neg_term(t, &[0.3], &[p])
        });
        assert!(v.abs() < 1e-15);
        let v = value(|t| {
            let p = t.constant(vec![0.9, 0.1]);
            neg_term(t, &[1.0], &[p])
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn diff1_term_hand_values() {
        let one = |w: f64, alpha: f64, s: f64| {
            value(|t| {
                let s = t.constant_scalar(s);
                diff1_term(t, &[Some(s)], &[w], alpha)
            })
        };
        assert!((one(0.0, 1.0, 1.0) + 1.0).abs() < 1e-15);
        assert!(one(1.0, 1.0, 1.0).abs() < 1e-15);
        assert!((one(0.5, 2.0, 0.2) + 0.9).abs() < 1e-12);
        // skipped items do not count toward N
        let v = value(|t| {
            let s = t.constant_scalar(1.0);
            diff1_term(t, &[None, Some(s)], &[0.7, 0.0], 1.0)
        });
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn diff2_term_hand_values() {
        let v = value(|t| {
            let s1 = t.constant_scalar(0.3);
            let s2 = t.constant_scalar(-0.5);
            let pairs = [
                PairTerm { similarity: s1, weight_i: 1.0, weight_j: 1.0 },
                PairTerm { similarity: s2, weight_i: 1.0, weight_j: 1.0 },
            ];
            diff2_term(t, &pairs, 2, 0.1)
        });
        assert!((v - 0.2).abs() < 1e-12);
        assert_eq!(value(|t| diff2_term(t, &[], 1, 0.1)), 0.0);
    }

    #[test]
    fn identical_prompts_flag_every_first_order_difference() {
        let (mut s, batch) = instance(3, 4, 2, 5, 1);
        let theta = s.params();
        let half = theta.len() / 2;
        let mut same = theta[..half].to_vec();
        same.extend_from_slice(&theta[..half]);
        s.set_params(&same).unwrap();
        let first = first_order_diffs(&s);
        assert!(first.unit.iter().all(|u| u.degenerate && u.value.iter().all(|&v| v == 0.0)));
        let r = loss_total(&s, &batch, &LossConfig::default()).unwrap();
        assert_eq!(r.diff1_skipped, 4);
        assert_eq!(r.l_diff1, 0.0);
        assert_eq!(r.l_diff2, 0.0);
        assert!(r.l_total.is_finite());
    }

    #[test]
    fn first_and_second_order_geometry() {
        let (s, _) = instance(4, 2, 2, 6, 3);
        let first = first_order_diffs(&s);
        for u in &first.unit {
            assert!(!u.degenerate);
            assert!((crate::numerics::norm(&u.value) - 1.0).abs() < 1e-10);
        }
        let a = second_order_diff(&first, 0, 2).unwrap();
        let b = second_order_diff(&first, 2, 0).unwrap();
        assert!((crate::numerics::norm(&a.value) - 1.0).abs() < 1e-10);
        for (x, y) in a.value.iter().zip(&b.value) {
            assert_eq!(*x, -*y);
        }
        assert!(second_order_diff(&first, 1, 1).is_err());
        let twin = FirstOrder { raw: vec![first.raw[0].clone(), first.raw[0].clone()], unit: vec![] };
        assert!(second_order_diff(&twin, 0, 1).unwrap().degenerate);
    }

    #[test]
    fn tape_and_plain_first_order_agree() {
        let (s, _) = instance(3, 2, 2, 5, 9);
        let first = first_order_diffs(&s);
        let mut tape = Tape::new();
        let theta = tape.param(s.params());
        let g = s.record_text(&mut tape, theta);
        for c in 0..3 {
            let d = tape.sub(g.positive[c], g.negative[c]);
            let (u, _) = tape.normalize(d);
            for (a, b) in tape.value(u).iter().zip(&first.unit[c].value) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_lambdas_leave_only_the_positive_term() {
        let (s, batch) = instance(3, 4, 2, 5, 4);
        let cfg = LossConfig { lambda_neg: 0.0, lambda_diff1: 0.0, lambda_diff2: 0.0, ..LossConfig::default() };
        let r = loss_total(&s, &batch, &cfg).unwrap();
        assert_eq!(r.l_total, r.l_pos);
    }

    #[test]
    fn report_decomposition_identity() {
        let cfg = LossConfig { lambda_neg: 0.7, lambda_diff1: 1.3, lambda_diff2: 2.1, alpha: 0.4, delta: 0.05 };
        for seed in 0..10 {
            let (s, batch) = instance(4, 5, 2, 6, seed);
            let r = loss_total(&s, &batch, &cfg).unwrap();
            let sum = r.l_pos + cfg.lambda_neg * r.l_neg + cfg.lambda_diff1 * r.l_diff1 + cfg.lambda_diff2 * r.l_diff2;
            assert!((r.l_total - sum).abs() <= 1e-10);
        }
    }

    #[test]
    fn diff2_needs_pairs_and_distinct_labels() {
        let (s, mut batch) = instance(3, 4, 2, 5, 6);
        let r = loss_total(&s, &batch[..1], &LossConfig::default()).unwrap();
        assert!(r.diff2_undefined);
        assert_eq!(r.l_diff2, 0.0);
        batch.iter_mut().for_each(|b| b.pseudo_label = 1);
        assert_eq!(loss_diff2(&s, &batch, 0.1).unwrap().0, 0.0);
    }

    #[test]
    fn zero_weights_zero_the_pos_and_diff2_gradients() {
        let (s, mut batch) = instance(3, 4, 2, 5, 8);
        batch.iter_mut().for_each(|b| b.weight = 0.0);
        let (v, g) = loss_pos(&s, &batch).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = loss_diff2(&s, &batch, 0.1).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        batch.iter_mut().for_each(|b| b.weight = 1.0);
        assert_eq!(loss_neg(&s, &batch).unwrap().0, 0.0);
    }

    #[test]
    fn native_ce_hand_values() {
        let enc = DualEncoder::random(6, 4, 1);
        let tokens = Matrix::from_rows(&[vec![1.0, 0.0, 0.5, 0.0], vec![1.0, 0.0, 0.5, 0.0]]).unwrap();
        let s = StudentState::from_parts(enc, tokens, vec![0.1; 4], vec![0.2; 4], 1, 0.07).unwrap();
        let (v, _) = loss_native_ce(&s, &[(vec![0.3; 6], 0), (vec![-1.0; 6], 1)]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let one = StudentState::from_parts(
            DualEncoder::random(6, 4, 2),
            Matrix::from_rows(&[vec![1.0, 2.0, 0.0, 0.0]]).unwrap(),
            vec![0.1; 4],
            vec![0.2; 4],
            1,
            0.07,
        )
        .unwrap();
        assert_eq!(loss_native_ce(&one, &[(vec![0.3; 6], 0)]).unwrap().0, 0.0);
        assert!(loss_native_ce(&one, &[(vec![0.3; 6], 1)]).is_err());
    }

    fn check(pick: fn(&LossTerms) -> Var, cfg: LossConfig) {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let c = 2 + (seed as usize % 4);
            let n = 2 + (seed as usize % 3);
            let (s, batch) = instance(c, n, 2, 8, 1000 + seed);
            let gc = check_gradients(
                |tape, theta| pick(&record_terms(tape, &s, theta, &batch, &cfg).unwrap()),
                &s.params(),
                1e-5,
            )
            .unwrap();
            worst = worst.max(gc.max_rel_error);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        check(|t| t.pos, cfg);
        check(|t| t.neg, cfg);
        check(|t| t.diff1, cfg);
        check(|t| t.diff2, cfg);
        check(|t| t.total, cfg);
    }

    #[test]
    fn native_ce_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (s, batch) = instance(3, 4, 2, 8, 50 + seed);
            let pairs: Vec<(Vec<f64>, usize)> = batch.iter().map(|b| (b.feature.clone(), b.pseudo_label)).collect();
            let gc = check_gradients(
                |tape, theta| record_native_ce(tape, &s, theta, &pairs).unwrap(),
                &s.params(),
                1e-5,
            )
            .unwrap();
            assert!(gc.max_rel_error <= 1e-4, "{gc:?}");
        }
    }

    #[test]
    fn small_step_along_negative_gradient_decreases_total() {
        for seed in 0..10 {
            let (mut s, batch) = instance(3, 4, 2, 6, 300 + seed);
            let cfg = LossConfig::default();
            let r = loss_total(&s, &batch, &cfg).unwrap();
            let theta = s.params();
            let decreased = [1e-3, 1e-4, 1e-5].iter().any(|&step| {
                let moved: Vec<f64> = theta.iter().zip(&r.gradient).map(|(t, g)| t - step * g).collect();
                s.set_params(&moved).unwrap();
                loss_total(&s, &batch, &cfg).unwrap().l_total < r.l_total
            });
            assert!(decreased, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_diff1_bounded(seed in 0u64..500, alpha in 0.0f64..3.0) {
            let (s, batch) = instance(3, 4, 2, 5, seed);
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let r = loss_total(&s, &batch, &cfg).unwrap();
            prop_assert!(r.l_pos >= -1e-12);
            prop_assert!(r.l_neg >= -1e-12);
            prop_assert!(r.l_diff2 >= 0.0);
            // per item (1−w)S + αw(1−S) lies in [−1, 2α] since 1 − S ≤ 2
            prop_assert!(r.l_diff1.abs() <= (2.0 * alpha).max(1.0) + 1e-12);
        }

        #[test]
        fn diff2_is_permutation_invariant(seed in 0u64..200, shift in 1usize..5) {
            let (s, batch) = instance(3, 5, 2, 5, seed);
            let mut rotated = batch.clone();
            rotated.rotate_left(shift);
            rotated.swap(0, 1);
            let a = loss_diff2(&s, &batch, 0.1).unwrap().0;
            let b = loss_diff2(&s, &rotated, 0.1).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
