//! Training objectives and their analytic gradients.
//!
//! Classification uses a prototype softmax head, `p(c|x) = softmax(x·μ_c / t)`.
//! Loss gradients are first taken with respect to the predicted
//! probabilities and then pulled back to the embedding with
//! [`head_backprop`].

use serde::{Deserialize, Serialize};

use crate::energy::FeatureBank;
use crate::error::{Error, Result};
use crate::sphere::{dot, normalize, UnitVector};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// `None` for classes with no bank mass.
    pub prototypes: Vec<Option<UnitVector>>,
    pub support: Vec<usize>,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Classes that carry a prototype, in class order.
    pub fn present(&self) -> impl Iterator<Item = (usize, &UnitVector)> {
        self.prototypes.iter().enumerate().filter_map(|(c, p)| p.as_ref().map(|p| (c, p)))
    }

    pub fn get(&self, class: usize) -> Option<&UnitVector> {
        self.prototypes.get(class).and_then(Option::as_ref)
    }
}

/// Which views fill the denominator of the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveNegatives {
    /// Other anchors' first views, plus the positive.
    #[default]
    FirstViews,
    /// Both views of every other anchor, plus the positive.
    BothViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_reg: f64,
    pub lambda_c: f64,
    pub lambda_hambr: f64,
    pub tau_loss: f64,
    pub tau_con: f64,
    pub sharpen_t: f64,
    pub gce_q: f64,
    pub negatives: ContrastiveNegatives,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 1.0,
            lambda_reg: 1.0,
            lambda_c: 0.1,
            lambda_hambr: 0.5,
            tau_loss: 0.1,
            tau_con: 0.5,
            sharpen_t: 0.5,
            gce_q: 0.7,
            negatives: ContrastiveNegatives::FirstViews,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_u, self.lambda_reg, self.lambda_c, self.lambda_hambr];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        for (name, t) in [("tau_loss", self.tau_loss), ("tau_con", self.tau_con), ("sharpen_t", self.sharpen_t)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::Config(format!("gce_q must lie in (0, 1], got {}", self.gce_q)));
        }
        Ok(())
    }
}

/// Per-term values of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub loss_con: f64,
    pub loss_hambr: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.loss_x + w.lambda_u * c.loss_u + w.lambda_reg * c.loss_reg + w.lambda_c * c.loss_con + w.lambda_hambr * c.loss_hambr
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub fn gce_loss(p_correct: f64, q: f64) -> Result<f64> {
    if !(p_correct > 0.0) {
        return Err(Error::Domain(format!("GCE needs a positive probability, got {p_correct}")));
    }
    Ok((1.0 - p_correct.powf(q)) / q)
}

/// Derivative of [`gce_loss`] with respect to `p_correct`.
pub fn gce_dp(p_correct: f64, q: f64) -> f64 {
    -p_correct.max(PROB_CLAMP).powf(q - 1.0)
}

/// InfoNCE-style loss of `x` against its prototype, with the virtual
/// outliers as negatives.
pub fn hambr_loss(x: &UnitVector, proto: &UnitVector, outliers: &[UnitVector], tau: f64) -> f64 {
    if outliers.is_empty() {
        return 0.0;
    }
    let mut logits = Vec::with_capacity(outliers.len() + 1);
    logits.push(x.dot(proto) / tau);
    logits.extend(outliers.iter().map(|v| x.dot(v) / tau));
    log_sum_exp(&logits) - logits[0]
}

/// Euclidean gradient of [`hambr_loss`] with respect to `x`.
pub fn hambr_grad(x: &UnitVector, proto: &UnitVector, outliers: &[UnitVector], tau: f64) -> Vec<f64> {
    hambr_grad_raw(x.as_slice(), proto, outliers, tau)
}

fn hambr_grad_raw(x: &[f64], proto: &UnitVector, outliers: &[UnitVector], tau: f64) -> Vec<f64> {
    let d = x.len();
    if outliers.is_empty() {
        return vec![0.0; d];
    }
    let mut logits = Vec::with_capacity(outliers.len() + 1);
    logits.push(dot(x, proto.as_slice()) / tau);
    logits.extend(outliers.iter().map(|v| dot(x, v.as_slice()) / tau));
    let p = softmax(&logits);
    let mut g: Vec<f64> = proto.as_slice().iter().map(|m| -(1.0 - p[0]) * m / tau).collect();
    for (pj, v) in p[1..].iter().zip(outliers) {
        for (gi, vi) in g.iter_mut().zip(v.as_slice()) {
            *gi += pj * vi / tau;
        }
    }
    g
}

/// Cross entropy of a (possibly soft) label against a prediction.
pub fn ce_loss(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::DimensionMismatch {
            expected: label.len(),
            got: pred.len(),
        });
    }
    let mut total = 0.0;
    for (c, (&p, &y)) in pred.iter().zip(label).enumerate() {
        if y > 0.0 {
            if !(p > 0.0) {
                return Err(Error::Domain(format!("zero predicted probability for supported class {c}")));
            }
            total -= y * p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
        }
    }
    Ok(total)
}

/// Derivative of [`ce_loss`] with respect to each predicted probability.
pub fn ce_dp(pred: &[f64], label: &[f64]) -> Vec<f64> {
    pred.iter().zip(label).map(|(p, y)| -y / p.max(PROB_CLAMP)).collect()
}

pub fn consistency_mse(guess: &[f64], pred: &[f64]) -> f64 {
    guess.iter().zip(pred).map(|(g, p)| (g - p) * (g - p)).sum()
}

/// Derivative of [`consistency_mse`] with respect to `pred`.
pub fn consistency_mse_dp(guess: &[f64], pred: &[f64]) -> Vec<f64> {
    guess.iter().zip(pred).map(|(g, p)| 2.0 * (p - g)).collect()
}

pub fn sharpen(q: &[f64], t: f64) -> Vec<f64> {
    let logs: Vec<f64> = q.iter().map(|p| if *p > 0.0 { p.ln() / t } else { f64::NEG_INFINITY }).collect();
    softmax(&logs)
}

fn batch_mean(preds: &[Vec<f64>]) -> Vec<f64> {
    let c = preds[0].len();
    let mut mean = vec![0.0; c];
    for p in preds {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= preds.len() as f64);
    mean
}

/// KL divergence from the uniform prior to the batch-mean prediction.
pub fn reg_loss(preds: &[Vec<f64>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mean = batch_mean(preds);
    let pi = 1.0 / mean.len() as f64;
    Ok(mean.iter().map(|m| pi * (pi / m.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).ln()).sum())
}

/// Derivative of [`reg_loss`] with respect to any single member's
/// prediction (identical for every member of the batch).
pub fn reg_loss_dp(preds: &[Vec<f64>]) -> Vec<f64> {
    let mean = batch_mean(preds);
    let pi = 1.0 / mean.len() as f64;
    let n = preds.len() as f64;
    mean.iter().map(|m| -pi / (n * m.max(PROB_CLAMP))).collect()
}

fn contrastive_check(pairs: &[(UnitVector, UnitVector)]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientBatch(pairs.len()));
    }
    Ok(())
}

/// Denominator members for anchor `i` as (pair index, is second view),
/// positive first.
fn contrastive_members(i: usize, n: usize, mode: ContrastiveNegatives) -> Vec<(usize, bool)> {
    let mut out = vec![(i, true)];
    for k in (0..n).filter(|&k| k != i) {
        out.push((k, false));
        if mode == ContrastiveNegatives::BothViews {
            out.push((k, true));
        }
    }
    out
}

fn view(pairs: &[(UnitVector, UnitVector)], (k, second): (usize, bool)) -> &UnitVector {
    if second {
        &pairs[k].1
    } else {
        &pairs[k].0
    }
}

/// Per-anchor contrastive terms.
pub fn contrastive_terms(pairs: &[(UnitVector, UnitVector)], tau: f64, mode: ContrastiveNegatives) -> Result<Vec<f64>> {
    contrastive_check(pairs)?;
    Ok((0..pairs.len())
        .map(|i| {
            let logits: Vec<f64> = contrastive_members(i, pairs.len(), mode)
                .into_iter()
                .map(|m| pairs[i].0.dot(view(pairs, m)) / tau)
                .collect();
            log_sum_exp(&logits) - logits[0]
        })
        .collect())
}

pub fn contrastive_loss(pairs: &[(UnitVector, UnitVector)], tau: f64, mode: ContrastiveNegatives) -> Result<f64> {
    let terms = contrastive_terms(pairs, tau, mode)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Euclidean gradients of [`contrastive_loss`] with respect to every first
/// and second view.
pub fn contrastive_grad(
    pairs: &[(UnitVector, UnitVector)],
    tau: f64,
    mode: ContrastiveNegatives,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    contrastive_check(pairs)?;
    let n = pairs.len();
    let d = pairs[0].0.dim();
    let scale = 1.0 / (n as f64 * tau);
    let mut g_first = vec![vec![0.0; d]; n];
    let mut g_second = vec![vec![0.0; d]; n];
    for i in 0..n {
        let members = contrastive_members(i, n, mode);
        let logits: Vec<f64> = members.iter().map(|&m| pairs[i].0.dot(view(pairs, m)) / tau).collect();
        let p = softmax(&logits);
        let anchor = pairs[i].0.as_slice().to_vec();
        // d/d anchor: -z_i' + Σ p_m z_m
        for (gi, zi) in g_first[i].iter_mut().zip(pairs[i].1.as_slice()) {
            *gi -= scale * zi;
        }
        for (&m, &pm) in members.iter().zip(&p) {
            let zm = view(pairs, m).as_slice();
            for (gi, zi) in g_first[i].iter_mut().zip(zm) {
                *gi += scale * pm * zi;
            }
            let target = if m.1 { &mut g_second[m.0] } else { &mut g_first[m.0] };
            let coeff = if m == (i, true) { pm - 1.0 } else { pm };
            for (gi, ai) in target.iter_mut().zip(&anchor) {
                *gi += scale * coeff * ai;
            }
        }
    }
    Ok((g_first, g_second))
}

/// Prototype softmax `softmax(x·μ_c / t)` over classes with a prototype;
/// classes without one get probability zero.
pub fn head_probs(x: &[f64], protos: &PrototypeSet, t: f64) -> Vec<f64> {
    let logits: Vec<f64> = protos
        .prototypes
        .iter()
        .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |mu| dot(x, mu.as_slice()) / t))
        .collect();
    softmax(&logits)
}

/// Pulls a gradient with respect to the head probabilities back to the
/// embedding `x`.
pub fn head_backprop(dl_dp: &[f64], probs: &[f64], protos: &PrototypeSet, t: f64) -> Vec<f64> {
    let inner: f64 = dl_dp.iter().zip(probs).map(|(g, p)| g * p).sum();
    let mut grad = vec![0.0; protos.prototypes.iter().flatten().next().map_or(0, |p| p.dim())];
    for (c, mu) in protos.present() {
        let dl_dlogit = probs[c] * (dl_dp[c] - inner);
        for (gi, mi) in grad.iter_mut().zip(mu.as_slice()) {
            *gi += dl_dlogit * mi / t;
        }
    }
    grad
}

/// Per-class normalized weighted mean of the bank features.
pub fn compute_prototypes(bank: &FeatureBank) -> PrototypeSet {
    let d = bank.dim().unwrap_or(0);
    let mut prototypes = Vec::with_capacity(bank.n_classes());
    let mut support = Vec::with_capacity(bank.n_classes());
    for c in 0..bank.n_classes() {
        let mut sum = vec![0.0; d];
        let mut count = 0;
        for e in bank.class(c).filter(|e| e.weight > 0.0) {
            for (s, x) in sum.iter_mut().zip(e.feature.as_slice()) {
                *s += e.weight * x;
            }
            count += 1;
        }
        prototypes.push(if count > 0 { normalize(&sum).ok() } else { None });
        support.push(count);
    }
    PrototypeSet { prototypes, support }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::BankEntry;
    use crate::sphere::sample_ambient_gaussian;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> UnitVector {
        normalize(&sample_ambient_gaussian(d, rng)).unwrap()
    }

    /// Central differences of `f` in ambient coordinates.
    fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Loss evaluated at an arbitrary ambient point, bypassing the unit-norm
    /// constructor so finite differences see the raw function.
    fn hambr_at(x: &[f64], proto: &UnitVector, outliers: &[UnitVector], tau: f64) -> f64 {
        let mut logits = vec![dot(x, proto.as_slice()) / tau];
        logits.extend(outliers.iter().map(|v| dot(x, v.as_slice()) / tau));
        log_sum_exp(&logits) - logits[0]
    }

    #[test]
    fn gce_examples() {
        assert_eq!(gce_loss(1.0, 0.3).unwrap(), 0.0);
        assert_relative_eq!(gce_loss(0.3, 1.0).unwrap(), 0.7, epsilon = 1e-15);
        let oracle = (1.0 - 0.5f64.powf(0.7)) / 0.7;
        assert_relative_eq!(gce_loss(0.5, 0.7).unwrap(), oracle, epsilon = 1e-15);
        assert!((oracle - 0.54918).abs() < 1e-5);
        assert!(gce_loss(0.0, 0.7).is_err());
    }

    #[test]
    fn hambr_examples() {
        let x = UnitVector::basis(3, 0);
        assert_eq!(hambr_loss(&x, &x, &[], 0.1), 0.0);
        let l = hambr_loss(&x, &x, &[UnitVector::basis(3, 1)], 1.0);
        assert_relative_eq!(l, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-14);
        assert!((l - 0.31326).abs() < 1e-5);

        // x·μ and every x·v_j equal 1/√3.
        let outliers: Vec<UnitVector> = (1..4).map(|i| UnitVector::basis(4, i)).collect();
        let c = 1.0 / 3f64.sqrt();
        let xs = normalize(&[0.0, 1.0, 1.0, 1.0]).unwrap();
        let proto = normalize(&[(1.0 - c * c).sqrt(), c * c, c * c, c * c]).unwrap();
        let sims: Vec<f64> = outliers.iter().map(|v| xs.dot(v)).collect();
        let target = xs.dot(&proto);
        assert!(sims.iter().all(|s| (s - target).abs() < 1e-12), "{sims:?} {target}");
        assert_relative_eq!(hambr_loss(&xs, &proto, &outliers, 0.3), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hambr_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = random_unit(8, &mut rng);
            let proto = random_unit(8, &mut rng);
            let outliers: Vec<UnitVector> = (0..5).map(|_| random_unit(8, &mut rng)).collect();
            let tau = rng.random_range(0.2..1.0);
            let analytic = hambr_grad(&x, &proto, &outliers, tau);
            let numeric = fd_grad(x.as_slice(), |p| hambr_at(p, &proto, &outliers, tau));
            assert!(rel_err(&analytic, &numeric) < 1e-5, "{analytic:?} {numeric:?}");
        }
    }

    #[test]
    fn hambr_grad_saturates() {
        let x = UnitVector::basis(3, 0);
        assert!(hambr_grad(&x, &x, &[], 0.1).iter().all(|g| *g == 0.0));
        let outliers = [UnitVector::basis(3, 1)];
        let g = hambr_grad(&x, &x, &outliers, 0.01);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-30);
    }

    #[test]
    fn ce_examples() {
        let pred = [1.0 - 1e-9, 1e-9];
        assert!(ce_loss(&pred, &[1.0, 0.0]).unwrap() < 1e-8);
        assert_relative_eq!(ce_loss(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]).unwrap(), 4f64.ln(), epsilon = 1e-14);
        let p = [0.2, 0.3, 0.5];
        let entropy: f64 = p.iter().map(|x: &f64| -x * x.ln()).sum();
        assert_relative_eq!(ce_loss(&p, &p).unwrap(), entropy, epsilon = 1e-14);
        assert!(ce_loss(&[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mse_and_sharpen_examples() {
        assert_eq!(consistency_mse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(consistency_mse(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert_eq!(consistency_mse(&[0.5, 0.5], &[1.0, 0.0]), 0.5);

        let q = [0.1, 0.6, 0.3];
        for (a, b) in sharpen(&q, 1.0).iter().zip(&q) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        assert!(sharpen(&[0.25; 4], 0.3).iter().all(|p| (p - 0.25).abs() < 1e-15));
        let s = sharpen(&[0.8, 0.2], 0.5);
        assert_relative_eq!(s[0], 0.64 / 0.68, epsilon = 1e-14);
        assert_relative_eq!(s[1], 0.04 / 0.68, epsilon = 1e-14);
    }

    #[test]
    fn reg_examples() {
        assert!(reg_loss(&[vec![0.5, 0.5], vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap().abs() < 1e-15);
        let collapsed = reg_loss(&[vec![1.0, 0.0]]).unwrap();
        let oracle = 0.5 * (0.5f64 / 1e-9).ln() + 0.5 * (0.5f64 / (1.0 - 1e-9)).ln();
        assert_relative_eq!(collapsed, oracle, epsilon = 1e-12);
        assert!((collapsed - 9.66).abs() < 0.02);
        let batch = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]];
        let swapped: Vec<Vec<f64>> = batch.iter().map(|p| vec![p[2], p[1], p[0]]).collect();
        assert_relative_eq!(reg_loss(&batch).unwrap(), reg_loss(&swapped).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let z1 = UnitVector::basis(3, 0);
        let z2 = UnitVector::basis(3, 1);
        let pairs = vec![(z1.clone(), z1.clone()), (z2.clone(), UnitVector::basis(3, 2))];
        let terms = contrastive_terms(&pairs, 1.0, ContrastiveNegatives::FirstViews).unwrap();
        assert_relative_eq!(terms[0], -(1f64.exp() / (1f64.exp() + 1.0)).ln(), epsilon = 1e-14);
        assert!((terms[0] - 0.3133).abs() < 1e-4);

        let pairs = vec![(z1.clone(), z1.clone()), (z1.neg(), z1.neg())];
        let terms = contrastive_terms(&pairs, 1.0, ContrastiveNegatives::FirstViews).unwrap();
        assert_relative_eq!(terms[0], (1.0 + (-2f64).exp()).ln(), epsilon = 1e-14);

        assert!(matches!(
            contrastive_loss(&pairs[..1], 0.5, ContrastiveNegatives::FirstViews),
            Err(Error::InsufficientBatch(1))
        ));
    }

    #[test]
    fn contrastive_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(UnitVector, UnitVector)> = (0..6).map(|_| (random_unit(4, &mut rng), random_unit(4, &mut rng))).collect();
        let q = nalgebra::DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let rot = |z: &UnitVector| {
            let v = &q * nalgebra::DVector::from_column_slice(z.as_slice());
            UnitVector::try_from(v.iter().copied().collect::<Vec<f64>>()).unwrap()
        };
        let rotated: Vec<(UnitVector, UnitVector)> = pairs.iter().map(|(a, b)| (rot(a), rot(b))).collect();
        for mode in [ContrastiveNegatives::FirstViews, ContrastiveNegatives::BothViews] {
            assert_relative_eq!(
                contrastive_loss(&pairs, 0.5, mode).unwrap(),
                contrastive_loss(&rotated, 0.5, mode).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    fn contrastive_at(raw: &[Vec<f64>], n: usize, tau: f64, mode: ContrastiveNegatives) -> f64 {
        // raw holds first views then second views; dot products taken as-is.
        let v = |k: usize, second: bool| &raw[if second { n + k } else { k }];
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = contrastive_members(i, n, mode).into_iter().map(|(k, s)| dot(&raw[i], v(k, s)) / tau).collect();
                log_sum_exp(&logits) - logits[0]
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn contrastive_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [ContrastiveNegatives::FirstViews, ContrastiveNegatives::BothViews] {
            for _ in 0..20 {
                let n = 4;
                let pairs: Vec<(UnitVector, UnitVector)> = (0..n).map(|_| (random_unit(5, &mut rng), random_unit(5, &mut rng))).collect();
                let (g1, g2) = contrastive_grad(&pairs, 0.5, mode).unwrap();
                let raw: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.as_slice().to_vec()).chain(pairs.iter().map(|p| p.1.as_slice().to_vec())).collect();
                for (idx, analytic) in g1.iter().chain(&g2).enumerate() {
                    let numeric = fd_grad(&raw[idx], |x| {
                        let mut r = raw.clone();
                        r[idx] = x.to_vec();
                        contrastive_at(&r, n, 0.5, mode)
                    });
                    assert!(rel_err(analytic, &numeric) < 1e-5, "{mode:?} {idx}");
                }
            }
        }
    }

    fn random_protos(c: usize, d: usize, rng: &mut ChaCha8Rng) -> PrototypeSet {
        PrototypeSet {
            prototypes: (0..c).map(|_| Some(random_unit(d, rng))).collect(),
            support: vec![1; c],
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 0.3;
        for _ in 0..100 {
            let protos = random_protos(5, 8, &mut rng);
            let x = random_unit(8, &mut rng);
            let label: Vec<f64> = {
                let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            };
            let y = rng.random_range(0..5);
            let p = head_probs(x.as_slice(), &protos, t);

            let ce = head_backprop(&ce_dp(&p, &label), &p, &protos, t);
            let ce_fd = fd_grad(x.as_slice(), |z| ce_loss(&head_probs(z, &protos, t), &label).unwrap());
            assert!(rel_err(&ce, &ce_fd) < 1e-5);

            let mut dp = vec![0.0; 5];
            dp[y] = gce_dp(p[y], 0.7);
            let gce = head_backprop(&dp, &p, &protos, t);
            let gce_fd = fd_grad(x.as_slice(), |z| gce_loss(head_probs(z, &protos, t)[y], 0.7).unwrap());
            assert!(rel_err(&gce, &gce_fd) < 1e-5);

            let mse = head_backprop(&consistency_mse_dp(&label, &p), &p, &protos, t);
            let mse_fd = fd_grad(x.as_slice(), |z| consistency_mse(&label, &head_probs(z, &protos, t)));
            assert!(rel_err(&mse, &mse_fd) < 1e-5);

            let other = head_probs(random_unit(8, &mut rng).as_slice(), &protos, t);
            let batch = vec![p.clone(), other.clone()];
            let reg = head_backprop(&reg_loss_dp(&batch), &p, &protos, t);
            let reg_fd = fd_grad(x.as_slice(), |z| reg_loss(&[head_probs(z, &protos, t), other.clone()]).unwrap());
            assert!(rel_err(&reg, &reg_fd) < 1e-5);
        }
    }

    #[test]
    fn total_loss_structure() {
        let c = LossComponents {
            loss_x: 1.5,
            loss_u: 0.2,
            loss_reg: 0.3,
            loss_con: 0.4,
            loss_hambr: 0.5,
        };
        let zero = LossWeights {
            lambda_u: 0.0,
            lambda_reg: 0.0,
            lambda_c: 0.0,
            lambda_hambr: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&c, &zero), 1.5);
        let w = LossWeights::default();
        let doubled = LossWeights { lambda_u: 2.0 * w.lambda_u, ..w.clone() };
        assert_relative_eq!(total_loss(&c, &doubled) - total_loss(&c, &w), w.lambda_u * c.loss_u, epsilon = 1e-15);
        let ablation = LossWeights { lambda_hambr: 0.0, ..w.clone() };
        assert_relative_eq!(total_loss(&c, &w) - total_loss(&c, &ablation), w.lambda_hambr * c.loss_hambr, epsilon = 1e-15);
    }

    #[test]
    fn prototype_examples() {
        let e1 = UnitVector::basis(3, 0);
        let e2 = UnitVector::basis(3, 1);
        let entry = |class, weight, f: &UnitVector| BankEntry { class_id: class, weight, feature: f.clone() };
        let bank = FeatureBank::from_entries([entry(0, 1.0, &e1), entry(0, 1.0, &e2), entry(1, 1.0, &e2), entry(2, 1.0, &e1), entry(2, 0.0, &e2)], 3, 8).unwrap();
        let p = compute_prototypes(&bank);
        let h = 1.0 / 2f64.sqrt();
        for (a, b) in p.get(0).unwrap().as_slice().iter().zip([h, h, 0.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(p.get(1).unwrap(), &e2);
        assert_eq!(p.get(2).unwrap(), &e1);
        assert_eq!(p.support, vec![2, 1, 1]);

        let sparse = FeatureBank::from_entries([entry(1, 1.0, &e1)], 2, 8).unwrap();
        let p = compute_prototypes(&sparse);
        assert!(p.get(0).is_none());
        assert_eq!(p.present().count(), 1);
    }

    proptest! {
        #[test]
        fn hambr_non_negative_and_monotone(seed in 0u64..500, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_unit(4, &mut rng);
            let outliers: Vec<UnitVector> = (0..3).map(|_| random_unit(4, &mut rng)).collect();
            let proto = random_unit(4, &mut rng);
            let l = hambr_loss(&x, &proto, &outliers, tau);
            prop_assert!(l > 0.0);
            // Raising x·μ with outlier similarities fixed lowers the loss.
            let sims: Vec<f64> = outliers.iter().map(|v| x.dot(v) / tau).collect();
            let at = |s: f64| {
                let mut logits = vec![s / tau];
                logits.extend(&sims);
                log_sum_exp(&logits) - logits[0]
            };
            let s = x.dot(&proto);
            prop_assert!(at(s + 0.1) <= at(s));
        }

        #[test]
        fn sharpen_exponents_multiply(a in 0.01f64..1.0, b in 0.01f64..1.0, t1 in 0.2f64..3.0, t2 in 0.2f64..3.0) {
            let q = [a / (a + b), b / (a + b)];
            let twice = sharpen(&sharpen(&q, t1), t2);
            let once = sharpen(&q, t1 * t2);
            prop_assert!((twice[0] - once[0]).abs() < 1e-12);
        }

        #[test]
        fn total_loss_affine_in_each_lambda(l in 0.0f64..5.0, v in 0.0f64..3.0) {
            let c = LossComponents { loss_x: 0.7, loss_u: v, loss_reg: v, loss_con: v, loss_hambr: v };
            let base = LossWeights { lambda_u: 0.0, lambda_reg: 0.0, lambda_c: 0.0, lambda_hambr: 0.0, ..LossWeights::default() };
            for w in [
                LossWeights { lambda_u: l, ..base.clone() },
                LossWeights { lambda_reg: l, ..base.clone() },
                LossWeights { lambda_c: l, ..base.clone() },
                LossWeights { lambda_hambr: l, ..base.clone() },
            ] {
                prop_assert!((total_loss(&c, &w) - (0.7 + l * v)).abs() < 1e-12);
            }
        }
    }
}
