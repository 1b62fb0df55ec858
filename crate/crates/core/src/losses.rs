//! Training objectives. Every function records onto a tape and returns a
//! scalar variable; batch-dependent terms are batch-meaned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Lower bound applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Coefficients of the weighted total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l: f64,
    pub lambda_ad_l: f64,
    pub lambda_ad_f: f64,
    pub lambda_r: f64,
    pub lambda_cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l: 0.6, lambda_ad_l: 400.0, lambda_ad_f: 1.2, lambda_r: 3.0, lambda_cc: 40.0 }
    }
}

/// The six terms of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Au,
    Landmark,
    AdvLandmark,
    AdvFeature,
    Recon,
    Cycle,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Au, Term::Landmark, Term::AdvLandmark, Term::AdvFeature, Term::Recon, Term::Cycle];

    pub fn name(self) -> &'static str {
        match self {
            Term::Au => "L_a",
            Term::Landmark => "L_l",
            Term::AdvLandmark => "L_adl",
            Term::AdvFeature => "L_adf",
            Term::Recon => "L_r",
            Term::Cycle => "L_cc",
        }
    }
}

impl LossWeights {
    pub fn coefficient(&self, term: Term) -> f64 {
        match term {
            Term::Au => 1.0,
            Term::Landmark => self.lambda_l,
            Term::AdvLandmark => self.lambda_ad_l,
            Term::AdvFeature => self.lambda_ad_f,
            Term::Recon => self.lambda_r,
            Term::Cycle => self.lambda_cc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l, self.lambda_ad_l, self.lambda_ad_f, self.lambda_r, self.lambda_cc];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], count: usize, classes: usize) -> Result<()> {
    if labels.len() != count {
        return Err(Error::Label(format!("expected {count} landmark labels, got {}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y == 0 || y > classes) {
        return Err(Error::Label(format!("landmark class {bad} outside [1, {classes}]")));
    }
    Ok(())
}

fn maps_dims<T: Scalar>(tape: &Tape<T>, maps: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let [b, n, h, w] = tape.value(maps).dims4(op)?;
    if h != w {
        return Err(Error::Dimension { op, detail: format!("response maps must be square, got {h}x{w}") });
    }
    Ok((b, n, h * w))
}

/// Softmax cross-entropy of each response map against its 1-based class,
/// averaged over maps and samples. `labels` is sample-major, `B·n` long.
pub fn landmark_cls_loss<T: Scalar>(tape: &mut Tape<T>, maps: Var, labels: &[usize]) -> Result<Var> {
    let (b, n, area) = maps_dims(tape, maps, "landmark_cls_loss")?;
    check_labels(labels, b * n, area)?;
    let cap = -LOG_FLOOR.ln();
    let z = tape.value(maps).data();
    let mut probs = vec![T::zero(); z.len()];
    let mut live = vec![true; b * n];
    let mut total = 0.0f64;
    for (map, &y) in labels.iter().enumerate() {
        let row = &z[map * area..(map + 1) * area];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (p, &v) in probs[map * area..(map + 1) * area].iter_mut().zip(row) {
            *p = (v - max).exp() / sum;
        }
        let nll = (lse - row[y - 1]).as_f64();
        // Past the floor the loss is constant, so its gradient vanishes.
        if nll > cap {
            live[map] = false;
        }
        total += nll.min(cap);
    }
    let count = (b * n) as f64;
    let value = Tensor::scalar(T::of(total / count));
    let labels = labels.to_vec();
    Ok(tape.record(&[maps], value, move |ctx| {
        let g = ctx.grad[0] / T::of(count);
        let mut dz = vec![T::zero(); probs.len()];
        for (map, &y) in labels.iter().enumerate() {
            if !live[map] {
                continue;
            }
            let range = map * area..(map + 1) * area;
            for (d, &p) in dz[range.clone()].iter_mut().zip(&probs[range]) {
                *d = g * p;
            }
            dz[map * area + y - 1] -= g;
        }
        vec![Some(dz)]
    }))
}

/// Discriminator side of the landmark game: raw maps regress to 1 at the
/// labelled cell and 0 elsewhere.
pub fn landmark_adv_d_loss<T: Scalar>(tape: &mut Tape<T>, maps: Var, labels: &[usize]) -> Result<Var> {
    let (b, n, area) = maps_dims(tape, maps, "landmark_adv_d_loss")?;
    check_labels(labels, b * n, area)?;
    let mut target = Tensor::zeros(tape.shape(maps));
    for (map, &y) in labels.iter().enumerate() {
        target.data_mut()[map * area + y - 1] = T::one();
    }
    let t = tape.constant(target);
    tape.l2_mean(maps, t)
}

/// Encoder side of the landmark game: raw maps regress to the uniform
/// value `1/d²` everywhere.
pub fn landmark_adv_e_loss<T: Scalar>(tape: &mut Tape<T>, maps: Var) -> Result<Var> {
    let (_, _, area) = maps_dims(tape, maps, "landmark_adv_e_loss")?;
    let target = Tensor::full(tape.shape(maps), T::of(1.0 / area as f64));
    let t = tape.constant(target);
    tape.l2_mean(maps, t)
}

/// Normalized inverse occurrence rates: `w_j = (1/r_j) / Σ_u (1/r_u)`.
pub fn compute_au_weights(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::Config("no AU occurrence rates".into()));
    }
    if let Some(bad) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("AU occurrence rate {bad} outside (0, 1]")));
    }
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let sum: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / sum).collect())
}

/// Fraction of positive labels per AU over `rows` of length `m`.
pub fn occurrence_rates(rows: &[Vec<u8>], m: usize) -> Vec<f64> {
    let mut counts = vec![0usize; m];
    for row in rows {
        for (c, &v) in counts.iter_mut().zip(row) {
            *c += usize::from(v);
        }
    }
    counts.iter().map(|&c| c as f64 / rows.len().max(1) as f64).collect()
}

/// Weighted binary cross-entropy from logits `[B,m]`; `labels` is
/// sample-major and binary.
pub fn au_detection_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8], weights: &[f64]) -> Result<Var> {
    let &[b, m] = tape.shape(logits) else {
        return Err(Error::Dimension { op: "au_detection_loss", detail: format!("logits {:?}", tape.shape(logits)) });
    };
    if labels.len() != b * m || weights.len() != m {
        return Err(Error::Label(format!("expected {} labels and {m} weights, got {} and {}", b * m, labels.len(), weights.len())));
    }
    if let Some(bad) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::Label(format!("AU label {bad} is not binary")));
    }
    let z = tape.value(logits).data();
    let mut total = 0.0f64;
    for (i, (&zi, &p)) in z.iter().zip(labels).enumerate() {
        let (zi, p) = (zi.as_f64(), f64::from(p));
        // max(z,0) - z·p + ln(1 + e^{-|z|})
        total += weights[i % m] * (zi.max(0.0) - zi * p + (-zi.abs()).exp().ln_1p());
    }
    let value = Tensor::scalar(T::of(total / b as f64));
    let labels = labels.to_vec();
    let weights: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
    let inv_b = T::of(1.0 / b as f64);
    Ok(tape.record(&[logits], value, move |ctx| {
        let g = ctx.grad[0] * inv_b;
        let dz = ctx.inputs[0]
            .data()
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (&zi, &p))| g * weights[i % m] * (sigmoid(zi) - T::of(f64::from(p))))
            .collect();
        vec![Some(dz)]
    }))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn mean_sq_to<T: Scalar>(tape: &mut Tape<T>, score: Var, target: f64) -> Result<Var> {
    let t = tape.constant(Tensor::full(tape.shape(score), T::of(target)));
    tape.l2_mean(score, t)
}

/// Least-squares discriminator loss `mean((real-1)²) + mean(fake²)`; `fake`
/// is detached, so no gradient reaches whatever produced it.
pub fn feature_adv_d_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let fake = tape.stop_gradient(fake);
    let r = mean_sq_to(tape, real, 1.0)?;
    let f = mean_sq_to(tape, fake, 0.0)?;
    tape.add(r, f)
}

/// Least-squares generator loss `mean((fake-1)²)`.
pub fn feature_adv_g_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    mean_sq_to(tape, fake, 1.0)
}

/// Both sides of the feature game as `(d_loss, g_loss)`.
pub fn feature_adv_losses<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    Ok((feature_adv_d_loss(tape, real, fake)?, feature_adv_g_loss(tape, fake)?))
}

/// L1 between a reconstruction and its source feature.
pub fn self_recon_loss<T: Scalar>(tape: &mut Tape<T>, reconstructed: Var, x: Var) -> Result<Var> {
    tape.l1_mean(reconstructed, x)
}

/// L1 between a cross-cycle reconstruction and its source feature.
pub fn cross_cycle_loss<T: Scalar>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var> {
    tape.l1_mean(x_hat, x)
}

fn check_finite(term: Term, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence { term: term.name().to_string() });
    }
    Ok(())
}

/// `Σ λ_term · part`; several parts may share a term (source and target
/// instances). Errors with the term's name if any part is non-finite.
pub fn total_objective<T: Scalar>(tape: &mut Tape<T>, parts: &[(Term, Var)], weights: &LossWeights) -> Result<Var> {
    let mut terms = Vec::with_capacity(parts.len());
    for &(term, v) in parts {
        check_finite(term, tape.value(v).item().as_f64())?;
        terms.push((v, T::of(weights.coefficient(term))));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.weighted_sum(&terms)
}

/// Scalar counterpart of [`total_objective`].
pub fn total_value(parts: &[(Term, f64)], weights: &LossWeights) -> Result<f64> {
    parts.iter().try_fold(0.0, |acc, &(term, v)| {
        check_finite(term, v)?;
        Ok(acc + weights.coefficient(term) * v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_sum_on_unit_parts() {
        let parts: Vec<(Term, f64)> = Term::ALL.iter().map(|&t| (t, 1.0)).collect();
        let v = total_value(&parts, &LossWeights::default()).unwrap();
        assert!((v - 445.8).abs() < 1e-9);
    }

    #[test]
    fn non_finite_part_names_the_term() {
        let err = total_value(&[(Term::Au, 1.0), (Term::Cycle, f64::NAN)], &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref term } if term == "L_cc"));
    }
}
