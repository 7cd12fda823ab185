use super::{check_dims, check_temperature, log_sum_exp, LossResult, Slot};
use crate::embedding::cosine_with_grad;
use crate::error::{Result, TceError};

/// Similarities of the anchor against every candidate, plus per-candidate
/// gradients of each similarity with respect to (anchor, candidate).
struct AnchorSims {
    sims: Vec<f64>,
    grad_anchor: Vec<Vec<f64>>,
    grad_other: Vec<Vec<f64>>,
}

fn anchor_sims(anchor: &[f64], others: &[&[f64]]) -> Result<AnchorSims> {
    let mut out = AnchorSims {
        sims: Vec::with_capacity(others.len()),
        grad_anchor: Vec::with_capacity(others.len()),
        grad_other: Vec::with_capacity(others.len()),
    };
    for o in others {
        let (s, ga, go) = cosine_with_grad(anchor, o)?;
        out.sims.push(s);
        out.grad_anchor.push(ga);
        out.grad_other.push(go);
    }
    Ok(out)
}

fn gather<'a, N: AsRef<[f64]>>(positive: &'a [f64], negatives: &'a [N]) -> Vec<&'a [f64]> {
    std::iter::once(positive)
        .chain(negatives.iter().map(AsRef::as_ref))
        .collect()
}

/// Pushes `dL/ds_i` through the cosine gradients into per-slot gradients.
fn backprop_sims(out: &mut LossResult, sims: &AnchorSims, dl_ds: &[f64]) -> Result<()> {
    let d = sims.grad_anchor[0].len();
    let mut ga = vec![0.0; d];
    for (i, &w) in dl_ds.iter().enumerate() {
        for (acc, g) in ga.iter_mut().zip(&sims.grad_anchor[i]) {
            *acc += w * g;
        }
        let slot = if i == 0 { Slot::Positive } else { Slot::Negative(i - 1) };
        out.accumulate(slot, &sims.grad_other[i], w)?;
    }
    out.accumulate(Slot::Anchor, &ga, 1.0)
}

/// Softmax cross-entropy that picks the positive out of the negatives:
/// `-ln( e^{s_p/τ} / (e^{s_p/τ} + Σ_n e^{s_n/τ}) )`.
pub fn first_order_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
    temperature: f64,
) -> Result<LossResult> {
    if negatives.is_empty() {
        return Err(TceError::arg("first-order loss needs at least one negative"));
    }
    check_temperature(temperature)?;
    let others = gather(positive, negatives);
    check_dims(anchor.len(), &others)?;
    let sims = anchor_sims(anchor, &others)?;

    let logits: Vec<f64> = sims.sims.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(&logits);
    let value = lse - logits[0];
    let dl_ds: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| ((z - lse).exp() - if i == 0 { 1.0 } else { 0.0 }) / temperature)
        .collect();

    let mut out = LossResult::new(value);
    backprop_sims(&mut out, &sims, &dl_ds)?;
    Ok(out)
}

/// Noise-contrastive estimate of the first-order objective.
///
/// With `q(x) = e^{s(f_t, x)/τ} / Z`, uniform noise `P_n = 1/K` and `m`
/// negatives, each sample is classified as data versus noise with
/// `P(C | x) = q / (q + m P_n)`:
///
/// `L = -ln P(C | x_p) - Σ_n ln(1 - P(C | x_n))`
pub fn nce_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
    temperature: f64,
    dataset_size: usize,
    partition: f64,
) -> Result<LossResult> {
    if negatives.is_empty() {
        return Err(TceError::arg("NCE loss needs at least one negative"));
    }
    if dataset_size < 1 {
        return Err(TceError::arg("NCE dataset size K must be >= 1"));
    }
    if !(partition > 0.0) || !partition.is_finite() {
        return Err(TceError::arg(format!("NCE partition Z must be positive, got {partition}")));
    }
    check_temperature(temperature)?;
    let others = gather(positive, negatives);
    check_dims(anchor.len(), &others)?;
    let sims = anchor_sims(anchor, &others)?;

    let m = negatives.len() as f64;
    // ln(m P_n)
    let ln_c = (m / dataset_size as f64).ln();
    let ln_z = partition.ln();

    let mut value = 0.0;
    let mut dl_ds = Vec::with_capacity(others.len());
    for (i, &s) in sims.sims.iter().enumerate() {
        let ln_q = s / temperature - ln_z;
        let ln_q_plus_c = log_sum_exp(&[ln_q, ln_c]);
        // P(C | x) for this sample
        let h = (ln_q - ln_q_plus_c).exp();
        if i == 0 {
            value += ln_q_plus_c - ln_q;
            dl_ds.push((h - 1.0) / temperature);
        } else {
            value += ln_q_plus_c - ln_c;
            dl_ds.push(h / temperature);
        }
    }

    let mut out = LossResult::new(value);
    backprop_sims(&mut out, &sims, &dl_ds)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use std::f64::consts::LN_2;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalize(v).unwrap().into_inner()
    }

    /// Vector at angle `theta` from e1 in the (e1, e2) plane, in 3-D.
    fn at_angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), 0.0]
    }

    #[test]
    fn symmetric_single_negative_is_ln2() {
        let a = at_angle(0.0);
        let p = at_angle(0.7);
        let n = at_angle(-0.7);
        let l = first_order_loss(&a, &p, &[&n], 1.0).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
    }

    #[test]
    fn uniform_similarities_give_ln_n_plus_1() {
        let a = at_angle(0.0);
        let p = at_angle(0.4);
        for n in 1..10 {
            let negs: Vec<Vec<f64>> = (0..n).map(|i| {
                let mut v = at_angle(if i % 2 == 0 { 0.4 } else { -0.4 });
                v[2] = 0.0;
                v
            }).collect();
            let l = first_order_loss(&a, &p, &negs, 0.3).unwrap();
            assert!((l.value - ((n + 1) as f64).ln()).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn derived_fixture_matches_high_precision_value() {
        let a = at_angle(0.0);
        let n = at_angle(std::f64::consts::PI);
        let l = first_order_loss(&a, &a, &[&n, &n], 1.0).unwrap();
        // ln(1 + 2 e^-2), mpmath at 30 digits
        assert!((l.value - 0.239_544_766_221_884_5).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_negatives_and_bad_dims() {
        let a = at_angle(0.0);
        let none: [&[f64]; 0] = [];
        assert!(first_order_loss(&a, &a, &none, 1.0).is_err());
        assert!(first_order_loss(&a, &a, &[&[1.0, 0.0][..]], 1.0).is_err());
        assert!(first_order_loss(&a, &a, &[&a], 0.0).is_err());
        assert!(nce_loss(&a, &a, &none, 1.0, 4, 1.0).is_err());
        assert!(nce_loss(&a, &a, &[&a], 1.0, 4, 0.0).is_err());
        assert!(nce_loss(&a, &a, &[&a], 1.0, 4, -2.0).is_err());
    }

    #[test]
    fn extreme_temperature_is_finite() {
        let a = at_angle(0.0);
        let n = at_angle(std::f64::consts::PI);
        let l = first_order_loss(&a, &n, &[&a, &a], 0.01).unwrap();
        assert!(l.is_finite());
        assert!((l.value - (200.0 + 2f64.ln())).abs() < 1e-9);
        let l = first_order_loss(&a, &a, &[&n, &n], 0.01).unwrap();
        assert!(l.is_finite() && l.value >= 0.0 && l.value < 1e-80);
    }

    #[test]
    fn nce_symmetric_fixtures() {
        // q = e^{s/τ}/Z equals m/K when Z = e^{s/τ} K / m.
        let a = at_angle(0.0);
        let p = at_angle(0.5);
        let s = 0.5f64.cos();
        for m in 1..6usize {
            let k = 64;
            let z = s.exp() * k as f64 / m as f64;
            let negs: Vec<Vec<f64>> = (0..m).map(|_| at_angle(-0.5)).collect();
            let l = nce_loss(&a, &p, &negs, 1.0, k, z).unwrap();
            assert!((l.value - (1 + m) as f64 * LN_2).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn nce_perfect_classifier_limit() {
        let a = at_angle(0.0);
        let n = at_angle(std::f64::consts::PI);
        let l = nce_loss(&a, &a, &[&n], 0.01, 1, (-20.0f64).exp()).unwrap();
        assert!(l.value < 1e-40 && l.is_finite());
    }

    #[test]
    fn gradient_signs_on_similarities() {
        // Moving the positive toward the anchor lowers the loss, moving a
        // negative toward it raises it.
        let a = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[0.3, 1.0, 0.0]);
        let n = unit(&[0.2, 0.0, 1.0]);
        let base = first_order_loss(&a, &p, &[&n], 0.5).unwrap().value;
        let p2 = unit(&[0.5, 1.0, 0.0]);
        let n2 = unit(&[0.4, 0.0, 1.0]);
        assert!(first_order_loss(&a, &p2, &[&n], 0.5).unwrap().value < base);
        assert!(first_order_loss(&a, &p, &[&n2], 0.5).unwrap().value > base);
    }
}
