use super::{check_dims, check_temperature, log_sum_exp, LossResult, Slot};
use crate::embedding::{cosine_with_grad, l2_norm, NORM_EPS};
use crate::error::{Result, TceError};

fn diff(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if !(l2_norm(&d) > NORM_EPS) {
        return Err(TceError::DegenerateSegment);
    }
    Ok(d)
}

/// Cross-entropy over second-order similarities
/// `s₂(f_t, f_{t+1}, x) = s(f_{t+1} - f_t, x - f_{t+1})`, where the true
/// continuation `f_{t+2}` must beat every within-video negative.
pub fn second_order_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    next: &[f64],
    negatives: &[N],
    temperature: f64,
) -> Result<LossResult> {
    if negatives.is_empty() {
        return Err(TceError::arg("second-order loss needs at least one negative"));
    }
    check_temperature(temperature)?;
    let mut all = vec![positive, next];
    all.extend(negatives.iter().map(AsRef::as_ref));
    check_dims(anchor.len(), &all)?;

    let step = diff(positive, anchor)?;
    let candidates: Vec<(Slot, &[f64])> = std::iter::once((Slot::Next, next))
        .chain(
            negatives
                .iter()
                .enumerate()
                .map(|(i, n)| (Slot::WithinVideoNegative(i), n.as_ref())),
        )
        .collect();

    let mut sims = Vec::with_capacity(candidates.len());
    let mut grads = Vec::with_capacity(candidates.len());
    for (_, c) in &candidates {
        let cont = diff(c, positive)?;
        let (s, g_step, g_cont) = cosine_with_grad(&step, &cont)?;
        sims.push(s);
        grads.push((g_step, g_cont));
    }

    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(&logits);
    let mut out = LossResult::new(lse - logits[0]);

    let d = anchor.len();
    let mut g_step_total = vec![0.0; d];
    for (i, ((slot, _), (g_step, g_cont))) in candidates.iter().zip(&grads).enumerate() {
        let w = ((logits[i] - lse).exp() - if i == 0 { 1.0 } else { 0.0 }) / temperature;
        for (acc, g) in g_step_total.iter_mut().zip(g_step) {
            *acc += w * g;
        }
        // cont = candidate - positive
        out.accumulate(*slot, g_cont, w)?;
        out.accumulate(Slot::Positive, g_cont, -w)?;
    }
    // step = positive - anchor
    out.accumulate(Slot::Positive, &g_step_total, 1.0)?;
    out.accumulate(Slot::Anchor, &g_step_total, -1.0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn collinear_steps_have_unit_similarity() {
        let a = [0.0, 0.0];
        let p = [1.0, 0.0];
        let n = [2.0, 0.0];
        // Positive and negative identical: loss ln 2 and s₂ = 1 for both.
        let l = second_order_loss(&a, &p, &n, &[&n], 1.0).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
        let cos = crate::embedding::cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(cos, 1.0);
    }

    #[test]
    fn mirrored_negative_is_ln2() {
        let a = [0.0, 0.0, 0.0];
        let p = [1.0, 0.0, 0.0];
        let next = [2.0, 0.5, 0.0];
        let neg = [2.0, -0.5, 0.0];
        let l = second_order_loss(&a, &p, &next, &[&neg], 0.2).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_segments_error() {
        let a = [1.0, 0.0];
        let n = [0.0, 1.0];
        assert!(matches!(
            second_order_loss(&a, &a, &n, &[&n], 1.0),
            Err(TceError::DegenerateSegment)
        ));
        assert!(matches!(
            second_order_loss(&n, &a, &a, &[&n], 1.0),
            Err(TceError::DegenerateSegment)
        ));
        assert!(matches!(
            second_order_loss(&n, &a, &n, &[&a], 1.0),
            Err(TceError::DegenerateSegment)
        ));
        let none: [&[f64]; 0] = [];
        assert!(second_order_loss(&n, &a, &n, &none, 1.0).is_err());
    }
}
