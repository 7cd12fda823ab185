use proptest::prelude::*;
use tce_core::curvature::{mac, tac, turn_angles, Trajectory};
use tce_core::losses::{first_order_loss, second_order_loss, Slot};
use tce_core::mining::{select_negatives, MiningSchedule};
use tce_core::rng::derive_rng;
use tce_core::{cosine_similarity, normalize, BankMode, MemoryBank};

const D: usize = 16;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn unit(v: &[f64]) -> Vec<f64> {
    normalize(v).unwrap().into_inner()
}

/// A unit vector with cosine `s` to the unit vector `a`, using `dir` for the
/// orthogonal part.
fn at_similarity(a: &[f64], dir: &[f64], s: f64) -> Vec<f64> {
    let p: f64 = dir.iter().zip(a).map(|(x, y)| x * y).sum();
    let ortho: Vec<f64> = dir.iter().zip(a).map(|(x, y)| x - p * y).collect();
    let ortho = unit(&ortho);
    let c = (1.0 - s * s).max(0.0).sqrt();
    a.iter().zip(&ortho).map(|(x, o)| s * x + c * o).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn first_order_is_monotone_in_each_similarity(
        a in vector(D),
        dirs in prop::collection::vec(vector(D), 2..=9),
        sims in prop::collection::vec(-0.95f64..0.9, 9),
        bump in 0.01f64..0.05,
        which in 0usize..8,
        tau in 0.1f64..1.0,
    ) {
        let a = unit(&a);
        let m = dirs.len() - 1;
        let make = |k: usize, s: f64| at_similarity(&a, &dirs[k], s);
        let pos = make(0, sims[0]);
        let negatives: Vec<Vec<f64>> = (1..=m).map(|k| make(k, sims[k])).collect();
        let base = first_order_loss(&a, &pos, &negatives, tau).unwrap().value;

        let closer = make(0, sims[0] + bump);
        prop_assert!(first_order_loss(&a, &closer, &negatives, tau).unwrap().value < base);

        let j = which % m;
        let mut raised = negatives.clone();
        raised[j] = make(j + 1, sims[j + 1] + bump);
        prop_assert!(first_order_loss(&a, &pos, &raised, tau).unwrap().value > base);
    }

    #[test]
    fn first_order_gradient_signs(
        a in vector(D),
        p in vector(D),
        negatives in prop::collection::vec(vector(D), 1..=8),
        tau in 0.05f64..1.0,
    ) {
        // moving the positive toward the anchor lowers the loss, moving a
        // negative toward it raises the loss
        let l = first_order_loss(&a, &p, &negatives, tau).unwrap();
        let toward = |v: &[f64]| -> Vec<f64> {
            let s = cosine_similarity(&a, v).unwrap();
            let au = unit(&a);
            let vu = unit(v);
            au.iter().zip(&vu).map(|(x, y)| x - s * y).collect()
        };
        let dot = |g: &[f64], d: &[f64]| g.iter().zip(d).map(|(x, y)| x * y).sum::<f64>();
        let dp = toward(&p);
        if dp.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            prop_assert!(dot(l.grad(Slot::Positive).unwrap(), &dp) < 0.0);
        }
        for (i, n) in negatives.iter().enumerate() {
            let dn = toward(n);
            if dn.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                prop_assert!(dot(l.grad(Slot::Negative(i)).unwrap(), &dn) > 0.0);
            }
        }
    }

    #[test]
    fn extreme_similarities_stay_finite(
        a in vector(D),
        signs in prop::collection::vec(any::<bool>(), 2..=9),
    ) {
        let a = unit(&a);
        let flip = |s: bool| -> Vec<f64> { a.iter().map(|x| if s { *x } else { -x }).collect() };
        let pos = flip(signs[0]);
        let negatives: Vec<Vec<f64>> = signs[1..].iter().map(|&s| flip(s)).collect();
        let l = first_order_loss(&a, &pos, &negatives, 0.01).unwrap();
        prop_assert!(l.is_finite());
    }

    #[test]
    fn second_order_is_finite_and_positive(
        f0 in vector(D), f1 in vector(D), f2 in vector(D),
        negatives in prop::collection::vec(vector(D), 1..=8),
        tau in 0.01f64..1.0,
    ) {
        if let Ok(l) = second_order_loss(&f0, &f1, &f2, &negatives, tau) {
            prop_assert!(l.is_finite());
            prop_assert!(l.value > 0.0);
        }
    }

    #[test]
    fn curvature_bounds_and_reversal(points in prop::collection::vec(vector(5), 3..20)) {
        let t = Trajectory::new(points.clone()).unwrap();
        let turns = turn_angles(&t);
        let (total, max) = (tac(&t).value, mac(&t).value);
        prop_assert!(turns.angles.iter().all(|&a| (0.0..=std::f64::consts::PI).contains(&a)));
        prop_assert!(total >= max && max >= 0.0);
        prop_assert!(total <= (points.len() - 2) as f64 * std::f64::consts::PI);
        if points.len() == 3 {
            prop_assert_eq!(total, max);
        }
        let mut rev = points;
        rev.reverse();
        let r = Trajectory::new(rev).unwrap();
        prop_assert!((tac(&r).value - total).abs() < 1e-9);
        prop_assert!((mac(&r).value - max).abs() < 1e-12);
    }

    #[test]
    fn radius_is_bounded_and_monotone(
        r0 in -1.0f64..1.0, span in 0.0f64..1.0, epochs in 1.0f64..500.0,
        a in 0.0f64..1.0, b in 0.0f64..1.0,
    ) {
        let r_end = r0 + span * (1.0 - r0);
        let s = MiningSchedule::new(r0, r_end, epochs).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (s.radius(lo * epochs).unwrap(), s.radius(hi * epochs).unwrap());
        prop_assert!(rl <= rh);
        prop_assert!(r0 <= rl && rh <= r_end);
    }

    #[test]
    fn mining_is_deterministic_and_skips_the_anchor_video(
        lengths in prop::collection::vec(1usize..6, 2..8),
        anchor in vector(8),
        radius in -1.0f64..1.0,
        seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
    ) {
        let bank = MemoryBank::init_from_lengths(&lengths, 8, BankMode::PerFrame, seed).unwrap();
        let video = pick.index(lengths.len());
        let n = bank.len() - lengths[video];
        let run = |k: usize| select_negatives(&bank, &anchor, video, k, radius, &mut derive_rng(seed, "t", &[])).unwrap();
        for k in [0, n / 2, n] {
            let keys = run(k);
            prop_assert_eq!(&keys, &run(k));
            prop_assert!(keys.iter().all(|&key| bank.video_of(key) != video));
        }
        prop_assert!(select_negatives(&bank, &anchor, video, n + 1, radius, &mut derive_rng(seed, "t", &[])).is_err());
    }
}
