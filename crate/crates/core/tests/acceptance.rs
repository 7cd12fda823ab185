//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, LN_2, PI};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tce_core::curvature::{mac, tac, Trajectory};
use tce_core::data::{stack_of_differences, SyntheticSpec};
use tce_core::eval::{build_classifier, finetune, EvalConfig, EvalMode, InputMode, LabeledData};
use tce_core::losses::{
    combined_loss, first_order_loss, nce_loss, rotation_aux_loss, second_order_loss, LossConfig, LossResult, Rotation,
    Slot,
};
use tce_core::mining::{select_negatives, MiningSchedule};
use tce_core::rng::{derive_rng, Rng};
use tce_core::trainer::{pretrain, Checkpoint, PretrainConfig, PretrainData, Trainer, METRICS_FILE};
use tce_core::{normalize, BankKey, BankMode, Embedding, Image, MemoryBank, VideoSequence};

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("loss fixtures", loss_fixtures),
        ("mining schedule", mining_schedule),
        ("mining selection", mining_selection),
        ("curvature fixtures", curvature_fixtures),
        ("NCE consistency", nce_consistency),
        ("stack of differences", stack_checks),
        ("end-to-end directional run", directional_run),
        ("reproducibility", reproducibility),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let only: Option<usize> = std::env::var("TCE_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("took {t:?}, budget {budget:?}"))
}

fn gaussian(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------- criterion 1

const DIM: usize = 16;
const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

/// One random loss instance: named input vectors and the loss over them.
struct Instance {
    inputs: Vec<(Slot, Vec<f64>)>,
    loss: Box<dyn Fn(&[(Slot, Vec<f64>)]) -> LossResult>,
}

/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over all slots.
fn gradient_error(inst: &Instance) -> f64 {
    let base = (inst.loss)(&inst.inputs);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut x = inst.inputs.clone();
    for i in 0..x.len() {
        let slot = x[i].0;
        let analytic = base.grad(slot).expect("every input has a gradient").to_vec();
        for j in 0..x[i].1.len() {
            let orig = x[i].1[j];
            x[i].1[j] = orig + FD_STEP;
            let up = (inst.loss)(&x).value;
            x[i].1[j] = orig - FD_STEP;
            let down = (inst.loss)(&x).value;
            x[i].1[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

fn slots(prefix: &[Slot], negatives: usize, within: usize) -> Vec<Slot> {
    let mut s = prefix.to_vec();
    s.extend((0..negatives).map(Slot::Negative));
    s.extend((0..within).map(Slot::WithinVideoNegative));
    s
}

fn random_inputs(slots: &[Slot], rng: &mut Rng) -> Vec<(Slot, Vec<f64>)> {
    slots
        .iter()
        .map(|&s| {
            let d = if s == Slot::Logits { 4 } else { DIM };
            (s, gaussian(d, rng))
        })
        .collect()
}

fn get(x: &[(Slot, Vec<f64>)], slot: Slot) -> &[f64] {
    &x.iter().find(|(s, _)| *s == slot).expect("slot present").1
}

fn negs(x: &[(Slot, Vec<f64>)]) -> Vec<&[f64]> {
    x.iter()
        .filter(|(s, _)| matches!(s, Slot::Negative(_)))
        .map(|(_, v)| v.as_slice())
        .collect()
}

fn within_negs(x: &[(Slot, Vec<f64>)]) -> Vec<&[f64]> {
    x.iter()
        .filter(|(s, _)| matches!(s, Slot::WithinVideoNegative(_)))
        .map(|(_, v)| v.as_slice())
        .collect()
}

fn first_order_instance(rng: &mut Rng) -> Instance {
    let m = rng.random_range(1..=8);
    let tau = rng.random_range(0.1..1.0);
    Instance {
        inputs: random_inputs(&slots(&[Slot::Anchor, Slot::Positive], m, 0), rng),
        loss: Box::new(move |x| {
            first_order_loss(get(x, Slot::Anchor), get(x, Slot::Positive), &negs(x), tau).unwrap()
        }),
    }
}

fn nce_instance(rng: &mut Rng) -> Instance {
    let m = rng.random_range(1..=8);
    let tau = rng.random_range(0.1..1.0);
    let k = rng.random_range(m..=200);
    let z = rng.random_range(0.5..50.0);
    Instance {
        inputs: random_inputs(&slots(&[Slot::Anchor, Slot::Positive], m, 0), rng),
        loss: Box::new(move |x| {
            nce_loss(get(x, Slot::Anchor), get(x, Slot::Positive), &negs(x), tau, k, z).unwrap()
        }),
    }
}

fn second_order_instance(rng: &mut Rng) -> Instance {
    let m = rng.random_range(1..=8);
    let tau = rng.random_range(0.1..1.0);
    Instance {
        inputs: random_inputs(&slots(&[Slot::Anchor, Slot::Positive, Slot::Next], 0, m), rng),
        loss: Box::new(move |x| {
            second_order_loss(
                get(x, Slot::Anchor),
                get(x, Slot::Positive),
                get(x, Slot::Next),
                &within_negs(x),
                tau,
            )
            .unwrap()
        }),
    }
}

fn rotation_instance(rng: &mut Rng) -> Instance {
    let target = Rotation::from_quarter_turns(rng.random_range(0..4));
    let mut inputs = random_inputs(&[Slot::Logits], rng);
    for v in &mut inputs[0].1 {
        *v *= 3.0;
    }
    Instance {
        inputs,
        loss: Box::new(move |x| rotation_aux_loss(get(x, Slot::Logits), target).unwrap()),
    }
}

fn combined_instance(rng: &mut Rng) -> Instance {
    let m = rng.random_range(1..=8);
    let m2 = rng.random_range(1..=8);
    let tau = rng.random_range(0.1..1.0);
    let target = Rotation::from_quarter_turns(rng.random_range(0..4));
    let config = LossConfig {
        temperature: tau,
        first_order_weight: rng.random_range(0.5..5.0),
        second_order_weight: rng.random_range(0.5..5.0),
        aux_weight: rng.random_range(0.5..5.0),
        ..LossConfig::default()
    };
    Instance {
        inputs: random_inputs(&slots(&[Slot::Anchor, Slot::Positive, Slot::Next, Slot::Logits], m, m2), rng),
        loss: Box::new(move |x| {
            let (a, p, n) = (get(x, Slot::Anchor), get(x, Slot::Positive), get(x, Slot::Next));
            let first = first_order_loss(a, p, &negs(x), tau).unwrap();
            let second = second_order_loss(a, p, n, &within_negs(x), tau).unwrap();
            let aux = rotation_aux_loss(get(x, Slot::Logits), target).unwrap();
            combined_loss(&first, Some(&second), Some(&aux), &config).unwrap()
        }),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let families: [(&str, fn(&mut Rng) -> Instance); 5] = [
        ("first-order", first_order_instance),
        ("nce", nce_instance),
        ("second-order", second_order_instance),
        ("rotation", rotation_instance),
        ("combined", combined_instance),
    ];
    let mut summary = Vec::new();
    for (name, make) in families {
        let mut rng = derive_rng(1, "acceptance-gradients", &[name.len() as u64]);
        let mut worst: f64 = 0.0;
        for _ in 0..INSTANCES {
            worst = worst.max(gradient_error(&make(&mut rng)));
        }
        ensure(worst <= GRAD_TOL, || format!("{name}: worst relative error {worst:.3e} > {GRAD_TOL:e}"))?;
        summary.push(format!("{name} {worst:.1e}"));
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("{INSTANCES} instances each, worst relative error: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn unit(v: &[f64]) -> Vec<f64> {
    normalize(v).unwrap().into_inner()
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= 1e-9, || format!("{name}: got {got}, want {want}"))
}

fn loss_fixtures() -> Outcome {
    let a = unit(&[1.0, 0.0, 0.0]);
    let p = unit(&[0.6, 0.8, 0.0]);
    let tau = 0.3;
    for n in 1..=8 {
        // every negative at the positive's similarity, in different directions
        let negatives: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let phi = i as f64 + 1.0;
                unit(&[0.6, 0.8 * phi.cos(), 0.8 * phi.sin()])
            })
            .collect();
        let l = first_order_loss(&a, &p, &negatives, tau).unwrap().value;
        close(&format!("first-order N={n}"), l, ((n + 1) as f64).ln())?;

        // q = e^{s/τ}/Z equal to m·P_n = m/K for every sample
        let k = 50;
        let z = (0.6f64 / tau).exp() * k as f64 / n as f64;
        let l = nce_loss(&a, &p, &negatives, tau, k, z).unwrap().value;
        close(&format!("NCE m={n}"), l, (1 + n) as f64 * LN_2)?;
    }

    // next and its mirror image about the step direction
    let f0 = [0.0, 0.0, 1.0];
    let f1 = [1.0, 0.0, 1.0];
    let next = [2.0, 1.0, 1.0];
    let mirror = [2.0, -1.0, 1.0];
    let l = second_order_loss(&f0, &f1, &next, &[&mirror], tau).unwrap().value;
    close("second-order mirrored negative", l, LN_2)?;

    for r in Rotation::ALL {
        let l = rotation_aux_loss(&[0.7; 4], r).unwrap().value;
        close("rotation uniform logits", l, 4f64.ln())?;
    }
    Ok("ln(N+1), (1+m) ln 2, ln 2 and ln 4 within 1e-9".into())
}

// ---------------------------------------------------------------- criterion 3

fn mining_schedule() -> Outcome {
    let mut rng = derive_rng(3, "acceptance-schedule", &[]);
    let mut cases = vec![(-1.0, 1.0, 9.0)];
    for _ in 0..20 {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(a..=1.0);
        cases.push((a, b, rng.random_range(1.0..400.0)));
    }
    for (r0, r_end, epochs) in cases {
        let s = MiningSchedule::new(r0, r_end, epochs).unwrap();
        ensure(s.radius(0.0).unwrap() == r0, || format!("r(0) != r0 for {s:?}"))?;
        let want = r0 + (r_end - r0) * (1.0 - (-5f64).exp());
        let got = s.radius(epochs).unwrap();
        ensure((got - want).abs() <= 1e-12, || format!("r(E) = {got}, want {want} for {s:?}"))?;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=10_000 {
            let t = if i == 10_000 { epochs } else { epochs * i as f64 / 10_000.0 };
            let r = s.radius(t).unwrap();
            ensure(r >= prev, || format!("radius decreases at grid point {i} for {s:?}"))?;
            prev = r;
        }
    }
    let full_range = MiningSchedule::new(-1.0, 1.0, 9.0).unwrap().radius(9.0).unwrap();
    ensure((full_range - 0.986_524_2).abs() < 1e-7, || format!("r(E) = {full_range}, want 0.9865242"))?;
    Ok(format!("21 schedules, r(E) = {full_range:.7} for r0=-1, r_E=1"))
}

// ---------------------------------------------------------------- criterion 4

/// Full sort of every non-anchor-video entry by (similarity desc, key asc),
/// keeping those within the radius.
fn oracle_mined(bank: &MemoryBank, anchor: &[f64], video: usize, radius: f64) -> (Vec<usize>, Vec<usize>) {
    let norm = anchor.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (k, e) in bank.entries().iter().enumerate() {
        if bank.video_of(BankKey(k)) == video {
            continue;
        }
        let s: f64 = anchor.iter().zip(e.as_slice()).map(|(a, b)| a * b).sum::<f64>() / norm;
        if s <= radius {
            inside.push((s, k));
        } else {
            outside.push(k);
        }
    }
    inside.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    (inside.into_iter().map(|(_, k)| k).collect(), outside)
}

fn mining_selection() -> Outcome {
    let start = Instant::now();
    let mut rng = derive_rng(4, "acceptance-mining", &[]);
    let mut topped_up = 0;
    for trial in 0..100u64 {
        let videos = rng.random_range(2..=40);
        let lengths: Vec<usize> = (0..videos).map(|_| rng.random_range(1..=25)).collect();
        let dim = rng.random_range(2..=16);
        let bank = MemoryBank::init_from_lengths(&lengths, dim, BankMode::PerFrame, trial).unwrap();
        if bank.len() > 1000 {
            continue;
        }
        let video = rng.random_range(0..videos);
        let available = bank.len() - lengths[video];
        let n = rng.random_range(0..=available.min(64));
        let radius = rng.random_range(-1.0..1.0);
        let anchor = gaussian(dim, &mut rng);

        let mut draw = derive_rng(trial, "acceptance-mining-draw", &[]);
        let got: Vec<usize> = select_negatives(&bank, &anchor, video, n, radius, &mut draw)
            .map_err(|e| format!("trial {trial}: {e}"))?
            .into_iter()
            .map(|k| k.0)
            .collect();
        let mut again = derive_rng(trial, "acceptance-mining-draw", &[]);
        let repeat: Vec<usize> = select_negatives(&bank, &anchor, video, n, radius, &mut again)
            .unwrap()
            .into_iter()
            .map(|k| k.0)
            .collect();
        ensure(got == repeat, || format!("trial {trial}: selection is not deterministic"))?;
        ensure(got.len() == n, || format!("trial {trial}: {} keys for N={n}", got.len()))?;
        ensure(got.iter().all(|&k| bank.video_of(BankKey(k)) != video), || {
            format!("trial {trial}: returned an anchor-video key")
        })?;

        let (inside, outside) = oracle_mined(&bank, &anchor, video, radius);
        let mined = inside.len().min(n);
        ensure(got[..mined] == inside[..mined], || {
            format!("trial {trial}: mined keys differ from the oracle")
        })?;
        let mut fill = got[mined..].to_vec();
        if !fill.is_empty() {
            topped_up += 1;
        }
        ensure(fill.iter().all(|k| outside.contains(k)), || {
            format!("trial {trial}: top-up key inside the radius")
        })?;
        fill.sort_unstable();
        fill.dedup();
        ensure(fill.len() == n - mined, || format!("trial {trial}: repeated top-up keys"))?;
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("100 banks match the brute-force oracle ({topped_up} needed a random top-up)"))
}

// ---------------------------------------------------------------- criterion 5

fn traj(points: &[Vec<f64>]) -> Trajectory {
    Trajectory::new(points.to_vec()).unwrap()
}

fn curvature_fixtures() -> Outcome {
    let collinear: Vec<Vec<f64>> = (0..7).map(|i| vec![1.0 + 2.0 * i as f64, -3.0 * i as f64, 0.5]).collect();
    let t = traj(&collinear);
    ensure(tac(&t).value.abs() <= 1e-6 && mac(&t).value.abs() <= 1e-6, || {
        "collinear trajectory has non-zero curvature".into()
    })?;

    let right = traj(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
    close_to("right angle TAC", tac(&right).value, FRAC_PI_2, 1e-6)?;
    close_to("right angle MAC", mac(&right).value, FRAC_PI_2, 1e-6)?;

    let hexagon: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let a = i as f64 * PI / 3.0;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let h = traj(&hexagon);
    close_to("hexagon TAC", tac(&h).value, 2.0 * PI / 3.0, 1e-6)?;
    close_to("hexagon MAC", mac(&h).value, FRAC_PI_3, 1e-6)?;

    let mut rng = derive_rng(5, "acceptance-curvature", &[]);
    for _ in 0..100 {
        let d = rng.random_range(2..=16);
        let n = rng.random_range(3..=20);
        let points: Vec<Vec<f64>> = (0..n).map(|_| gaussian(d, &mut rng)).collect();
        let base = traj(&points);
        let q = random_orthogonal(d, &mut rng);
        let shift = gaussian(d, &mut rng);
        let scale = rng.random_range(0.01..100.0);
        let moved: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                (0..d)
                    .map(|r| scale * (0..d).map(|c| q[r][c] * p[c]).sum::<f64>() + shift[r])
                    .collect()
            })
            .collect();
        let m = traj(&moved);
        close_to("TAC under rigid motion", tac(&m).value, tac(&base).value, 1e-9)?;
        close_to("MAC under rigid motion", mac(&m).value, mac(&base).value, 1e-9)?;
    }
    Ok("fixtures within 1e-6; 100 random rotations/translations/scalings within 1e-9".into())
}

fn close_to(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want}"))
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = gaussian(d, rng);
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.iter().map(|x| x / n).collect());
        }
    }
    q
}

// ---------------------------------------------------------------- criterion 6

fn argmin(values: &[f64]) -> usize {
    (0..values.len())
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)))
        .unwrap()
}

fn nce_consistency() -> Outcome {
    let mut rng = derive_rng(6, "acceptance-nce", &[]);
    let mut agreed = 0;
    for trial in 0..100 {
        let k = rng.random_range(2..=64);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..1.0);
        let anchor = gaussian(d, &mut rng);
        let set: Vec<Vec<f64>> = (0..k).map(|_| unit(&gaussian(d, &mut rng))).collect();
        let a = unit(&anchor);
        let z: f64 = set
            .iter()
            .map(|x| (a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() / tau).exp())
            .sum();
        let mut first = Vec::with_capacity(k);
        let mut nce = Vec::with_capacity(k);
        for c in 0..k {
            let rest: Vec<&[f64]> = (0..k).filter(|&j| j != c).map(|j| set[j].as_slice()).collect();
            first.push(first_order_loss(&anchor, &set[c], &rest, tau).unwrap().value);
            nce.push(nce_loss(&anchor, &set[c], &rest, tau, k, z).unwrap().value);
        }
        if argmin(&first) == argmin(&nce) {
            agreed += 1;
        } else {
            return Err(format!("trial {trial}: argmin differs (K={k})"));
        }
    }
    Ok(format!("{agreed}/100 trials agree on the argmin positive"))
}

// ---------------------------------------------------------------- criterion 7

fn stack_checks() -> Outcome {
    let mut rng = derive_rng(7, "acceptance-stack", &[]);
    let (h, w) = (9, 11);
    let frame = |rng: &mut Rng| {
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let still = frame(&mut rng);
    let zero = stack_of_differences(&vec![still; 6]).unwrap();
    ensure(zero.data().iter().all(|&v| v == 0.0), || "identical frames give a non-zero stack".into())?;
    ensure(zero.shape() == (15, h, w), || format!("stack shape {:?}", zero.shape()))?;

    let frames: Vec<Image> = (0..6).map(|_| frame(&mut rng)).collect();
    let other: Vec<Image> = (0..6).map(|_| frame(&mut rng)).collect();
    let s = stack_of_differences(&frames).unwrap();
    let doubled: Vec<Image> = frames.iter().map(|f| f.map(|v| 2.0 * v)).collect();
    let d = stack_of_differences(&doubled).unwrap();
    ensure(d.data().iter().zip(s.data()).all(|(a, b)| *a == 2.0 * b), || "doubling is not exact".into())?;
    let summed: Vec<Image> = frames
        .iter()
        .zip(&other)
        .map(|(a, b)| Image::new(3, h, w, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap())
        .collect();
    let so = stack_of_differences(&other).unwrap();
    let ss = stack_of_differences(&summed).unwrap();
    ensure(
        ss.data().iter().zip(s.data().iter().zip(so.data())).all(|(t, (a, b))| *t == (a + b)),
        || "additivity is not exact".into(),
    )?;

    // inflated trunk on a stack whose blocks all equal X versus the RGB trunk on X
    let spec = SyntheticSpec {
        num_classes: 2,
        videos_per_class: 1,
        frames_per_video: 6,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let (videos, _) = common::videos(&spec);
    let trainer = Trainer::new(PretrainConfig::default(), videos.iter().collect(), vec![0, 1]).unwrap();
    let encoder = trainer.encoder();
    let ckpt = trainer.checkpoint();
    let config = EvalConfig {
        input_mode: InputMode::StackOfDifferences,
        inflate: true,
        ..EvalConfig::default()
    };
    let clf = build_classifier(&ckpt, 4, &config).unwrap();
    let size = encoder.config().input_size;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = Image::new(3, size, size, (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tiled = Vec::with_capacity(15 * size * size);
        for _ in 0..5 {
            tiled.extend_from_slice(x.data());
        }
        let stacked = Image::new(15, size, size, tiled).unwrap();
        let want = encoder.features(&x).unwrap();
        let got = clf.features(&stacked).unwrap();
        let num: f64 = want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    ensure(worst <= 1e-6, || format!("inflation relative error {worst:e}"))?;
    Ok(format!("zero, linear and 15x{h}x{w} exactly; inflation relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 8

const SEEDS: u64 = 3;
/// Probe runs per encoder, each on its own stratified held-out split.
const PROBE_SPLITS: u64 = 5;

/// Pretrains one seed and returns (initial TAC, final TAC, random-init probe
/// top-1, pretrained probe top-1).
fn directional_seed(seed: u64) -> Result<(f64, f64, f64, f64), String> {
    let spec = SyntheticSpec {
        num_classes: 4,
        videos_per_class: 10,
        frames_per_video: 30,
        image_size: 32,
        seed,
        ..SyntheticSpec::default()
    };
    let (videos, labels) = common::videos(&spec);
    let mut cfg = PretrainConfig::default();
    cfg.train.epochs = 10;
    cfg.train.lr = 0.01;
    cfg.train.batch_size = 20;
    cfg.train.lr_decay_epoch = 5;
    cfg.train.workers = 1;
    cfg.train.seed = seed;
    cfg.loss.temperature = 0.1;
    cfg.mining.enabled = true;
    let out = pretrain(
        &PretrainData {
            videos: &videos,
            labels: &labels,
        },
        &cfg,
        None,
    )
    .map_err(|e| format!("seed {seed}: {e}"))?;
    let first = out.metrics.first().ok_or("no metrics")?;
    let last = out.metrics.last().ok_or("no metrics")?;
    ensure(first.epoch == 0 && last.epoch == 10, || format!("seed {seed}: unexpected metric rows"))?;
    let initial = Trainer::new(cfg.clone(), videos.iter().collect(), (0..videos.len()).collect())
        .map_err(|e| e.to_string())?
        .checkpoint();

    let labels: Vec<usize> = labels.iter().map(|l| l.expect("synthetic videos are labelled")).collect();
    let data = LabeledData {
        videos: &videos,
        labels: &labels,
    };
    let probe = |ckpt: &Checkpoint| -> Result<f64, String> {
        let mut total = 0.0;
        for split in 0..PROBE_SPLITS {
            let config = EvalConfig {
                mode: EvalMode::LinearProbe,
                input_mode: InputMode::StackOfDifferences,
                inflate: true,
                epochs: 30,
                lr: 0.05,
                lr_decay_epoch: 20,
                augment: false,
                held_out_fraction: 0.2,
                seed: seed * 100 + split,
                workers: 1,
                ..EvalConfig::default()
            };
            let clf = build_classifier(ckpt, 4, &config).map_err(|e| e.to_string())?;
            let run = finetune(clf, &data, &config, &cfg.augment).map_err(|e| e.to_string())?;
            total += run.history.last().expect("epochs >= 1").val_top1;
        }
        Ok(total / PROBE_SPLITS as f64)
    };
    let random = probe(&initial)?;
    let pretrained = probe(&out.checkpoint)?;
    Ok((first.mean_tac, last.mean_tac, random, pretrained))
}

fn directional_run() -> Outcome {
    let start = Instant::now();
    let mut tac_ok = true;
    let mut gain = 0.0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let (tac0, tac_e, random, pretrained) = directional_seed(seed)?;
        tac_ok &= tac_e < tac0;
        gain += (pretrained - random) / SEEDS as f64;
        let row = format!(
            "seed {seed}: TAC {tac0:.2} -> {tac_e:.2}, probe top-1 random {:.1}% pretrained {:.1}%",
            100.0 * random,
            100.0 * pretrained
        );
        eprintln!("{row}");
        rows.push(row);
    }
    let summary = format!("{}; mean probe gain {:+.1} points", rows.join("; "), 100.0 * gain);
    ensure(tac_ok, || format!("(a) held-out TAC did not fall for every seed; {summary}"))?;
    ensure(gain >= 0.10, || format!("(b) probe gain below 10 points; {summary}"))?;
    within_budget(start, Duration::from_secs(15 * 60))?;
    Ok(summary)
}

// ---------------------------------------------------------------- criterion 9

fn reproducibility() -> Outcome {
    let (videos, labels) = common::videos(&common::tiny_spec(9));
    let mut cfg = common::tiny_config(9);
    cfg.train.workers = 1;
    let data = PretrainData {
        videos: &videos,
        labels: &labels,
    };
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        pretrain(&data, &cfg, Some(dir.path())).map_err(|e| e.to_string())?;
        files.push(std::fs::read(dir.path().join(METRICS_FILE)).unwrap());
    }
    ensure(files[0] == files[1], || "metrics.tsv differs between identical runs".into())?;
    Ok(format!("two runs wrote identical metrics.tsv ({} bytes)", files[0].len()))
}

// --------------------------------------------------------------- criterion 10

fn checkpoint_round_trip() -> Outcome {
    let (videos, labels) = common::videos(&common::tiny_spec(10));
    let cfg = common::tiny_config(10);
    let out = pretrain(
        &PretrainData {
            videos: &videos,
            labels: &labels,
        },
        &cfg,
        None,
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tce");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let before = out.checkpoint.build_encoder().unwrap();
    let after = loaded.build_encoder().unwrap();
    let probe: Vec<&Image> = videos.iter().flat_map(VideoSequence::frames).take(24).collect();
    for f in &probe {
        let (a, b): (Embedding, Embedding) = (before.embed(f).unwrap(), after.embed(f).unwrap());
        let same = a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || "reloaded encoder output differs".into())?;
    }

    let bytes = std::fs::read(&path).unwrap();
    let mut rejected = 0;
    let positions = [bytes.len() / 3, bytes.len() / 2, bytes.len() - 9];
    for &pos in &positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        let p = dir.path().join(format!("bad_{pos}.tce"));
        std::fs::write(&p, &bad).unwrap();
        if Checkpoint::load(&p).is_err() {
            rejected += 1;
        }
    }
    ensure(rejected == positions.len(), || {
        format!("{rejected}/{} corrupted files rejected", positions.len())
    })?;
    Ok(format!(
        "{} probe frames bit-exact after reload; {rejected}/{} corruptions rejected",
        probe.len(),
        positions.len()
    ))
}

