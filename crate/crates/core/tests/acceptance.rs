//! Acceptance gate. Every check prints one `PASS` or `FAIL` line straight to
//! stdout (bypassing the test harness capture) before asserting.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uaseg::adversarial::{fgsm, vat_perturb, AdvConfig, AdversarialGenerator, MixedBatch};
use uaseg::data::{load_dataset, save_dataset, DatasetBundle, Provenance, Sample, SampleSet, SplitSpec, SyntheticSpec};
use uaseg::losses::{agreement_loss, cross_model_ce, diversity_loss, total_loss, weighted_ce, DiversityModes};
use uaseg::metrics::{dsc, hd, BinaryMask};
use uaseg::segnet::{softmax, DropoutMode, ProbMap, SegModel, SegNetConfig};
use uaseg::tensor::{LabelMask, Tensor4, UncertaintyMap, WeightMap};
use uaseg::trainer::{train, LogConfig, Method, RunReport, TrainConfig, Trainer};
use uaseg::uncertainty::{
    encode_pgm, export_heatmap, heatmap_level, predictive_entropy, unsup_weight, NormMode, UncertaintySchedule,
    UnsupNormConfig,
};

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- metrics

fn oracle_dsc(s: &HashSet<(usize, usize)>, g: &HashSet<(usize, usize)>) -> f64 {
    if s.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * s.intersection(g).count() as f64 / (s.len() + g.len()) as f64
}

fn oracle_hd(s: &HashSet<(usize, usize)>, g: &HashSet<(usize, usize)>, h: usize, w: usize) -> f64 {
    match (s.is_empty(), g.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let directed = |a: &HashSet<(usize, usize)>, b: &HashSet<(usize, usize)>| {
        a.iter()
            .map(|&(ay, ax)| {
                b.iter()
                    .map(|&(by, bx)| {
                        let dy = ay as f64 - by as f64;
                        let dx = ax as f64 - bx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(s, g).max(directed(g, s))
}

#[test]
fn metrics_match_brute_force_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut dsc_bad = 0;
    let mut worst_hd = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let density = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0][rng.random_range(0..6)];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<bool> { (0..h * w).map(|_| rng.random_bool(density)).collect() };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let set = |m: &[bool]| -> HashSet<(usize, usize)> {
            (0..h * w).filter(|&i| m[i]).map(|i| (i / w, i % w)).collect()
        };
        let (sa, sb) = (set(&a), set(&b));
        let ma = BinaryMask::new(h, w, a).unwrap();
        let mb = BinaryMask::new(h, w, b).unwrap();
        if dsc(&ma, &mb).unwrap() != oracle_dsc(&sa, &sb) {
            dsc_bad += 1;
        }
        worst_hd = worst_hd.max((hd(&ma, &mb).unwrap() - oracle_hd(&sa, &sb, h, w)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "metrics oracle equivalence",
        dsc_bad == 0 && worst_hd <= 1e-9 && secs < 10.0,
        &format!("1000 pairs, dsc mismatches {dsc_bad}, worst hd error {worst_hd:.2e}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- entropy

fn oracle_entropy(samples: &[Vec<f64>]) -> f64 {
    let k = samples[0].len();
    let t = samples.len() as f64;
    (0..k)
        .map(|c| samples.iter().map(|s| s[c]).sum::<f64>() / t)
        .filter(|&m| m > 0.0)
        .map(|m| -m * m.ln())
        .sum()
}

fn entropy_of(samples: &[Vec<f64>]) -> f64 {
    let k = samples[0].len();
    let maps: Vec<ProbMap> = samples
        .iter()
        .map(|p| ProbMap::from_pixels([1, k, 1, 1], std::slice::from_ref(p)).unwrap())
        .collect();
    predictive_entropy(&maps).unwrap().values()[0]
}

#[test]
fn entropy_properties_hold() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for i in 0..10_000 {
        let k = rng.random_range(2..=6);
        let t = rng.random_range(2..=10);
        let ln_k = (k as f64).ln();
        let mut samples: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..k)
                    .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>().powi(3) + 1e-12 })
                    .collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            })
            .collect();
        let u = entropy_of(&samples);
        if !(0.0..=ln_k + 1e-12).contains(&u) {
            failures.push(format!("set {i}: {u} outside [0, ln {k}]"));
        }
        if (u - oracle_entropy(&samples)).abs() > 1e-12 {
            failures.push(format!("set {i}: oracle mismatch"));
        }
        samples.shuffle(&mut rng);
        if (entropy_of(&samples) - u).abs() > 1e-12 {
            failures.push(format!("set {i}: not permutation invariant"));
        }
        let uniform = vec![vec![1.0 / k as f64; k]; t];
        if (entropy_of(&uniform) - ln_k).abs() > 1e-12 {
            failures.push(format!("set {i}: uniform entropy is not ln {k}"));
        }
        let mut hot = vec![0.0; k];
        hot[rng.random_range(0..k)] = 1.0;
        if entropy_of(&vec![hot; t]) != 0.0 {
            failures.push(format!("set {i}: one-hot entropy is not 0"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "entropy properties",
        failures.is_empty() && secs < 10.0,
        &format!("10000 sets, {} violations {:?}, {secs:.2}s", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    );
}

// ---------------------------------------------------------------- gradients

/// Zero-initialised biases put pre-activations fed by all-zero regions
/// (padding, dropped units, clamped pixels) exactly on the ReLU kink, where
/// central differences average the two one-sided slopes. Random biases move
/// the check to a differentiable point.
fn tiny_model(seed: u64) -> SegModel<f64> {
    let mut m = SegModel::init(
        SegNetConfig {
            num_classes: 3,
            base_channels: 2,
            depth: 2,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.data.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    m
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor4<f64> {
    Tensor4::from_vec([n, 1, h, w], (0..n * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: u8) -> LabelMask {
    LabelMask::from_vec([n, h, w], (0..n * h * w).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> WeightMap {
    WeightMap::from_vec([n, h, w], (0..n * h * w).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap()
}

/// Central differences over every parameter; returns (agreeing, checked).
fn fd_agreement(model: &SegModel<f64>, analytic: &[f64], f: impl Fn(&SegModel<f64>) -> f64) -> (usize, usize, f64) {
    let step = 1e-5;
    let (mut good, mut checked, mut worst) = (0, 0, 0.0f64);
    let mut flat = 0;
    for p in 0..model.params().len() {
        for j in 0..model.params()[p].data.len() {
            let a = analytic[flat];
            flat += 1;
            if a.abs() <= 1e-8 {
                continue;
            }
            let mut plus = model.clone();
            plus.params_mut()[p].data[j] += step;
            let mut minus = model.clone();
            minus.params_mut()[p].data[j] -= step;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            worst = worst.max(rel);
            checked += 1;
            if rel < 1e-3 {
                good += 1;
            }
        }
    }
    (good, checked, worst)
}

fn probs(m: &SegModel<f64>, x: &Tensor4<f64>, mode: DropoutMode) -> ProbMap {
    softmax(&m.forward(x, mode).unwrap()).unwrap()
}

#[test]
fn losses_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m1, m2) = (tiny_model(21), tiny_model(22));
    let (d1, d2) = (DropoutMode::On(5), DropoutMode::On(6));
    let x1 = random_images(&mut rng, 2, 4, 4);
    let y1 = random_labels(&mut rng, 2, 4, 4, 3);
    let w1 = random_weights(&mut rng, 2, 4, 4);
    let xu = random_images(&mut rng, 2, 4, 4);
    let wu = random_weights(&mut rng, 2, 4, 4);
    let mut results = Vec::new();

    // Supervised weighted cross-entropy.
    let (logits, trace) = m1.forward_traced(&x1, d1).unwrap();
    let sup = weighted_ce(&softmax(&logits).unwrap(), &y1, &w1).unwrap();
    let g = m1.param_gradients(&[&trace], &sup).unwrap().flatten();
    let sup_f = |m: &SegModel<f64>| weighted_ce(&probs(m, &x1, d1), &y1, &w1).unwrap().value();
    results.push(("weighted ce", fd_agreement(&m1, &g, sup_f)));

    // Agreement, both models.
    let (l1, t1) = m1.forward_traced(&xu, d1).unwrap();
    let (l2, t2) = m2.forward_traced(&xu, d2).unwrap();
    let (p1, p2) = (softmax(&l1).unwrap(), softmax(&l2).unwrap());
    let agr = agreement_loss(&p1, &p2, &wu).unwrap();
    let p2_fixed = probs(&m2, &xu, d2);
    let p1_fixed = probs(&m1, &xu, d1);
    let g = m1.param_gradients(&[&t1], &agr).unwrap().flatten();
    let agr_f1 = |m: &SegModel<f64>| agreement_loss(&probs(m, &xu, d1), &p2_fixed, &wu).unwrap().value();
    results.push(("agreement (model 1)", fd_agreement(&m1, &g, agr_f1)));
    let g = m2.param_gradients(&[&t2], &agr).unwrap().flatten();
    let agr_f2 = |m: &SegModel<f64>| agreement_loss(&p1_fixed, &probs(m, &xu, d2), &wu).unwrap().value();
    results.push(("agreement (model 2)", fd_agreement(&m2, &g, agr_f2)));

    // Diversity. The attacked models' clean predictions and the adversarial
    // images are constants of the loss, so they are regenerated once and
    // held fixed while the student parameters move.
    let images = Tensor4::concat(&[&x1, &xu]).unwrap();
    let labels = LabelMask::concat(&[&y1, &LabelMask::unlabeled([2, 4, 4])]).unwrap();
    let batch = MixedBatch::new(images, labels, vec![true, true, false, false]).unwrap();
    let adv = AdvConfig::default();
    let modes = DiversityModes {
        adversarial_seeds: [7, 8],
        student_dropout: [d1, d2],
    };
    let div = diversity_loss(&m1, &m2, &batch, &adv, modes).unwrap();
    let attack1 = adv.generate(&m1, &batch, 7).unwrap();
    let attack2 = adv.generate(&m2, &batch, 8).unwrap();
    let g = m1.param_gradients(&[&div.first_trace], &div.loss).unwrap().flatten();
    let div_f1 = |m: &SegModel<f64>| {
        cross_model_ce(&attack2.clean, &probs(m, &attack2.images, d1)).unwrap().value() + div.teach_second
    };
    results.push(("diversity (model 1)", fd_agreement(&m1, &g, div_f1)));
    let g = m2.param_gradients(&[&div.second_trace], &div.loss).unwrap().flatten();
    let div_f2 = |m: &SegModel<f64>| {
        cross_model_ce(&attack1.clean, &probs(m, &attack1.images, d2)).unwrap().value() + div.teach_first
    };
    results.push(("diversity (model 2)", fd_agreement(&m2, &g, div_f2)));

    // Composite objective for model 1.
    let (lam_cot, lam_div) = (0.7, 0.3);
    let x2 = random_images(&mut rng, 2, 4, 4);
    let y2 = random_labels(&mut rng, 2, 4, 4, 3);
    let (l2s, _) = m2.forward_traced(&x2, d2).unwrap();
    let sup2 = weighted_ce(&softmax(&l2s).unwrap(), &y2, &w1).unwrap();
    let joint = total_loss(sup.clone().plus(sup2.clone()), agr.clone(), div.loss.clone(), lam_cot, lam_div);
    let g = m1.param_gradients(&[&trace, &t1, &div.first_trace], &joint).unwrap().flatten();
    let joint_f = |m: &SegModel<f64>| sup_f(m) + sup2.value() + lam_cot * agr_f1(m) + lam_div * div_f1(m);
    results.push(("composite objective", fd_agreement(&m1, &g, joint_f)));

    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 60.0;
    let mut detail = Vec::new();
    for (name, (good, checked, worst)) in &results {
        let ok = *checked > 0 && *good as f64 >= 0.99 * *checked as f64;
        pass &= ok;
        detail.push(format!("{name} {good}/{checked} (worst {worst:.1e})"));
    }
    verdict("gradient checks", pass, &format!("{}; {secs:.1}s", detail.join(", ")));
}

// ---------------------------------------------------------------- perturbations

fn ce_of<T: uaseg::tensor::Real>(m: &SegModel<T>, x: &Tensor4<T>, y: &LabelMask) -> f64 {
    let p = softmax(&m.forward(x, DropoutMode::Off).unwrap()).unwrap();
    let [n, h, w] = y.dims();
    weighted_ce(&p, y, &WeightMap::filled([n, h, w], 1.0)).unwrap().value()
}

#[test]
fn perturbations_honour_their_budgets() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 0.03;
    let cfg = SegNetConfig {
        num_classes: 3,
        base_channels: 4,
        depth: 2,
        ..Default::default()
    };

    let mut linf_bad = 0;
    let (mut moved, mut free) = (0usize, 0usize);
    let mut vat_worst = 0.0f64;
    let mut raised = 0;
    for trial in 0..100u64 {
        let m = SegModel::<f64>::init(cfg.clone(), 100 + trial).unwrap();
        let x = random_images(&mut rng, 2, 8, 8);
        let y = random_labels(&mut rng, 2, 8, 8, 3);
        let clamped = fgsm(&m, &x, &y, eps, true).unwrap();
        let raw = fgsm(&m, &x, &y, eps, false).unwrap();
        for ((c, r), x0) in clamped.data().iter().zip(raw.data()).zip(x.data()) {
            if (c - x0).abs() > eps + 1e-12 {
                linf_bad += 1;
            }
            if (0.0..=1.0).contains(r) && r != x0 {
                free += 1;
                if ((c - x0).abs() - eps).abs() <= 1e-12 {
                    moved += 1;
                }
            }
        }
        if ce_of(&m, &clamped, &y) > ce_of(&m, &x, &y) {
            raised += 1;
        }

        if trial < 20 {
            let adv = AdvConfig {
                clamp_to_unit: false,
                ..Default::default()
            };
            let vat = vat_perturb(&m, &x, &adv, trial).unwrap();
            for i in 0..2 {
                let norm = vat.item(i).iter().zip(x.item(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                vat_worst = vat_worst.max((norm - adv.eps_vat).abs());
            }
            let m32 = m.cast::<f32>();
            let x32 = x.map(|v| v as f32);
            let vat = vat_perturb(&m32, &x32, &adv, trial).unwrap();
            for i in 0..2 {
                let norm = vat
                    .item(i)
                    .iter()
                    .zip(x32.item(i))
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                vat_worst = vat_worst.max((norm - adv.eps_vat).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = linf_bad == 0 && free > 0 && moved == free && vat_worst <= 1e-5 && raised >= 90 && secs < 60.0;
    verdict(
        "perturbation contracts",
        pass,
        &format!(
            "FGSM over-budget pixels {linf_bad}, unsaturated pixels at exactly eps {moved}/{free}, \
             VAT worst L2 error {vat_worst:.1e}, CE raised in {raised}/100, {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------- schedule

fn small_bundle() -> DatasetBundle {
    DatasetBundle::synthesize(
        &SyntheticSpec {
            n_images: 24,
            height: 16,
            width: 16,
            num_classes: 3,
            seed: 9,
            ..Default::default()
        },
        6,
        &SplitSpec {
            label_ratio: 0.25,
            split_seed: 9,
        },
    )
    .unwrap()
}

fn small_cfg(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size_labeled: 2,
        batch_size_unlabeled: 6,
        method,
        model: SegNetConfig {
            num_classes: 3,
            base_channels: 4,
            ..Default::default()
        },
        mc: uaseg::uncertainty::McConfig {
            samples: 3,
            base_seed: 0,
        },
        lr_decay_every: 15,
        log: LogConfig {
            heatmap_every: 0,
            ..Default::default()
        },
        global_seed: 3,
        ..Default::default()
    }
}

#[test]
fn schedule_and_mode_equivalence() {
    let bundle = small_bundle();
    let dct = train(small_cfg(Method::Dct, 3), &bundle).unwrap();
    let mut ours_cfg = small_cfg(Method::Ours, 3);
    ours_cfg.schedule = UncertaintySchedule::never();
    let ours = train(ours_cfg, &bundle).unwrap();
    let identical = dct.to_json().unwrap() == ours.to_json().unwrap();

    let run = train(small_cfg(Method::Ours, 22), &bundle).unwrap();
    let ones_before = run.epochs[..20].iter().all(|e| {
        let w = e.agreement_weights.unwrap();
        w.min == 1.0 && w.max == 1.0
    });
    let weighted_after = run.epochs[20..].iter().all(|e| {
        let w = e.agreement_weights.unwrap();
        e.unsup_uncertainty && w.max < 1.4 + 1e-12
    });

    let norm = UnsupNormConfig {
        beta: 0.7,
        c_norm: 2.0,
        mode: NormMode::Literal,
    };
    let zero = UncertaintyMap::filled([1, 2, 2], 0.0);
    let spot = unsup_weight(&zero, &zero, &norm, true).unwrap();
    let spot_ok = spot.values().iter().all(|&v| v == -1.4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u1 = UncertaintyMap::from_vec([1, 4, 4], (0..16).map(|_| rng.random_range(0.0..1.4)).collect()).unwrap();
    let u2 = UncertaintyMap::from_vec([1, 4, 4], (0..16).map(|_| rng.random_range(0.0..1.4)).collect()).unwrap();
    let lit = unsup_weight(&u1, &u2, &norm, true).unwrap();
    let literal_ok = lit
        .values()
        .iter()
        .zip(u1.values().iter().zip(u2.values()))
        .all(|(&v, (a, b))| v == -0.7 * ((a + b) / 2.0 + 2.0));

    verdict(
        "schedule and equivalence",
        identical && ones_before && weighted_after && spot_ok && literal_ok,
        &format!(
            "DCT == OURS(never,never) bitwise {identical}, all-ones before epoch 20 {ones_before}, \
             weighted from epoch 20 {weighted_after}, literal spot value {} ({spot_ok}), literal formula {literal_ok}",
            spot.values()[0]
        ),
    );
}

// ---------------------------------------------------------------- determinism

#[test]
fn runs_are_deterministic_and_resumable() {
    let bundle = small_bundle();
    let cfg = small_cfg(Method::Ours, 20);
    let a = train(cfg.clone(), &bundle).unwrap().to_json().unwrap();
    let b = train(cfg.clone(), &bundle).unwrap().to_json().unwrap();
    let repeat = a == b;

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), &bundle).unwrap();
    for _ in 0..10 {
        first.run_epoch().unwrap();
    }
    first.checkpoint(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::restore(cfg, &bundle, dir.path()).unwrap();
    let at = resumed.epoch();
    while !resumed.is_finished() {
        resumed.run_epoch().unwrap();
    }
    let r: RunReport = resumed.finish().unwrap();
    let resume = at == 10 && r.to_json().unwrap() == a;

    verdict(
        "determinism and resume",
        repeat && resume,
        &format!("repeat run byte-identical {repeat}, resume at epoch {at} of 20 identical {resume}"),
    );
}

// ---------------------------------------------------------------- ordering

struct SeedResult {
    part: f64,
    dct: f64,
    ours: f64,
    entropy_first: f64,
    entropy_last: f64,
}

fn ordering_runs() -> &'static (Vec<SeedResult>, f64) {
    static RUNS: OnceLock<(Vec<SeedResult>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let results = (0..3u64)
            .map(|seed| {
                let bundle = DatasetBundle::synthesize(
                    &SyntheticSpec { seed, ..Default::default() },
                    50,
                    &SplitSpec {
                        label_ratio: 0.1,
                        split_seed: seed,
                    },
                )
                .unwrap();
                let run = |method| {
                    let cfg = TrainConfig {
                        epochs: 40,
                        method,
                        global_seed: seed,
                        ..Default::default()
                    };
                    train(cfg, &bundle).unwrap()
                };
                let ours = run(Method::Ours);
                let mean = |u: Option<[f64; 2]>| {
                    let u = u.expect("test uncertainty logged every epoch");
                    (u[0] + u[1]) / 2.0
                };
                SeedResult {
                    part: run(Method::Part).vot.mean_dsc,
                    dct: run(Method::Dct).vot.mean_dsc,
                    ours: ours.vot.mean_dsc,
                    entropy_first: mean(ours.epochs.first().unwrap().test_uncertainty),
                    entropy_last: mean(ours.epochs.last().unwrap().test_uncertainty),
                }
            })
            .collect();
        (results, start.elapsed().as_secs_f64())
    })
}

#[test]
fn ordering_experiment() {
    let (runs, secs) = ordering_runs();
    let n = runs.len() as f64;
    let part = runs.iter().map(|r| r.part).sum::<f64>() / n;
    let dct = runs.iter().map(|r| r.dct).sum::<f64>() / n;
    let ours = runs.iter().map(|r| r.ours).sum::<f64>() / n;
    let per_seed: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: part {:.2} dct {:.2} ours {:.2}", r.part, r.dct, r.ours))
        .collect();
    verdict(
        "scaled ordering experiment",
        ours >= part + 2.0 && ours >= dct - 0.5,
        &format!(
            "mean VOT DSC part {part:.2}, dct {dct:.2}, ours {ours:.2} ({}); {secs:.0}s",
            per_seed.join("; ")
        ),
    );
}

#[test]
fn uncertainty_decreases_during_training() {
    let (runs, _) = ordering_runs();
    let lines: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: {:.3} -> {:.3}", r.entropy_first, r.entropy_last))
        .collect();
    verdict(
        "uncertainty dynamics",
        runs.iter().all(|r| r.entropy_last < r.entropy_first),
        &format!("mean test entropy first -> last epoch, {}", lines.join("; ")),
    );
}

// ---------------------------------------------------------------- IO

fn arb_set(h: usize, w: usize, k: usize, masks: bool) -> impl Strategy<Value = SampleSet> {
    let sample = (
        prop::collection::vec(0.0f32..=1.0, h * w),
        prop::collection::vec(0..k as u8, h * w),
    )
        .prop_map(move |(image, mask)| Sample {
            image,
            mask: masks.then_some(mask),
        });
    prop::collection::vec(sample, 0..4).prop_map(move |samples| SampleSet {
        height: h,
        width: w,
        num_classes: k,
        samples,
    })
}

fn arb_bundle() -> impl Strategy<Value = DatasetBundle> {
    (1usize..7, 1usize..7, 2usize..5).prop_flat_map(|(h, w, k)| {
        (
            arb_set(h, w, k, true),
            arb_set(h, w, k, true),
            arb_set(h, w, k, false),
            arb_set(h, w, k, true),
            any::<(u64, u64)>(),
            0.0f64..1.0,
        )
            .prop_map(|(labeled_1, labeled_2, unlabeled, test, (data_seed, split_seed), label_ratio)| DatasetBundle {
                labeled_1,
                labeled_2,
                unlabeled,
                test,
                provenance: Provenance {
                    data_seed,
                    split_seed,
                    label_ratio,
                    noise_std: 0.1,
                },
            })
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn round_trips(cases: u32) -> std::result::Result<(), String> {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&arb_bundle(), |bundle| {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            save_dataset(&bundle, a.path()).unwrap();
            let loaded = load_dataset(a.path()).unwrap();
            prop_assert_eq!(&loaded, &bundle);
            save_dataset(&loaded, b.path()).unwrap();
            prop_assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn heatmaps_parse() -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = UncertaintyMap::from_vec([3, 5, 7], (0..105).map(|_| rng.random_range(0.0..1.2)).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_heatmap(&u, 3, dir.path(), "m1", 4).map_err(|e| e.to_string())?;
    for (i, p) in paths.iter().enumerate() {
        let img = image::open(p).map_err(|e| format!("{}: {e}", p.display()))?.to_luma8();
        if img.dimensions() != (7, 5) {
            return Err(format!("{} has dimensions {:?}", p.display(), img.dimensions()));
        }
        let expected: Vec<u8> = u.item(i).iter().map(|&v| heatmap_level(v, 3)).collect();
        if img.as_raw() != &expected || !encode_pgm(&u, i, 3).starts_with(b"P5\n7 5\n255\n") {
            return Err(format!("{} decodes to different levels", p.display()));
        }
    }
    Ok(paths.len())
}

fn write_config(path: &Path) {
    let text = "\
data.n_images = 16
data.n_test = 4
data.height = 16
data.width = 16
data.num_classes = 3
split.label_ratio = 0.25
model.base_channels = 4
train.epochs = 2
train.batch_size_labeled = 2
train.batch_size_unlabeled = 4
mc.samples = 3
log.heatmap_every = 1
log.heatmap_items = 2
";
    fs::write(path, text).unwrap();
}

fn ablation_single_seed() -> std::result::Result<(Vec<String>, usize), String> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_config(&cfg);
    let bin = env!("CARGO_BIN_EXE_uaseg");
    let data = dir.path().join("data");
    let out = dir.path().join("ablation");
    let status = Command::new(bin)
        .args(["generate-data", "--spec"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let status = Command::new(bin)
        .arg("ablate")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .args(["--seeds", "5", "--methods", "part,ours", "--out"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let table = fs::read_to_string(out.join("summary.txt")).map_err(|e| e.to_string())?;
    let lines: Vec<String> = table.lines().map(str::to_string).collect();
    let cell = regex_free_cell;
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != 2 + 2 * 3 || !cells[2..].iter().all(|c| cell(c)) {
            return Err(format!("malformed row `{line}`"));
        }
    }
    let heatmaps = fs::read_dir(out.join("ours/seed_5/heatmaps"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .map(|p| image::open(&p).map(|_| ()).map_err(|e| format!("{}: {e}", p.display())))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .len();
    Ok((lines, heatmaps))
}

/// `d.dd(0.00)`: two-decimal mean with zero spread.
fn regex_free_cell(c: &str) -> bool {
    let Some((mean, rest)) = c.split_once('(') else { return false };
    let two_decimals = |s: &str| {
        s.split_once('.')
            .is_some_and(|(i, f)| !i.is_empty() && i.bytes().all(|b| b.is_ascii_digit()) && f.len() == 2 && f.bytes().all(|b| b.is_ascii_digit()))
    };
    two_decimals(mean) && rest == "0.00)"
}

#[test]
fn dataset_and_report_io() {
    let rt = round_trips(64);
    let pgm = heatmaps_parse();
    let ablation = ablation_single_seed();
    let pass = rt.is_ok() && pgm.is_ok() && ablation.as_ref().is_ok_and(|(_, n)| *n > 0);
    let detail = format!(
        "save/load byte-exact on 64 random bundles {}, PGM heatmaps parsed {}, single-seed ablation table {}",
        rt.as_ref().map_or_else(|e| format!("failed: {e}"), |_| "ok".into()),
        pgm.as_ref().map_or_else(|e| format!("failed: {e}"), |n| format!("{n} ok")),
        ablation
            .as_ref()
            .map_or_else(|e| format!("failed: {e}"), |(l, n)| format!("{} rows with std 0, {n} run heatmaps ok", l.len() - 1)),
    );
    verdict("dataset and report IO", pass, &detail);
}
