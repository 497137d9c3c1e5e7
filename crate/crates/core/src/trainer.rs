//! The co-training loop, its baselines and ablations, evaluation and
//! resumable training state.
//!
//! Randomness comes from two ChaCha8 streams seeded by `global_seed`:
//! the training stream (batch order, augmentation, training dropout,
//! adversarial seeds) and the Monte Carlo stream (base seeds for
//! uncertainty sampling). Test-set uncertainty logging derives its seeds
//! from `(global_seed, epoch)` and touches neither stream.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvConfig, MixedBatch};
use crate::codec::{self, ByteReader};
use crate::data::{augment, AugmentConfig, DatasetBundle, SampleSet};
use crate::error::{Error, Result};
use crate::losses::{
    agreement_loss, diversity_loss, lambda_rampup, total_loss, weighted_ce, DiversityModes, LossWeights, ScalarLoss,
};
use crate::metrics::{avg_individual, ensemble_vote, per_class_report_scaled, predict_labels, EnsembleMode, MetricsReport};
use crate::segnet::{softmax, Adam, AdamConfig, DropoutMode, OptimizerStep, ProbMap, SegModel, SegNetConfig};
use crate::tensor::{LabelMask, Tensor4, UncertaintyMap, WeightMap};
use crate::uncertainty::{
    export_heatmap, mc_sample, predictive_entropy, schedule_active, sup_weight, unsup_weight, McConfig,
    UncertaintySchedule, UnsupNormConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Each model on its own labeled half, plain cross-entropy.
    Part,
    /// Each model on all labeled images, plain cross-entropy.
    Independent,
    /// Co-training with both uncertainty stages off.
    Dct,
    /// Co-training with both uncertainty stages on schedule.
    Ours,
    SupUncOnly,
    UnsupUncOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Part,
        Method::Independent,
        Method::Dct,
        Method::Ours,
        Method::SupUncOnly,
        Method::UnsupUncOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Part => "part",
            Method::Independent => "independent",
            Method::Dct => "dct",
            Method::Ours => "ours",
            Method::SupUncOnly => "sup-unc",
            Method::UnsupUncOnly => "unsup-unc",
        }
    }

    pub fn is_co_training(self) -> bool {
        !matches!(self, Method::Part | Method::Independent)
    }

    /// The schedule this method actually runs with.
    pub fn effective_schedule(self, sched: &UncertaintySchedule) -> UncertaintySchedule {
        let never = UncertaintySchedule::NEVER;
        match self {
            Method::Ours => sched.clone(),
            Method::SupUncOnly => UncertaintySchedule {
                sup_start_epoch: sched.sup_start_epoch,
                unsup_start_epoch: never,
            },
            Method::UnsupUncOnly => UncertaintySchedule {
                sup_start_epoch: never,
                unsup_start_epoch: sched.unsup_start_epoch,
            },
            _ => UncertaintySchedule::never(),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Test-set uncertainty logging, heatmap export and checkpoint cadence.
/// An interval of 0 disables the feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LogConfig {
    pub uncertainty_every: usize,
    /// Test images used for uncertainty logging; 0 means all.
    pub uncertainty_items: usize,
    pub heatmap_every: usize,
    pub heatmap_items: usize,
    pub checkpoint_every: usize,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            uncertainty_every: 1,
            uncertainty_items: 0,
            heatmap_every: 10,
            heatmap_items: 4,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub method: Method,
    pub model: SegNetConfig,
    pub mc: McConfig,
    pub schedule: UncertaintySchedule,
    pub unsup_norm: UnsupNormConfig,
    /// Lower bound on supervised uncertainty weights.
    pub sup_floor: f64,
    pub weights: LossWeights,
    pub adv: AdvConfig,
    pub adam: AdamConfig,
    pub lr: f64,
    /// Learning rate falls tenfold every this many epochs; 0 never decays.
    pub lr_decay_every: usize,
    pub global_seed: u64,
    pub augment: Option<AugmentConfig>,
    pub log: LogConfig,
    /// Physical size of one pixel; Hausdorff distances are multiplied by it.
    pub spacing: f64,
}

/// VAT radius for 32×32 inputs: the 256×256 value of 10 scaled to the same
/// per-pixel RMS perturbation (10 · 32 / 256).
pub const DESK_EPS_VAT: f64 = 1.25;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size_labeled: 4,
            batch_size_unlabeled: 8,
            method: Method::Ours,
            model: SegNetConfig::default(),
            mc: McConfig::default(),
            schedule: UncertaintySchedule::default(),
            unsup_norm: UnsupNormConfig::default(),
            sup_floor: 0.1,
            weights: LossWeights::default(),
            adv: AdvConfig {
                eps_vat: DESK_EPS_VAT,
                ..Default::default()
            },
            adam: AdamConfig::default(),
            lr: 3e-3,
            lr_decay_every: 30,
            global_seed: 0,
            augment: Some(AugmentConfig::default()),
            log: LogConfig::default(),
            spacing: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size_labeled < 1 || self.batch_size_unlabeled < 1 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if !(self.sup_floor >= 0.0 && self.sup_floor.is_finite()) {
            return Err(Error::Config("sup_floor must be non-negative".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        if let Some(aug) = &self.augment {
            if !((0.0..=1.0).contains(&aug.flip_prob) && aug.crop_fraction > 0.0 && aug.crop_fraction <= 1.0) {
                return Err(Error::Config("invalid augmentation settings".into()));
            }
        }
        self.model.validate()?;
        self.mc.validate()?;
        self.unsup_norm.validate()?;
        self.weights.validate()?;
        self.adv.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr * 0.1f64.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Mean per-iteration loss terms of one model over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLosses {
    pub sup: f64,
    pub agr: f64,
    pub div: f64,
    /// `sup + λ_cot·agr + λ_div·div` for this model.
    pub total: f64,
}

/// Range and sum of the agreement weights used in an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub sum: f64,
    pub count: u64,
}

impl WeightStats {
    fn absorb(&mut self, w: &WeightMap) {
        for &v in w.values() {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.sum += v;
        }
        self.count += w.values().len() as u64;
    }

    fn empty() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            sum: 0.0,
            count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_cot: f64,
    pub lambda_div: f64,
    pub sup_uncertainty: bool,
    pub unsup_uncertainty: bool,
    pub models: [ModelLosses; 2],
    /// Mean of the joint objective minimised each iteration.
    pub joint: f64,
    /// Largest gap between the joint objective and its recomputed terms.
    pub decomposition_error: f64,
    pub agreement_weights: Option<WeightStats>,
    /// Mean predictive entropy on the test set, per model.
    pub test_uncertainty: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations_per_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub avg: MetricsReport,
    pub vot: MetricsReport,
    pub checkpoints: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One row per epoch and model.
pub fn write_losses_csv<W: Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "model", "lr", "lambda_cot", "lambda_div", "sup", "agr", "div", "total"])?;
    for e in &report.epochs {
        for (i, m) in e.models.iter().enumerate() {
            w.write_record([
                e.epoch.to_string(),
                (i + 1).to_string(),
                e.lr.to_string(),
                e.lambda_cot.to_string(),
                e.lambda_div.to_string(),
                m.sup.to_string(),
                m.agr.to_string(),
                m.div.to_string(),
                m.total.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const TEST_CHUNK: usize = 16;

fn probabilities(model: &SegModel<f32>, test: &SampleSet) -> Result<ProbMap> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(TEST_CHUNK) {
        parts.push(softmax(&model.forward(&test.images(chunk), DropoutMode::Off)?)?.values);
    }
    Ok(ProbMap::new(Tensor4::concat(&parts.iter().collect::<Vec<_>>())?))
}

/// AVG and VOT reports for one or two models, dropout off.
pub fn evaluate(models: &[SegModel<f32>], test: &SampleSet) -> Result<(MetricsReport, MetricsReport)> {
    evaluate_scaled(models, test, 1.0)
}

/// As [`evaluate`], with Hausdorff distances multiplied by `spacing`.
pub fn evaluate_scaled(
    models: &[SegModel<f32>],
    test: &SampleSet,
    spacing: f64,
) -> Result<(MetricsReport, MetricsReport)> {
    if models.is_empty() || models.len() > 2 {
        return Err(Error::Input("evaluation takes one or two models".into()));
    }
    if test.is_empty() || !test.has_masks() {
        return Err(Error::Input("test split needs annotated images".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let gt = test.masks(&all);
    let k = test.num_classes;
    let probs: Vec<ProbMap> = models.iter().map(|m| probabilities(m, test)).collect::<Result<_>>()?;
    let individual: Vec<MetricsReport> = probs
        .iter()
        .map(|p| per_class_report_scaled(&predict_labels(p), &gt, k, EnsembleMode::Avg, spacing))
        .collect::<Result<_>>()?;
    let avg = avg_individual(&individual)?;
    let voted = match probs.as_slice() {
        [p1, p2] => ensemble_vote(p1, p2)?,
        [p] => predict_labels(p),
        _ => unreachable!(),
    };
    let vot = per_class_report_scaled(&voted, &gt, k, EnsembleMode::Vot, spacing)?;
    Ok((avg, vot))
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite { term: term.into() });
    }
    Ok(())
}

fn build_batch(set: &SampleSet, items: &[usize], seeds: Option<(&[u64], &AugmentConfig)>) -> (Tensor4<f32>, LabelMask) {
    let (h, w) = (set.height, set.width);
    let Some((seeds, aug)) = seeds else {
        return (set.images(items), set.masks(items));
    };
    let mut images = Vec::with_capacity(items.len() * h * w);
    let mut labels = Vec::with_capacity(items.len() * h * w);
    for (&i, &seed) in items.iter().zip(seeds) {
        let s = &set.samples[i];
        let (img, mask) = augment(&s.image, s.mask.as_deref(), h, w, seed, aug);
        images.extend(img);
        match mask {
            Some(m) => labels.extend(m),
            None => labels.extend(std::iter::repeat_n(crate::tensor::UNLABELED, h * w)),
        }
    }
    (
        Tensor4::from_vec([items.len(), 1, h, w], images).expect("consistent sizes"),
        LabelMask::from_vec([items.len(), h, w], labels).expect("consistent sizes"),
    )
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn entropy_map(model: &SegModel<f32>, x: &Tensor4<f32>, samples: usize, base_seed: u64) -> Result<UncertaintyMap> {
    predictive_entropy(&mc_sample(model, x, &McConfig { samples, base_seed })?)
}

#[derive(Default)]
struct EpochAccumulator {
    sums: [ModelLosses; 2],
    joint: f64,
    decomposition_error: f64,
    iterations: usize,
}

struct IterDraws {
    aug: Option<[Vec<u64>; 3]>,
    dropout: [u64; 4],
    adversarial: [u64; 2],
    student: [u64; 2],
}

/// In-progress training run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    bundle: &'a DatasetBundle,
    labeled: [SampleSet; 2],
    models: [SegModel<f32>; 2],
    optims: [Adam<f32>; 2],
    train_rng: ChaCha8Rng,
    mc_rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochLog>,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, bundle: &'a DatasetBundle) -> Result<Self> {
        cfg.validate()?;
        let (h, w, k) = bundle.geometry();
        if k != cfg.model.num_classes {
            return Err(Error::Dimension(format!(
                "data has {k} classes, model expects {}",
                cfg.model.num_classes
            )));
        }
        if cfg.model.input_channels != 1 {
            return Err(Error::Dimension("images are single-channel".into()));
        }
        let stride = cfg.model.stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!("{h}×{w} images are not divisible by {stride}")));
        }
        for (name, set) in bundle.splits() {
            if (set.height, set.width, set.num_classes) != (h, w, k) {
                return Err(Error::Dimension(format!("split {name} disagrees in geometry")));
            }
        }
        if bundle.labeled_1.is_empty() || bundle.labeled_2.is_empty() {
            return Err(Error::Input("both labeled halves must be non-empty".into()));
        }
        let labeled = match cfg.method {
            Method::Independent => {
                let mut all = bundle.labeled_1.clone();
                all.samples.extend(bundle.labeled_2.samples.iter().cloned());
                [all.clone(), all]
            }
            _ => [bundle.labeled_1.clone(), bundle.labeled_2.clone()],
        };

        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.global_seed);
        init_rng.set_stream(2);
        let m1 = SegModel::init(cfg.model.clone(), init_rng.next_u64())?;
        let m2 = SegModel::init(cfg.model.clone(), init_rng.next_u64())?;
        let optims = [Adam::new(&m1, cfg.adam.clone()), Adam::new(&m2, cfg.adam.clone())];
        let train_rng = ChaCha8Rng::seed_from_u64(cfg.global_seed);
        let mut mc_rng = ChaCha8Rng::seed_from_u64(cfg.global_seed);
        mc_rng.set_stream(1);
        Ok(Self {
            cfg,
            bundle,
            labeled,
            models: [m1, m2],
            optims,
            train_rng,
            mc_rng,
            epoch: 0,
            history: Vec::new(),
            out_dir: None,
        })
    }

    /// Heatmaps and checkpoints go under `dir` when set.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn models(&self) -> &[SegModel<f32>; 2] {
        &self.models
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iterations_per_epoch(&self) -> usize {
        let by_unlabeled = self.bundle.unlabeled.len().div_ceil(self.cfg.batch_size_unlabeled);
        let by_labeled = self.labeled[0].len().max(self.labeled[1].len()).div_ceil(self.cfg.batch_size_labeled);
        if by_unlabeled > 0 {
            by_unlabeled
        } else {
            by_labeled
        }
    }

    fn draw(&mut self, sizes: [usize; 3]) -> IterDraws {
        let rng = &mut self.train_rng;
        let aug = self
            .cfg
            .augment
            .is_some()
            .then(|| sizes.map(|n| (0..n).map(|_| rng.next_u64()).collect()));
        let mut next = || rng.next_u64();
        IterDraws {
            aug,
            dropout: [next(), next(), next(), next()],
            adversarial: [next(), next()],
            student: [next(), next()],
        }
    }

    /// Runs one epoch and appends its log.
    pub fn run_epoch(&mut self) -> Result<&EpochLog> {
        if self.is_finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let epoch = self.epoch;
        let cfg = self.cfg.clone();
        let ramp = cfg.weights.ramp_for(cfg.epochs);
        let lambda_cot = lambda_rampup(epoch, cfg.weights.lambda_cot_max, ramp);
        let lambda_div = lambda_rampup(epoch, cfg.weights.lambda_div_max, ramp);
        let (sup_on, unsup_on) = schedule_active(epoch, &cfg.method.effective_schedule(&cfg.schedule));
        let lr = cfg.lr_at(epoch);
        let co = cfg.method.is_co_training();

        let perm_l = [
            permutation(self.labeled[0].len(), &mut self.train_rng),
            permutation(self.labeled[1].len(), &mut self.train_rng),
        ];
        let perm_u = permutation(self.bundle.unlabeled.len(), &mut self.train_rng);
        let (bl, bu) = (cfg.batch_size_labeled, cfg.batch_size_unlabeled);

        let mut acc = EpochAccumulator::default();
        let mut wstats = WeightStats::empty();
        for it in 0..self.iterations_per_epoch() {
            let lab: [Vec<usize>; 2] = [0, 1].map(|i| (0..bl).map(|j| perm_l[i][(it * bl + j) % perm_l[i].len()]).collect());
            let unl: Vec<usize> = if co {
                perm_u[(it * bu).min(perm_u.len())..((it + 1) * bu).min(perm_u.len())].to_vec()
            } else {
                Vec::new()
            };
            let draws = self.draw([bl, bl, unl.len()]);
            let aug = cfg.augment.as_ref();
            let seeds = |i: usize| draws.aug.as_ref().map(|a| (a[i].as_slice(), aug.expect("augment set")));
            let (x1, y1) = build_batch(&self.labeled[0], &lab[0], seeds(0));
            let (x2, y2) = build_batch(&self.labeled[1], &lab[1], seeds(1));
            let xs = [x1, x2];
            let ys = [y1, y2];

            let mut sup = Vec::with_capacity(2);
            let mut traces = Vec::with_capacity(2);
            for i in 0..2 {
                let w = if sup_on {
                    let u = entropy_map(&self.models[i], &xs[i], cfg.mc.samples, self.mc_rng.next_u64())?;
                    sup_weight(&u, true, cfg.sup_floor)?
                } else {
                    let [n, _, h, w] = xs[i].dims();
                    WeightMap::filled([n, h, w], 1.0)
                };
                let (logits, trace) = self.models[i].forward_traced(&xs[i], DropoutMode::On(draws.dropout[i]))?;
                let loss = weighted_ce(&softmax(&logits)?, &ys[i], &w)?;
                check_finite(&format!("sup[{}]", i + 1), loss.value())?;
                sup.push(loss);
                traces.push(vec![trace]);
            }

            let (sup1, sup2) = (sup[0].value(), sup[1].value());
            let (agr_v, div_v, joint) = if co {
                let (xu, _) = build_batch(&self.bundle.unlabeled, &unl, seeds(2));
                let agr = if unl.is_empty() {
                    ScalarLoss::constant(0.0)
                } else {
                    let (l1, t1) = self.models[0].forward_traced(&xu, DropoutMode::On(draws.dropout[2]))?;
                    let (l2, t2) = self.models[1].forward_traced(&xu, DropoutMode::On(draws.dropout[3]))?;
                    let [n, _, h, w] = xu.dims();
                    let weights = if unsup_on {
                        let u1 = entropy_map(&self.models[0], &xu, cfg.mc.samples, self.mc_rng.next_u64())?;
                        let u2 = entropy_map(&self.models[1], &xu, cfg.mc.samples, self.mc_rng.next_u64())?;
                        unsup_weight(&u1, &u2, &cfg.unsup_norm, true)?
                    } else {
                        WeightMap::filled([n, h, w], 1.0)
                    };
                    wstats.absorb(&weights);
                    let agr = agreement_loss(&softmax(&l1)?, &softmax(&l2)?, &weights)?;
                    traces[0].push(t1);
                    traces[1].push(t2);
                    agr
                };
                check_finite("agr", agr.value())?;

                let [_, _, h, w] = xs[0].dims();
                let mut flags = vec![true; 2 * bl];
                flags.extend(std::iter::repeat_n(false, unl.len()));
                let unl_labels = LabelMask::unlabeled([unl.len(), h, w]);
                let mixed = MixedBatch::new(
                    Tensor4::concat(&[&xs[0], &xs[1], &xu])?,
                    LabelMask::concat(&[&ys[0], &ys[1], &unl_labels])?,
                    flags,
                )?;
                let div = diversity_loss(
                    &self.models[0],
                    &self.models[1],
                    &mixed,
                    &cfg.adv,
                    DiversityModes {
                        adversarial_seeds: draws.adversarial,
                        student_dropout: draws.student.map(DropoutMode::On),
                    },
                )?;
                check_finite("div", div.loss.value())?;
                let div_terms = [div.teach_first, div.teach_second];
                traces[0].push(div.first_trace);
                traces[1].push(div.second_trace);
                let agr_v = agr.value();
                let joint = total_loss(sup[0].clone().plus(sup[1].clone()), agr, div.loss, lambda_cot, lambda_div);
                (agr_v, div_terms, joint)
            } else {
                (0.0, [0.0, 0.0], sup[0].clone().plus(sup[1].clone()))
            };
            check_finite("total", joint.value())?;

            let recomputed = sup1 + sup2 + lambda_cot * agr_v + lambda_div * (div_v[0] + div_v[1]);
            acc.decomposition_error = acc.decomposition_error.max((joint.value() - recomputed).abs());
            acc.joint += joint.value();
            acc.iterations += 1;
            for (i, s) in [sup1, sup2].into_iter().enumerate() {
                let m = &mut acc.sums[i];
                m.sup += s;
                m.agr += agr_v;
                m.div += div_v[i];
                m.total += s + lambda_cot * agr_v + lambda_div * div_v[i];
            }

            for i in 0..2 {
                let refs: Vec<_> = traces[i].iter().collect();
                let grads = self.models[i].param_gradients(&refs, &joint)?;
                let next = self.optims[i].apply_update(&self.models[i], &grads, OptimizerStep { lr })?;
                self.models[i] = next;
            }
        }

        let n = acc.iterations.max(1) as f64;
        let models = acc.sums.map(|m| ModelLosses {
            sup: m.sup / n,
            agr: m.agr / n,
            div: m.div / n,
            total: m.total / n,
        });
        let test_uncertainty = self.log_uncertainty(epoch)?;
        self.history.push(EpochLog {
            epoch,
            lr,
            lambda_cot,
            lambda_div,
            sup_uncertainty: sup_on,
            unsup_uncertainty: unsup_on,
            models,
            joint: acc.joint / n,
            decomposition_error: acc.decomposition_error,
            agreement_weights: (wstats.count > 0).then_some(wstats),
            test_uncertainty,
        });
        self.epoch += 1;
        if let (Some(dir), every) = (&self.out_dir, cfg.log.checkpoint_every) {
            if every > 0 && self.epoch % every == 0 && !self.is_finished() {
                let dir = dir.join("checkpoints").join(format!("epoch_{}", self.epoch));
                self.checkpoint(&dir)?;
            }
        }
        Ok(self.history.last().expect("just pushed"))
    }

    fn log_uncertainty(&self, epoch: usize) -> Result<Option<[f64; 2]>> {
        let log = &self.cfg.log;
        let due = |every: usize| every > 0 && ((epoch + 1) % every == 0 || epoch == 0 || epoch + 1 == self.cfg.epochs);
        let want_u = due(log.uncertainty_every);
        let want_h = self.out_dir.is_some() && due(log.heatmap_every);
        let test = &self.bundle.test;
        if !(want_u || want_h) || test.is_empty() {
            return Ok(None);
        }
        let items = if log.uncertainty_items == 0 {
            test.len()
        } else {
            log.uncertainty_items.min(test.len())
        };
        let items = if want_u { items } else { log.heatmap_items.min(test.len()) };
        let seed = self
            .cfg
            .global_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64)
            .rotate_left(17);
        let idx: Vec<usize> = (0..items).collect();
        let mut means = [0.0; 2];
        for (m, model) in self.models.iter().enumerate() {
            let mut maps = Vec::new();
            for chunk in idx.chunks(TEST_CHUNK) {
                maps.push(entropy_map(model, &test.images(chunk), self.cfg.mc.samples, seed)?);
            }
            let total: f64 = maps.iter().map(|u| u.values().iter().sum::<f64>()).sum();
            means[m] = total / (items * test.height * test.width) as f64;
            if want_h {
                let dir = self.out_dir.as_ref().expect("checked").join("heatmaps");
                let keep: Vec<usize> = (0..log.heatmap_items.min(items)).collect();
                let first = &maps[0];
                let keep: Vec<usize> = keep.into_iter().filter(|&i| i < first.dims()[0]).collect();
                export_heatmap(&first.select(&keep), test.num_classes, &dir, &format!("m{}", m + 1), epoch)?;
            }
        }
        Ok(want_u.then_some(means))
    }

    /// Writes `model_1.ckpt`, `model_2.ckpt` and `state.bin` into `dir`.
    pub fn checkpoint(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths = [
            dir.join("model_1.ckpt"),
            dir.join("model_2.ckpt"),
            dir.join("state.bin"),
        ];
        fs::write(&paths[0], self.models[0].to_checkpoint_bytes())?;
        fs::write(&paths[1], self.models[1].to_checkpoint_bytes())?;
        fs::write(&paths[2], self.state().encode()?)?;
        Ok(paths.to_vec())
    }

    fn state(&self) -> TrainerState {
        let rng = |r: &ChaCha8Rng| RngState {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        };
        TrainerState {
            epoch: self.epoch as u32,
            rngs: [rng(&self.train_rng), rng(&self.mc_rng)],
            optims: self.optims.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint directory written by
    /// [`Trainer::checkpoint`] under the same config and data.
    pub fn restore(cfg: TrainConfig, bundle: &'a DatasetBundle, dir: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, bundle)?;
        let m1 = SegModel::from_checkpoint_bytes(&fs::read(dir.join("model_1.ckpt"))?)?;
        let m2 = SegModel::from_checkpoint_bytes(&fs::read(dir.join("model_2.ckpt"))?)?;
        let state = TrainerState::decode(&fs::read(dir.join("state.bin"))?)?;
        for m in [&m1, &m2] {
            if m.config() != &t.cfg.model {
                return Err(Error::Config("checkpoint model config differs from the training config".into()));
            }
        }
        for (o, m) in state.optims.iter().zip([&m1, &m2]) {
            if o.m.len() != m.params().len() || o.m.iter().zip(m.params()).any(|(a, p)| a.len() != p.data.len()) {
                return Err(Error::Config("optimizer state does not match the model".into()));
            }
        }
        let epoch = state.epoch as usize;
        if epoch > t.cfg.epochs || state.history.len() != epoch {
            return Err(Error::Config(format!(
                "checkpoint at epoch {epoch} does not fit a {}-epoch run",
                t.cfg.epochs
            )));
        }
        let rng = |s: &RngState| {
            let mut r = ChaCha8Rng::from_seed(s.seed);
            r.set_stream(s.stream);
            r.set_word_pos(s.word_pos);
            r
        };
        t.train_rng = rng(&state.rngs[0]);
        t.mc_rng = rng(&state.rngs[1]);
        t.models = [m1, m2];
        t.optims = state.optims;
        t.epoch = epoch;
        t.history = state.history;
        Ok(t)
    }

    /// Evaluates the final models and assembles the report. With an output
    /// directory, final checkpoints are written under `checkpoints/`.
    pub fn finish(self) -> Result<RunReport> {
        if !self.is_finished() {
            return Err(Error::Config(format!(
                "training stopped at epoch {} of {}",
                self.epoch, self.cfg.epochs
            )));
        }
        let (avg, vot) = evaluate_scaled(&self.models, &self.bundle.test, self.cfg.spacing)?;
        let checkpoints = match &self.out_dir {
            Some(dir) => {
                self.checkpoint(&dir.join("checkpoints"))?;
                ["model_1.ckpt", "model_2.ckpt", "state.bin"]
                    .iter()
                    .map(|f| format!("checkpoints/{f}"))
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(RunReport {
            iterations_per_epoch: self.iterations_per_epoch(),
            epochs: self.history,
            avg,
            vot,
            checkpoints,
        })
    }
}

/// Trains from scratch and evaluates.
pub fn train(cfg: TrainConfig, bundle: &DatasetBundle) -> Result<RunReport> {
    train_to(cfg, bundle, None)
}

/// As [`train`], writing heatmaps and checkpoints under `out` when given.
pub fn train_to(cfg: TrainConfig, bundle: &DatasetBundle, out: Option<&Path>) -> Result<RunReport> {
    let mut t = Trainer::new(cfg, bundle)?;
    if let Some(dir) = out {
        t = t.with_output(dir);
    }
    while !t.is_finished() {
        t.run_epoch()?;
    }
    t.finish()
}

pub const STATE_MAGIC: &[u8; 8] = b"UASEGSTA";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything besides the model weights needed to resume training.
///
/// ```text
/// "UASEGSTA" | u32 version | u32 epoch
/// 2 × (32-byte seed | u64 stream | u128 word position)
/// 2 × (f64 beta1 | f64 beta2 | f64 eps | u64 steps | u32 tensor count |
///      per tensor: u32 length | f32 m × length | f32 v × length)
/// u32 history length | history as UTF-8 JSON
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub epoch: u32,
    pub rngs: [RngState; 2],
    pub optims: [Adam<f32>; 2],
    pub history: Vec<EpochLog>,
}

impl TrainerState {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        codec::put_u32(&mut out, STATE_VERSION);
        codec::put_u32(&mut out, self.epoch);
        for r in &self.rngs {
            out.extend_from_slice(&r.seed);
            codec::put_u64(&mut out, r.stream);
            codec::put_u128(&mut out, r.word_pos);
        }
        for o in &self.optims {
            codec::put_f64(&mut out, o.config.beta1);
            codec::put_f64(&mut out, o.config.beta2);
            codec::put_f64(&mut out, o.config.eps);
            codec::put_u64(&mut out, o.steps);
            codec::put_u32(&mut out, o.m.len() as u32);
            for (m, v) in o.m.iter().zip(&o.v) {
                codec::put_u32(&mut out, m.len() as u32);
                codec::put_f32s(&mut out, m.iter().copied());
                codec::put_f32s(&mut out, v.iter().copied());
            }
        }
        let history = serde_json::to_vec(&self.history)?;
        codec::put_u32(&mut out, history.len() as u32);
        out.extend_from_slice(&history);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STATE_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != STATE_VERSION {
            return Err(Error::format(at, format!("unsupported state version {version}")));
        }
        let epoch = r.u32("epoch")?;
        let mut rng = || -> Result<RngState> {
            Ok(RngState {
                seed: r.take(32, "rng seed")?.try_into().expect("32 bytes"),
                stream: r.u64("rng stream")?,
                word_pos: r.u128("rng word position")?,
            })
        };
        let rngs = [rng()?, rng()?];
        let mut optim = || -> Result<Adam<f32>> {
            let at = r.offset();
            let config = AdamConfig {
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
            };
            if !((0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2) && config.eps > 0.0) {
                return Err(Error::format(at, "invalid optimizer settings"));
            }
            let steps = r.u64("steps")?;
            let count = r.u32("tensor count")? as usize;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for _ in 0..count {
                let len = r.u32("moment length")? as usize;
                let at = r.offset();
                let mj = r.f32_vec(len, "first moment")?;
                let vj = r.f32_vec(len, "second moment")?;
                if mj.iter().any(|x| !x.is_finite()) || vj.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(Error::format(at, "invalid optimizer moments"));
                }
                m.push(mj);
                v.push(vj);
            }
            Ok(Adam { config, m, v, steps })
        };
        let optims = [optim()?, optim()?];
        let len = r.u32("history length")? as usize;
        let at = r.offset();
        let history: Vec<EpochLog> = serde_json::from_slice(r.take(len, "history")?)
            .map_err(|e| Error::format(at, format!("history: {e}")))?;
        if history.len() != epoch as usize {
            return Err(Error::format(at, "history length disagrees with epoch"));
        }
        r.finish()?;
        Ok(Self {
            epoch,
            rngs,
            optims,
            history,
        })
    }
}
