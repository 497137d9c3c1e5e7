//! Adversarial example generation: FGSM for labeled images, VAT for
//! unlabeled ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{cross_model_ce, weighted_ce};
use crate::segnet::{softmax, DropoutMode, ProbMap, SegModel};
use crate::tensor::{LabelMask, Real, Tensor4, WeightMap};

#[derive(Clone, Debug, PartialEq)]
pub struct AdvConfig {
    pub eps_fgsm: f64,
    /// L2 radius per image, in raw pixel units.
    pub eps_vat: f64,
    pub vat_xi: f64,
    pub vat_power_iters: usize,
    pub clamp_to_unit: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            eps_fgsm: 0.03,
            eps_vat: 10.0,
            vat_xi: 10.0,
            vat_power_iters: 1,
            clamp_to_unit: true,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.eps_fgsm) || !positive(self.eps_vat) || !positive(self.vat_xi) {
            return Err(Error::Config("adversarial step sizes must be positive".into()));
        }
        if self.vat_power_iters < 1 {
            return Err(Error::Config("vat_power_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Images from both labeled and unlabeled sources. Items with
/// `labeled[i] == false` carry all-sentinel masks.
#[derive(Clone, Debug)]
pub struct MixedBatch<T> {
    pub images: Tensor4<T>,
    pub labels: LabelMask,
    pub labeled: Vec<bool>,
}

impl<T: Real> MixedBatch<T> {
    pub fn new(images: Tensor4<T>, labels: LabelMask, labeled: Vec<bool>) -> Result<Self> {
        let [n, _, h, w] = images.dims();
        if labels.dims() != [n, h, w] || labeled.len() != n {
            return Err(Error::Dimension("mixed batch parts disagree in size".into()));
        }
        Ok(Self {
            images,
            labels,
            labeled,
        })
    }

    pub fn unlabeled(images: Tensor4<T>) -> Self {
        let [n, _, h, w] = images.dims();
        Self {
            labels: LabelMask::unlabeled([n, h, w]),
            labeled: vec![false; n],
            images,
        }
    }
}

/// Adversarial images plus the attacked model's clean, dropout-off
/// predictions on the original images.
pub struct Adversarial<T> {
    pub images: Tensor4<T>,
    pub clean: ProbMap,
}

pub trait AdversarialGenerator {
    fn generate<T: Real>(&self, model: &SegModel<T>, batch: &MixedBatch<T>, seed: u64) -> Result<Adversarial<T>>;
}

/// Leaves images untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPerturbation;

impl AdversarialGenerator for ZeroPerturbation {
    fn generate<T: Real>(&self, model: &SegModel<T>, batch: &MixedBatch<T>, _seed: u64) -> Result<Adversarial<T>> {
        let clean = softmax(&model.forward(&batch.images, DropoutMode::Off)?)?;
        Ok(Adversarial {
            images: batch.images.clone(),
            clean,
        })
    }
}

impl AdversarialGenerator for AdvConfig {
    fn generate<T: Real>(&self, model: &SegModel<T>, batch: &MixedBatch<T>, seed: u64) -> Result<Adversarial<T>> {
        let lab: Vec<usize> = (0..batch.labeled.len()).filter(|&i| batch.labeled[i]).collect();
        let unl: Vec<usize> = (0..batch.labeled.len()).filter(|&i| !batch.labeled[i]).collect();
        let parts = [
            (!lab.is_empty()).then(|| {
                let x = batch.images.select(&lab);
                let y = batch.labels.select(&lab);
                fgsm_with_clean(model, &x, &y, self.eps_fgsm, self.clamp_to_unit)
            }),
            (!unl.is_empty()).then(|| vat_with_clean(model, &batch.images.select(&unl), self, seed)),
        ];
        let mut images = batch.images.clone();
        let mut clean = Tensor4::zeros([
            batch.images.batch(),
            model.config().num_classes,
            batch.images.height(),
            batch.images.width(),
        ]);
        for (part, order) in parts.into_iter().zip([&lab, &unl]) {
            let Some(part) = part else { continue };
            let part = part?;
            for (j, &i) in order.iter().enumerate() {
                images.item_mut(i).copy_from_slice(part.images.item(j));
                clean.item_mut(i).copy_from_slice(part.clean.values.item(j));
            }
        }
        Ok(Adversarial {
            images,
            clean: ProbMap::new(clean),
        })
    }
}

fn clamp_unit<T: Real>(x: &mut Tensor4<T>) {
    for v in x.data_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
}

fn fgsm_with_clean<T: Real>(
    model: &SegModel<T>,
    x: &Tensor4<T>,
    y: &LabelMask,
    eps: f64,
    clamp: bool,
) -> Result<Adversarial<T>> {
    let (logits, trace) = model.forward_traced(x, DropoutMode::Off)?;
    let p = softmax(&logits)?;
    let [n, _, h, w] = x.dims();
    let loss = match weighted_ce(&p, y, &WeightMap::filled([n, h, w], 1.0)) {
        Err(Error::EmptyBatch) => {
            return Err(Error::Label("FGSM needs at least one labeled pixel".into()))
        }
        other => other?,
    };
    let grad = model.input_gradient(&trace, &loss)?;
    let step = T::of(eps);
    let mut out = x.clone();
    for (v, g) in out.data_mut().iter_mut().zip(grad.data()) {
        if *g > T::zero() {
            *v = *v + step;
        } else if *g < T::zero() {
            *v = *v - step;
        }
    }
    if clamp {
        clamp_unit(&mut out);
    }
    Ok(Adversarial {
        images: out,
        clean: p.detached(),
    })
}

/// `x + eps · sign(∇ₓ CE(softmax(f(x)), y))` with dropout off; `sign(0) = 0`.
pub fn fgsm<T: Real>(model: &SegModel<T>, x: &Tensor4<T>, y: &LabelMask, eps: f64, clamp: bool) -> Result<Tensor4<T>> {
    Ok(fgsm_with_clean(model, x, y, eps, clamp)?.images)
}

fn normalize_items(v: &mut [f64], item_len: usize) -> Vec<bool> {
    v.chunks_mut(item_len)
        .map(|chunk| {
            let norm = chunk.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                chunk.iter_mut().for_each(|a| *a /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

fn vat_with_clean<T: Real>(model: &SegModel<T>, x: &Tensor4<T>, cfg: &AdvConfig, seed: u64) -> Result<Adversarial<T>> {
    let clean = softmax(&model.forward(x, DropoutMode::Off)?)?;
    let item_len = x.channels() * x.height() * x.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..x.data().len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize_items(&mut d, item_len);

    for _ in 0..cfg.vat_power_iters {
        let probe = Tensor4::from_vec(
            x.dims(),
            x.data()
                .iter()
                .zip(&d)
                .map(|(&xv, &dv)| T::of(xv.f64() + cfg.vat_xi * dv))
                .collect(),
        )?;
        let (logits, trace) = model.forward_traced(&probe, DropoutMode::Off)?;
        let q = softmax(&logits)?;
        // ∇ KL(p ‖ q) = ∇ H(p, q) with p constant.
        let loss = cross_model_ce(&clean, &q)?;
        let grad = model.input_gradient(&trace, &loss)?;
        let mut g: Vec<f64> = grad.data().iter().map(|v| v.f64()).collect();
        let ok = normalize_items(&mut g, item_len);
        for (i, good) in ok.into_iter().enumerate() {
            if good {
                d[i * item_len..(i + 1) * item_len].copy_from_slice(&g[i * item_len..(i + 1) * item_len]);
            }
        }
    }

    let mut out = Tensor4::from_vec(
        x.dims(),
        x.data()
            .iter()
            .zip(&d)
            .map(|(&xv, &dv)| T::of(xv.f64() + cfg.eps_vat * dv))
            .collect(),
    )?;
    if cfg.clamp_to_unit {
        clamp_unit(&mut out);
    }
    Ok(Adversarial { images: out, clean })
}

/// Virtual adversarial perturbation by power iteration on
/// `KL(p(x) ‖ p(x + r))`. The starting direction is drawn from `seed`.
pub fn vat_perturb<T: Real>(model: &SegModel<T>, x: &Tensor4<T>, cfg: &AdvConfig, seed: u64) -> Result<Tensor4<T>> {
    Ok(vat_with_clean(model, x, cfg, seed)?.images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegNetConfig;

    fn tiny() -> SegModel<f64> {
        SegModel::init(
            SegNetConfig {
                base_channels: 2,
                depth: 1,
                num_classes: 3,
                ..Default::default()
            },
            11,
        )
        .unwrap()
    }

    fn image(n: usize) -> Tensor4<f64> {
        let data = (0..n * 16).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        Tensor4::from_vec([n, 1, 4, 4], data).unwrap()
    }

    #[test]
    fn fgsm_zero_eps_is_identity() {
        let m = tiny();
        let x = image(2);
        let y = LabelMask::from_vec([2, 4, 4], (0..32).map(|i| (i % 3) as u8).collect()).unwrap();
        assert_eq!(fgsm(&m, &x, &y, 0.0, true).unwrap(), x);
    }

    #[test]
    fn fgsm_rejects_unlabeled_batch() {
        let m = tiny();
        let x = image(1);
        let y = LabelMask::unlabeled([1, 4, 4]);
        assert!(matches!(fgsm(&m, &x, &y, 0.03, true), Err(Error::Label(_))));
    }

    #[test]
    fn vat_falls_back_to_initial_direction_on_flat_model() {
        let mut m = tiny();
        let head = m.params().len() - 2;
        m.params_mut()[head].data.iter_mut().for_each(|v| *v = 0.0);
        let x = image(2);
        let cfg = AdvConfig {
            clamp_to_unit: false,
            ..Default::default()
        };
        let out = vat_perturb(&m, &x, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize_items(&mut d, 16);
        for ((o, xv), dv) in out.data().iter().zip(x.data()).zip(&d) {
            assert!((o - (xv + 10.0 * dv)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_batch_routes_items() {
        let m = tiny();
        let x = image(3);
        let mut labels = vec![1u8; 16];
        labels.extend(LabelMask::unlabeled([1, 4, 4]).labels());
        labels.extend(vec![2u8; 16]);
        let batch = MixedBatch::new(x.clone(), LabelMask::from_vec([3, 4, 4], labels).unwrap(), vec![true, false, true]).unwrap();
        let cfg = AdvConfig::default();
        let adv = cfg.generate(&m, &batch, 9).unwrap();
        let lab = fgsm(&m, &x.select(&[0, 2]), &batch.labels.select(&[0, 2]), cfg.eps_fgsm, true).unwrap();
        assert_eq!(adv.images.item(0), lab.item(0));
        assert_eq!(adv.images.item(2), lab.item(1));
        let unl = vat_perturb(&m, &x.select(&[1]), &cfg, 9).unwrap();
        assert_eq!(adv.images.item(1), unl.item(0));
        let clean = softmax(&m.forward(&x, DropoutMode::Off).unwrap()).unwrap();
        for (a, b) in adv.clean.values.data().iter().zip(clean.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
