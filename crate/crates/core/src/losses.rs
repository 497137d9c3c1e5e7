//! Training objectives and the consistency-weight ramp.
//!
//! Every loss returns a [`ScalarLoss`]: the value plus `dL/dprob` for each
//! probability map that still carries its producing trace. Detached inputs
//! (weight maps, teaching targets) contribute no seed, so gradients never
//! reach the model that produced them.

use std::collections::BTreeMap;

use crate::adversarial::{AdversarialGenerator, MixedBatch};
use crate::error::{Error, Result};
use crate::segnet::{softmax, DropoutMode, ProbMap, SegModel, Trace, TraceId};
use crate::tensor::{LabelMask, Real, Tensor4, WeightMap, UNLABELED};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar objective together with its sensitivity to traced predictions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalarLoss {
    value: f64,
    seeds: BTreeMap<TraceId, Tensor4<f64>>,
}

impl ScalarLoss {
    /// A value with no gradient path.
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            seeds: BTreeMap::new(),
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn seed(&self, id: TraceId) -> Option<&Tensor4<f64>> {
        self.seeds.get(&id)
    }

    pub fn is_connected(&self) -> bool {
        !self.seeds.is_empty()
    }

    /// Detached copy carrying only the value.
    pub fn detached(&self) -> Self {
        Self::constant(self.value)
    }

    fn add_seed(&mut self, id: TraceId, grad: Tensor4<f64>) {
        match self.seeds.get_mut(&id) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.seeds.insert(id, grad);
            }
        }
    }

    pub fn scale(mut self, factor: f64) -> Self {
        self.value *= factor;
        for g in self.seeds.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
        self
    }

    pub fn plus(mut self, other: ScalarLoss) -> Self {
        self.value += other.value;
        for (id, g) in other.seeds {
            self.add_seed(id, g);
        }
        self
    }
}

fn floor(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

fn check_prob_shapes(a: &ProbMap, b: &ProbMap) -> Result<()> {
    if a.values.dims() != b.values.dims() {
        return Err(Error::Dimension(format!(
            "probability maps differ: {:?} vs {:?}",
            a.values.dims(),
            b.values.dims()
        )));
    }
    Ok(())
}

fn check_pixel_shape(p: &ProbMap, dims: [usize; 3], what: &str) -> Result<()> {
    let [n, _, h, w] = p.values.dims();
    if dims != [n, h, w] {
        return Err(Error::Dimension(format!(
            "{what} {dims:?} does not match predictions {n}×{h}×{w}"
        )));
    }
    Ok(())
}

/// Mean over labeled pixels of `w · −ln p[label]`.
pub fn weighted_ce(pred: &ProbMap, labels: &LabelMask, weights: &WeightMap) -> Result<ScalarLoss> {
    check_pixel_shape(pred, labels.dims(), "label mask")?;
    check_pixel_shape(pred, weights.dims(), "weight map")?;
    let [n, k, h, w] = pred.values.dims();
    let hw = h * w;
    let mut count = 0usize;
    for &l in labels.labels() {
        if l == UNLABELED {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Label(format!("label {l} outside 0..{k}")));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / count as f64;
    let p = pred.values.data();
    let mut grad = pred.source.map(|_| Tensor4::zeros(pred.values.dims()));
    let mut total = 0.0;
    for b in 0..n {
        for s in 0..hw {
            let l = labels.labels()[b * hw + s];
            if l == UNLABELED {
                continue;
            }
            let wt = weights.values()[b * hw + s];
            let at = (b * k + l as usize) * hw + s;
            let pv = p[at];
            total += wt * -floor(pv).ln();
            if let Some(g) = grad.as_mut() {
                if pv > PROB_FLOOR {
                    g.data_mut()[at] = -wt * inv / pv;
                }
            }
        }
    }
    let mut loss = ScalarLoss::constant(total * inv);
    if let (Some(id), Some(g)) = (pred.source, grad) {
        loss.add_seed(id, g);
    }
    Ok(loss)
}

/// Per-pixel Jensen–Shannon divergence (natural log), batch × H × W.
pub fn js_divergence(p: &ProbMap, q: &ProbMap) -> Result<WeightMap> {
    check_prob_shapes(p, q)?;
    let [n, k, h, w] = p.values.dims();
    let hw = h * w;
    let (pd, qd) = (p.values.data(), q.values.data());
    let mut out = vec![0.0; n * hw];
    for b in 0..n {
        for s in 0..hw {
            let mut js = 0.0;
            for c in 0..k {
                let at = (b * k + c) * hw + s;
                let (pc, qc) = (pd[at], qd[at]);
                let m = floor(0.5 * (pc + qc)).ln();
                js += 0.5 * (pc * (floor(pc).ln() - m) + qc * (floor(qc).ln() - m));
            }
            out[b * hw + s] = js.max(0.0);
        }
    }
    WeightMap::from_vec([n, h, w], out)
}

/// Mean over pixels of `w ⊙ JS(p1, p2)`; gradients reach both inputs.
pub fn agreement_loss(p1: &ProbMap, p2: &ProbMap, weights: &WeightMap) -> Result<ScalarLoss> {
    check_prob_shapes(p1, p2)?;
    check_pixel_shape(p1, weights.dims(), "weight map")?;
    let js = js_divergence(p1, p2)?;
    let [n, k, h, w] = p1.values.dims();
    let hw = h * w;
    let inv = 1.0 / (n * hw) as f64;
    let value: f64 = js
        .values()
        .iter()
        .zip(weights.values())
        .map(|(j, wt)| j * wt)
        .sum::<f64>()
        * inv;
    let mut loss = ScalarLoss::constant(value);
    // dJS/dp_c = ½ ln(p_c / m_c)
    let grad_of = |own: &ProbMap, other: &ProbMap| {
        let mut g = Tensor4::zeros(own.values.dims());
        let (a, o) = (own.values.data(), other.values.data());
        for b in 0..n {
            for s in 0..hw {
                let wt = weights.values()[b * hw + s] * inv;
                for c in 0..k {
                    let at = (b * k + c) * hw + s;
                    let m = 0.5 * (a[at] + o[at]);
                    g.data_mut()[at] = wt * 0.5 * (floor(a[at]).ln() - floor(m).ln());
                }
            }
        }
        g
    };
    if let Some(id) = p1.source {
        loss.add_seed(id, grad_of(p1, p2));
    }
    if let Some(id) = p2.source {
        loss.add_seed(id, grad_of(p2, p1));
    }
    Ok(loss)
}

/// Mean over pixels of `−Σ_c target_c ln student_c`. The target is treated
/// as a constant; only the student receives gradient.
pub fn cross_model_ce(target: &ProbMap, student: &ProbMap) -> Result<ScalarLoss> {
    check_prob_shapes(target, student)?;
    let [n, k, h, w] = student.values.dims();
    let hw = h * w;
    let inv = 1.0 / (n * hw) as f64;
    let (t, s) = (target.values.data(), student.values.data());
    let mut total = 0.0;
    let mut grad = student.source.map(|_| Tensor4::zeros(student.values.dims()));
    for b in 0..n {
        for px in 0..hw {
            for c in 0..k {
                let at = (b * k + c) * hw + px;
                total -= t[at] * floor(s[at]).ln();
                if let Some(g) = grad.as_mut() {
                    if s[at] > PROB_FLOOR {
                        g.data_mut()[at] = -t[at] * inv / s[at];
                    }
                }
            }
        }
    }
    let mut loss = ScalarLoss::constant(total * inv);
    if let (Some(id), Some(g)) = (student.source, grad) {
        loss.add_seed(id, g);
    }
    Ok(loss)
}

/// Mean per-pixel entropy `−Σ_c p_c ln p_c` (no gradient).
pub fn mean_entropy(p: &ProbMap) -> f64 {
    let [n, k, h, w] = p.values.dims();
    let hw = h * w;
    let d = p.values.data();
    let mut total = 0.0;
    for b in 0..n {
        for s in 0..hw {
            for c in 0..k {
                let v = d[(b * k + c) * hw + s];
                if v > 0.0 {
                    total -= v * v.ln();
                }
            }
        }
    }
    total / (n * hw) as f64
}

/// Dropout settings and VAT seeds for one evaluation of the diversity loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityModes {
    /// Seed handed to the generator attacking model 1 and model 2.
    pub adversarial_seeds: [u64; 2],
    /// Dropout for the student passes of model 1 and model 2.
    pub student_dropout: [DropoutMode; 2],
}

impl Default for DiversityModes {
    fn default() -> Self {
        Self {
            adversarial_seeds: [0, 1],
            student_dropout: [DropoutMode::Off, DropoutMode::Off],
        }
    }
}

/// Result of the diversity term: the joint loss and the student traces it
/// is connected to.
pub struct DiversityOutput<T> {
    pub loss: ScalarLoss,
    /// `H(f¹(x), f²(g¹(x)))`, which trains model 2.
    pub teach_second: f64,
    /// `H(f²(x), f¹(g²(x)))`, which trains model 1.
    pub teach_first: f64,
    /// Student pass of model 1 on `g²(x)`.
    pub first_trace: Trace<T>,
    /// Student pass of model 2 on `g¹(x)`.
    pub second_trace: Trace<T>,
}

/// `H(f¹(x), f²(g¹(x))) + H(f²(x), f¹(g²(x)))` where `gⁱ` attacks model `i`.
pub fn diversity_loss<T: Real, G: AdversarialGenerator>(
    m1: &SegModel<T>,
    m2: &SegModel<T>,
    batch: &MixedBatch<T>,
    adv: &G,
    modes: DiversityModes,
) -> Result<DiversityOutput<T>> {
    let adv1 = adv.generate(m1, batch, modes.adversarial_seeds[0])?;
    let adv2 = adv.generate(m2, batch, modes.adversarial_seeds[1])?;

    let (logits2, second_trace) = m2.forward_traced(&adv1.images, modes.student_dropout[1])?;
    let student2 = softmax(&logits2)?;
    let (logits1, first_trace) = m1.forward_traced(&adv2.images, modes.student_dropout[0])?;
    let student1 = softmax(&logits1)?;

    let a = cross_model_ce(&adv1.clean.detached(), &student2)?;
    let b = cross_model_ce(&adv2.clean.detached(), &student1)?;
    let (teach_second, teach_first) = (a.value(), b.value());
    Ok(DiversityOutput {
        loss: a.plus(b),
        teach_second,
        teach_first,
        first_trace,
        second_trace,
    })
}

/// `sup + λ_cot·agr + λ_div·div`.
pub fn total_loss(
    sup: ScalarLoss,
    agr: ScalarLoss,
    div: ScalarLoss,
    lambda_cot: f64,
    lambda_div: f64,
) -> ScalarLoss {
    sup.plus(agr.scale(lambda_cot)).plus(div.scale(lambda_div))
}

/// Gaussian ramp-up `λ_max · exp(−5 (1 − min(epoch, R)/R)²)`, flat at
/// `λ_max` once `epoch ≥ R` or when `R = 0`.
pub fn lambda_rampup(epoch: usize, lambda_max: f64, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 || epoch >= ramp_epochs {
        return lambda_max;
    }
    let t = 1.0 - epoch as f64 / ramp_epochs as f64;
    lambda_max * (-5.0 * t * t).exp()
}

/// Weights applied to the co-training terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cot_max: f64,
    pub lambda_div_max: f64,
    /// `None` means 10% of the total epoch count.
    pub ramp_epochs: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cot_max: 1.0,
            lambda_div_max: 0.5,
            ramp_epochs: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cot_max >= 0.0 && self.lambda_div_max >= 0.0)
            || !self.lambda_cot_max.is_finite()
            || !self.lambda_div_max.is_finite()
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn ramp_for(&self, total_epochs: usize) -> usize {
        self.ramp_epochs
            .unwrap_or_else(|| (total_epochs as f64 * 0.1).round() as usize)
    }
}
