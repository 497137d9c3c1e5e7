//! Monte Carlo dropout uncertainty: sampling, predictive entropy, the two
//! loss-weighting rules, the activation schedule and heatmap export.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::segnet::{softmax, ProbMap, SegModel};
use crate::tensor::{Real, Tensor4, UncertaintyMap, WeightMap};

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    /// Number of stochastic passes T.
    pub samples: usize,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            base_seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("MC sampling needs at least 2 passes".into()));
        }
        Ok(())
    }
}

/// T stochastic passes; pass `t` runs with dropout seed `base_seed + t`.
pub fn mc_sample<T: Real>(model: &SegModel<T>, images: &Tensor4<T>, cfg: &McConfig) -> Result<Vec<ProbMap>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.samples as u64)
        .map(|t| cfg.base_seed.wrapping_add(t))
        .collect();
    model
        .forward_samples(images, &seeds)?
        .iter()
        .map(softmax)
        .collect()
}

/// Entropy of the mean prediction, `u = −Σ_c μ_c ln μ_c` with `0 ln 0 = 0`.
pub fn predictive_entropy(samples: &[ProbMap]) -> Result<UncertaintyMap> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dimension("no samples".into()))?;
    if samples.len() < 2 {
        return Err(Error::Dimension("predictive entropy needs at least 2 samples".into()));
    }
    let dims = first.values.dims();
    if samples.iter().any(|s| s.values.dims() != dims) {
        return Err(Error::Dimension("MC samples differ in shape".into()));
    }
    let [n, k, h, w] = dims;
    let hw = h * w;
    let t = samples.len() as f64;
    let mut out = vec![0.0; n * hw];
    for b in 0..n {
        for s in 0..hw {
            let mut u = 0.0;
            for c in 0..k {
                let at = (b * k + c) * hw + s;
                let mu = samples.iter().map(|p| p.values.data()[at]).sum::<f64>() / t;
                if mu > 0.0 {
                    u -= mu * mu.ln();
                }
            }
            out[b * hw + s] = u.max(0.0);
        }
    }
    UncertaintyMap::from_vec([n, h, w], out)
}

/// Supervised weighting: all ones when inactive, otherwise `max(u, floor)`.
pub fn sup_weight(u: &UncertaintyMap, active: bool, floor: f64) -> Result<WeightMap> {
    if !(floor >= 0.0) {
        return Err(Error::Config(format!("supervised floor must be non-negative, got {floor}")));
    }
    if !active {
        return Ok(WeightMap::filled(u.dims(), 1.0));
    }
    WeightMap::from_vec(u.dims(), u.values().iter().map(|&v| v.max(floor)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// `−β (ū + c)`, exactly as the normalisation is written.
    Literal,
    /// `max(0, β (c − ū))`: low-uncertainty pixels weigh more.
    Rectified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupNormConfig {
    pub beta: f64,
    pub c_norm: f64,
    pub mode: NormMode,
}

impl Default for UnsupNormConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            c_norm: 2.0,
            mode: NormMode::Rectified,
        }
    }
}

impl UnsupNormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.c_norm > 0.0) {
            return Err(Error::Config("beta and c_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Agreement weighting from the mean of both models' uncertainty maps.
pub fn unsup_weight(
    u1: &UncertaintyMap,
    u2: &UncertaintyMap,
    cfg: &UnsupNormConfig,
    active: bool,
) -> Result<WeightMap> {
    if u1.dims() != u2.dims() {
        return Err(Error::Dimension(format!(
            "uncertainty maps differ: {:?} vs {:?}",
            u1.dims(),
            u2.dims()
        )));
    }
    if !active {
        return Ok(WeightMap::filled(u1.dims(), 1.0));
    }
    let values = u1
        .values()
        .iter()
        .zip(u2.values())
        .map(|(a, b)| {
            let mean = 0.5 * (a + b);
            match cfg.mode {
                NormMode::Literal => -cfg.beta * (mean + cfg.c_norm),
                NormMode::Rectified => (cfg.beta * (cfg.c_norm - mean)).max(0.0),
            }
        })
        .collect();
    WeightMap::from_vec(u1.dims(), values)
}

/// First epochs at which each stage uses uncertainty. `usize::MAX` never
/// activates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UncertaintySchedule {
    pub sup_start_epoch: usize,
    pub unsup_start_epoch: usize,
}

impl Default for UncertaintySchedule {
    fn default() -> Self {
        Self {
            sup_start_epoch: 0,
            unsup_start_epoch: 20,
        }
    }
}

impl UncertaintySchedule {
    pub const NEVER: usize = usize::MAX;

    pub fn never() -> Self {
        Self {
            sup_start_epoch: Self::NEVER,
            unsup_start_epoch: Self::NEVER,
        }
    }
}

/// `(sup_active, unsup_active)` for a zero-based epoch.
pub fn schedule_active(epoch: usize, sched: &UncertaintySchedule) -> (bool, bool) {
    (epoch >= sched.sup_start_epoch, epoch >= sched.unsup_start_epoch)
}

/// Grey level for one uncertainty value: `round(255 · u / ln K)` with halves
/// rounded up, clamped to `[0, 255]`.
pub fn heatmap_level(u: f64, k_classes: usize) -> u8 {
    let scaled = 255.0 * u / (k_classes as f64).ln();
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5, maxval 255) for one map item.
pub fn encode_pgm(u: &UncertaintyMap, item: usize, k_classes: usize) -> Vec<u8> {
    let [_, h, w] = u.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(u.item(item).iter().map(|&v| heatmap_level(v, k_classes)));
    out
}

/// Writes `uncert_{model}_{epoch}_{index}.pgm` into `dir` for every batch item.
pub fn export_heatmap(
    u: &UncertaintyMap,
    k_classes: usize,
    dir: &Path,
    model: &str,
    epoch: usize,
) -> Result<Vec<PathBuf>> {
    if k_classes < 2 {
        return Err(Error::Config("heatmaps need at least 2 classes".into()));
    }
    fs::create_dir_all(dir)?;
    (0..u.dims()[0])
        .map(|i| {
            let path = dir.join(format!("uncert_{model}_{epoch}_{i}.pgm"));
            fs::write(&path, encode_pgm(u, i, k_classes))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn one_pixel(p: Vec<f64>) -> ProbMap {
        let k = p.len();
        ProbMap::from_pixels([1, k, 1, 1], &[p]).unwrap()
    }

    #[test]
    fn entropy_closed_forms() {
        let a = one_pixel(vec![1.0, 0.0]);
        let b = one_pixel(vec![0.0, 1.0]);
        let u = predictive_entropy(&[a.clone(), b]).unwrap();
        assert!((u.values()[0] - LN_2).abs() < 1e-12);
        assert_eq!(predictive_entropy(&[a.clone(), a.clone()]).unwrap().values()[0], 0.0);
        let uni = one_pixel(vec![0.25; 4]);
        let u = predictive_entropy(&[uni.clone(), uni]).unwrap();
        assert!((u.values()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(predictive_entropy(&[a.clone()]).is_err());
        assert!(predictive_entropy(&[a, one_pixel(vec![0.5; 3].into_iter().map(|v| v / 1.5).collect())]).is_err());
    }

    #[test]
    fn supervised_weights() {
        let u = UncertaintyMap::from_vec([1, 1, 3], vec![0.0, LN_2, 1.0]).unwrap();
        assert!(sup_weight(&u, false, 0.1).unwrap().values().iter().all(|&v| v == 1.0));
        let w = sup_weight(&u, true, 0.1).unwrap();
        assert_eq!(w.values(), &[0.1, LN_2, 1.0]);
        assert!(sup_weight(&u, true, -0.1).is_err());
    }

    #[test]
    fn unsupervised_weights() {
        let zero = UncertaintyMap::filled([1, 1, 1], 0.0);
        let literal = UnsupNormConfig {
            mode: NormMode::Literal,
            ..Default::default()
        };
        assert_eq!(unsup_weight(&zero, &zero, &literal, true).unwrap().values()[0], -0.7 * 2.0);
        let rect = UnsupNormConfig::default();
        assert_eq!(unsup_weight(&zero, &zero, &rect, true).unwrap().values()[0], 0.7 * 2.0);
        let two = UncertaintyMap::filled([1, 1, 1], 2.0);
        assert_eq!(unsup_weight(&two, &two, &rect, true).unwrap().values()[0], 0.0);
        assert_eq!(unsup_weight(&two, &zero, &rect, false).unwrap().values()[0], 1.0);
        let other = UncertaintyMap::filled([1, 1, 2], 0.0);
        assert!(unsup_weight(&zero, &other, &rect, true).is_err());
    }

    #[test]
    fn schedule_defaults() {
        let s = UncertaintySchedule::default();
        assert_eq!(schedule_active(0, &s), (true, false));
        assert_eq!(schedule_active(19, &s), (true, false));
        assert_eq!(schedule_active(20, &s), (true, true));
        assert_eq!(schedule_active(1000, &UncertaintySchedule::never()), (false, false));
    }

    #[test]
    fn heatmap_levels() {
        let k = 4;
        let lnk = (k as f64).ln();
        assert_eq!(heatmap_level(0.0, k), 0);
        assert_eq!(heatmap_level(lnk, k), 255);
        assert_eq!(heatmap_level(0.5 * lnk, k), 128);
        assert_eq!(heatmap_level(2.0 * lnk, k), 255);
        let u = UncertaintyMap::filled([1, 2, 3], 0.0);
        assert_eq!(encode_pgm(&u, 0, k), b"P5\n3 2\n255\n\0\0\0\0\0\0".to_vec());
    }
}
