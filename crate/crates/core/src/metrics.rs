//! Dice and Hausdorff evaluation, per-class reports, ensembling and
//! across-seed summaries.
//!
//! Distances are in pixels unless a spacing multiplier is supplied. Hausdorff
//! distances use every foreground pixel, not only boundary pixels; for the
//! directed max–min distance between solid regions the two coincide.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::ProbMap;
use crate::tensor::LabelMask;

/// A binary H×W mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for a {height}×{width} mask",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn diagonal(&self) -> f64 {
        (self.height as f64).hypot(self.width as f64)
    }
}

fn same_shape(s: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if (s.height, s.width) != (g.height, g.width) {
        return Err(Error::Dimension(format!(
            "masks differ: {}×{} vs {}×{}",
            s.height, s.width, g.height, g.width
        )));
    }
    Ok(())
}

/// `2|S∩G| / (|S|+|G|)`; 1 when both are empty.
pub fn dsc(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    same_shape(s, g)?;
    let (cs, cg) = (s.count(), g.count());
    if cs + cg == 0 {
        return Ok(1.0);
    }
    let inter = s.pixels.iter().zip(&g.pixels).filter(|(a, b)| **a && **b).count();
    Ok(2.0 * inter as f64 / (cs + cg) as f64)
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * (qf - p));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
/// Entries are infinite when the mask is empty.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<f64> = mask
        .pixels
        .iter()
        .map(|&p| if p { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed(a: &BinaryMask, dist_to_b: &[f64]) -> f64 {
    a.pixels
        .iter()
        .zip(dist_to_b)
        .filter(|(p, _)| **p)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels. Both empty gives 0; exactly one
/// empty gives the image diagonal.
pub fn hd(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    same_shape(s, g)?;
    match (s.is_empty(), g.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(s.diagonal()),
        (false, false) => {
            let ds = squared_distance_transform(s);
            let dg = squared_distance_transform(g);
            Ok(directed(s, &dg).max(directed(g, &ds)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Avg,
    Vot,
}

impl EnsembleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMode::Avg => "avg",
            EnsembleMode::Vot => "vot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }

    /// `mean(std)` with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2}({:.2})", self.mean, self.std)
    }
}

/// Spread of a report's metrics across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub runs: usize,
    pub per_class_dsc: BTreeMap<u8, MeanStd>,
    pub per_class_hd: BTreeMap<u8, MeanStd>,
    pub mean_dsc: MeanStd,
    pub mean_hd: MeanStd,
}

/// Foreground-class metrics; DSC in percent, HD in pixels (times spacing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EnsembleMode,
    pub per_class_dsc: BTreeMap<u8, f64>,
    pub per_class_hd: BTreeMap<u8, f64>,
    pub mean_dsc: f64,
    pub mean_hd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_stats: Option<SeedStats>,
}

impl MetricsReport {
    fn from_classes(mode: EnsembleMode, per_class_dsc: BTreeMap<u8, f64>, per_class_hd: BTreeMap<u8, f64>) -> Self {
        let mean = |m: &BTreeMap<u8, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
        Self {
            mode,
            mean_dsc: mean(&per_class_dsc),
            mean_hd: mean(&per_class_hd),
            per_class_dsc,
            per_class_hd,
            seed_stats: None,
        }
    }
}

/// Per-class DSC/HD for classes `1..K`, averaged over the images.
pub fn per_class_report(pred: &LabelMask, gt: &LabelMask, k: usize, mode: EnsembleMode) -> Result<MetricsReport> {
    per_class_report_scaled(pred, gt, k, mode, 1.0)
}

/// As [`per_class_report`], with distances multiplied by `spacing`.
pub fn per_class_report_scaled(
    pred: &LabelMask,
    gt: &LabelMask,
    k: usize,
    mode: EnsembleMode,
    spacing: f64,
) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if !(2..=255).contains(&k) {
        return Err(Error::Config(format!("class count {k} out of range")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::Config("spacing must be positive".into()));
    }
    let [n, h, w] = gt.dims();
    if n == 0 {
        return Err(Error::Dimension("no images to evaluate".into()));
    }
    let per_image: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (1..k as u8)
                .map(|c| {
                    let s = BinaryMask::from_labels(pred.item(i), h, w, c)?;
                    let g = BinaryMask::from_labels(gt.item(i), h, w, c)?;
                    Ok((dsc(&s, &g)?, hd(&s, &g)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut d = BTreeMap::new();
    let mut hmap = BTreeMap::new();
    for (j, c) in (1..k as u8).enumerate() {
        let sd: f64 = per_image.iter().map(|v| v[j].0).sum();
        let sh: f64 = per_image.iter().map(|v| v[j].1).sum();
        d.insert(c, 100.0 * sd / n as f64);
        hmap.insert(c, spacing * sh / n as f64);
    }
    Ok(MetricsReport::from_classes(mode, d, hmap))
}

fn argmax_pixels(values: &[f64], k: usize, hw: usize, out: &mut Vec<u8>, other: Option<&[f64]>) {
    for s in 0..hw {
        let mut best = 0u8;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            let mut v = values[c * hw + s];
            if let Some(o) = other {
                v = 0.5 * (v + o[c * hw + s]);
            }
            if v > best_v {
                best_v = v;
                best = c as u8;
            }
        }
        out.push(best);
    }
}

/// Per-pixel argmax; ties go to the lowest class.
pub fn predict_labels(p: &ProbMap) -> LabelMask {
    let [n, k, h, w] = p.values.dims();
    let mut labels = Vec::with_capacity(n * h * w);
    for b in 0..n {
        argmax_pixels(p.values.item(b), k, h * w, &mut labels, None);
    }
    LabelMask::from_vec([n, h, w], labels).expect("consistent sizes")
}

/// Soft voting: argmax of `½(p1 + p2)`, ties to the lowest class.
pub fn ensemble_vote(p1: &ProbMap, p2: &ProbMap) -> Result<LabelMask> {
    if p1.values.dims() != p2.values.dims() {
        return Err(Error::Dimension(format!(
            "probability maps differ: {:?} vs {:?}",
            p1.values.dims(),
            p2.values.dims()
        )));
    }
    let [n, k, h, w] = p1.values.dims();
    let mut labels = Vec::with_capacity(n * h * w);
    for b in 0..n {
        argmax_pixels(p1.values.item(b), k, h * w, &mut labels, Some(p2.values.item(b)));
    }
    LabelMask::from_vec([n, h, w], labels)
}

fn check_same_classes(reports: &[MetricsReport]) -> Result<&MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to combine".into()))?;
    let keys: Vec<u8> = first.per_class_dsc.keys().copied().collect();
    for r in reports {
        if r.per_class_dsc.keys().copied().collect::<Vec<_>>() != keys
            || r.per_class_hd.keys().copied().collect::<Vec<_>>() != keys
        {
            return Err(Error::Input("reports cover different classes".into()));
        }
    }
    Ok(first)
}

fn class_means(reports: &[MetricsReport]) -> (BTreeMap<u8, f64>, BTreeMap<u8, f64>) {
    let n = reports.len() as f64;
    let keys: Vec<u8> = reports[0].per_class_dsc.keys().copied().collect();
    let mut d = BTreeMap::new();
    let mut h = BTreeMap::new();
    for c in keys {
        d.insert(c, reports.iter().map(|r| r.per_class_dsc[&c]).sum::<f64>() / n);
        h.insert(c, reports.iter().map(|r| r.per_class_hd[&c]).sum::<f64>() / n);
    }
    (d, h)
}

/// Arithmetic mean of individual models' reports, tagged AVG.
pub fn avg_individual(reports: &[MetricsReport]) -> Result<MetricsReport> {
    check_same_classes(reports)?;
    let (d, h) = class_means(reports);
    Ok(MetricsReport::from_classes(EnsembleMode::Avg, d, h))
}

/// Mean over runs (seeds) of one mode, with the spread attached.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = check_same_classes(reports)?;
    let mode = first.mode;
    if reports.iter().any(|r| r.mode != mode) {
        return Err(Error::Input("cannot aggregate AVG and VOT reports together".into()));
    }
    let (d, h) = class_means(reports);
    let spread = |f: &dyn Fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let stats = SeedStats {
        runs: reports.len(),
        per_class_dsc: d.keys().map(|&c| (c, spread(&|r| r.per_class_dsc[&c]))).collect(),
        per_class_hd: d.keys().map(|&c| (c, spread(&|r| r.per_class_hd[&c]))).collect(),
        mean_dsc: spread(&|r| r.mean_dsc),
        mean_hd: spread(&|r| r.mean_hd),
    };
    let mut out = MetricsReport::from_classes(mode, d, h);
    out.seed_stats = Some(stats);
    Ok(out)
}

/// One line of the metrics CSV. `class` is a class index or `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_seed: u64,
    pub method: String,
    pub mode: EnsembleMode,
    pub class: String,
    pub dsc: f64,
    pub hd: f64,
}

pub fn report_rows(run_seed: u64, method: &str, report: &MetricsReport) -> Vec<MetricsRow> {
    let row = |class: String, dsc, hd| MetricsRow {
        run_seed,
        method: method.to_string(),
        mode: report.mode,
        class,
        dsc,
        hd,
    };
    let mut rows: Vec<MetricsRow> = report
        .per_class_dsc
        .iter()
        .map(|(c, d)| row(c.to_string(), *d, report.per_class_hd[c]))
        .collect();
    rows.push(row("mean".into(), report.mean_dsc, report.mean_hd));
    rows
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// One method × mode line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mode: EnsembleMode,
    pub runs: usize,
    pub dsc: BTreeMap<String, String>,
    pub hd: BTreeMap<String, String>,
    pub stats: SeedStats,
}

/// Aggregates CSV rows into `mean(std)` cells per method and mode, keeping
/// the order in which methods first appear.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<(String, EnsembleMode)> = Vec::new();
    let mut groups: BTreeMap<(String, EnsembleMode), BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.mode);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().entry(r.run_seed).or_default().push(r);
    }
    let methods: Vec<String> = order.iter().map(|(m, _)| m.clone()).collect();
    order.sort_by_key(|(m, mode)| (methods.iter().position(|x| x == m), *mode));
    order
        .into_iter()
        .map(|key| {
            let runs = &groups[&key];
            let reports: Vec<MetricsReport> = runs
                .values()
                .map(|rs| {
                    let mut d = BTreeMap::new();
                    let mut h = BTreeMap::new();
                    for r in rs.iter().filter(|r| r.class != "mean") {
                        let c: u8 = r
                            .class
                            .parse()
                            .map_err(|_| Error::Input(format!("bad class column `{}`", r.class)))?;
                        d.insert(c, r.dsc);
                        h.insert(c, r.hd);
                    }
                    Ok(MetricsReport::from_classes(key.1, d, h))
                })
                .collect::<Result<_>>()?;
            let agg = aggregate_seeds(&reports)?;
            let stats = agg.seed_stats.expect("set by aggregate_seeds");
            let mut dsc: BTreeMap<String, String> =
                stats.per_class_dsc.iter().map(|(c, s)| (c.to_string(), s.cell())).collect();
            let mut hd: BTreeMap<String, String> =
                stats.per_class_hd.iter().map(|(c, s)| (c.to_string(), s.cell())).collect();
            dsc.insert("mean".into(), stats.mean_dsc.cell());
            hd.insert("mean".into(), stats.mean_hd.cell());
            Ok(SummaryRow {
                method: key.0,
                mode: key.1,
                runs: stats.runs,
                dsc,
                hd,
                stats,
            })
        })
        .collect()
}

/// Plain-text table: one row per method and mode, DSC then HD columns per
/// class followed by the mean.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let classes: Vec<String> = first.stats.per_class_dsc.keys().map(|c| c.to_string()).chain(["mean".to_string()]).collect();
    let mut header = vec!["method".to_string(), "mode".to_string()];
    header.extend(classes.iter().map(|c| format!("DSC[{c}]")));
    header.extend(classes.iter().map(|c| format!("HD[{c}]")));
    let mut lines = vec![header];
    for r in rows {
        let mut line = vec![r.method.clone(), r.mode.as_str().to_string()];
        line.extend(classes.iter().map(|c| r.dsc.get(c).cloned().unwrap_or_default()));
        line.extend(classes.iter().map(|c| r.hd.get(c).cloned().unwrap_or_default()));
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut p = vec![false; h * w];
        for &(y, x) in on {
            p[y * w + x] = true;
        }
        BinaryMask::new(h, w, p).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask(1, 4, &[(0, 0), (0, 1), (0, 2)]);
        let b = mask(1, 4, &[(0, 1), (0, 2), (0, 3)]);
        assert!((dsc(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let empty = mask(1, 4, &[]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
        assert_eq!(dsc(&mask(1, 4, &[(0, 0)]), &mask(1, 4, &[(0, 3)])).unwrap(), 0.0);
    }

    #[test]
    fn hd_examples() {
        let s = mask(5, 5, &[(0, 0)]);
        let g = mask(5, 5, &[(3, 4)]);
        assert_eq!(hd(&s, &g).unwrap(), 5.0);
        assert_eq!(hd(&s, &s).unwrap(), 0.0);
        let empty = mask(5, 5, &[]);
        assert_eq!(hd(&empty, &empty).unwrap(), 0.0);
        assert_eq!(hd(&s, &empty).unwrap(), 50f64.sqrt());
        assert!(hd(&s, &mask(4, 5, &[])).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let m = mask(4, 7, &[(0, 6), (3, 0), (2, 3)]);
        let d = squared_distance_transform(&m);
        for y in 0..4 {
            for x in 0..7 {
                let brute = [(0i64, 6i64), (3, 0), (2, 3)]
                    .iter()
                    .map(|(a, b)| (a - y as i64).pow(2) + (b - x as i64).pow(2))
                    .min()
                    .unwrap();
                assert_eq!(d[y * 7 + x], brute as f64);
            }
        }
    }

    #[test]
    fn voting_examples() {
        let p1 = ProbMap::from_pixels([1, 2, 1, 3], &[vec![0.6, 0.4], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let p2 = ProbMap::from_pixels([1, 2, 1, 3], &[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_eq!(ensemble_vote(&p1, &p2).unwrap().labels(), &[1, 0, 1]);
        assert_eq!(ensemble_vote(&p1, &p1).unwrap(), predict_labels(&p1));
        assert_eq!(predict_labels(&p1).labels(), &[0, 0, 1]);
    }

    #[test]
    fn reports_and_averages() {
        let gt = LabelMask::from_vec([1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        let r = per_class_report(&gt, &gt, 3, EnsembleMode::Vot).unwrap();
        assert_eq!(r.per_class_dsc.values().copied().collect::<Vec<_>>(), vec![100.0, 100.0]);
        assert_eq!(r.mean_hd, 0.0);
        let bg = LabelMask::from_vec([1, 2, 2], vec![0; 4]).unwrap();
        let r0 = per_class_report(&bg, &gt, 3, EnsembleMode::Vot).unwrap();
        assert_eq!(r0.mean_dsc, 0.0);
        assert_eq!(r0.per_class_hd[&1], 8f64.sqrt());
        let scaled = per_class_report_scaled(&bg, &gt, 3, EnsembleMode::Vot, 2.0).unwrap();
        assert_eq!(scaled.per_class_hd[&1], 2.0 * 8f64.sqrt());

        let mut a = r.clone();
        a.per_class_dsc.insert(1, 80.0);
        let mut b = r.clone();
        b.per_class_dsc.insert(1, 90.0);
        let avg = avg_individual(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.per_class_dsc[&1], 85.0);
        assert_eq!(avg, avg_individual(&[b, a]).unwrap());
        assert_eq!(avg_individual(&[r.clone(), r.clone()]).unwrap().per_class_dsc, r.per_class_dsc);
    }

    #[test]
    fn single_seed_std_is_zero() {
        let s = MeanStd::of(&[82.5]);
        assert_eq!((s.mean, s.std), (82.5, 0.0));
        assert_eq!(s.cell(), "82.50(0.00)");
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let gt = LabelMask::from_vec([1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        let r = per_class_report(&gt, &gt, 3, EnsembleMode::Vot).unwrap();
        let rows = report_rows(1, "ours", &r);
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run_seed,method,mode,class,dsc,hd\n"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
        let summary = summarize(&rows).unwrap();
        assert_eq!(summary[0].dsc["mean"], "100.00(0.00)");
        assert!(render_table(&summary).contains("ours    vot"));
    }
}
