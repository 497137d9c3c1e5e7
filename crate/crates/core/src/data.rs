//! Synthetic segmentation data, labeled/unlabeled partitioning, augmentation
//! and the on-disk dataset format.
//!
//! Each synthetic image holds a nested target resembling a short-axis
//! cardiac slice: a bright disk (class 1), a darker ring around it
//! (class 2) and an offset crescent hugging the ring (class 3), over
//! background (class 0).
//!
//! Split files:
//!
//! ```text
//! "UASEGDAT" | u32 version=1 | u32 N | u32 H | u32 W | u32 K | u8 has_masks
//! N·H·W little-endian f32 intensities in [0, 1]
//! N·H·W u8 labels (255 = unlabeled), present iff has_masks = 1
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{LabelMask, Real, Tensor4, UNLABELED};

pub const DATASET_MAGIC: &[u8; 8] = b"UASEGDAT";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One single-channel image and, when annotated, its mask (row-major H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

/// Images sharing one geometry and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Stacks the chosen items into an `N × 1 × H × W` batch.
    pub fn images<T: Real>(&self, items: &[usize]) -> Tensor4<T> {
        let mut data = Vec::with_capacity(items.len() * self.height * self.width);
        for &i in items {
            data.extend(self.samples[i].image.iter().map(|&v| T::of(v as f64)));
        }
        Tensor4::from_vec([items.len(), 1, self.height, self.width], data).expect("consistent sizes")
    }

    /// Masks for the chosen items; unannotated items become all-sentinel.
    pub fn masks(&self, items: &[usize]) -> LabelMask {
        let hw = self.height * self.width;
        let mut labels = Vec::with_capacity(items.len() * hw);
        for &i in items {
            match &self.samples[i].mask {
                Some(m) => labels.extend_from_slice(m),
                None => labels.extend(std::iter::repeat_n(UNLABELED, hw)),
            }
        }
        LabelMask::from_vec([items.len(), self.height, self.width], labels).expect("consistent sizes")
    }

    fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != hw || s.mask.as_ref().is_some_and(|m| m.len() != hw) {
                return Err(Error::Dimension(format!("sample {i} does not match {}×{}", self.height, self.width)));
            }
            if let Some(m) = &s.mask {
                if let Some(bad) = m.iter().find(|&&l| l != UNLABELED && l as usize >= self.num_classes) {
                    return Err(Error::Label(format!("sample {i} has label {bad} ≥ {}", self.num_classes)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            height: 32,
            width: 32,
            num_classes: 4,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Nominal class intensities; each image jitters them independently.
const BASE_LEVELS: [f64; 4] = [0.2, 0.85, 0.4, 0.65];
const LEVEL_JITTER: f64 = 0.08;
const MAX_ATTEMPTS: usize = 64;

struct Geometry {
    cy: f64,
    cx: f64,
    r_disk: f64,
    r_ring: f64,
    cres_y: f64,
    cres_x: f64,
    r_cres: f64,
}

impl Geometry {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Option<Self> {
        let s = h.min(w) as f64;
        let r_disk = s * rng.random_range(0.09..0.16);
        let r_ring = r_disk + s * rng.random_range(0.05..0.09);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let offset = r_ring * rng.random_range(0.6..0.9);
        let r_cres = r_ring * rng.random_range(0.9..1.2);
        let extent = match k {
            2 => r_disk,
            3 => r_ring,
            _ => r_ring.max(offset + r_cres),
        };
        let margin = extent + 1.0;
        let (lo_y, hi_y) = (margin, h as f64 - margin);
        let (lo_x, hi_x) = (margin, w as f64 - margin);
        let (uy, ux): (f64, f64) = (rng.random(), rng.random());
        if lo_y >= hi_y || lo_x >= hi_x {
            return None;
        }
        let cy = lo_y + uy * (hi_y - lo_y);
        let cx = lo_x + ux * (hi_x - lo_x);
        Some(Self {
            cy,
            cx,
            r_disk,
            r_ring,
            cres_y: cy + offset * angle.sin(),
            cres_x: cx + offset * angle.cos(),
            r_cres,
        })
    }

    fn class_at(&self, y: usize, x: usize, k: usize) -> u8 {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let d = ((py - self.cy).powi(2) + (px - self.cx).powi(2)).sqrt();
        if d <= self.r_disk {
            return 1;
        }
        if k >= 3 && d <= self.r_ring {
            return 2;
        }
        if k >= 4 {
            let dc = ((py - self.cres_y).powi(2) + (px - self.cres_x).powi(2)).sqrt();
            if dc <= self.r_cres && d > self.r_ring {
                return 3;
            }
        }
        0
    }
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let levels: Vec<f64> = BASE_LEVELS
            .iter()
            .map(|b| b + rng.random_range(-LEVEL_JITTER..LEVEL_JITTER))
            .collect();
        let Some(geo) = Geometry::draw(&mut rng, h, w, k) else {
            continue;
        };
        let mask: Vec<u8> = (0..h * w).map(|i| geo.class_at(i / w, i % w, k)).collect();
        let mut seen = vec![false; k];
        mask.iter().for_each(|&c| seen[c as usize] = true);
        if !seen.iter().all(|&s| s) {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let image = mask
            .iter()
            .map(|&c| {
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (levels[c as usize] + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        return Ok(Sample {
            image,
            mask: Some(mask),
        });
    }
    Err(Error::Generation(format!(
        "could not fit all {k} classes into a {h}×{w} canvas (image {index})"
    )))
}

/// Seeded synthetic images with exact, noise-free masks.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if !(2..=4).contains(&spec.num_classes) {
        return Err(Error::Generation(format!(
            "synthetic data supports 2 to 4 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Generation("empty canvas".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config("noise_std must be finite and non-negative".into()));
    }
    (0..spec.n_images)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub label_ratio: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            label_ratio: 0.1,
            split_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "label_ratio must lie in (0, 1], got {}",
                self.label_ratio
            )));
        }
        Ok(())
    }

    /// `⌈l_a · n⌉`, ignoring representation error in `l_a`.
    pub fn labeled_count(&self, n: usize) -> usize {
        ((self.label_ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

/// Index partition `(labeled, unlabeled)` as a seeded permutation prefix.
pub fn label_ratio_partition(n: usize, split: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    split.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split.split_seed);
    order.shuffle(&mut rng);
    let m = split.labeled_count(n);
    let unlabeled = order.split_off(m);
    Ok((order, unlabeled))
}

/// Keeps masks on `⌈l_a · n⌉` items and strips the rest.
pub fn apply_label_ratio(full: &[Sample], split: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (lab, unl) = label_ratio_partition(full.len(), split)?;
    let labeled = lab.iter().map(|&i| full[i].clone()).collect();
    let unlabeled = unl
        .iter()
        .map(|&i| Sample {
            image: full[i].image.clone(),
            mask: None,
        })
        .collect();
    Ok((labeled, unlabeled))
}

/// Index halves of sizes `⌈m/2⌉` and `⌊m/2⌋` after a seeded shuffle.
pub fn split_labeled_indices(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let second = order.split_off(m.div_ceil(2));
    (order, second)
}

/// Complementary labeled subsets for the two models.
pub fn split_labeled(labeled: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let (a, b) = split_labeled_indices(labeled.len(), seed);
    (
        a.iter().map(|&i| labeled[i].clone()).collect(),
        b.iter().map(|&i| labeled[i].clone()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate: bool,
    pub crop: bool,
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate: true,
            crop: true,
            crop_fraction: 0.875,
        }
    }
}

fn transform<V: Copy>(src: &[V], h: usize, w: usize, flip: bool, quarter_turns: usize) -> Vec<V> {
    // Output pixel (y, x) reads source (sy, sx); rotation is counter-clockwise.
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (mut sy, mut sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            if flip {
                sx = w - 1 - sx;
            }
            sy = sy.min(h - 1);
            src[sy * w + sx]
        })
        .collect()
}

fn crop_resize_image(src: &[f32], h: usize, w: usize, oy: usize, ox: usize, ch: usize, cw: usize) -> Vec<f32> {
    let (sy_scale, sx_scale) = (ch as f64 / h as f64, cw as f64 / w as f64);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| src[(oy + yy) * w + ox + xx] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

fn crop_resize_mask(src: &[u8], h: usize, w: usize, oy: usize, ox: usize, ch: usize, cw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * ch as f64 / h as f64).floor() as usize).min(ch - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * cw as f64 / w as f64).floor() as usize).min(cw - 1);
            out.push(src[(oy + sy) * w + ox + sx]);
        }
    }
    out
}

/// Random flip, quarter-turn rotation and crop-resize, applied identically
/// to image and mask. Non-square images only rotate by half turns.
pub fn augment(
    image: &[f32],
    mask: Option<&[u8]>,
    h: usize,
    w: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> (Vec<f32>, Option<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let mut turns = if cfg.rotate { rng.random_range(0..4usize) } else { 0 };
    if h != w {
        turns = 2 * (turns / 2);
    }
    let ch = ((h as f64 * cfg.crop_fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * cfg.crop_fraction).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);

    let mut img = transform(image, h, w, flip, turns);
    let mut msk = mask.map(|m| transform(m, h, w, flip, turns));
    if cfg.crop && (ch < h || cw < w) {
        img = crop_resize_image(&img, h, w, oy, ox, ch, cw);
        msk = msk.map(|m| crop_resize_mask(&m, h, w, oy, ox, ch, cw));
    }
    (img, msk)
}

/// Seeds and settings a bundle was generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub data_seed: u64,
    pub split_seed: u64,
    pub label_ratio: f64,
    pub noise_std: f64,
}

/// `D_l1`, `D_l2`, `D_u` and the held-out test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub labeled_1: SampleSet,
    pub labeled_2: SampleSet,
    pub unlabeled: SampleSet,
    pub test: SampleSet,
    pub provenance: Provenance,
}

impl DatasetBundle {
    /// Generates `n_images` training and `n_test` test images, applies the
    /// label ratio to the training part and halves the labeled items.
    pub fn synthesize(spec: &SyntheticSpec, n_test: usize, split: &SplitSpec) -> Result<Self> {
        split.validate()?;
        let all = generate_synthetic(&SyntheticSpec {
            n_images: spec.n_images + n_test,
            ..spec.clone()
        })?;
        let (train, test) = all.split_at(spec.n_images);
        let (labeled, unlabeled) = apply_label_ratio(train, split)?;
        let (l1, l2) = split_labeled(&labeled, split.split_seed);
        let set = |samples: Vec<Sample>| SampleSet {
            height: spec.height,
            width: spec.width,
            num_classes: spec.num_classes,
            samples,
        };
        Ok(Self {
            labeled_1: set(l1),
            labeled_2: set(l2),
            unlabeled: set(unlabeled),
            test: set(test.to_vec()),
            provenance: Provenance {
                data_seed: spec.seed,
                split_seed: split.split_seed,
                label_ratio: split.label_ratio,
                noise_std: spec.noise_std,
            },
        })
    }

    pub fn splits(&self) -> [(&'static str, &SampleSet); 4] {
        [
            ("labeled_1", &self.labeled_1),
            ("labeled_2", &self.labeled_2),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
        ]
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.test.height, self.test.width, self.test.num_classes)
    }
}

/// Encodes one split. Masks are written only if every sample has one.
pub fn encode_split(set: &SampleSet) -> Result<Vec<u8>> {
    set.validate()?;
    let has_masks = !set.samples.is_empty() && set.has_masks();
    if !has_masks && set.samples.iter().any(|s| s.mask.is_some()) {
        return Err(Error::Input("split mixes annotated and unannotated samples".into()));
    }
    let hw = set.height * set.width;
    let mut out = Vec::with_capacity(25 + set.len() * hw * 5);
    out.extend_from_slice(DATASET_MAGIC);
    codec::put_u32(&mut out, DATASET_VERSION);
    for v in [set.len(), set.height, set.width, set.num_classes] {
        let v = u32::try_from(v).map_err(|_| Error::Input("split dimension exceeds u32".into()))?;
        codec::put_u32(&mut out, v);
    }
    out.push(has_masks as u8);
    for s in &set.samples {
        codec::put_f32s(&mut out, s.image.iter().copied());
    }
    if has_masks {
        for s in &set.samples {
            out.extend_from_slice(s.mask.as_ref().expect("checked"));
        }
    }
    Ok(out)
}

/// Parses one split file, validating every header field and value.
pub fn decode_split(bytes: &[u8]) -> Result<SampleSet> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported dataset version {version}")));
    }
    let n = r.u32("N")? as usize;
    let at = r.offset();
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(at, "zero-sized images"));
    }
    let at = r.offset();
    let k = r.u32("K")? as usize;
    if !(2..UNLABELED as usize).contains(&k) {
        return Err(Error::format(at, format!("class count {k} out of range")));
    }
    let at = r.offset();
    let has_masks = match r.u8("has_masks")? {
        0 => false,
        1 => true,
        v => return Err(Error::format(at, format!("has_masks must be 0 or 1, got {v}"))),
    };
    let hw = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(at, "image size overflows"))?;
    let total = n
        .checked_mul(hw)
        .ok_or_else(|| Error::format(at, "dataset size overflows"))?;
    let per_value = if has_masks { 5 } else { 4 };
    if total.checked_mul(per_value) != Some(r.remaining()) {
        return Err(Error::format(
            r.offset(),
            format!("payload is {} bytes, header implies {n}×{h}×{w} values", r.remaining()),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let image = r.f32_vec(hw, "intensities")?;
        if let Some(j) = image.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(at + 4 * j, "intensity outside [0, 1]"));
        }
        samples.push(Sample { image, mask: None });
    }
    if has_masks {
        for s in &mut samples {
            let at = r.offset();
            let m = r.take(hw, "labels")?;
            if let Some(j) = m.iter().position(|&l| l != UNLABELED && l as usize >= k) {
                return Err(Error::format(at + j, format!("label {} ≥ {k}", m[j])));
            }
            s.mask = Some(m.to_vec());
        }
    }
    r.finish()?;
    Ok(SampleSet {
        height: h,
        width: w,
        num_classes: k,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub labeled_1: String,
    pub labeled_2: String,
    pub unlabeled: String,
    pub test: String,
}

/// JSON index naming the four split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub files: ManifestFiles,
    pub provenance: Provenance,
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for (name, set) in bundle.splits() {
        fs::write(dir.join(format!("{name}.uds")), encode_split(set)?)?;
    }
    let (height, width, num_classes) = bundle.geometry();
    let manifest = Manifest {
        version: DATASET_VERSION,
        height,
        width,
        num_classes,
        files: ManifestFiles {
            labeled_1: "labeled_1.uds".into(),
            labeled_2: "labeled_2.uds".into(),
            unlabeled: "unlabeled.uds".into(),
            test: "test.uds".into(),
        },
        provenance: bundle.provenance.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let read = |file: &str| -> Result<SampleSet> {
        let set = decode_split(&fs::read(dir.join(file))?)?;
        if (set.height, set.width, set.num_classes) != (manifest.height, manifest.width, manifest.num_classes) {
            return Err(Error::format(0, format!("{file} disagrees with the manifest geometry")));
        }
        Ok(set)
    };
    let bundle = DatasetBundle {
        labeled_1: read(&manifest.files.labeled_1)?,
        labeled_2: read(&manifest.files.labeled_2)?,
        unlabeled: read(&manifest.files.unlabeled)?,
        test: read(&manifest.files.test)?,
        provenance: manifest.provenance,
    };
    for (name, set) in [("labeled_1", &bundle.labeled_1), ("labeled_2", &bundle.labeled_2), ("test", &bundle.test)] {
        if !set.is_empty() && !set.has_masks() {
            return Err(Error::format(0, format!("{name} split carries no masks")));
        }
    }
    Ok(bundle)
}
