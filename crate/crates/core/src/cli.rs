//! Command-line front end and the `key = value` configuration format.
//!
//! A configuration file holds one `key = value` pair per line. Blank lines
//! and lines starting with `#` are ignored, every key is optional, and
//! unknown or repeated keys are errors. [`RunConfig::to_text`] writes every
//! key, so its output parses back to the same configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{load_dataset, save_dataset, AugmentConfig, DatasetBundle, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{render_table, report_rows, summarize, write_metrics_csv, MetricsRow};
use crate::segnet::SegModel;
use crate::trainer::{evaluate_scaled, train_to, write_losses_csv, Method, RunReport, TrainConfig};
use crate::uncertainty::{NormMode, UncertaintySchedule};

/// Everything a run needs: data generation, split and training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub n_test: usize,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: SyntheticSpec::default(),
            n_test: 50,
            split: SplitSpec::default(),
            augment_enabled: train.augment.is_some(),
            augment: train.augment.clone().unwrap_or_default(),
            train,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.n_images", "training images to synthesise"),
    ("data.n_test", "held-out test images"),
    ("data.height", "image height in pixels"),
    ("data.width", "image width in pixels"),
    ("data.num_classes", "classes including background, 2 to 4"),
    ("data.noise_std", "standard deviation of additive pixel noise"),
    ("data.seed", "generator seed"),
    ("split.label_ratio", "fraction of training images keeping masks"),
    ("split.seed", "seed for the labeled/unlabeled partition"),
    ("model.base_channels", "channels of the first encoder stage"),
    ("model.depth", "down/upsampling stages"),
    ("model.dropout_rate", "bottleneck dropout probability"),
    ("train.method", "part | independent | dct | ours | sup-unc | unsup-unc"),
    ("train.epochs", "training epochs"),
    ("train.batch_size_labeled", "labeled images per model per iteration"),
    ("train.batch_size_unlabeled", "shared unlabeled images per iteration"),
    ("train.lr", "Adam learning rate"),
    ("train.lr_decay_every", "epochs between tenfold decays, 0 for none"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator offset"),
    ("train.seed", "seed for initialisation, batching and dropout"),
    ("augment.enabled", "random flips, rotations and crops"),
    ("augment.flip_prob", "probability of a horizontal flip"),
    ("augment.rotate", "random quarter-turn rotations"),
    ("augment.crop", "random crop resized back to full size"),
    ("augment.crop_fraction", "crop side relative to the image"),
    ("mc.samples", "stochastic passes per uncertainty map"),
    ("schedule.sup_start", "first epoch of supervised weighting, or never"),
    ("schedule.unsup_start", "first epoch of agreement weighting, or never"),
    ("unsup.beta", "agreement weight scale"),
    ("unsup.c_norm", "agreement weight offset"),
    ("unsup.mode", "rectified | literal"),
    ("sup.floor", "lower bound on supervised weights"),
    ("loss.lambda_cot", "maximum agreement weight"),
    ("loss.lambda_div", "maximum diversity weight"),
    ("loss.ramp_epochs", "ramp-up length in epochs, or auto"),
    ("adv.eps_fgsm", "FGSM step"),
    ("adv.eps_vat", "VAT radius per image"),
    ("adv.vat_xi", "VAT finite-difference step"),
    ("adv.vat_power_iters", "VAT power iterations"),
    ("adv.clamp", "clamp adversarial images to [0, 1]"),
    ("log.uncertainty_every", "epochs between test uncertainty logs, 0 for none"),
    ("log.uncertainty_items", "test images for uncertainty logs, 0 for all"),
    ("log.heatmap_every", "epochs between heatmap exports, 0 for none"),
    ("log.heatmap_items", "test images exported as heatmaps"),
    ("log.checkpoint_every", "epochs between intermediate checkpoints, 0 for none"),
    ("metrics.spacing", "pixel size multiplying Hausdorff distances"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_epoch(key: &str, v: &str) -> Result<usize> {
    if v == "never" {
        Ok(UncertaintySchedule::NEVER)
    } else {
        parse_num(key, v)
    }
}

fn show_epoch(e: usize) -> String {
    if e == UncertaintySchedule::NEVER {
        "never".into()
    } else {
        e.to_string()
    }
}

impl RunConfig {
    /// Assigns one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data.n_images" => self.data.n_images = parse_num(key, v)?,
            "data.n_test" => self.n_test = parse_num(key, v)?,
            "data.height" => self.data.height = parse_num(key, v)?,
            "data.width" => self.data.width = parse_num(key, v)?,
            "data.num_classes" => self.data.num_classes = parse_num(key, v)?,
            "data.noise_std" => self.data.noise_std = parse_num(key, v)?,
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "split.label_ratio" => self.split.label_ratio = parse_num(key, v)?,
            "split.seed" => self.split.split_seed = parse_num(key, v)?,
            "model.base_channels" => t.model.base_channels = parse_num(key, v)?,
            "model.depth" => t.model.depth = parse_num(key, v)?,
            "model.dropout_rate" => t.model.dropout_rate = parse_num(key, v)?,
            "train.method" => t.method = v.parse()?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.batch_size_labeled" => t.batch_size_labeled = parse_num(key, v)?,
            "train.batch_size_unlabeled" => t.batch_size_unlabeled = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.lr_decay_every" => t.lr_decay_every = parse_num(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.adam_eps" => t.adam.eps = parse_num(key, v)?,
            "train.seed" => t.global_seed = parse_num(key, v)?,
            "augment.enabled" => self.augment_enabled = parse_bool(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse_num(key, v)?,
            "augment.rotate" => self.augment.rotate = parse_bool(key, v)?,
            "augment.crop" => self.augment.crop = parse_bool(key, v)?,
            "augment.crop_fraction" => self.augment.crop_fraction = parse_num(key, v)?,
            "mc.samples" => t.mc.samples = parse_num(key, v)?,
            "schedule.sup_start" => t.schedule.sup_start_epoch = parse_epoch(key, v)?,
            "schedule.unsup_start" => t.schedule.unsup_start_epoch = parse_epoch(key, v)?,
            "unsup.beta" => t.unsup_norm.beta = parse_num(key, v)?,
            "unsup.c_norm" => t.unsup_norm.c_norm = parse_num(key, v)?,
            "unsup.mode" => {
                t.unsup_norm.mode = match v {
                    "rectified" => NormMode::Rectified,
                    "literal" => NormMode::Literal,
                    _ => return Err(Error::Config(format!("`{key}` expects rectified or literal, got `{v}`"))),
                }
            }
            "sup.floor" => t.sup_floor = parse_num(key, v)?,
            "loss.lambda_cot" => t.weights.lambda_cot_max = parse_num(key, v)?,
            "loss.lambda_div" => t.weights.lambda_div_max = parse_num(key, v)?,
            "loss.ramp_epochs" => {
                t.weights.ramp_epochs = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "adv.eps_fgsm" => t.adv.eps_fgsm = parse_num(key, v)?,
            "adv.eps_vat" => t.adv.eps_vat = parse_num(key, v)?,
            "adv.vat_xi" => t.adv.vat_xi = parse_num(key, v)?,
            "adv.vat_power_iters" => t.adv.vat_power_iters = parse_num(key, v)?,
            "adv.clamp" => t.adv.clamp_to_unit = parse_bool(key, v)?,
            "log.uncertainty_every" => t.log.uncertainty_every = parse_num(key, v)?,
            "log.uncertainty_items" => t.log.uncertainty_items = parse_num(key, v)?,
            "log.heatmap_every" => t.log.heatmap_every = parse_num(key, v)?,
            "log.heatmap_items" => t.log.heatmap_items = parse_num(key, v)?,
            "log.checkpoint_every" => t.log.checkpoint_every = parse_num(key, v)?,
            "metrics.spacing" => t.spacing = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of one key in its text form.
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        Ok(match key {
            "data.n_images" => self.data.n_images.to_string(),
            "data.n_test" => self.n_test.to_string(),
            "data.height" => self.data.height.to_string(),
            "data.width" => self.data.width.to_string(),
            "data.num_classes" => self.data.num_classes.to_string(),
            "data.noise_std" => self.data.noise_std.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "split.label_ratio" => self.split.label_ratio.to_string(),
            "split.seed" => self.split.split_seed.to_string(),
            "model.base_channels" => t.model.base_channels.to_string(),
            "model.depth" => t.model.depth.to_string(),
            "model.dropout_rate" => t.model.dropout_rate.to_string(),
            "train.method" => t.method.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size_labeled" => t.batch_size_labeled.to_string(),
            "train.batch_size_unlabeled" => t.batch_size_unlabeled.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_decay_every" => t.lr_decay_every.to_string(),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "train.seed" => t.global_seed.to_string(),
            "augment.enabled" => self.augment_enabled.to_string(),
            "augment.flip_prob" => self.augment.flip_prob.to_string(),
            "augment.rotate" => self.augment.rotate.to_string(),
            "augment.crop" => self.augment.crop.to_string(),
            "augment.crop_fraction" => self.augment.crop_fraction.to_string(),
            "mc.samples" => t.mc.samples.to_string(),
            "schedule.sup_start" => show_epoch(t.schedule.sup_start_epoch),
            "schedule.unsup_start" => show_epoch(t.schedule.unsup_start_epoch),
            "unsup.beta" => t.unsup_norm.beta.to_string(),
            "unsup.c_norm" => t.unsup_norm.c_norm.to_string(),
            "unsup.mode" => match t.unsup_norm.mode {
                NormMode::Rectified => "rectified".into(),
                NormMode::Literal => "literal".into(),
            },
            "sup.floor" => t.sup_floor.to_string(),
            "loss.lambda_cot" => t.weights.lambda_cot_max.to_string(),
            "loss.lambda_div" => t.weights.lambda_div_max.to_string(),
            "loss.ramp_epochs" => t.weights.ramp_epochs.map_or("auto".into(), |r| r.to_string()),
            "adv.eps_fgsm" => t.adv.eps_fgsm.to_string(),
            "adv.eps_vat" => t.adv.eps_vat.to_string(),
            "adv.vat_xi" => t.adv.vat_xi.to_string(),
            "adv.vat_power_iters" => t.adv.vat_power_iters.to_string(),
            "adv.clamp" => t.adv.clamp_to_unit.to_string(),
            "log.uncertainty_every" => t.log.uncertainty_every.to_string(),
            "log.uncertainty_items" => t.log.uncertainty_items.to_string(),
            "log.heatmap_every" => t.log.heatmap_every.to_string(),
            "log.heatmap_items" => t.log.heatmap_items.to_string(),
            "log.checkpoint_every" => t.log.checkpoint_every.to_string(),
            "metrics.spacing" => t.spacing.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    /// Every key in documented order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// The training configuration for data with `num_classes` classes.
    pub fn train_config(&self, num_classes: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.model.num_classes = num_classes;
        t.augment = self.augment_enabled.then(|| self.augment.clone());
        t
    }

    pub fn synthesize(&self) -> Result<DatasetBundle> {
        DatasetBundle::synthesize(&self.data, self.n_test, &self.split)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Input(_) => 2,
        Error::Format { .. } | Error::Label(_) | Error::Json(_) | Error::Csv(_) | Error::Generation(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "uaseg", version, about = "Uncertainty-aware co-training for semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a dataset bundle.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train two models and evaluate them on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate saved models on a test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "evaluated")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every method for every seed and tabulate mean(std).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "part,independent,dct,ours")]
        methods: Vec<Method>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

impl clap::ValueEnum for Method {
    fn value_variants<'a>() -> &'a [Self] {
        &Method::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn load_data(dir: &Path) -> Result<DatasetBundle> {
    load_dataset(dir).map_err(|e| match e {
        Error::Io(io) => Error::format(0, format!("cannot read dataset in {}: {io}", dir.display())),
        other => other,
    })
}

/// Writes the standard run layout into `out` and returns the report.
fn train_into(cfg: &RunConfig, bundle: &DatasetBundle, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.echo"), cfg.to_text())?;
    let (_, _, k) = bundle.geometry();
    let train = cfg.train_config(k);
    let report = train_to(train.clone(), bundle, Some(out))?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    write_losses_csv(&report, fs::File::create(out.join("losses.csv"))?)?;
    let mut rows = report_rows(train.global_seed, train.method.as_str(), &report.avg);
    rows.extend(report_rows(train.global_seed, train.method.as_str(), &report.vot));
    write_metrics_csv(&rows, fs::File::create(out.join("metrics.csv"))?)?;
    Ok(report)
}

fn cmd_generate(spec: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(spec)?;
    let bundle = cfg.synthesize()?;
    save_dataset(&bundle, out)?;
    let m = bundle.labeled_1.len() + bundle.labeled_2.len();
    println!(
        "labeled m = {m} ({} + {}), unlabeled n = {}, test = {}",
        bundle.labeled_1.len(),
        bundle.labeled_2.len(),
        bundle.unlabeled.len(),
        bundle.test.len()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    method: Option<Method>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(m) = method {
        cfg.train.method = m;
    }
    if let Some(s) = seed {
        cfg.train.global_seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let bundle = load_data(data)?;
    let report = train_into(&cfg, &bundle, out)?;
    println!(
        "{}: vot DSC {:.2} HD {:.2}, avg DSC {:.2} HD {:.2}",
        cfg.train.method, report.vot.mean_dsc, report.vot.mean_hd, report.avg.mean_dsc, report.avg.mean_hd
    );
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    method: &str,
    seed: u64,
) -> Result<()> {
    let spacing = match config {
        Some(p) => read_config(p)?.train.spacing,
        None => 1.0,
    };
    let bundle = load_data(data)?;
    let mut models = Vec::new();
    for name in ["model_1.ckpt", "model_2.ckpt"] {
        let path = checkpoint.join(name);
        if path.exists() {
            models.push(SegModel::<f32>::from_checkpoint_bytes(&fs::read(&path)?)?);
        }
    }
    if models.is_empty() {
        return Err(Error::Input(format!("no model checkpoints in {}", checkpoint.display())));
    }
    let (avg, vot) = evaluate_scaled(&models, &bundle.test, spacing)?;
    let mut rows = report_rows(seed, method, &avg);
    rows.extend(report_rows(seed, method, &vot));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_metrics_csv(&rows, fs::File::create(out)?)?;
    let summary = serde_json::json!({ "avg": avg, "vot": vot });
    fs::write(out.with_extension("json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("vot DSC {:.2} HD {:.2}, avg DSC {:.2} HD {:.2}", vot.mean_dsc, vot.mean_hd, avg.mean_dsc, avg.mean_hd);
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    data: &Path,
    seeds: &[u64],
    out: &Path,
    methods: &[Method],
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let bundle = load_data(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.echo"), cfg.to_text())?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let mut cell = cfg.clone();
            cell.train.method = method;
            cell.train.global_seed = seed;
            let dir = out.join(method.as_str()).join(format!("seed_{seed}"));
            let report = train_into(&cell, &bundle, &dir)?;
            rows.extend(report_rows(seed, method.as_str(), &report.avg));
            rows.extend(report_rows(seed, method.as_str(), &report.vot));
            println!("{method} seed {seed}: vot DSC {:.2}", report.vot.mean_dsc);
        }
    }
    write_metrics_csv(&rows, fs::File::create(out.join("metrics.csv"))?)?;
    let summary = summarize(&rows)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let table = render_table(&summary);
    fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out } => cmd_generate(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            method,
            seed,
            epochs,
        } => cmd_train(&config, &data, &out, method, seed, epochs),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            config,
            method,
            seed,
        } => cmd_evaluate(&checkpoint, &data, &out, config.as_deref(), &method, seed),
        Command::Ablate {
            config,
            data,
            seeds,
            out,
            methods,
            epochs,
        } => cmd_ablate(&config, &data, &seeds, &out, &methods, epochs),
    }
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = RunConfig::default().to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn special_values() {
        let cfg = RunConfig::parse("schedule.sup_start = never\nloss.ramp_epochs = 7\n# note\n\nunsup.mode = literal").unwrap();
        assert_eq!(cfg.train.schedule.sup_start_epoch, UncertaintySchedule::NEVER);
        assert_eq!(cfg.train.weights.ramp_epochs, Some(7));
        assert_eq!(cfg.train.unsup_norm.mode, NormMode::Literal);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_lines_are_rejected() {
        for text in [
            "nope = 1",
            "train.epochs",
            "train.epochs = x",
            "train.epochs = 1\ntrain.epochs = 2",
            "adv.clamp = yes",
            "train.method = best",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let e = RunConfig::parse("\n\nbad.key = 3").unwrap_err();
        assert!(e.to_string().contains("line 3"));
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::format(3, "x")), 3);
        assert_eq!(exit_code(&Error::NonFinite { term: "sup".into() }), 4);
    }
}
