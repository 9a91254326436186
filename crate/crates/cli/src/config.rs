//! Run configuration: a line-oriented `key = value` format with `[section]`
//! headers and `#` comments.
//!
//! ```text
//! [run]
//! method = cfm
//! seed = 7
//!
//! [data]
//! dataset = tiny_shapes   # or cifar10, eight_gaussians, two_moons
//! image_size = 8
//! ```
//!
//! Every key has a default, some of which depend on `run.method`. Unknown
//! sections and keys are rejected so that typos do not pass silently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use genflow::data::Toy2d;
use genflow::model::{MlpConfig, ModelConfig, UNetConfig};
use genflow::processes::TrainingHyper;
use genflow::samplers::{Method, SamplerConfig};
use genflow::training::Objective;

use crate::error::{CliError, CliResult};

pub const DEFAULT_OUT_DIR: &str = "runs";

/// Raw `section.key → value` pairs in file order of last assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Entries(BTreeMap<String, String>);

impl Entries {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut out = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: &str| CliError::Config(format!("line {}: {msg}: `{}`", i + 1, raw.trim()));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at("unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at("unknown section"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected `key = value`"))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside of any section"))?;
            let full = format!("{sec}.{}", key.trim());
            if !KEYS.contains(&full.as_str()) {
                return Err(at("unknown key"));
            }
            out.insert(full, value.trim().to_string());
        }
        Ok(Self(out))
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not `section.key=value`")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    fn value<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::Config(format!("{key} = `{v}`: {e}"))),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(head, _)| head)
}

const SECTIONS: [&str; 7] = ["run", "data", "model", "train", "finetune", "sampler", "eval"];

const KEYS: &[&str] = &[
    "run.method",
    "run.seed",
    "run.out_dir",
    "run.checkpoint_every",
    "data.dataset",
    "data.path",
    "data.n",
    "data.holdout",
    "data.image_size",
    "data.seed",
    "model.base_channels",
    "model.channel_multipliers",
    "model.blocks_per_resolution",
    "model.time_embed_dim",
    "model.hidden",
    "model.depth",
    "model.time_scale",
    "train.lr",
    "train.lr_min",
    "train.weight_decay",
    "train.epochs",
    "train.batch_size",
    "train.cfg_dropout",
    "finetune.lr",
    "finetune.lr_min",
    "finetune.weight_decay",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.cfg_dropout",
    "finetune.mask_prob",
    "finetune.full_loss_weight",
    "finetune.masked_loss_weight",
    "finetune.val_size",
    "sampler.steps",
    "sampler.cfg_scale",
    "sampler.batch",
    "sampler.clip_x0",
    "eval.per_class",
    "eval.feature_dim",
    "eval.kid_subsets",
    "eval.kid_subset_size",
    "eval.inpaint_images",
    "eval.mask_seed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    TinyShapes,
    Cifar10,
    Toy(Toy2d),
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TinyShapes => "tiny_shapes",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Toy(Toy2d::EightGaussians) => "eight_gaussians",
            DatasetKind::Toy(Toy2d::TwoMoons) => "two_moons",
        }
    }

    pub fn is_image(self) -> bool {
        !matches!(self, DatasetKind::Toy(_))
    }
}

impl FromStr for DatasetKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "tiny_shapes" => Ok(DatasetKind::TinyShapes),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => other
                .parse()
                .map(DatasetKind::Toy)
                .map_err(|_| CliError::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// CIFAR-10 directory (or single batch file).
    pub path: Option<PathBuf>,
    /// Training examples; 0 keeps the whole CIFAR split.
    pub n: usize,
    /// Held-out examples used as the reference set.
    pub holdout: usize,
    /// Side length for `tiny_shapes`.
    pub image_size: usize,
    /// Seeds synthetic corpora, independently of the run seed.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelKnobs {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub time_embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub hyper: TrainingHyper,
    /// Held-out images scored after every epoch.
    pub val_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerKnobs {
    pub steps: usize,
    pub cfg_scale: f64,
    pub batch: usize,
    pub clip_x0: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub per_class: usize,
    pub feature_dim: usize,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
    pub inpaint_images: usize,
    pub mask_seed: u64,
}

/// Everything a command needs, resolved against defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Epochs between periodic checkpoints.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub model: ModelKnobs,
    pub train: TrainingHyper,
    pub finetune: FinetuneConfig,
    pub sampler: SamplerKnobs,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Resolves entries against defaults; `run.seed` must be present.
    pub fn from_entries(e: &Entries) -> CliResult<Self> {
        let method: Method = e.value("run.method", Method::CfmEuler)?;
        let seed = e
            .get("run.seed")
            .ok_or_else(|| CliError::Usage("a seed is required (`--seed` or `run.seed`)".into()))?;
        let seed = seed
            .parse()
            .map_err(|err| CliError::Config(format!("run.seed = `{seed}`: {err}")))?;

        let dataset: DatasetKind = e.value("data.dataset", DatasetKind::TinyShapes)?;
        let data = DataConfig {
            dataset,
            path: e.get("data.path").map(PathBuf::from),
            n: e.value("data.n", if dataset == DatasetKind::Cifar10 { 0 } else { 2000 })?,
            holdout: e.value("data.holdout", 500)?,
            image_size: e.value("data.image_size", 8)?,
            seed: e.value("data.seed", 0)?,
        };

        let (unet, mlp) = (UNetConfig::default(), MlpConfig::default());
        let time_scale = if dataset.is_image() {
            unet.time_scale
        } else {
            mlp.time_scale
        };
        let model = ModelKnobs {
            base_channels: e.value("model.base_channels", unet.base_channels)?,
            channel_multipliers: match e.get("model.channel_multipliers") {
                None => unet.channel_multipliers.clone(),
                Some(v) => parse_list(v).map_err(|m| CliError::Config(format!("model.channel_multipliers: {m}")))?,
            },
            blocks_per_resolution: e.value("model.blocks_per_resolution", unet.blocks_per_resolution)?,
            time_embed_dim: e.value(
                "model.time_embed_dim",
                if dataset.is_image() {
                    unet.time_embed_dim
                } else {
                    mlp.time_embed_dim
                },
            )?,
            hidden: e.value("model.hidden", mlp.hidden)?,
            depth: e.value("model.depth", mlp.depth)?,
            time_scale: e.value("model.time_scale", time_scale)?,
        };

        let base = objective_for(method).default_hyper();
        let train = TrainingHyper {
            lr: e.value("train.lr", base.lr)?,
            lr_min: e.value("train.lr_min", base.lr_min)?,
            weight_decay: e.value("train.weight_decay", base.weight_decay)?,
            epochs: e.value("train.epochs", base.epochs)?,
            batch_size: e.value("train.batch_size", base.batch_size)?,
            cfg_dropout_prob: e.value("train.cfg_dropout", base.cfg_dropout_prob)?,
            ..base
        };
        let ft = TrainingHyper::finetune();
        let finetune = FinetuneConfig {
            hyper: TrainingHyper {
                lr: e.value("finetune.lr", ft.lr)?,
                lr_min: e.value("finetune.lr_min", ft.lr_min)?,
                weight_decay: e.value("finetune.weight_decay", ft.weight_decay)?,
                epochs: e.value("finetune.epochs", ft.epochs)?,
                batch_size: e.value("finetune.batch_size", ft.batch_size)?,
                cfg_dropout_prob: e.value("finetune.cfg_dropout", ft.cfg_dropout_prob)?,
                mask_prob: e.value("finetune.mask_prob", ft.mask_prob)?,
                full_loss_weight: e.value("finetune.full_loss_weight", ft.full_loss_weight)?,
                masked_loss_weight: e.value("finetune.masked_loss_weight", ft.masked_loss_weight)?,
            },
            val_size: e.value("finetune.val_size", 32)?,
        };

        let sd = SamplerConfig::default();
        let sampler = SamplerKnobs {
            steps: e.value(
                "sampler.steps",
                if method == Method::MeanflowOnestep { 1 } else { sd.steps },
            )?,
            cfg_scale: e.value("sampler.cfg_scale", sd.cfg_scale)?,
            batch: e.value("sampler.batch", sd.batch)?,
            clip_x0: e.value("sampler.clip_x0", sd.clip_x0)?,
        };
        let eval = EvalConfig {
            per_class: e.value("eval.per_class", 500)?,
            feature_dim: e.value("eval.feature_dim", 64)?,
            kid_subsets: e.value("eval.kid_subsets", 10)?,
            kid_subset_size: e.value("eval.kid_subset_size", 1000)?,
            inpaint_images: e.value("eval.inpaint_images", 100)?,
            mask_seed: e.value("eval.mask_seed", 0)?,
        };

        let config = RunConfig {
            method,
            seed,
            out_dir: PathBuf::from(e.get("run.out_dir").unwrap_or(DEFAULT_OUT_DIR)),
            checkpoint_every: e.value("run.checkpoint_every", 1)?,
            data,
            model,
            train,
            finetune,
            sampler,
            eval,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        Self::from_entries(&Entries::parse(text)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&read_config_text(path)?)
    }

    fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.checkpoint_every == 0 {
            return bad("run.checkpoint_every must be at least 1".into());
        }
        match (self.data.dataset, &self.data.path) {
            (DatasetKind::Cifar10, None) => return bad("data.path is required for cifar10".into()),
            (DatasetKind::Cifar10, Some(p)) if !p.exists() => {
                return bad(format!("data.path `{}` does not exist", p.display()))
            }
            _ => {}
        }
        if self.data.dataset != DatasetKind::Cifar10 && self.data.n == 0 {
            return bad("data.n must be positive for synthetic data".into());
        }
        if self.data.holdout == 0 {
            return bad("data.holdout must be positive".into());
        }
        self.train.validate()?;
        self.finetune.hyper.validate()?;
        self.model_config()?.validate()?;
        self.sampler_config().validate()?;
        if self.eval.per_class == 0 || self.eval.kid_subsets == 0 || self.eval.kid_subset_size < 2 {
            return bad("eval.per_class, eval.kid_subsets must be positive and eval.kid_subset_size >= 2".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        objective_for(self.method)
    }

    pub fn num_classes(&self) -> usize {
        match self.data.dataset {
            DatasetKind::TinyShapes => genflow::data::TINY_SHAPES_CLASSES,
            DatasetKind::Cifar10 => genflow::data::CIFAR_CLASSES,
            DatasetKind::Toy(t) => t.num_classes(),
        }
    }

    /// Network architecture implied by the dataset and method.
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let meanflow_mode = self.method == Method::MeanflowOnestep;
        let m = &self.model;
        Ok(match self.data.dataset {
            DatasetKind::Toy(_) => ModelConfig::Mlp(MlpConfig {
                data_dim: 2,
                hidden: m.hidden,
                depth: m.depth,
                time_embed_dim: m.time_embed_dim,
                num_classes: self.num_classes(),
                meanflow_mode,
                time_scale: m.time_scale,
            }),
            kind => {
                let (channels, size) = match kind {
                    DatasetKind::Cifar10 => (3, 32),
                    _ => (1, self.data.image_size),
                };
                ModelConfig::UNet(UNetConfig {
                    image_channels: channels,
                    image_size: size,
                    base_channels: m.base_channels,
                    channel_multipliers: m.channel_multipliers.clone(),
                    blocks_per_resolution: m.blocks_per_resolution,
                    time_embed_dim: m.time_embed_dim,
                    num_classes: self.num_classes(),
                    meanflow_mode,
                    time_scale: m.time_scale,
                })
            }
        })
    }

    /// Sampler settings for this run's method, unconditional, seeded by
    /// the run seed.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            method: self.method,
            steps: self.sampler.steps,
            cfg_scale: self.sampler.cfg_scale,
            class: None,
            seed: self.seed,
            batch: self.sampler.batch,
            clip_x0: self.sampler.clip_x0,
        }
    }

    /// Canonical text listing every key; parsing it gives back `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, rows: &[(&str, String)]| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in rows {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        section(
            "run",
            &[
                ("method", self.method.to_string()),
                ("seed", self.seed.to_string()),
                ("out_dir", self.out_dir.display().to_string()),
                ("checkpoint_every", self.checkpoint_every.to_string()),
            ],
        );
        let d = &self.data;
        let mut data = vec![("dataset", d.dataset.to_string())];
        if let Some(p) = &d.path {
            data.push(("path", p.display().to_string()));
        }
        data.extend([
            ("n", d.n.to_string()),
            ("holdout", d.holdout.to_string()),
            ("image_size", d.image_size.to_string()),
            ("seed", d.seed.to_string()),
        ]);
        section("data", &data);
        let m = &self.model;
        let mults: Vec<String> = m.channel_multipliers.iter().map(usize::to_string).collect();
        section(
            "model",
            &[
                ("base_channels", m.base_channels.to_string()),
                ("channel_multipliers", mults.join(",")),
                ("blocks_per_resolution", m.blocks_per_resolution.to_string()),
                ("time_embed_dim", m.time_embed_dim.to_string()),
                ("hidden", m.hidden.to_string()),
                ("depth", m.depth.to_string()),
                ("time_scale", m.time_scale.to_string()),
            ],
        );
        let t = &self.train;
        section(
            "train",
            &[
                ("lr", t.lr.to_string()),
                ("lr_min", t.lr_min.to_string()),
                ("weight_decay", t.weight_decay.to_string()),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("cfg_dropout", t.cfg_dropout_prob.to_string()),
            ],
        );
        let f = &self.finetune.hyper;
        section(
            "finetune",
            &[
                ("lr", f.lr.to_string()),
                ("lr_min", f.lr_min.to_string()),
                ("weight_decay", f.weight_decay.to_string()),
                ("epochs", f.epochs.to_string()),
                ("batch_size", f.batch_size.to_string()),
                ("cfg_dropout", f.cfg_dropout_prob.to_string()),
                ("mask_prob", f.mask_prob.to_string()),
                ("full_loss_weight", f.full_loss_weight.to_string()),
                ("masked_loss_weight", f.masked_loss_weight.to_string()),
                ("val_size", self.finetune.val_size.to_string()),
            ],
        );
        let sm = &self.sampler;
        section(
            "sampler",
            &[
                ("steps", sm.steps.to_string()),
                ("cfg_scale", sm.cfg_scale.to_string()),
                ("batch", sm.batch.to_string()),
                ("clip_x0", sm.clip_x0.to_string()),
            ],
        );
        let ev = &self.eval;
        section(
            "eval",
            &[
                ("per_class", ev.per_class.to_string()),
                ("feature_dim", ev.feature_dim.to_string()),
                ("kid_subsets", ev.kid_subsets.to_string()),
                ("kid_subset_size", ev.kid_subset_size.to_string()),
                ("inpaint_images", ev.inpaint_images.to_string()),
                ("mask_seed", ev.mask_seed.to_string()),
            ],
        );
        s.pop();
        s
    }
}

pub fn objective_for(method: Method) -> Objective {
    match method {
        Method::Ddim => Objective::Ddpm,
        Method::CfmEuler => Objective::Cfm,
        Method::MeanflowOnestep => Objective::MeanFlow,
    }
}

pub fn read_config_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}
