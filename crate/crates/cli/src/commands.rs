//! The subcommands, as library functions over resolved configuration.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use genflow::autodiff::Tensor;
use genflow::data::{load_cifar10_binary, tiny_shapes, toy_2d, Dataset, LabeledBatch, Split};
use genflow::evaluation::{derive_seed, generate_per_class, inpaint_batch, inpaint_with_masks};
use genflow::inpaint::{Mask, MaskKind};
use genflow::metrics::{
    feature_stats, fid, kid_with, FeatureExtractor, Flatten, GaussianStats, InpaintComparison, MethodSummary,
    MetricReport, PixelStats, Recovery,
};
use genflow::model::{build, Parameters};
use genflow::processes::CosineSchedule;
use genflow::samplers::{sample, throughput, Method, SamplerConfig};
use genflow::training::{Objective, Trainer};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, Entries, RunConfig};
use crate::error::{CliError, CliResult};
use crate::images::{ensure_parent, grid_columns, panel, save_mask, save_png, tile};

pub const LOSS_HEADER: &str = "step,epoch,loss,lr";
pub const LAST_CHECKPOINT: &str = "last.flow";
pub const FINETUNED_CHECKPOINT: &str = "finetuned.flow";

/// Training and held-out examples.
pub struct Data {
    pub train: Dataset,
    pub holdout: Dataset,
}

/// Builds the corpus named by the config. Synthetic sets draw training
/// and held-out examples from separate streams of `data.seed`.
pub fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    let d = &cfg.data;
    let rng = |split| ChaCha8Rng::seed_from_u64(derive_seed(d.seed, split, 0));
    let (train, holdout) = match d.dataset {
        DatasetKind::TinyShapes => (
            tiny_shapes(d.n, d.image_size, &mut rng(0))?,
            tiny_shapes(d.holdout, d.image_size, &mut rng(1))?,
        ),
        DatasetKind::Toy(kind) => (toy_2d(kind, d.n, &mut rng(0))?, toy_2d(kind, d.holdout, &mut rng(1))?),
        DatasetKind::Cifar10 => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| CliError::Config("data.path is required".into()))?;
            let train = load_cifar10_binary(path, Split::Train)?;
            let train = if d.n > 0 { train.take(d.n)? } else { train };
            (train, load_cifar10_binary(path, Split::Test)?.take(d.holdout)?)
        }
    };
    Ok(Data { train, holdout })
}

/// Applies `--set` overrides on top of a checkpoint's embedded config.
/// Architecture and data keys are fixed by the checkpoint.
pub fn reconfigure(base: &RunConfig, sets: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut e = Entries::parse(&base.render())?;
    for s in sets {
        let key = s.split_once('=').map_or(s.as_str(), |(k, _)| k).trim();
        if key.starts_with("model.") || key == "data.dataset" || key == "data.image_size" || key == "run.method" {
            return Err(CliError::Usage(format!("`{key}` is fixed by the checkpoint")));
        }
        e.set(s)?;
    }
    if let Some(seed) = seed {
        e.insert("run.seed", seed);
    }
    RunConfig::from_entries(&e)
}

/// Resolves a config file (optional) plus overrides and a seed.
pub fn resolve(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut e = match config {
        Some(p) => Entries::parse(&crate::config::read_config_text(p)?)?,
        None => Entries::default(),
    };
    for s in sets {
        e.set(s)?;
    }
    if let Some(seed) = seed {
        e.insert("run.seed", seed);
    }
    RunConfig::from_entries(&e)
}

struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    /// Appends to an existing log when resuming, otherwise starts afresh.
    fn open(path: PathBuf, append: bool) -> CliResult<Self> {
        ensure_parent(&path)?;
        let fresh = !append || !path.exists();
        let mut file = if fresh {
            File::create(&path)
        } else {
            OpenOptions::new().append(true).open(&path)
        }
        .map_err(CliError::io(&path))?;
        if fresh {
            writeln!(file, "{LOSS_HEADER}").map_err(CliError::io(&path))?;
        }
        Ok(Self { file, path })
    }

    fn row(&mut self, step: usize, epoch: usize, loss: f64, lr: f64) -> CliResult<()> {
        writeln!(self.file, "{step},{epoch},{loss},{lr}").map_err(CliError::io(&self.path))
    }
}

/// Runs epochs until `trainer.epoch == epochs`, logging every step and
/// checkpointing every `every` epochs and at the end.
fn run_epochs(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    data: &Dataset,
    log: &mut LossLog,
    prefix: &str,
    last: &str,
    mut after_epoch: impl FnMut(&Trainer, usize) -> CliResult<()>,
) -> CliResult<Vec<PathBuf>> {
    let epochs = trainer.hyper.epochs;
    let mut written = Vec::new();
    while trainer.epoch < epochs {
        let mut io_err = None;
        let summary = trainer.train_epoch(data, |s| {
            if io_err.is_none() {
                io_err = log.row(s.step, s.epoch, s.loss, s.lr).err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        info!("epoch {} mean loss {:.6}", summary.epoch + 1, summary.mean_loss);
        after_epoch(trainer, summary.epoch)?;
        let done = trainer.epoch;
        if done % cfg.checkpoint_every == 0 || done == epochs {
            Checkpoint::round_trip_precision(trainer);
            let ck = Checkpoint::of_trainer(trainer, cfg);
            let path = cfg.out_dir.join(format!("{prefix}-{done:04}.flow"));
            ck.save(&path)?;
            ck.save(&cfg.out_dir.join(last))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Trains from scratch, or continues a checkpoint with its step numbering.
/// Writes `loss.csv`, `config.txt`, periodic checkpoints and `last.flow`.
pub fn train(cfg: &RunConfig, resume: Option<Checkpoint>) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    let objective = cfg.objective();
    let mut trainer = match resume {
        Some(ck) => {
            if ck.objective != objective {
                return Err(CliError::Usage(format!(
                    "cannot resume a {} checkpoint as {} training",
                    ck.objective, objective
                )));
            }
            let mut ck = ck;
            ck.config = cfg.clone();
            ck.into_trainer(data.train.len())?
        }
        None => {
            let params = build(&cfg.model_config()?, derive_seed(cfg.seed, 0, 0))?;
            Trainer::new(
                objective,
                cfg.train.clone(),
                params,
                derive_seed(cfg.seed, 0, 1),
                data.train.len(),
            )?
        }
    };
    let resuming = trainer.step > 0;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.render())?;
    let mut log = LossLog::open(cfg.out_dir.join("loss.csv"), resuming)?;
    run_epochs(
        &mut trainer,
        cfg,
        &data.train,
        &mut log,
        "checkpoint",
        LAST_CHECKPOINT,
        |_, _| Ok(()),
    )
}

/// Fine-tunes a flow-matching checkpoint for inpainting. After every epoch
/// scores masked-region PSNR per mask kind on held-out images into
/// `finetune_val.csv`.
pub fn finetune(base: Checkpoint, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    if !matches!(base.objective, Objective::Cfm | Objective::InpaintFinetune) {
        return Err(CliError::Usage(format!(
            "fine-tuning needs a flow-matching checkpoint, got {}",
            base.objective
        )));
    }
    if !cfg.data.dataset.is_image() {
        return Err(CliError::Usage("inpainting fine-tune needs an image dataset".into()));
    }
    let data = load_data(cfg)?;
    let mut trainer = Trainer::new(
        Objective::InpaintFinetune,
        cfg.finetune.hyper.clone(),
        base.params,
        derive_seed(cfg.seed, 1, 1),
        data.train.len(),
    )?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.render())?;
    let mut log = LossLog::open(cfg.out_dir.join("finetune_loss.csv"), false)?;
    let val = data.holdout.take(cfg.finetune.val_size)?;
    let val_path = cfg.out_dir.join("finetune_val.csv");
    let mut val_csv = String::from("epoch,mask,psnr_db\n");
    write_text(&val_path, &val_csv)?;
    let sampler = inpaint_sampler(cfg);
    run_epochs(
        &mut trainer,
        cfg,
        &data.train,
        &mut log,
        "finetune",
        FINETUNED_CHECKPOINT,
        |t, epoch| {
            if val.is_empty() {
                return Ok(());
            }
            let batch = val.all()?;
            for kind in MaskKind::GENERATED {
                let run = inpaint_batch(&t.params, &batch, kind, &sampler, cfg.eval.mask_seed)?;
                let psnr = run.scores.psnr.map_or_else(|| "absent".into(), |v| v.to_string());
                info!("epoch {} {kind} psnr {psnr}", epoch + 1);
                let _ = writeln!(val_csv, "{epoch},{kind},{psnr}");
            }
            write_text(&val_path, &val_csv)
        },
    )
}

/// Flow sampler settings used for inpainting, whatever the run's method.
pub fn inpaint_sampler(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        method: Method::CfmEuler,
        ..cfg.sampler_config()
    }
}

/// Samples drawn in chunks of `sampler.batch`, each chunk seeded from the
/// run seed.
pub struct Drawn {
    pub samples: Tensor,
    pub nfe_steps: usize,
    pub model_evals: usize,
}

pub fn draw(params: &Parameters, cfg: &RunConfig, n: usize, class: Option<usize>) -> CliResult<Drawn> {
    if n == 0 {
        return Err(CliError::Usage("asked for zero samples".into()));
    }
    if let Some(c) = class.filter(|&c| c >= cfg.num_classes()) {
        return Err(CliError::Usage(format!(
            "class {c} out of range 0..{}",
            cfg.num_classes()
        )));
    }
    let schedule = CosineSchedule::default();
    let base = cfg.sampler_config().with_class(class);
    let (mut parts, mut nfe, mut evals) = (Vec::new(), 0, 0);
    let mut done = 0;
    let mut chunk = 0u64;
    while done < n {
        let batch = base.batch.min(n - done);
        let c = base
            .clone()
            .with_batch(batch)
            .with_seed(derive_seed(cfg.seed, u64::MAX, chunk));
        let out = sample(params, &schedule, &c)?;
        parts.push(out.images);
        nfe = out.nfe_steps;
        evals += out.model_evals;
        done += batch;
        chunk += 1;
    }
    Ok(Drawn {
        samples: genflow::evaluation::concat_batches(&parts)?,
        nfe_steps: nfe,
        model_evals: evals,
    })
}

/// Writes `n` samples as a PNG grid (images) or `x,y` CSV (points).
pub fn sample_to(ck: &Checkpoint, cfg: &RunConfig, n: usize, class: Option<usize>, out: &Path) -> CliResult<Drawn> {
    let drawn = draw(&ck.params, cfg, n, class)?;
    if cfg.data.dataset.is_image() {
        save_png(&tile(&drawn.samples, grid_columns(n))?, out)?;
    } else {
        let mut csv = String::from("x,y\n");
        for row in drawn.samples.data().chunks(2) {
            let _ = writeln!(csv, "{},{}", row[0], row[1]);
        }
        write_text(out, &csv)?;
    }
    info!(
        "{} samples, nfe {} per sample, {} model evaluations",
        n, drawn.nfe_steps, drawn.model_evals
    );
    Ok(drawn)
}

/// A class-per-row grid: generated samples from a checkpoint, or held-out
/// examples of the configured dataset.
pub fn grid_to(params: Option<&Parameters>, cfg: &RunConfig, per_class: usize, out: &Path) -> CliResult<()> {
    if !cfg.data.dataset.is_image() {
        return Err(CliError::Usage("grids need an image dataset".into()));
    }
    if per_class == 0 {
        return Err(CliError::Usage("per-class count must be positive".into()));
    }
    let images = match params {
        Some(p) => {
            let sc = cfg.sampler_config();
            generate_per_class(p, &CosineSchedule::default(), &sc, per_class)?.samples
        }
        None => {
            let data = load_data(cfg)?;
            let mut rows = Vec::new();
            for class in 0..cfg.num_classes() {
                let mut idx = data.holdout.class_indices(class);
                if idx.len() < per_class {
                    return Err(CliError::Usage(format!(
                        "only {} held-out examples of class {class}",
                        idx.len()
                    )));
                }
                idx.truncate(per_class);
                rows.extend(idx);
            }
            data.holdout.batch(&rows)?.images
        }
    };
    save_png(&tile(&images, per_class)?, out)
}

#[derive(Clone, Debug)]
pub enum MaskSource {
    Kind(MaskKind),
    File(PathBuf),
}

impl std::str::FromStr for MaskSource {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.parse::<MaskKind>() {
            Ok(MaskKind::Custom) | Err(_) => {
                let p = PathBuf::from(s);
                if p.extension().is_some() {
                    Ok(MaskSource::File(p))
                } else {
                    Err(CliError::Usage(format!(
                        "unknown mask kind `{s}` (center, random_bbox, irregular, half, or a mask file)"
                    )))
                }
            }
            Ok(kind) => Ok(MaskSource::Kind(kind)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintScores {
    pub base: Recovery,
    pub finetuned: Option<Recovery>,
}

/// Inpaints the first `n` held-out images with the base (and optionally
/// fine-tuned) model, writing an `Original → Masked → Base → Fine-tuned`
/// panel, the masks, and `model,mask,metric,value` scores next to it.
pub fn inpaint_to(
    base: &Checkpoint,
    finetuned: Option<&Checkpoint>,
    cfg: &RunConfig,
    mask: &MaskSource,
    n: usize,
    out: &Path,
) -> CliResult<InpaintScores> {
    if !cfg.data.dataset.is_image() {
        return Err(CliError::Usage("inpainting needs an image dataset".into()));
    }
    if let Some(ft) = finetuned {
        if ft.params.config() != base.params.config() {
            return Err(CliError::Usage(
                "base and fine-tuned checkpoints differ in architecture".into(),
            ));
        }
    }
    let data = load_data(cfg)?;
    let batch = data.holdout.take(n)?.all()?;
    if batch.is_empty() {
        return Err(CliError::Usage("no held-out images to inpaint".into()));
    }
    let masks = match mask {
        MaskSource::Kind(kind) => genflow::evaluation::kind_masks(batch.images.shape(), *kind, cfg.eval.mask_seed)?,
        MaskSource::File(p) => {
            let m = crate::images::load_mask(p)?;
            broadcast_mask(&m, &batch)?
        }
    };
    let sampler = inpaint_sampler(cfg);
    let b = inpaint_with_masks(&base.params, &batch, &masks, &sampler)?;
    let f = finetuned
        .map(|ft| inpaint_with_masks(&ft.params, &batch, &masks, &sampler))
        .transpose()?;
    let mut columns = vec![&b.results];
    if let Some(f) = &f {
        columns.push(&f.results);
    }
    save_png(&panel(&batch.images, &masks, &columns)?, out)?;
    let first = Mask::custom(masks.index_axis0(0)?.index_axis0(0)?)?;
    save_mask(&first, &out.with_extension("mask.pgm"))?;
    let label = match mask {
        MaskSource::Kind(k) => k.name().to_string(),
        MaskSource::File(_) => MaskKind::Custom.name().to_string(),
    };
    let mut csv = String::from("model,mask,metric,value\n");
    let mut rows = |model: &str, r: &Recovery| {
        for (metric, v) in [("nmse", r.nmse), ("psnr_db", r.psnr), ("ssim", r.ssim)] {
            let v = v.map_or_else(|| "absent".into(), |v| v.to_string());
            let _ = writeln!(csv, "{model},{label},{metric},{v}");
        }
    };
    rows("base", &b.scores);
    if let Some(f) = &f {
        rows("finetuned", &f.scores);
    }
    write_text(&out.with_extension("csv"), &csv)?;
    Ok(InpaintScores {
        base: b.scores,
        finetuned: f.map(|f| f.scores),
    })
}

fn broadcast_mask(m: &Mask, batch: &LabeledBatch) -> CliResult<Tensor> {
    let shape = batch.images.shape();
    if (m.height(), m.width()) != (shape[2], shape[3]) {
        return Err(CliError::Usage(format!(
            "mask is {}x{}, images are {}x{}",
            m.height(),
            m.width(),
            shape[2],
            shape[3]
        )));
    }
    Ok(m.broadcast(shape)?)
}

fn extractor(cfg: &RunConfig) -> Box<dyn FeatureExtractor> {
    if cfg.data.dataset.is_image() {
        Box::new(PixelStats::new(cfg.eval.feature_dim, 0))
    } else {
        Box::new(Flatten)
    }
}

/// Generation metrics for one model against the held-out set.
fn evaluate_model(
    params: &Parameters,
    cfg: &RunConfig,
    reference: &LabeledBatch,
    timing: bool,
) -> CliResult<(MethodSummary, Vec<(usize, Option<f64>)>)> {
    let schedule = CosineSchedule::default();
    let sc = cfg.sampler_config();
    let gen = generate_per_class(params, &schedule, &sc, cfg.eval.per_class)?;
    let ext = extractor(cfg);
    let (fg, fr) = (ext.extract(&gen.samples)?, ext.extract(&reference.images)?);
    let fid_all = fid(&GaussianStats::from_features(&fg)?, &GaussianStats::from_features(&fr)?)?;
    let subset = cfg.eval.kid_subset_size.min(fg.shape()[0]).min(fr.shape()[0]);
    let kid = kid_with(&fg, &fr, cfg.eval.kid_subsets, subset, cfg.seed)?;
    let mut per_class = Vec::new();
    for class in 0..cfg.num_classes() {
        let gi: Vec<usize> = (0..gen.labels.len()).filter(|&i| gen.labels[i] == class).collect();
        let ri: Vec<usize> = (0..reference.labels.len())
            .filter(|&i| reference.labels[i] == class)
            .collect();
        let v = if gi.len() < 2 || ri.len() < 2 {
            None
        } else {
            let a = feature_stats(&gen.samples.gather_axis0(&gi)?, ext.as_ref())?;
            let b = feature_stats(&reference.images.gather_axis0(&ri)?, ext.as_ref())?;
            Some(fid(&a, &b)?)
        };
        per_class.push((class, v));
    }
    let images_per_sec = if timing {
        Some(throughput(params, &schedule, &sc, sc.batch)?.images_per_sec)
    } else {
        None
    };
    Ok((
        MethodSummary {
            fid: Some(fid_all),
            kid_x1000: Some(kid * 1000.0),
            nfe: Some(gen.nfe_steps),
            images_per_sec,
        },
        per_class,
    ))
}

/// Evaluation inputs: generation models keyed by display name, plus an
/// optional base/fine-tuned pair for the inpainting table.
pub struct EvalInputs<'a> {
    pub models: Vec<(String, &'a Checkpoint, RunConfig)>,
    pub inpaint: Option<(&'a Checkpoint, &'a Checkpoint, RunConfig)>,
    pub timing: bool,
}

/// Display name for a checkpoint: its sampler, with a suffix for
/// fine-tuned weights and a counter for repeats.
pub fn model_name(ck: &Checkpoint, taken: &[String]) -> String {
    let mut name = ck.config.method.name().to_string();
    if ck.objective == Objective::InpaintFinetune {
        name.push_str("_finetuned");
    }
    let mut candidate = name.clone();
    let mut k = 2;
    while taken.contains(&candidate) {
        candidate = format!("{name}_{k}");
        k += 1;
    }
    candidate
}

pub fn evaluate(inputs: &EvalInputs) -> CliResult<MetricReport> {
    let mut report = MetricReport::new();
    for (name, ck, cfg) in &inputs.models {
        let reference = load_data(cfg)?.holdout.all()?;
        let (summary, per_class) = evaluate_model(&ck.params, cfg, &reference, inputs.timing)?;
        report.overall.insert(name.clone(), summary);
        for (class, v) in per_class {
            report.per_class.insert((name.clone(), class.to_string()), v);
        }
    }
    if let Some((base, ft, cfg)) = &inputs.inpaint {
        if base.params.config() != ft.params.config() {
            return Err(CliError::Usage(
                "base and fine-tuned checkpoints differ in architecture".into(),
            ));
        }
        if !cfg.data.dataset.is_image() {
            return Err(CliError::Usage("inpainting needs an image dataset".into()));
        }
        let batch = load_data(cfg)?.holdout.take(cfg.eval.inpaint_images)?.all()?;
        let sampler = inpaint_sampler(cfg);
        for kind in MaskKind::GENERATED {
            let b = inpaint_batch(&base.params, &batch, kind, &sampler, cfg.eval.mask_seed)?;
            let f = inpaint_batch(&ft.params, &batch, kind, &sampler, cfg.eval.mask_seed)?;
            report.inpainting.insert(
                kind.name().to_string(),
                InpaintComparison {
                    base: b.scores,
                    finetuned: f.scores,
                },
            );
        }
    }
    Ok(report)
}
