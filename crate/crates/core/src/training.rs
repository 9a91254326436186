//! The training loop shared by every objective: shuffled epochs, AdamW with
//! cosine annealing, and the inpainting fine-tune schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{batches, Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::inpaint::{gen_mask, MaskKind};
use crate::model::{ModelConfig, Parameters};
use crate::processes::{
    adamw_step, cfm_loss, cosine_lr, ddpm_loss, inpaint_finetune_loss, meanflow_loss, AdamWState, CosineSchedule,
    LossEval, TrainingHyper,
};

/// Stream id of the generator that decides and draws fine-tuning masks.
pub const MASK_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Ddpm,
    Cfm,
    MeanFlow,
    /// Flow matching with a share of batches trained under random masks.
    InpaintFinetune,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ddpm => "ddpm",
            Objective::Cfm => "cfm",
            Objective::MeanFlow => "meanflow",
            Objective::InpaintFinetune => "finetune",
        }
    }

    /// Default hyperparameters for this objective.
    pub fn default_hyper(self) -> TrainingHyper {
        match self {
            Objective::Ddpm => TrainingHyper::ddpm(),
            Objective::Cfm | Objective::MeanFlow => TrainingHyper::generation(),
            Objective::InpaintFinetune => TrainingHyper::finetune(),
        }
    }

    fn check_model(self, config: &ModelConfig) -> Result<()> {
        let meanflow = config.meanflow_mode();
        if meanflow != (self == Objective::MeanFlow) {
            return Err(Error::Config(format!(
                "{} training with a model whose meanflow_mode is {meanflow}",
                self.name()
            )));
        }
        if self == Objective::InpaintFinetune && !matches!(config, ModelConfig::UNet(_)) {
            return Err(Error::Config("inpainting fine-tune needs an image model".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Objective::Ddpm),
            "cfm" => Ok(Objective::Cfm),
            "meanflow" => Ok(Objective::MeanFlow),
            "finetune" => Ok(Objective::InpaintFinetune),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based count of optimizer updates so far.
    pub step: usize,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Serializable state of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Owns the model, optimizer state, counters and random streams of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub objective: Objective,
    pub hyper: TrainingHyper,
    pub schedule: CosineSchedule,
    pub params: Parameters,
    pub opt: AdamWState,
    /// Completed optimizer updates.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Shuffling, noise, times and label dropout.
    pub rng: ChaCha8Rng,
    /// Mask decisions and shapes during fine-tuning; kept apart so that a
    /// zero mask probability leaves the main stream untouched.
    pub mask_rng: ChaCha8Rng,
    /// Steps over which the learning rate anneals.
    pub horizon: usize,
}

impl Trainer {
    /// A fresh run over a dataset of `dataset_len` examples.
    pub fn new(
        objective: Objective,
        hyper: TrainingHyper,
        params: Parameters,
        seed: u64,
        dataset_len: usize,
    ) -> Result<Self> {
        hyper.validate()?;
        objective.check_model(params.config())?;
        let opt = AdamWState::new(params.tensors());
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        mask_rng.set_stream(MASK_STREAM);
        let horizon = hyper.epochs * dataset_len.div_ceil(hyper.batch_size);
        Ok(Self {
            objective,
            hyper,
            schedule: CosineSchedule::default(),
            params,
            opt,
            step: 0,
            epoch: 0,
            rng,
            mask_rng,
            horizon,
        })
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.horizon, self.hyper.lr, self.hyper.lr_min)
    }

    fn loss(&mut self, batch: &LabeledBatch) -> Result<(LossEval, bool)> {
        let x = &batch.images;
        let labels = batch.conditioning();
        let p = self.hyper.cfg_dropout_prob;
        let out = match self.objective {
            Objective::Ddpm => (
                ddpm_loss(&self.params, x, &labels, &self.schedule, p, &mut self.rng)?,
                false,
            ),
            Objective::Cfm => (cfm_loss(&self.params, x, &labels, p, &mut self.rng)?, false),
            Objective::MeanFlow => (meanflow_loss(&self.params, x, &labels, p, &mut self.rng)?, false),
            Objective::InpaintFinetune => {
                if self.mask_rng.random::<f64>() < self.hyper.mask_prob {
                    let mask = random_masks(x.shape(), &mut self.mask_rng)?;
                    let l = inpaint_finetune_loss(&self.params, x, &labels, &mask, &self.hyper, &mut self.rng)?;
                    (l, true)
                } else {
                    (cfm_loss(&self.params, x, &labels, p, &mut self.rng)?, false)
                }
            }
        };
        Ok(out)
    }

    /// One optimizer update on a batch.
    pub fn train_step(&mut self, batch: &LabeledBatch) -> Result<StepLog> {
        let lr = self.lr();
        let (eval, masked) = self.loss(batch)?;
        if !eval.value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adamw_step(
            self.params.tensors_mut(),
            &eval.grads,
            &mut self.opt,
            lr,
            self.hyper.weight_decay,
        )?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: self.epoch,
            loss: eval.value,
            lr,
            masked,
        })
    }

    /// One shuffled pass over `data`, reporting every step to `log`.
    pub fn train_epoch(&mut self, data: &Dataset, mut log: impl FnMut(&StepLog)) -> Result<EpochSummary> {
        let order = batches(data, self.hyper.batch_size, &mut self.rng)?;
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order {
            let s = self.train_step(&batch?)?;
            log(&s);
            total += s.loss;
            steps += 1;
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            mean_loss: total / steps.max(1) as f64,
        };
        self.epoch += 1;
        Ok(summary)
    }
}

/// One random mask per example, with the kind drawn uniformly from the four
/// generators; broadcast over channels.
pub fn random_masks<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let &[b, c, h, w] = shape else {
        return Err(Error::InvalidArgument(format!(
            "masks need image batches, got {shape:?}"
        )));
    };
    if h != w {
        return Err(Error::InvalidArgument("masks need square images".into()));
    }
    let mut data = Vec::with_capacity(b * c * h * w);
    for _ in 0..b {
        let kind = MaskKind::GENERATED[rng.random_range(0..MaskKind::GENERATED.len())];
        let m = gen_mask(kind, h, rng)?;
        for _ in 0..c {
            data.extend_from_slice(m.values().data());
        }
    }
    Tensor::new(shape, data)
}
