//! Deterministic DDIM, guided Euler integration for flow matching, and
//! one-step MeanFlow generation, with step and forward-pass accounting.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Label, Network, Parameters};
use crate::processes::{per_example_combine, CosineSchedule};

/// Default integration steps for flow-matching sampling.
pub const DEFAULT_CFM_STEPS: usize = 50;
/// Default guidance scale for flow-matching sampling.
pub const DEFAULT_CFG_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Ddim,
    CfmEuler,
    MeanflowOnestep,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::CfmEuler => "cfm_euler",
            Method::MeanflowOnestep => "meanflow_onestep",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Method::Ddim),
            "cfm_euler" | "cfm" => Ok(Method::CfmEuler),
            "meanflow_onestep" | "meanflow" => Ok(Method::MeanflowOnestep),
            other => Err(Error::Config(format!("unknown sampling method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Class to generate; `None` samples unconditionally.
    pub class: Label,
    pub seed: u64,
    pub batch: usize,
    /// Clamp DDIM's intermediate x0 estimate to [-1, 1].
    pub clip_x0: bool,
}

impl SamplerConfig {
    pub fn ddim(steps: usize) -> Self {
        Self {
            method: Method::Ddim,
            steps,
            cfg_scale: 0.0,
            class: None,
            seed: 0,
            batch: 16,
            clip_x0: false,
        }
    }

    pub fn cfm(steps: usize, cfg_scale: f64) -> Self {
        Self {
            method: Method::CfmEuler,
            steps,
            cfg_scale,
            ..Self::ddim(steps)
        }
    }

    pub fn meanflow(cfg_scale: f64) -> Self {
        Self {
            method: Method::MeanflowOnestep,
            steps: 1,
            cfg_scale,
            ..Self::ddim(1)
        }
    }

    pub fn with_class(mut self, class: Label) -> Self {
        self.class = class;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if self.method == Method::MeanflowOnestep && self.steps != 1 {
            return Err(Error::Config(format!("one-step sampling with steps = {}", self.steps)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {}", self.cfg_scale)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size 0".into()));
        }
        Ok(())
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::Config(format!(
                "configured for {} but called as {}",
                self.method, method
            )));
        }
        self.validate()
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::cfm(DEFAULT_CFM_STEPS, DEFAULT_CFG_SCALE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub images: Tensor,
    /// Integration steps.
    pub nfe_steps: usize,
    /// Network forward passes; twice the steps when guidance needs the
    /// unconditional branch.
    pub model_evals: usize,
}

/// `N(0, I)` noise of shape `[batch, ...shape]` from a seed.
pub fn initial_noise(seed: u64, batch: usize, shape: &[usize]) -> Tensor {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    Tensor::randn(&full, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Guided prediction `f∅ + w·(f_y − f∅)`, plus the number of forward passes
/// used.
///
/// `w = 0` is a single unconditional pass and `w = 1` a single conditional
/// one; a batch with no class labels needs one pass for any `w`.
pub fn cfg_velocity<N: Network>(
    net: &N,
    x: &Tensor,
    t: &[f64],
    r: Option<&[f64]>,
    labels: &[Label],
    w: f64,
) -> Result<(Tensor, usize)> {
    let null = vec![None; labels.len()];
    if w == 0.0 {
        return Ok((net.eval(x, t, r, &null)?, 1));
    }
    if w == 1.0 || labels.iter().all(Option::is_none) {
        return Ok((net.eval(x, t, r, labels)?, 1));
    }
    let cond = net.eval(x, t, r, labels)?;
    let uncond = net.eval(x, t, r, &null)?;
    let out = uncond.zip_map(&cond, |u, c| u + w * (c - u))?;
    Ok((out, 2))
}

fn batch_labels(x: &Tensor, class: Label) -> Result<(usize, Vec<Label>)> {
    let batch = *x
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("sampling needs a batch axis".into()))?;
    Ok((batch, vec![class; batch]))
}

/// DDIM timesteps `round(T·(N−i)/N)` for `i = 0..=N`, from T down to 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "{steps} DDIM steps over a {total}-step schedule"
        )));
    }
    Ok((0..=steps)
        .map(|i| ((total * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect())
}

/// One deterministic jump from `ᾱ_from` to `ᾱ_to` given a noise prediction:
/// estimate x0, then re-noise it with the same ε.
pub fn ddim_step(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64, clip_x0: bool) -> Result<Tensor> {
    let (sa, sn) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let mut x0 = x.zip_map(eps, |x, e| (x - sn * e) / sa)?;
    if clip_x0 {
        x0 = x0.map(|v| v.clamp(-1.0, 1.0));
    }
    let (ta, tn) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    x0.zip_map(eps, |x0, e| ta * x0 + tn * e)
}

/// DDIM from a given `x_T`.
pub fn ddim_sample_from<N: Network>(
    net: &N,
    schedule: &CosineSchedule,
    config: &SamplerConfig,
    x_t: Tensor,
) -> Result<SampleResult> {
    config.expect(Method::Ddim)?;
    let (batch, labels) = batch_labels(&x_t, config.class)?;
    let total = schedule.steps();
    let taus = ddim_timesteps(total, config.steps)?;
    let mut x = x_t;
    let mut evals = 0;
    for pair in taus.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let t = vec![from as f64 / total as f64; batch];
        let (eps, n) = cfg_velocity(net, &x, &t, None, &labels, config.cfg_scale)?;
        evals += n;
        x = ddim_step(
            &x,
            &eps,
            schedule.alpha_bar(from),
            schedule.alpha_bar(to),
            config.clip_x0,
        )?;
    }
    Ok(SampleResult {
        images: x,
        nfe_steps: config.steps,
        model_evals: evals,
    })
}

pub fn ddim_sample(params: &Parameters, schedule: &CosineSchedule, config: &SamplerConfig) -> Result<SampleResult> {
    config.expect(Method::Ddim)?;
    let noise = initial_noise(config.seed, config.batch, &params.config().sample_shape());
    ddim_sample_from(params, schedule, config, noise)
}

/// Euler integration of the guided velocity from `t = 0` to `t = 1`.
pub fn cfm_euler_from<N: Network>(net: &N, config: &SamplerConfig, z0: Tensor) -> Result<SampleResult> {
    config.expect(Method::CfmEuler)?;
    let (batch, labels) = batch_labels(&z0, config.class)?;
    let n = config.steps;
    let h = 1.0 / n as f64;
    let mut z = z0;
    let mut evals = 0;
    for i in 0..n {
        let t = vec![i as f64 * h; batch];
        let (v, k) = cfg_velocity(net, &z, &t, None, &labels, config.cfg_scale)?;
        evals += k;
        z = z.zip_map(&v, |z, v| z + h * v)?;
    }
    Ok(SampleResult {
        images: z,
        nfe_steps: n,
        model_evals: evals,
    })
}

pub fn cfm_euler_sample(params: &Parameters, config: &SamplerConfig) -> Result<SampleResult> {
    config.expect(Method::CfmEuler)?;
    let noise = initial_noise(config.seed, config.batch, &params.config().sample_shape());
    cfm_euler_from(params, config, noise)
}

/// `x = ε − u(ε, r = 0, t = 1)`, with guidance applied to `u`.
pub fn meanflow_onestep_from<N: Network>(net: &N, config: &SamplerConfig, eps: Tensor) -> Result<SampleResult> {
    config.expect(Method::MeanflowOnestep)?;
    let (batch, labels) = batch_labels(&eps, config.class)?;
    let (u, evals) = cfg_velocity(
        net,
        &eps,
        &vec![1.0; batch],
        Some(&vec![0.0; batch]),
        &labels,
        config.cfg_scale,
    )?;
    let images = per_example_combine(&eps, &u, |_| (1.0, -1.0))?;
    Ok(SampleResult {
        images,
        nfe_steps: 1,
        model_evals: evals,
    })
}

pub fn meanflow_onestep(params: &Parameters, config: &SamplerConfig) -> Result<SampleResult> {
    config.expect(Method::MeanflowOnestep)?;
    let noise = initial_noise(config.seed, config.batch, &params.config().sample_shape());
    meanflow_onestep_from(params, config, noise)
}

/// Dispatches on `config.method`; the schedule is only used by DDIM.
pub fn sample(params: &Parameters, schedule: &CosineSchedule, config: &SamplerConfig) -> Result<SampleResult> {
    match config.method {
        Method::Ddim => ddim_sample(params, schedule, config),
        Method::CfmEuler => cfm_euler_sample(params, config),
        Method::MeanflowOnestep => meanflow_onestep(params, config),
    }
}

/// Throughput measurement over `n_images`, generated in batches of
/// `config.batch` after one warm-up batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub model_evals: usize,
    pub nfe_steps: usize,
}

pub fn throughput(
    params: &Parameters,
    schedule: &CosineSchedule,
    config: &SamplerConfig,
    n_images: usize,
) -> Result<Throughput> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("throughput over zero images".into()));
    }
    sample(params, schedule, &config.clone().with_batch(config.batch.min(n_images)))?;
    let start = Instant::now();
    let (mut done, mut evals, mut nfe) = (0, 0, 0);
    let mut seed = config.seed;
    while done < n_images {
        let batch = config.batch.min(n_images - done);
        let out = sample(params, schedule, &config.clone().with_batch(batch).with_seed(seed))?;
        done += batch;
        evals += out.model_evals;
        nfe += out.nfe_steps;
        seed = seed.wrapping_add(1);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(Throughput {
        images_per_sec: n_images as f64 / secs,
        model_evals: evals,
        nfe_steps: nfe,
    })
}

#[cfg(test)]
mod tests;
