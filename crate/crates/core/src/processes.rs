//! Noise schedule, forward/interpolation processes, training losses and the
//! optimizer.

use rand::Rng;

use crate::autodiff::{Backend, DualEval, DualTensor, Ops, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{Label, NetInput, Network};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_OFFSET: f64 = 0.008;
/// Upper bound on a single-step beta when tabulating the schedule.
pub const MAX_BETA: f64 = 0.999;
/// Probability that `sample_rt` returns a degenerate interval.
pub const DEGENERATE_INTERVAL_PROB: f64 = 0.25;

// ---------------------------------------------------------------- schedule

/// `f(t) / f(0)` with `f(t) = cos²((t/T + s)/(1 + s) · π/2)`.
pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> Result<f64> {
    if steps == 0 || t > steps {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={steps}")));
    }
    let f = |t: f64| {
        let c = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    Ok((f(t as f64) / f(0.0)).clamp(0.0, 1.0))
}

/// Tabulated cumulative signal levels `ᾱ_0..=ᾱ_T`.
///
/// Entries follow [`cosine_alpha_bar`] except that each step's
/// `β_t = 1 − ᾱ_t/ᾱ_{t−1}` is capped at [`MAX_BETA`], which only touches the
/// final step and keeps `ᾱ_T` strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl CosineSchedule {
    pub fn new(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 || !(offset > 0.0) {
            return Err(Error::InvalidArgument(
                "schedule needs T >= 1 and a positive offset".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let raw = cosine_alpha_bar(t, steps, offset)?;
            let prev = alpha_bar[t - 1];
            let beta = (1.0 - raw / prev).min(MAX_BETA);
            alpha_bar.push(if beta < MAX_BETA { raw } else { prev * (1.0 - beta) });
        }
        Ok(Self {
            steps,
            offset,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_STEPS, DEFAULT_OFFSET).expect("default schedule is valid")
    }
}

pub(crate) fn per_example_combine(a: &Tensor, b: &Tensor, coeffs: impl Fn(usize) -> (f64, f64)) -> Result<Tensor> {
    if a.shape() != b.shape() || a.ndim() == 0 {
        return shape_err("combine", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let per = a.len() / a.shape()[0];
    let mut out = Vec::with_capacity(a.len());
    for (i, (ca, cb)) in a.data().chunks(per).zip(b.data().chunks(per)).enumerate() {
        let (wa, wb) = coeffs(i);
        out.extend(ca.iter().zip(cb).map(|(x, y)| wa * x + wb * y));
    }
    Tensor::new(a.shape(), out)
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε` with one timestep per batch element.
pub fn ddpm_forward(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &CosineSchedule) -> Result<Tensor> {
    if x0.shape().first() != Some(&t.len()) {
        return shape_err("ddpm_forward", format!("{} timesteps for {:?}", t.len(), x0.shape()));
    }
    if let Some(&bad) = t.iter().find(|&&t| t > schedule.steps()) {
        return Err(Error::InvalidArgument(format!("timestep {bad} beyond T")));
    }
    per_example_combine(x0, eps, |i| {
        let ab = schedule.alpha_bar(t[i]);
        (ab.sqrt(), (1.0 - ab).sqrt())
    })
}

/// `x_t = (1 − t) · x0 + t · x1` with one time per batch element.
pub fn cfm_interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape().first() != Some(&t.len()) {
        return shape_err("cfm_interpolate", format!("{} times for {:?}", t.len(), x0.shape()));
    }
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("interpolation time outside [0, 1]".into()));
    }
    per_example_combine(x0, x1, |i| (1.0 - t[i], t[i]))
}

/// The rectified-flow regression target `x1 − x0`; it does not depend on t.
pub fn cfm_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

// ---------------------------------------------------------------- hyper

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHyper {
    pub cfg_dropout_prob: f64,
    pub mask_prob: f64,
    pub full_loss_weight: f64,
    pub masked_loss_weight: f64,
    pub lr: f64,
    /// Cosine annealing floor.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainingHyper {
    /// Generation training: AdamW 3e-4 annealed to 1e-4, weight decay 0.01,
    /// batch 128, 10% label dropout, 200 epochs.
    pub fn generation() -> Self {
        Self {
            cfg_dropout_prob: 0.10,
            mask_prob: 0.0,
            full_loss_weight: 0.7,
            masked_loss_weight: 0.3,
            lr: 3e-4,
            lr_min: 1e-4,
            weight_decay: 0.01,
            epochs: 200,
            batch_size: 128,
        }
    }

    /// DDPM trains twice as long.
    pub fn ddpm() -> Self {
        Self {
            epochs: 400,
            ..Self::generation()
        }
    }

    /// Inpainting fine-tune: constant 5e-5, 20 epochs, half the batches
    /// masked, 15% label dropout.
    pub fn finetune() -> Self {
        Self {
            cfg_dropout_prob: 0.15,
            mask_prob: 0.5,
            lr: 5e-5,
            lr_min: 5e-5,
            epochs: 20,
            ..Self::generation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("cfg_dropout_prob", self.cfg_dropout_prob),
            ("mask_prob", self.mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.full_loss_weight < 0.0
            || self.masked_loss_weight < 0.0
            || (self.full_loss_weight + self.masked_loss_weight - 1.0).abs() > 1e-12
        {
            return Err(Error::Config("loss weights must be non-negative and sum to 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("weight decay must be >= 0 and batch size >= 1".into()));
        }
        Ok(())
    }
}

/// Replaces each label with the null token with probability `p`.
pub fn cfg_dropout<R: Rng + ?Sized>(labels: &[Label], p: f64, rng: &mut R) -> Vec<Label> {
    labels
        .iter()
        .map(|&y| if rng.random::<f64>() < p { None } else { y })
        .collect()
}

// ---------------------------------------------------------------- loss plumbing

/// A scalar loss and its gradient for every network parameter.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Records `f` on a fresh tape with the network parameters as leaves and
/// differentiates its scalar output.
pub fn with_param_grads<N: Network>(net: &N, f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<LossEval> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = net.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let grads = tape.grad(out, &vars)?;
    Ok(LossEval { value, grads })
}

fn net_input<B: Backend>(b: &mut B, x: Tensor, t: &[f64], r: Option<&[f64]>, labels: &[Label]) -> NetInput<B::Value> {
    NetInput {
        x: b.constant(x),
        t: b.constant(Tensor::from_vec(t.to_vec())),
        r: r.map(|r| b.constant(Tensor::from_vec(r.to_vec()))),
        labels: labels.to_vec(),
    }
}

fn batch_of(x: &Tensor) -> Result<usize> {
    x.shape()
        .first()
        .copied()
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::Shape {
            op: "loss",
            detail: format!("empty batch {:?}", x.shape()),
        })
}

// ---------------------------------------------------------------- DDPM

/// Random quantities behind one DDPM loss evaluation.
#[derive(Clone, Debug)]
pub struct DdpmDraws {
    pub steps: Vec<usize>,
    pub noise: Tensor,
    pub labels: Vec<Label>,
}

impl DdpmDraws {
    pub fn sample<R: Rng + ?Sized>(
        x0: &Tensor,
        labels: &[Label],
        schedule: &CosineSchedule,
        cfg_dropout_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let batch = batch_of(x0)?;
        let steps = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let noise = Tensor::randn(x0.shape(), rng);
        let labels = cfg_dropout(labels, cfg_dropout_prob, rng);
        Ok(Self { steps, noise, labels })
    }
}

/// `mean ‖ε − ε_θ(x_t, t/T, y)‖²`
pub fn ddpm_loss_with<N: Network, B: Backend>(
    b: &mut B,
    net: &N,
    params: &[B::Value],
    x0: &Tensor,
    schedule: &CosineSchedule,
    draws: &DdpmDraws,
) -> Result<B::Value> {
    let xt = ddpm_forward(x0, &draws.steps, &draws.noise, schedule)?;
    let times: Vec<f64> = draws
        .steps
        .iter()
        .map(|&t| t as f64 / schedule.steps() as f64)
        .collect();
    let input = net_input(b, xt, &times, None, &draws.labels);
    let pred = net.forward_with(b, params, &input)?;
    let target = b.constant(draws.noise.clone());
    b.mse(&pred, &target)
}

pub fn ddpm_loss<N: Network, R: Rng + ?Sized>(
    net: &N,
    x0: &Tensor,
    labels: &[Label],
    schedule: &CosineSchedule,
    cfg_dropout_prob: f64,
    rng: &mut R,
) -> Result<LossEval> {
    let draws = DdpmDraws::sample(x0, labels, schedule, cfg_dropout_prob, rng)?;
    with_param_grads(net, |tape, vars| ddpm_loss_with(tape, net, vars, x0, schedule, &draws))
}

// ---------------------------------------------------------------- CFM

/// Random quantities behind one flow-matching loss evaluation.
#[derive(Clone, Debug)]
pub struct CfmDraws {
    pub noise: Tensor,
    pub times: Vec<f64>,
    pub labels: Vec<Label>,
}

impl CfmDraws {
    pub fn sample<R: Rng + ?Sized>(x1: &Tensor, labels: &[Label], cfg_dropout_prob: f64, rng: &mut R) -> Result<Self> {
        let batch = batch_of(x1)?;
        let noise = Tensor::randn(x1.shape(), rng);
        let times = (0..batch).map(|_| rng.random::<f64>()).collect();
        let labels = cfg_dropout(labels, cfg_dropout_prob, rng);
        Ok(Self { noise, times, labels })
    }
}

/// `mean ‖v_θ(x_t, t, y) − (x1 − x0)‖²`
pub fn cfm_loss_with<N: Network, B: Backend>(
    b: &mut B,
    net: &N,
    params: &[B::Value],
    x1: &Tensor,
    draws: &CfmDraws,
) -> Result<B::Value> {
    let xt = cfm_interpolate(&draws.noise, x1, &draws.times)?;
    let target = b.constant(cfm_target(&draws.noise, x1)?);
    let input = net_input(b, xt, &draws.times, None, &draws.labels);
    let pred = net.forward_with(b, params, &input)?;
    b.mse(&pred, &target)
}

pub fn cfm_loss<N: Network, R: Rng + ?Sized>(
    net: &N,
    x1: &Tensor,
    labels: &[Label],
    cfg_dropout_prob: f64,
    rng: &mut R,
) -> Result<LossEval> {
    let draws = CfmDraws::sample(x1, labels, cfg_dropout_prob, rng)?;
    with_param_grads(net, |tape, vars| cfm_loss_with(tape, net, vars, x1, &draws))
}

// ---------------------------------------------------------------- inpainting fine-tune

/// Rejects anything but a 0/1 mask shaped like `x`.
pub fn check_binary_mask(mask: &Tensor, like: &Tensor) -> Result<()> {
    if mask.shape() != like.shape() {
        return shape_err("mask", format!("{:?} vs {:?}", mask.shape(), like.shape()));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    Ok(())
}

/// Known pixels (`mask == 1`) come from `known`, the rest from `other`.
pub fn replace_known(mask: &Tensor, known: &Tensor, other: &Tensor) -> Result<Tensor> {
    if mask.shape() != known.shape() || known.shape() != other.shape() {
        return shape_err("replace_known", "mask, known and other must share a shape");
    }
    let data = mask
        .data()
        .iter()
        .zip(known.data().iter().zip(other.data()))
        .map(|(&m, (&k, &o))| if m == 1.0 { k } else { o })
        .collect();
    Tensor::new(mask.shape(), data)
}

/// `w_full · L_full + w_masked · L_masked`, where the network sees
/// `x̃_t = m·x1 + (1−m)·x_t` and `L_masked` averages the squared error over
/// unknown (`m == 0`) elements only.
pub fn inpaint_finetune_loss_with<N: Network, B: Backend>(
    b: &mut B,
    net: &N,
    params: &[B::Value],
    x1: &Tensor,
    mask: &Tensor,
    draws: &CfmDraws,
    full_weight: f64,
    masked_weight: f64,
) -> Result<B::Value> {
    check_binary_mask(mask, x1)?;
    let xt = cfm_interpolate(&draws.noise, x1, &draws.times)?;
    let conditioned = replace_known(mask, x1, &xt)?;
    let target = b.constant(cfm_target(&draws.noise, x1)?);
    let input = net_input(b, conditioned, &draws.times, None, &draws.labels);
    let pred = net.forward_with(b, params, &input)?;
    let full = b.mse(&pred, &target)?;
    let unknown = mask.map(|m| 1.0 - m);
    let count = unknown.sum();
    let diff = b.sub(&pred, &target)?;
    let w = b.constant(unknown);
    let masked_diff = b.mul(&diff, &w)?;
    let sq = b.mul(&masked_diff, &masked_diff)?;
    let total = b.sum(&sq)?;
    let masked = b.scale(&total, if count > 0.0 { 1.0 / count } else { 0.0 })?;
    let a = b.scale(&full, full_weight)?;
    let c = b.scale(&masked, masked_weight)?;
    b.add(&a, &c)
}

pub fn inpaint_finetune_loss<N: Network, R: Rng + ?Sized>(
    net: &N,
    x1: &Tensor,
    labels: &[Label],
    mask: &Tensor,
    hyper: &TrainingHyper,
    rng: &mut R,
) -> Result<LossEval> {
    check_binary_mask(mask, x1)?;
    let draws = CfmDraws::sample(x1, labels, hyper.cfg_dropout_prob, rng)?;
    with_param_grads(net, |tape, vars| {
        inpaint_finetune_loss_with(
            tape,
            net,
            vars,
            x1,
            mask,
            &draws,
            hyper.full_loss_weight,
            hyper.masked_loss_weight,
        )
    })
}

// ---------------------------------------------------------------- MeanFlow

/// Interval `[r, t]` for the average-velocity objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtSample {
    pub r: f64,
    pub t: f64,
}

/// With probability 1/4 returns `r == t`; otherwise `t ~ U(0,1)` and
/// `r ~ U(0,t)`.
pub fn sample_rt<R: Rng + ?Sized>(rng: &mut R) -> RtSample {
    let degenerate = rng.random::<f64>() < DEGENERATE_INTERVAL_PROB;
    let t = rng.random::<f64>();
    if degenerate {
        RtSample { r: t, t }
    } else {
        RtSample {
            r: rng.random::<f64>() * t,
            t,
        }
    }
}

/// `v − (t − r) · (∂u/∂z · v + ∂u/∂t)`, evaluated with one dual-number pass
/// of the network (tangent `v` on z, 1 on t, 0 on r and the parameters).
///
/// The result is a plain tensor: nothing downstream differentiates through
/// it.
pub fn meanflow_target<N: Network>(
    net: &N,
    z: &Tensor,
    r: &[f64],
    t: &[f64],
    v: &Tensor,
    labels: &[Label],
) -> Result<Tensor> {
    let batch = batch_of(z)?;
    if r.len() != batch || t.len() != batch {
        return shape_err("meanflow_target", "one (r, t) pair per example");
    }
    if let Some(i) = (0..batch).find(|&i| r[i] > t[i]) {
        return Err(Error::InvalidArgument(format!(
            "interval start {} exceeds end {}",
            r[i], t[i]
        )));
    }
    let mut dual = DualEval;
    let params: Vec<DualTensor> = net.params().iter().map(|p| dual.constant(p.clone())).collect();
    let input = NetInput {
        x: DualTensor::new(z.clone(), v.clone())?,
        t: DualTensor::new(Tensor::from_vec(t.to_vec()), Tensor::ones(&[batch]))?,
        r: Some(DualTensor::constant(Tensor::from_vec(r.to_vec()))),
        labels: labels.to_vec(),
    };
    let out = net.forward_with(&mut dual, &params, &input)?;
    let (_, total_derivative) = out.into_parts();
    per_example_combine(v, &total_derivative, |i| (1.0, -(t[i] - r[i])))
}

/// Random quantities behind one MeanFlow loss evaluation.
#[derive(Clone, Debug)]
pub struct MeanFlowDraws {
    pub noise: Tensor,
    pub intervals: Vec<RtSample>,
    pub labels: Vec<Label>,
}

impl MeanFlowDraws {
    pub fn sample<R: Rng + ?Sized>(x1: &Tensor, labels: &[Label], cfg_dropout_prob: f64, rng: &mut R) -> Result<Self> {
        let batch = batch_of(x1)?;
        let noise = Tensor::randn(x1.shape(), rng);
        let intervals = (0..batch).map(|_| sample_rt(rng)).collect();
        let labels = cfg_dropout(labels, cfg_dropout_prob, rng);
        Ok(Self {
            noise,
            intervals,
            labels,
        })
    }

    pub fn r(&self) -> Vec<f64> {
        self.intervals.iter().map(|i| i.r).collect()
    }

    pub fn t(&self) -> Vec<f64> {
        self.intervals.iter().map(|i| i.t).collect()
    }
}

/// Data sits at t = 0 and noise at t = 1: `z_t = (1−t)·x1 + t·ε`,
/// `v = ε − x1`. Returns `(z_t, v)`.
pub fn meanflow_path(x1: &Tensor, noise: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    let z = cfm_interpolate(x1, noise, t)?;
    let v = noise.sub(x1)?;
    Ok((z, v))
}

/// `mean ‖u_θ(z_t, r, t, y) − sg(target)‖²` with a precomputed target.
pub fn meanflow_loss_with<N: Network, B: Backend>(
    b: &mut B,
    net: &N,
    params: &[B::Value],
    z: &Tensor,
    draws: &MeanFlowDraws,
    target: &Tensor,
) -> Result<B::Value> {
    let input = net_input(b, z.clone(), &draws.t(), Some(&draws.r()), &draws.labels);
    let pred = net.forward_with(b, params, &input)?;
    let target = b.constant(target.clone());
    b.mse(&pred, &target)
}

pub fn meanflow_loss<N: Network, R: Rng + ?Sized>(
    net: &N,
    x1: &Tensor,
    labels: &[Label],
    cfg_dropout_prob: f64,
    rng: &mut R,
) -> Result<LossEval> {
    let draws = MeanFlowDraws::sample(x1, labels, cfg_dropout_prob, rng)?;
    let (r, t) = (draws.r(), draws.t());
    let (z, v) = meanflow_path(x1, &draws.noise, &t)?;
    let target = meanflow_target(net, &z, &r, &t, &v, &draws.labels)?;
    with_param_grads(net, |tape, vars| {
        meanflow_loss_with(tape, net, vars, &z, &draws, &target)
    })
}

// ---------------------------------------------------------------- optimizer

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err("adamw", "parameter, gradient and state counts differ");
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return shape_err("adamw", format!("{:?} vs {:?}", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gv;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gv * gv;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *pv -= lr * weight_decay * *pv;
            *pv -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 to `lr1` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr1: f64) -> f64 {
    if total == 0 {
        return lr1;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * frac).cos())
}
