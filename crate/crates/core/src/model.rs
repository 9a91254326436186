//! The shared denoiser/velocity network.
//!
//! One parameter set serves all three paradigms: DDPM predicts noise from
//! `t/T`, flow matching predicts velocity from `t`, and MeanFlow predicts an
//! average velocity from `(r, t)`. A dense variant with the same conditioning
//! handles low-dimensional toy data.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Backend, Eval, Ops, Tensor};
use crate::error::{Error, Result};

/// Class label; `None` selects the null (unconditional) embedding.
pub type Label = Option<usize>;

pub const GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;
pub const PARAM_BUDGET: usize = 1_500_000;

/// Output-layer weights start this much smaller than the fan-in bound.
const OUTPUT_INIT_SCALE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
    /// Adds the interval start `r` as a second time input.
    pub meanflow_mode: bool,
    /// Times are multiplied by this before the sinusoidal embedding.
    pub time_scale: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_resolution: 2,
            time_embed_dim: 128,
            num_classes: 10,
            meanflow_mode: false,
            time_scale: 1000.0,
        }
    }
}

/// Dense network for points in `R^data_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
    pub meanflow_mode: bool,
    pub time_scale: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 128,
            depth: 3,
            time_embed_dim: 64,
            num_classes: 8,
            meanflow_mode: false,
            time_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    UNet(UNetConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::UNet(c) => c.num_classes,
            ModelConfig::Mlp(c) => c.num_classes,
        }
    }

    pub fn meanflow_mode(&self) -> bool {
        match self {
            ModelConfig::UNet(c) => c.meanflow_mode,
            ModelConfig::Mlp(c) => c.meanflow_mode,
        }
    }

    pub fn set_meanflow_mode(&mut self, on: bool) {
        match self {
            ModelConfig::UNet(c) => c.meanflow_mode = on,
            ModelConfig::Mlp(c) => c.meanflow_mode = on,
        }
    }

    fn time_embed_dim(&self) -> usize {
        match self {
            ModelConfig::UNet(c) => c.time_embed_dim,
            ModelConfig::Mlp(c) => c.time_embed_dim,
        }
    }

    fn time_scale(&self) -> f64 {
        match self {
            ModelConfig::UNet(c) => c.time_scale,
            ModelConfig::Mlp(c) => c.time_scale,
        }
    }

    /// Shape of one example, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::UNet(c) => vec![c.image_channels, c.image_size, c.image_size],
            ModelConfig::Mlp(c) => vec![c.data_dim],
        }
    }

    /// Structural checks that do not need a parameter count.
    pub fn validate(&self) -> Result<()> {
        let te = self.time_embed_dim();
        if te == 0 || te % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {te}"
            )));
        }
        if !(self.time_scale() > 0.0) {
            return Err(Error::Config("time_scale must be positive".into()));
        }
        match self {
            ModelConfig::UNet(c) => {
                if c.channel_multipliers.is_empty() || c.blocks_per_resolution == 0 {
                    return Err(Error::Config(
                        "need at least one resolution and one block per resolution".into(),
                    ));
                }
                if c.image_channels == 0 || c.num_classes == 0 {
                    return Err(Error::Config("image_channels and num_classes must be positive".into()));
                }
                let levels = c.channel_multipliers.len() as u32;
                let factor = 1usize << (levels - 1);
                if c.image_size == 0 || c.image_size % factor != 0 {
                    return Err(Error::Config(format!(
                        "image_size {} not divisible by 2^{}",
                        c.image_size,
                        levels - 1
                    )));
                }
                for &m in &c.channel_multipliers {
                    let ch = c.base_channels * m;
                    if ch == 0 || ch % GROUPS != 0 {
                        return Err(Error::Config(format!(
                            "channel count {ch} must be a positive multiple of {GROUPS}"
                        )));
                    }
                }
            }
            ModelConfig::Mlp(c) => {
                if c.data_dim == 0 || c.hidden == 0 || c.depth == 0 || c.num_classes == 0 {
                    return Err(Error::Config("MLP dimensions must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Named, ordered tensors of one network plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

pub type UNetParameters = Parameters;

impl Parameters {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Reassembles parameters from stored tensors, checking names and shapes
    /// against a fresh layout for `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = layout(&config)?;
        if layout.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        for (spec, (name, t)) in layout.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        Ok(Self::assemble(config, names, tensors))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            index,
        }
    }

    /// Convenience single-example-time forward: every batch element uses
    /// the same `t`, label and optional `r`.
    pub fn forward(&self, x: &Tensor, t: f64, y: Label, r: Option<f64>) -> Result<Tensor> {
        let batch = x.shape().first().copied().unwrap_or(0);
        self.forward_batch(
            x,
            &vec![t; batch],
            &vec![y; batch],
            r.map(|r| vec![r; batch]).as_deref(),
        )
    }

    pub fn forward_batch(&self, x: &Tensor, t: &[f64], labels: &[Label], r: Option<&[f64]>) -> Result<Tensor> {
        let input = NetInput {
            x: x.clone(),
            t: Tensor::from_vec(t.to_vec()),
            r: r.map(|r| Tensor::from_vec(r.to_vec())),
            labels: labels.to_vec(),
        };
        self.forward_with(&mut Eval, self.tensors(), &input)
    }
}

pub fn param_count(params: &Parameters) -> usize {
    params.tensors.iter().map(Tensor::len).sum()
}

/// Inputs to one network evaluation, already lifted into a backend.
#[derive(Clone, Debug)]
pub struct NetInput<V> {
    /// `[B, ...sample_shape]`
    pub x: V,
    /// `[B]`
    pub t: V,
    /// `[B]`, present exactly in MeanFlow mode.
    pub r: Option<V>,
    pub labels: Vec<Label>,
}

/// Anything that maps `(x, t, r, y)` to a tensor shaped like `x`.
///
/// Implemented by [`Parameters`]; tests implement it for closed-form
/// oracles.
pub trait Network {
    fn params(&self) -> &[Tensor];

    fn forward_with<B: Backend>(&self, b: &mut B, params: &[B::Value], input: &NetInput<B::Value>) -> Result<B::Value>;

    /// Evaluates on concrete tensors without recording anything.
    fn eval(&self, x: &Tensor, t: &[f64], r: Option<&[f64]>, labels: &[Label]) -> Result<Tensor> {
        let input = NetInput {
            x: x.clone(),
            t: Tensor::from_vec(t.to_vec()),
            r: r.map(|r| Tensor::from_vec(r.to_vec())),
            labels: labels.to_vec(),
        };
        self.forward_with(&mut Eval, self.params(), &input)
    }
}

impl Network for Parameters {
    fn params(&self) -> &[Tensor] {
        &self.tensors
    }

    fn forward_with<B: Backend>(&self, b: &mut B, params: &[B::Value], input: &NetInput<B::Value>) -> Result<B::Value> {
        self.check_input(b, input)?;
        let p = ParamView {
            index: &self.index,
            values: params,
        };
        let cond = conditioning(b, &self.config, &p, input)?;
        match &self.config {
            ModelConfig::UNet(c) => unet_forward(b, c, &p, &input.x, &cond),
            ModelConfig::Mlp(c) => mlp_forward(b, c, &p, &input.x, &cond),
        }
    }
}

impl Parameters {
    fn check_input<B: Backend>(&self, b: &B, input: &NetInput<B::Value>) -> Result<()> {
        let x = b.primal(&input.x);
        let t = b.primal(&input.t);
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut want = vec![batch];
        want.extend(self.config.sample_shape());
        if x.shape() != want.as_slice() {
            return Err(Error::Shape {
                op: "model",
                detail: format!("input {:?}, expected {want:?}", x.shape()),
            });
        }
        if t.shape() != [batch] || input.labels.len() != batch {
            return Err(Error::Shape {
                op: "model",
                detail: format!("batch {batch} but t {:?} and {} labels", t.shape(), input.labels.len()),
            });
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("time must lie in [0, 1]".into()));
        }
        match (&input.r, self.config.meanflow_mode()) {
            (Some(r), true) => {
                let r = b.primal(r);
                if r.shape() != [batch] {
                    return Err(Error::Shape {
                        op: "model",
                        detail: format!("r {:?} for batch {batch}", r.shape()),
                    });
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::InvalidArgument(
                    "interval start r supplied to a model without MeanFlow mode".into(),
                ))
            }
            (None, true) => {
                return Err(Error::InvalidArgument(
                    "MeanFlow-mode model needs the interval start r".into(),
                ))
            }
        }
        let classes = self.config.num_classes();
        if let Some(bad) = input.labels.iter().flatten().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of a scalar: `dim/2` sines then `dim/2` cosines.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Tensor> {
    let out = Eval.sinusoidal(&Tensor::from_vec(vec![t]), dim)?;
    out.reshape(&[dim])
}

// ---------------------------------------------------------------- layout

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform with bound `sqrt(3 / fan_in) * scale`.
    FanIn(usize, f64),
    Zeros,
    Ones,
    Normal,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, scale: f64) {
        self.push(format!("{name}.w"), vec![dout, din], Init::FanIn(din, scale));
        self.push(format!("{name}.b"), vec![dout], Init::Zeros);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, scale: f64) {
        let fan = cin * k * k;
        self.push(format!("{name}.w"), vec![cout, cin, k, k], Init::FanIn(fan, scale));
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, embed: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3, 1.0);
        self.linear(&format!("{name}.temb"), embed, cout, 1.0);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, 1.0);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0);
        }
    }

    fn time_mlp(&mut self, name: &str, embed: usize) {
        self.linear(&format!("{name}.lin1"), embed, embed, 1.0);
        self.linear(&format!("{name}.lin2"), embed, embed, 1.0);
    }
}

fn layout(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut lb = LayoutBuilder::default();
    let embed = config.time_embed_dim();
    lb.time_mlp("time", embed);
    if config.meanflow_mode() {
        lb.time_mlp("interval", embed);
    }
    lb.push(
        "class_embed".into(),
        vec![config.num_classes() + 1, embed],
        Init::Normal,
    );
    match config {
        ModelConfig::UNet(c) => {
            let chans: Vec<usize> = c.channel_multipliers.iter().map(|m| m * c.base_channels).collect();
            let levels = chans.len();
            lb.conv("stem", c.image_channels, c.base_channels, 3, 1.0);
            let mut ch = c.base_channels;
            for (i, &out) in chans.iter().enumerate() {
                for j in 0..c.blocks_per_resolution {
                    lb.resblock(&format!("down{i}.block{j}"), ch, out, embed);
                    ch = out;
                }
                if i + 1 < levels {
                    lb.conv(&format!("down{i}.downsample"), ch, ch, 3, 1.0);
                }
            }
            lb.resblock("mid", ch, ch, embed);
            for i in (0..levels).rev() {
                if i + 1 < levels {
                    lb.conv(&format!("up{i}.upsample"), ch, ch, 3, 1.0);
                }
                lb.conv(&format!("up{i}.merge"), ch + chans[i], chans[i], 1, 1.0);
                ch = chans[i];
                for j in 0..c.blocks_per_resolution {
                    lb.resblock(&format!("up{i}.block{j}"), ch, ch, embed);
                }
            }
            lb.norm("out.norm", ch);
            lb.conv("out.conv", ch, c.image_channels, 3, OUTPUT_INIT_SCALE);
        }
        ModelConfig::Mlp(c) => {
            let mut din = c.data_dim;
            for l in 0..c.depth {
                lb.linear(&format!("layer{l}.lin"), din, c.hidden, 1.0);
                lb.linear(&format!("layer{l}.cond"), embed, c.hidden, 1.0);
                din = c.hidden;
            }
            lb.linear("out", c.hidden, c.data_dim, OUTPUT_INIT_SCALE);
        }
    }
    Ok(lb.specs)
}

/// Number of scalars `build` would allocate for `config`.
pub fn layout_param_count(config: &ModelConfig) -> Result<usize> {
    Ok(layout(config)?.iter().map(|s| s.shape.iter().product::<usize>()).sum())
}

/// Initializes parameters for `config` deterministically from `seed`.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    let specs = layout(config)?;
    let count: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    if count >= PARAM_BUDGET {
        return Err(Error::Config(format!(
            "model has {count} parameters, budget is {PARAM_BUDGET}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let t = match spec.init {
            Init::FanIn(fan, scale) => {
                let bound = (3.0 / fan as f64).sqrt() * scale;
                Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
            }
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Normal => Tensor::randn(&spec.shape, &mut rng),
        };
        names.push(spec.name);
        tensors.push(t);
    }
    Ok(Parameters::assemble(config.clone(), names, tensors))
}

// ---------------------------------------------------------------- forward

struct ParamView<'a, V> {
    index: &'a HashMap<String, usize>,
    values: &'a [V],
}

impl<V> ParamView<'_, V> {
    fn get(&self, name: &str) -> Result<&V> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }
}

fn linear<B: Backend>(b: &mut B, p: &ParamView<B::Value>, name: &str, x: &B::Value) -> Result<B::Value> {
    let w = p.get(&format!("{name}.w"))?;
    let bias = p.get(&format!("{name}.b"))?;
    b.linear(x, w, bias)
}

fn conv<B: Backend>(b: &mut B, p: &ParamView<B::Value>, name: &str, x: &B::Value, stride: usize) -> Result<B::Value> {
    let w = p.get(&format!("{name}.w"))?;
    let k = b.primal(w).shape()[2];
    let bias = p.get(&format!("{name}.b"))?;
    b.conv2d(x, w, Some(bias), stride, k / 2)
}

fn norm_act<B: Backend>(b: &mut B, p: &ParamView<B::Value>, name: &str, x: &B::Value) -> Result<B::Value> {
    let g = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    let h = b.group_norm(x, g, beta, GROUPS, NORM_EPS)?;
    b.silu(&h)
}

fn time_features<B: Backend>(
    b: &mut B,
    p: &ParamView<B::Value>,
    name: &str,
    t: &B::Value,
    dim: usize,
    scale: f64,
) -> Result<B::Value> {
    let ts = b.scale(t, scale)?;
    let e = b.sinusoidal(&ts, dim)?;
    let h = linear(b, p, &format!("{name}.lin1"), &e)?;
    let h = b.silu(&h)?;
    linear(b, p, &format!("{name}.lin2"), &h)
}

/// `silu(time_mlp(t) [+ interval_mlp(t - r)] + class_embed[y])`
fn conditioning<B: Backend>(
    b: &mut B,
    config: &ModelConfig,
    p: &ParamView<B::Value>,
    input: &NetInput<B::Value>,
) -> Result<B::Value> {
    let dim = config.time_embed_dim();
    let scale = config.time_scale();
    let mut cond = time_features(b, p, "time", &input.t, dim, scale)?;
    if let Some(r) = &input.r {
        let gap = b.sub(&input.t, r)?;
        let e = time_features(b, p, "interval", &gap, dim, scale)?;
        cond = b.add(&cond, &e)?;
    }
    let null = config.num_classes();
    let ids: Vec<usize> = input.labels.iter().map(|y| y.unwrap_or(null)).collect();
    let table = p.get("class_embed")?;
    let class = b.embedding(table, &ids)?;
    let cond = b.add(&cond, &class)?;
    b.silu(&cond)
}

fn resblock<B: Backend>(
    b: &mut B,
    p: &ParamView<B::Value>,
    name: &str,
    x: &B::Value,
    cond: &B::Value,
) -> Result<B::Value> {
    let h = norm_act(b, p, &format!("{name}.norm1"), x)?;
    let h = conv(b, p, &format!("{name}.conv1"), &h, 1)?;
    let proj = linear(b, p, &format!("{name}.temb"), cond)?;
    let h = b.add_channel_bias(&h, &proj)?;
    let h = norm_act(b, p, &format!("{name}.norm2"), &h)?;
    let h = conv(b, p, &format!("{name}.conv2"), &h, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if p.index.contains_key(&format!("{skip_name}.w")) {
        conv(b, p, &skip_name, x, 1)?
    } else {
        x.clone()
    };
    b.add(&h, &skip)
}

fn unet_forward<B: Backend>(
    b: &mut B,
    c: &UNetConfig,
    p: &ParamView<B::Value>,
    x: &B::Value,
    cond: &B::Value,
) -> Result<B::Value> {
    let levels = c.channel_multipliers.len();
    let mut h = conv(b, p, "stem", x, 1)?;
    let mut skips = Vec::with_capacity(levels);
    for i in 0..levels {
        for j in 0..c.blocks_per_resolution {
            h = resblock(b, p, &format!("down{i}.block{j}"), &h, cond)?;
        }
        skips.push(h.clone());
        if i + 1 < levels {
            h = conv(b, p, &format!("down{i}.downsample"), &h, 2)?;
        }
    }
    h = resblock(b, p, "mid", &h, cond)?;
    for i in (0..levels).rev() {
        if i + 1 < levels {
            let up = b.upsample_nearest2x(&h)?;
            h = conv(b, p, &format!("up{i}.upsample"), &up, 1)?;
        }
        let cat = b.concat_channels(&h, &skips[i])?;
        h = conv(b, p, &format!("up{i}.merge"), &cat, 1)?;
        for j in 0..c.blocks_per_resolution {
            h = resblock(b, p, &format!("up{i}.block{j}"), &h, cond)?;
        }
    }
    let h = norm_act(b, p, "out.norm", &h)?;
    conv(b, p, "out.conv", &h, 1)
}

fn mlp_forward<B: Backend>(
    b: &mut B,
    c: &MlpConfig,
    p: &ParamView<B::Value>,
    x: &B::Value,
    cond: &B::Value,
) -> Result<B::Value> {
    let mut h = x.clone();
    for l in 0..c.depth {
        let a = linear(b, p, &format!("layer{l}.lin"), &h)?;
        let e = linear(b, p, &format!("layer{l}.cond"), cond)?;
        let s = b.add(&a, &e)?;
        h = b.silu(&s)?;
    }
    linear(b, p, "out", &h)
}

/// Frequencies used by [`sinusoidal_embed`] for an embedding of `dim`.
pub fn embed_frequencies(dim: usize) -> Vec<f64> {
    kernels::sinusoidal_frequencies(dim / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use rand::SeedableRng;

    fn tiny_unet() -> ModelConfig {
        ModelConfig::UNet(UNetConfig {
            image_channels: 1,
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            time_embed_dim: 16,
            num_classes: 4,
            meanflow_mode: false,
            time_scale: 1000.0,
        })
    }

    #[test]
    fn default_config_fits_budget() {
        let p = build(&ModelConfig::UNet(UNetConfig::default()), 0).unwrap();
        let n = param_count(&p);
        assert!(n < PARAM_BUDGET, "{n}");
        assert_eq!(n, layout_param_count(p.config()).unwrap());
    }

    #[test]
    fn wide_config_exceeds_budget() {
        let cfg = ModelConfig::UNet(UNetConfig {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            ..UNetConfig::default()
        });
        let n = layout_param_count(&cfg).unwrap();
        assert!(n >= PARAM_BUDGET);
        match build(&cfg, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains(&n.to_string()), "{msg}"),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_unet();
        assert_eq!(build(&cfg, 7).unwrap(), build(&cfg, 7).unwrap());
        assert_ne!(build(&cfg, 7).unwrap(), build(&cfg, 8).unwrap());
    }

    #[test]
    fn param_count_examples() {
        let empty = Parameters::assemble(tiny_unet(), vec![], vec![]);
        assert_eq!(param_count(&empty), 0);
        let conv = Parameters::assemble(
            tiny_unet(),
            vec!["c.w".into(), "c.b".into()],
            vec![Tensor::zeros(&[32, 3, 3, 3]), Tensor::zeros(&[32])],
        );
        assert_eq!(param_count(&conv), 896);
    }

    #[test]
    fn forward_preserves_shape_and_is_finite() {
        let p = build(&tiny_unet(), 1).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        for (t, y) in [(0.0, Some(0)), (0.3, None), (1.0, Some(3))] {
            let out = p.forward(&x, t, y, None).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.all_finite());
        }
    }

    #[test]
    fn null_label_differs_from_class_zero() {
        let p = build(&tiny_unet(), 2).unwrap();
        let x = Tensor::randn(&[1, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let a = p.forward(&x, 0.4, None, None).unwrap();
        let b = p.forward(&x, 0.4, Some(0), None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn meanflow_mode_requires_r_and_only_then() {
        let plain = build(&tiny_unet(), 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(
            plain.forward(&x, 0.5, None, Some(0.5)),
            Err(Error::InvalidArgument(_))
        ));
        let mut cfg = tiny_unet();
        cfg.set_meanflow_mode(true);
        let mf = build(&cfg, 3).unwrap();
        assert!(matches!(
            mf.forward(&x, 0.5, None, None),
            Err(Error::InvalidArgument(_))
        ));
        let out = mf.forward(&x, 0.5, Some(1), Some(0.5)).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.all_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = build(&tiny_unet(), 4).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(p.forward(&x, 1.5, None, None).is_err());
        assert!(p.forward(&x, 0.5, Some(4), None).is_err());
        assert!(p.forward(&Tensor::zeros(&[1, 3, 8, 8]), 0.5, None, None).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = UNetConfig { image_size: 30, ..UNetConfig::default() };
        assert!(build(&ModelConfig::UNet(c), 0).is_err());
        let c = UNetConfig { base_channels: 12, ..UNetConfig::default() };
        assert!(build(&ModelConfig::UNet(c), 0).is_err());
        let c = UNetConfig { time_embed_dim: 7, ..UNetConfig::default() };
        assert!(build(&ModelConfig::UNet(c), 0).is_err());
    }

    #[test]
    fn sinusoidal_embed_examples() {
        let e = sinusoidal_embed(0.0, 16).unwrap();
        assert!(e.data()[..8].iter().all(|&v| v == 0.0));
        assert!(e.data()[8..].iter().all(|&v| v == 1.0));
        let e = sinusoidal_embed(123.4, 16).unwrap();
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_embed(0.0, 7), Err(Error::InvalidArgument(_))));

        // shifting by the period of the highest frequency leaves that slot
        // alone but moves the slow ones
        let freqs = embed_frequencies(16);
        assert_eq!(freqs[0], 1.0);
        let t = 0.3;
        let a = sinusoidal_embed(t, 16).unwrap();
        let b = sinusoidal_embed(t + 2.0 * std::f64::consts::PI / freqs[0], 16).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-12);
        assert!((a.data()[7] - b.data()[7]).abs() > 1e-6);
        assert!((a.data()[15] - b.data()[15]).abs() > 1e-9);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for meanflow in [false, true] {
            let mut cfg = tiny_unet();
            cfg.set_meanflow_mode(meanflow);
            let p = build(&cfg, 5).unwrap();
            assert_no_dead_parameters(&p, &[2, 1, 8, 8], meanflow);
        }
        let mut mlp = ModelConfig::Mlp(MlpConfig::default());
        assert_no_dead_parameters(&build(&mlp, 5).unwrap(), &[4, 2], false);
        mlp.set_meanflow_mode(true);
        assert_no_dead_parameters(&build(&mlp, 5).unwrap(), &[4, 2], true);
    }

    fn assert_no_dead_parameters(p: &Parameters, shape: &[usize], meanflow: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = shape[0];
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.constant(Tensor::randn(shape, &mut rng));
        let t = tape.constant(Tensor::uniform(&[batch], 0.2, 0.9, &mut rng));
        let r = meanflow.then(|| tape.constant(Tensor::uniform(&[batch], 0.0, 0.2, &mut rng)));
        let labels: Vec<Label> = (0..batch).map(|i| if i == 0 { None } else { Some(i % 2) }).collect();
        let input = NetInput { x, t, r, labels };
        let out = p.forward_with(&mut tape, &vars, &input).unwrap();
        let target = tape.constant(Tensor::randn(tape.value(out).shape(), &mut rng));
        let loss = tape.mse(&out, &target).unwrap();
        let grads = tape.grad(loss, &vars).unwrap();
        for (name, g) in p.names().iter().zip(&grads) {
            assert!(g.max_abs() > 0.0, "dead parameter {name}");
        }
    }
}
