//! Inpainting masks and mask-guided sampling with the replace strategy.
//!
//! Masks hold 1 for known pixels and 0 for pixels to fill. They are
//! single-channel `[H, W]` and broadcast over batch and channels.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::Network;
use crate::processes::{check_binary_mask, replace_known};
use crate::samplers::{cfg_velocity, initial_noise, Method, SampleResult, SamplerConfig};

/// Image size the bounding-box and stroke geometry is specified for.
pub const REFERENCE_SIZE: usize = 32;
pub const BBOX_MIN: usize = 8;
pub const BBOX_MAX: usize = 20;
pub const STROKES: (usize, usize) = (3, 8);
pub const STROKE_VERTICES: (usize, usize) = (4, 8);
pub const STROKE_STEP: (f64, f64) = (4.0, 10.0);
pub const BRUSH_WIDTH: (usize, usize) = (1, 5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskKind {
    Center,
    RandomBbox,
    Irregular,
    Half,
    /// Loaded from a file rather than generated.
    Custom,
}

impl MaskKind {
    /// The four generated kinds.
    pub const GENERATED: [MaskKind; 4] = [
        MaskKind::Center,
        MaskKind::RandomBbox,
        MaskKind::Irregular,
        MaskKind::Half,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Center => "center",
            MaskKind::RandomBbox => "random_bbox",
            MaskKind::Irregular => "irregular",
            MaskKind::Half => "half",
            MaskKind::Custom => "custom",
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(MaskKind::Center),
            "random_bbox" | "bbox" => Ok(MaskKind::RandomBbox),
            "irregular" => Ok(MaskKind::Irregular),
            "half" => Ok(MaskKind::Half),
            "custom" => Ok(MaskKind::Custom),
            other => Err(Error::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// What a generator drew, kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Center {
        hole: usize,
    },
    Bbox {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Strokes {
        count: usize,
    },
    Half(Side),
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    values: Tensor,
    kind: MaskKind,
    geometry: Geometry,
    coverage: f64,
}

impl Mask {
    fn from_grid(values: Tensor, kind: MaskKind, geometry: Geometry) -> Self {
        let coverage = values.mean();
        Self {
            values,
            kind,
            geometry,
            coverage,
        }
    }

    /// Wraps a `[H, W]` binary tensor.
    pub fn custom(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return shape_err("mask", format!("expected [H, W], got {:?}", values.shape()));
        }
        check_binary_mask(&values, &values)?;
        Ok(Self::from_grid(values, MaskKind::Custom, Geometry::Custom))
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Fraction of known pixels.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn hole_pixels(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// Repeats the mask over `[B, C, H, W]`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != 4 || shape[2] != self.height() || shape[3] != self.width() {
            return shape_err(
                "mask",
                format!("{:?} mask for images of shape {shape:?}", self.values.shape()),
            );
        }
        let plane = self.values.data();
        let data = plane
            .iter()
            .copied()
            .cycle()
            .take(plane.len() * shape[0] * shape[1])
            .collect();
        Tensor::new(shape, data)
    }

    /// 8-bit grayscale rows: 0 for holes, 255 for known pixels.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .data()
            .iter()
            .map(|&v| if v == 1.0 { 255 } else { 0 })
            .collect()
    }

    /// Inverse of [`Mask::to_gray`]; any value other than 0 or 255 is
    /// rejected.
    pub fn from_gray(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Format(format!(
                "{} mask pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        let data = pixels
            .iter()
            .map(|&p| match p {
                0 => Ok(0.0),
                255 => Ok(1.0),
                other => Err(Error::Format(format!("mask pixel value {other}; expected 0 or 255"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::custom(Tensor::new(&[height, width], data)?)
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 4 {
        return Err(Error::InvalidArgument(format!("mask size {size} below 4")));
    }
    Ok(())
}

fn grid_with_hole(size: usize, hole: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = (0..size * size)
        .map(|k| if hole(k / size, k % size) { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_parts(vec![size, size], data)
}

/// Centered square hole of side `size / 2`.
pub fn gen_center(size: usize) -> Result<Mask> {
    check_size(size)?;
    let hole = size / 2;
    let lo = (size - hole) / 2;
    let inside = |i: usize| (lo..lo + hole).contains(&i);
    let values = grid_with_hole(size, |r, c| inside(r) && inside(c));
    Ok(Mask::from_grid(values, MaskKind::Center, Geometry::Center { hole }))
}

/// Side-length range of the random rectangle. The 8–20 range applies from
/// size 20 up; smaller images scale it by `size / 32`.
pub fn bbox_range(size: usize) -> (usize, usize) {
    if size >= BBOX_MAX {
        return (BBOX_MIN, BBOX_MAX);
    }
    let scaled = |v: usize| ((v * size) as f64 / REFERENCE_SIZE as f64).round() as usize;
    let lo = scaled(BBOX_MIN).max(1);
    (lo, scaled(BBOX_MAX).max(lo).min(size))
}

/// One axis-aligned rectangle, fully inside the image.
pub fn gen_random_bbox<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Mask> {
    check_size(size)?;
    let (lo, hi) = bbox_range(size);
    let height = rng.random_range(lo..=hi);
    let width = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=size - height);
    let left = rng.random_range(0..=size - width);
    let values = grid_with_hole(size, |r, c| {
        (top..top + height).contains(&r) && (left..left + width).contains(&c)
    });
    let geometry = Geometry::Bbox {
        top,
        left,
        height,
        width,
    };
    Ok(Mask::from_grid(values, MaskKind::RandomBbox, geometry))
}

fn segment_distance((ax, ay): (f64, f64), (bx, by): (f64, f64), (px, py): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + s * dx - px, ay + s * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// 3–8 random-walk brush strokes. Step length and brush width scale with
/// `size / 32` on images smaller than 32 pixels.
pub fn gen_irregular<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Mask> {
    check_size(size)?;
    let scale = (size as f64 / REFERENCE_SIZE as f64).min(1.0);
    let limit = (size - 1) as f64;
    let mut hole = vec![false; size * size];
    let count = rng.random_range(STROKES.0..=STROKES.1);
    for _ in 0..count {
        let vertices = rng.random_range(STROKE_VERTICES.0..=STROKE_VERTICES.1);
        let width = rng.random_range(BRUSH_WIDTH.0..=BRUSH_WIDTH.1) as f64;
        let radius = (width * scale).max(1.0) / 2.0;
        let mut p = (rng.random_range(0.0..=limit), rng.random_range(0.0..=limit));
        let mut angle = rng.random_range(0.0..2.0 * PI);
        let mut path = vec![p];
        for _ in 1..vertices {
            angle += rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let step = rng.random_range(STROKE_STEP.0..=STROKE_STEP.1) * scale;
            p = (
                (p.0 + step * angle.cos()).clamp(0.0, limit),
                (p.1 + step * angle.sin()).clamp(0.0, limit),
            );
            path.push(p);
        }
        for seg in path.windows(2) {
            for (k, cell) in hole.iter_mut().enumerate() {
                let pixel = ((k % size) as f64, (k / size) as f64);
                if segment_distance(seg[0], seg[1], pixel) <= radius {
                    *cell = true;
                }
            }
        }
    }
    let values = grid_with_hole(size, |r, c| hole[r * size + c]);
    Ok(Mask::from_grid(
        values,
        MaskKind::Irregular,
        Geometry::Strokes { count },
    ))
}

/// Removes the left, right, top or bottom half, chosen uniformly.
pub fn gen_half<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Mask> {
    check_size(size)?;
    if size % 2 != 0 {
        return Err(Error::InvalidArgument(format!("half mask on odd size {size}")));
    }
    let side = [Side::Left, Side::Right, Side::Top, Side::Bottom][rng.random_range(0..4)];
    let h = size / 2;
    let values = grid_with_hole(size, |r, c| match side {
        Side::Left => c < h,
        Side::Right => c >= h,
        Side::Top => r < h,
        Side::Bottom => r >= h,
    });
    Ok(Mask::from_grid(values, MaskKind::Half, Geometry::Half(side)))
}

/// Draws a mask of the given kind.
pub fn gen_mask<R: Rng + ?Sized>(kind: MaskKind, size: usize, rng: &mut R) -> Result<Mask> {
    match kind {
        MaskKind::Center => gen_center(size),
        MaskKind::RandomBbox => gen_random_bbox(size, rng),
        MaskKind::Irregular => gen_irregular(size, rng),
        MaskKind::Half => gen_half(size, rng),
        MaskKind::Custom => Err(Error::InvalidArgument("custom masks are loaded, not generated".into())),
    }
}

/// Replace-strategy inpainting with an explicit starting noise and a full
/// `[B, C, H, W]` mask: start from `m·x + (1−m)·ε`, then after every guided
/// Euler step write the known pixels back.
pub fn inpaint_from<N: Network>(
    net: &N,
    x: &Tensor,
    mask: &Tensor,
    config: &SamplerConfig,
    noise: &Tensor,
) -> Result<SampleResult> {
    if config.method != Method::CfmEuler {
        return Err(Error::Config(format!(
            "inpainting integrates the flow; got method {}",
            config.method
        )));
    }
    config.validate()?;
    check_binary_mask(mask, x)?;
    if noise.shape() != x.shape() {
        return shape_err(
            "inpaint",
            format!("noise {:?} for images {:?}", noise.shape(), x.shape()),
        );
    }
    let batch = x.shape()[0];
    let labels = vec![config.class; batch];
    let n = config.steps;
    let h = 1.0 / n as f64;
    let mut z = replace_known(mask, x, noise)?;
    let mut evals = 0;
    for i in 0..n {
        let t = vec![i as f64 * h; batch];
        let (v, k) = cfg_velocity(net, &z, &t, None, &labels, config.cfg_scale)?;
        evals += k;
        z = z.zip_map(&v, |z, v| z + h * v)?;
        z = replace_known(mask, x, &z)?;
    }
    Ok(SampleResult {
        images: z,
        nfe_steps: n,
        model_evals: evals,
    })
}

/// Inpaints a batch `x` under one mask, drawing the starting noise from
/// `config.seed` exactly as unconstrained flow sampling does.
pub fn inpaint_sample<N: Network>(net: &N, x: &Tensor, mask: &Mask, config: &SamplerConfig) -> Result<SampleResult> {
    let full = mask.broadcast(x.shape())?;
    let noise = initial_noise(config.seed, x.shape()[0], &x.shape()[1..]);
    inpaint_from(net, x, &full, config, &noise)
}
