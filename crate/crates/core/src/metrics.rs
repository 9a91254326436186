//! Masked reconstruction metrics (NMSE, PSNR, SSIM), distribution distances
//! between feature sets (FID, KID, energy distance) and report tables.
//!
//! Image metrics expect values in [0, 1]. Masks use 1 for known pixels; the
//! masked metrics only look at the hole (`m == 0`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// PSNR reported for (near-)perfect reconstructions.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MIN_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Ridge added to covariances estimated from fewer samples than features.
pub const COV_RIDGE: f64 = 1e-6;
pub const KID_SUBSETS: usize = 10;
pub const KID_MAX_SUBSET: usize = 1000;

// ---------------------------------------------------------------- masked

fn hole_pairs<'a>(x: &'a Tensor, y: &'a Tensor, m: &'a Tensor) -> Result<Vec<(f64, f64)>> {
    if x.shape() != y.shape() || x.shape() != m.shape() {
        return shape_err(
            "masked metric",
            format!("{:?}, {:?} and mask {:?}", x.shape(), y.shape(), m.shape()),
        );
    }
    let pairs: Vec<(f64, f64)> = x
        .data()
        .iter()
        .zip(y.data())
        .zip(m.data())
        .filter(|(_, &m)| m == 0.0)
        .map(|((&a, &b), _)| (a, b))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("mask has no region to evaluate".into()));
    }
    Ok(pairs)
}

/// `Σ_M (x − x̂)² / Σ_M x²`
pub fn nmse_masked(x: &Tensor, xhat: &Tensor, m: &Tensor) -> Result<f64> {
    let pairs = hole_pairs(x, xhat, m)?;
    let num: f64 = pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = pairs.iter().map(|(a, _)| a * a).sum();
    if den == 0.0 {
        return Err(Error::InvalidArgument("NMSE reference is zero on the hole".into()));
    }
    Ok(num / den)
}

/// `10·log₁₀(1 / MSE_M)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_masked(x: &Tensor, xhat: &Tensor, m: &Tensor) -> Result<f64> {
    let pairs = hole_pairs(x, xhat, m)?;
    let mse = pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pairs.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MIN_MSE {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Windowed SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over the
/// fully-contained windows whose center is a hole pixel, per channel plane,
/// then across planes. Planes are the last two axes.
///
/// Window statistics are weighted over hole pixels only (the Gaussian
/// weights are renormalized), so known pixels never influence the score.
pub fn ssim(x: &Tensor, xhat: &Tensor, m: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() || x.shape() != m.shape() || x.ndim() < 2 {
        return shape_err(
            "ssim",
            format!("{:?}, {:?}, mask {:?}", x.shape(), xhat.shape(), m.shape()),
        );
    }
    let (h, w) = (x.shape()[x.ndim() - 2], x.shape()[x.ndim() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let half = SSIM_WINDOW / 2;
    let plane = h * w;
    let mut per_plane = Vec::new();
    for ((a, b), mask) in x
        .data()
        .chunks(plane)
        .zip(xhat.data().chunks(plane))
        .zip(m.data().chunks(plane))
    {
        let (mut total, mut windows) = (0.0, 0usize);
        for ci in half..h - half {
            for cj in half..w - half {
                if mask[ci * w + cj] != 0.0 {
                    continue;
                }
                let (mut norm, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, gi) in g.iter().enumerate() {
                    for (dj, gj) in g.iter().enumerate() {
                        let k = (ci + di - half) * w + cj + dj - half;
                        if mask[k] != 0.0 {
                            continue;
                        }
                        let wt = gi * gj;
                        let (va, vb) = (a[k], b[k]);
                        norm += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / norm, mb / norm);
                let (saa, sbb, sab) = (saa / norm, sbb / norm, sab / norm);
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                windows += 1;
            }
        }
        if windows > 0 {
            per_plane.push(total / windows as f64);
        }
    }
    if per_plane.is_empty() {
        return Err(Error::InvalidArgument("no SSIM window is centered in the hole".into()));
    }
    Ok(per_plane.iter().sum::<f64>() / per_plane.len() as f64)
}

// ---------------------------------------------------------------- features

/// Maps a batch `[N, ...]` to features `[N, D]`.
pub trait FeatureExtractor {
    fn extract(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Flattens each example unchanged; for low-dimensional data.
#[derive(Clone, Copy, Debug, Default)]
pub struct Flatten;

impl FeatureExtractor for Flatten {
    fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let n = *batch.shape().first().unwrap_or(&0);
        if n == 0 {
            return shape_err("features", "empty batch");
        }
        batch.reshape(&[n, batch.len() / n])
    }
}

/// Average-pools images `[N, C, H, W]` to at most 8×8, flattens, and
/// applies a fixed seeded Gaussian projection to `dim` features.
#[derive(Clone, Debug)]
pub struct PixelStats {
    dim: usize,
    seed: u64,
}

pub const PIXEL_STATS_DIM: usize = 64;
const PIXEL_STATS_GRID: usize = 8;

impl PixelStats {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn pool(batch: &Tensor) -> Result<(Vec<f64>, usize)> {
        let &[n, c, h, w] = batch.shape() else {
            return shape_err("pixel stats", format!("expected [N, C, H, W], got {:?}", batch.shape()));
        };
        let f = h.div_ceil(PIXEL_STATS_GRID).max(w.div_ceil(PIXEL_STATS_GRID)).max(1);
        let (ph, pw) = (h / f, w / f);
        let mut out = Vec::with_capacity(n * c * ph * pw);
        for img in batch.data().chunks(c * h * w) {
            for ch in img.chunks(h * w) {
                for i in 0..ph {
                    for j in 0..pw {
                        let mut s = 0.0;
                        for di in 0..f {
                            for dj in 0..f {
                                s += ch[(i * f + di) * w + j * f + dj];
                            }
                        }
                        out.push(s / (f * f) as f64);
                    }
                }
            }
        }
        Ok((out, c * ph * pw))
    }
}

impl Default for PixelStats {
    fn default() -> Self {
        Self::new(PIXEL_STATS_DIM, 0)
    }
}

impl FeatureExtractor for PixelStats {
    fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let (pooled, k) = Self::pool(batch)?;
        let n = batch.shape()[0];
        let proj =
            Tensor::randn(&[self.dim, k], &mut ChaCha8Rng::seed_from_u64(self.seed)).scale(1.0 / (k as f64).sqrt());
        let mut out = Vec::with_capacity(n * self.dim);
        for row in pooled.chunks(k) {
            for p in proj.data().chunks(k) {
                out.push(p.iter().zip(row).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(&[n, self.dim], out)
    }
}

fn rows(features: &Tensor) -> Result<(usize, usize)> {
    match *features.shape() {
        [n, d] if n > 0 && d > 0 => Ok((n, d)),
        _ => shape_err("features", format!("expected [N, D], got {:?}", features.shape())),
    }
}

// ---------------------------------------------------------------- FID

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Mean and unbiased covariance of `[N, D]` features. With fewer samples
    /// than dimensions the covariance gets a small ridge and a warning is
    /// logged.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = rows(features)?;
        if n < 2 {
            return Err(Error::InvalidArgument("covariance needs at least two samples".into()));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        if n < d {
            log::warn!("{n} samples for {d} features; regularizing covariance");
            cov += DMatrix::identity(d, d) * COV_RIDGE;
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats<E: FeatureExtractor + ?Sized>(images: &Tensor, extractor: &E) -> Result<GaussianStats> {
    GaussianStats::from_features(&extractor.extract(images)?)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μA − μB‖² + tr(ΣA + ΣB − 2(ΣA ΣB)^{1/2})`, with the cross term computed
/// as `tr((√ΣA ΣB √ΣA)^{1/2})` so only symmetric eigenproblems are solved.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return shape_err("fid", format!("{} vs {} features", a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let mut inner = &ra * &b.cov * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid"));
    }
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------- KID

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two feature sets with kernel `(xᵀy/d + 1)³`.
pub fn mmd2_unbiased(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument("KID needs at least two samples per set".into()));
    }
    let within = |s: &[&[f64]]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(s[i], s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (n * m) as f64)
}

/// KID: unbiased MMD² averaged over `subsets` random subsets of size
/// `min(max_subset, n_a, n_b)`, drawn without replacement from a seeded
/// stream. Not scaled; multiply by 1000 for reporting.
fn pick_rows<'a, R: Rng + ?Sized>(rows: &[&'a [f64]], size: usize, rng: &mut R) -> Vec<&'a [f64]> {
    let mut idx = sample_indices(rng, rows.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

pub fn kid_with(fa: &Tensor, fb: &Tensor, subsets: usize, max_subset: usize, seed: u64) -> Result<f64> {
    let (na, da) = rows(fa)?;
    let (nb, db) = rows(fb)?;
    if da != db {
        return shape_err("kid", format!("{da} vs {db} features"));
    }
    if na < 2 || nb < 2 || subsets == 0 {
        return Err(Error::InvalidArgument("KID needs at least two samples per set".into()));
    }
    let size = max_subset.min(na).min(nb).max(2);
    let ra: Vec<&[f64]> = fa.data().chunks(da).collect();
    let rb: Vec<&[f64]> = fb.data().chunks(db).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..subsets {
        let sa = pick_rows(&ra, size, &mut rng);
        let sb = pick_rows(&rb, size, &mut rng);
        total += mmd2_unbiased(&sa, &sb)?;
    }
    Ok(total / subsets as f64)
}

pub fn kid(fa: &Tensor, fb: &Tensor, seed: u64) -> Result<f64> {
    kid_with(fa, fb, KID_SUBSETS, KID_MAX_SUBSET, seed)
}

// ---------------------------------------------------------------- energy

fn mean_pair_distance(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut t = 0.0;
    for x in a {
        for y in b {
            t += x.iter().zip(*y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    t / (a.len() * b.len()) as f64
}

/// V-statistic energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between two
/// `[N, D]` sample sets.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, da) = rows(a)?;
    let (_, db) = rows(b)?;
    if da != db {
        return shape_err("energy_distance", format!("{da} vs {db} dims"));
    }
    let ra: Vec<&[f64]> = a.data().chunks(da).collect();
    let rb: Vec<&[f64]> = b.data().chunks(db).collect();
    Ok(2.0 * mean_pair_distance(&ra, &rb) - mean_pair_distance(&ra, &ra) - mean_pair_distance(&rb, &rb))
}

/// Draws `n` row indices for evaluation subsets.
pub fn subsample_rows<R: Rng + ?Sized>(features: &Tensor, n: usize, rng: &mut R) -> Result<Tensor> {
    let (total, _) = rows(features)?;
    let mut idx = sample_indices(rng, total, n.min(total)).into_vec();
    idx.sort_unstable();
    features.gather_axis0(&idx)
}

// ---------------------------------------------------------------- reports

/// Masked reconstruction scores for one mask kind; `None` marks a metric
/// that could not be computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Recovery {
    pub nmse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl Recovery {
    fn fields(&self) -> [(&'static str, Option<f64>); 3] {
        [("nmse", self.nmse), ("psnr_db", self.psnr), ("ssim", self.ssim)]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MethodSummary {
    pub fid: Option<f64>,
    pub kid_x1000: Option<f64>,
    pub nfe: Option<usize>,
    pub images_per_sec: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InpaintComparison {
    pub base: Recovery,
    pub finetuned: Recovery,
}

/// `100·(new − old)/old`; absent when either side is missing or `old == 0`.
pub fn delta_percent(old: Option<f64>, new: Option<f64>) -> Option<f64> {
    match (old, new) {
        (Some(o), Some(n)) if o != 0.0 => Some(100.0 * (n - o) / o),
        _ => None,
    }
}

/// Tables of results: overall per method, FID per class, and base versus
/// fine-tuned inpainting per mask kind. Percent changes are derived on
/// output and never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub overall: BTreeMap<String, MethodSummary>,
    /// `(method, class) → fid`
    pub per_class: BTreeMap<(String, String), Option<f64>>,
    /// Keyed by mask-kind name.
    pub inpainting: BTreeMap<String, InpaintComparison>,
}

pub const ABSENT: &str = "absent";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |v| v.to_string())
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// One row per table cell: `method,class,mask,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,class,mask,metric,value\n");
        let mut row = |method: &str, class: &str, mask: &str, metric: &str, value: String| {
            let _ = writeln!(out, "{method},{class},{mask},{metric},{value}");
        };
        for (method, s) in &self.overall {
            row(method, "all", "none", "fid", cell(s.fid));
            row(method, "all", "none", "kid_x1000", cell(s.kid_x1000));
            row(
                method,
                "all",
                "none",
                "nfe",
                s.nfe.map_or_else(|| ABSENT.into(), |n| n.to_string()),
            );
            row(method, "all", "none", "images_per_sec", cell(s.images_per_sec));
        }
        for ((method, class), v) in &self.per_class {
            row(method, class, "none", "fid", cell(*v));
        }
        for (mask, c) in &self.inpainting {
            for ((name, base), (_, fine)) in c.base.fields().into_iter().zip(c.finetuned.fields()) {
                row("base", "all", mask, name, cell(base));
                row("finetuned", "all", mask, name, cell(fine));
                row("delta_pct", "all", mask, name, cell(delta_percent(base, fine)));
            }
        }
        out
    }

    /// Plain-text rendering of the three tables.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.p$}"));
        let mut out = String::new();
        if !self.overall.is_empty() {
            let _ = writeln!(
                out,
                "{:<20} {:>10} {:>10} {:>6} {:>10}",
                "Method", "FID", "KIDx1000", "NFE", "img/s"
            );
            for (m, s) in &self.overall {
                let nfe = s.nfe.map_or_else(|| ABSENT.into(), |n| n.to_string());
                let _ = writeln!(
                    out,
                    "{:<20} {:>10} {:>10} {:>6} {:>10}",
                    m,
                    f(s.fid, 2),
                    f(s.kid_x1000, 2),
                    nfe,
                    f(s.images_per_sec, 2)
                );
            }
            out.push('\n');
        }
        if !self.per_class.is_empty() {
            let _ = writeln!(out, "{:<20} {:<12} {:>10}", "Method", "Class", "FID");
            for ((m, c), v) in &self.per_class {
                let _ = writeln!(out, "{:<20} {:<12} {:>10}", m, c, f(*v, 2));
            }
            out.push('\n');
        }
        if !self.inpainting.is_empty() {
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:>10} {:>10} {:>10}",
                "Mask", "Metric", "Base", "Finetuned", "Delta%"
            );
            for (mask, c) in &self.inpainting {
                for ((name, b), (_, n)) in c.base.fields().into_iter().zip(c.finetuned.fields()) {
                    let _ = writeln!(
                        out,
                        "{:<12} {:<8} {:>10} {:>10} {:>10}",
                        mask,
                        name,
                        f(b, 4),
                        f(n, 4),
                        f(delta_percent(b, n), 1)
                    );
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
