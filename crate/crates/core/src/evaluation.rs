//! Evaluation drivers: class-balanced generation and masked-region
//! recovery scores for inpainting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{denormalize, LabeledBatch};
use crate::error::{Error, Result};
use crate::inpaint::{gen_mask, inpaint_from, MaskKind};
use crate::metrics::{psnr_masked, ssim, Recovery};
use crate::model::{Network, Parameters};
use crate::processes::CosineSchedule;
use crate::samplers::{initial_noise, sample, SamplerConfig};

/// A seed derived from `seed` and a pair of indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9).wrapping_add(b).wrapping_add(1));
    rng.random()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// `[n, ...]`, grouped by class in ascending order.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    /// Integration steps per sample.
    pub nfe_steps: usize,
    /// Forward passes summed over all batches.
    pub model_evals: usize,
}

/// Exactly `per_class` samples of every class, drawn in batches of
/// `config.batch` with seeds derived from `config.seed`.
pub fn generate_per_class(
    params: &Parameters,
    schedule: &CosineSchedule,
    config: &SamplerConfig,
    per_class: usize,
) -> Result<Generated> {
    config.validate()?;
    let classes = params.config().num_classes();
    let mut chunks = Vec::new();
    let mut labels = Vec::with_capacity(classes * per_class);
    let (mut nfe, mut evals) = (0, 0);
    for class in 0..classes {
        let mut done = 0;
        let mut chunk = 0;
        while done < per_class {
            let batch = config.batch.min(per_class - done);
            let cfg = SamplerConfig {
                class: Some(class),
                seed: derive_seed(config.seed, class as u64, chunk),
                batch,
                ..config.clone()
            };
            let out = sample(params, schedule, &cfg)?;
            nfe = out.nfe_steps;
            evals += out.model_evals;
            chunks.push(out.images);
            labels.extend(std::iter::repeat_n(class, batch));
            done += batch;
            chunk += 1;
        }
    }
    let samples = concat_batches(&chunks)?;
    Ok(Generated {
        samples,
        labels,
        nfe_steps: nfe,
        model_evals: evals,
    })
}

/// Concatenates tensors along the batch axis.
pub fn concat_batches(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let tail = &first.shape()[1..];
    let mut n = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::Shape {
                op: "concat_batches",
                detail: format!("{:?} vs {:?}", p.shape(), first.shape()),
            });
        }
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

/// Inpainting outcome on one batch under one mask kind.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRun {
    pub masks: Tensor,
    pub results: Tensor,
    pub scores: Recovery,
}

/// Masks every image with its own draw of `kind` (seeded by `mask_seed`),
/// inpaints conditioned on the true labels, and scores the hole in [0, 1]
/// pixel space.
///
/// PSNR and SSIM are averaged per image; NMSE pools squared errors over the
/// whole batch so that images whose hole is pure black still count, and is
/// absent if every hole is black. A score
/// that cannot be computed (SSIM on images smaller than its window) is
/// absent.
pub fn inpaint_batch<N: Network>(
    net: &N,
    batch: &LabeledBatch,
    kind: MaskKind,
    config: &SamplerConfig,
    mask_seed: u64,
) -> Result<InpaintRun> {
    let masks = kind_masks(batch.images.shape(), kind, mask_seed)?;
    inpaint_with_masks(net, batch, &masks, config)
}

/// One draw of `kind` per image, broadcast over channels.
pub fn kind_masks(shape: &[usize], kind: MaskKind, mask_seed: u64) -> Result<Tensor> {
    let &[b, c, h, w] = shape else {
        return Err(Error::InvalidArgument(format!(
            "inpainting needs images, got {shape:?}"
        )));
    };
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut mdata = Vec::with_capacity(b * c * h * w);
    for _ in 0..b {
        let m = gen_mask(kind, h.min(w), &mut mask_rng)?;
        for _ in 0..c {
            mdata.extend_from_slice(m.values().data());
        }
    }
    Tensor::new(shape, mdata)
}

/// Inpaints every image under its own mask (image-shaped, 1 = known),
/// conditioned on the true labels, and scores the holes.
pub fn inpaint_with_masks<N: Network>(
    net: &N,
    batch: &LabeledBatch,
    masks: &Tensor,
    config: &SamplerConfig,
) -> Result<InpaintRun> {
    let x = &batch.images;
    let b = x.shape()[0];
    if masks.shape() != x.shape() || x.ndim() != 4 {
        return Err(Error::Shape {
            op: "inpaint_with_masks",
            detail: format!("masks {:?} for images {:?}", masks.shape(), x.shape()),
        });
    }
    let noise = initial_noise(config.seed, b, &x.shape()[1..]);
    // the sampler conditions a whole call on one class, so run class groups
    let mut results = vec![0.0; x.len()];
    let per = x.len() / b;
    let mut classes: Vec<usize> = batch.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let rows: Vec<usize> = (0..b).filter(|&i| batch.labels[i] == class).collect();
        let cfg = SamplerConfig {
            class: Some(class),
            batch: rows.len(),
            ..config.clone()
        };
        let out = inpaint_from(
            net,
            &x.gather_axis0(&rows)?,
            &masks.gather_axis0(&rows)?,
            &cfg,
            &noise.gather_axis0(&rows)?,
        )?;
        for (k, &i) in rows.iter().enumerate() {
            results[i * per..(i + 1) * per].copy_from_slice(&out.images.data()[k * per..(k + 1) * per]);
        }
    }
    let results = Tensor::new(x.shape(), results)?;
    let scores = score_recovery(x, &results, masks)?;
    Ok(InpaintRun {
        masks: masks.clone(),
        results,
        scores,
    })
}

/// Masked-region scores of `results` against `truth` (both in [−1, 1]).
pub fn score_recovery(truth: &Tensor, results: &Tensor, masks: &Tensor) -> Result<Recovery> {
    let b = truth.shape()[0];
    let (truth01, res01) = (denormalize(truth), denormalize(results));
    let (mut num, mut den) = (0.0, 0.0);
    let mut psnrs = Vec::with_capacity(b);
    let mut ssims = Some(Vec::with_capacity(b));
    for i in 0..b {
        let (xi, yi, mi) = (truth01.index_axis0(i)?, res01.index_axis0(i)?, masks.index_axis0(i)?);
        for ((a, r), m) in xi.data().iter().zip(yi.data()).zip(mi.data()) {
            if *m == 0.0 {
                num += (a - r) * (a - r);
                den += a * a;
            }
        }
        psnrs.push(psnr_masked(&xi, &yi, &mi)?);
        match ssim(&xi, &yi, &mi) {
            Ok(s) => {
                if let Some(v) = ssims.as_mut() {
                    v.push(s)
                }
            }
            Err(Error::InvalidArgument(_)) => ssims = None,
            Err(e) => return Err(e),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let nmse = (den > 0.0).then(|| num / den);
    Ok(Recovery {
        nmse,
        psnr: Some(mean(&psnrs)),
        ssim: ssims.filter(|v| !v.is_empty()).map(|v| mean(&v)),
    })
}
