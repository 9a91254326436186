use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut rng(seed))
}

fn center_mask(shape: &[usize]) -> Tensor {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = (0..shape.iter().product::<usize>())
        .map(|k| {
            let (i, j) = ((k / w) % h, k % w);
            let hole = (h / 4..h - h / 4).contains(&i) && (w / 4..w - w / 4).contains(&j);
            if hole {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn nmse_examples() {
    let x = Tensor::new(&[2, 2], vec![0.5, 0.2, 0.4, 0.1]).unwrap();
    let xhat = Tensor::new(&[2, 2], vec![0.5, 0.1, 0.2, 0.1]).unwrap();
    let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    // (0.1² + 0.2²) / (0.2² + 0.4²) = 0.05 / 0.2
    assert!((nmse_masked(&x, &xhat, &m).unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(nmse_masked(&x, &x, &m).unwrap(), 0.0);
    let x = image(0, &[3, 8, 8]);
    let m = center_mask(&[3, 8, 8]);
    assert_eq!(nmse_masked(&x, &Tensor::zeros(&[3, 8, 8]), &m).unwrap(), 1.0);
    assert!(nmse_masked(&Tensor::zeros(&[3, 8, 8]), &x, &m).is_err());
    assert!(nmse_masked(&x, &x, &Tensor::ones(&[3, 8, 8])).is_err());
}

#[test]
fn psnr_examples() {
    assert_eq!(psnr_from_mse(0.01), 20.0);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    let x = Tensor::full(&[1, 4, 4], 0.3);
    let m = Tensor::zeros(&[1, 4, 4]);
    let xhat = x.map(|v| v + 0.1);
    assert!((psnr_masked(&x, &xhat, &m).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr_masked(&x, &x, &m).unwrap(), PSNR_CAP_DB);
    let mut last = f64::INFINITY;
    for k in 1..20 {
        let p = psnr_masked(&x, &x.map(|v| v + 0.01 * k as f64), &m).unwrap();
        assert!(p < last);
        last = p;
    }
    assert!(psnr_masked(&x, &x, &Tensor::ones(&[1, 4, 4])).is_err());
}

#[test]
fn ssim_identity_and_symmetry() {
    let x = image(1, &[3, 16, 16]);
    let y = image(2, &[3, 16, 16]);
    let m = center_mask(&[3, 16, 16]);
    assert_eq!(ssim(&x, &x, &m).unwrap(), 1.0);
    let a = ssim(&x, &y, &m).unwrap();
    assert!((a - ssim(&y, &x, &m).unwrap()).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&a));
    assert!(ssim(&image(0, &[1, 8, 8]), &image(0, &[1, 8, 8]), &center_mask(&[1, 8, 8])).is_err());
}

#[test]
fn ssim_inverted_half_image() {
    let x = Tensor::new(
        &[1, 16, 16],
        (0..256).map(|k| if k % 16 < 8 { 0.0 } else { 1.0 }).collect(),
    )
    .unwrap();
    let inv = x.map(|v| 1.0 - v);
    let m = Tensor::zeros(&[1, 16, 16]);
    assert!(ssim(&x, &inv, &m).unwrap() < 0.1);
}

#[test]
fn ssim_constant_images_closed_form() {
    let m = center_mask(&[1, 16, 16]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    for (a, b) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.3)] {
        let s = ssim(&Tensor::full(&[1, 16, 16], a), &Tensor::full(&[1, 16, 16], b), &m).unwrap();
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1) * (c2 / c2);
        assert!((s - want).abs() < 1e-12, "{a} {b}: {s} vs {want}");
    }
}

#[test]
fn masked_metrics_ignore_known_pixels() {
    let shape = [3, 16, 16];
    let x = image(3, &shape);
    let xhat = image(4, &shape);
    let m = center_mask(&shape);
    let noise = image(5, &shape);
    let perturbed = xhat
        .data()
        .iter()
        .zip(m.data().iter().zip(noise.data()))
        .map(|(&v, (&m, &n))| if m == 1.0 { n } else { v })
        .collect();
    let perturbed = Tensor::new(&shape, perturbed).unwrap();
    assert_eq!(
        nmse_masked(&x, &xhat, &m).unwrap(),
        nmse_masked(&x, &perturbed, &m).unwrap()
    );
    assert_eq!(
        psnr_masked(&x, &xhat, &m).unwrap(),
        psnr_masked(&x, &perturbed, &m).unwrap()
    );
    assert_eq!(ssim(&x, &xhat, &m).unwrap(), ssim(&x, &perturbed, &m).unwrap());
}

fn gaussian_cloud(n: usize, mean: &[f64], sd: &[f64], rotation: &DMatrix<f64>, seed: u64) -> Tensor {
    let d = mean.len();
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_iterator(
            d,
            (0..d).map(|k| {
                let e: f64 = StandardNormal.sample(&mut r);
                sd[k] * e
            }),
        );
        let x = rotation * z;
        data.extend(x.iter().zip(mean).map(|(v, m)| v + m));
    }
    Tensor::new(&[n, d], data).unwrap()
}

fn rotation4() -> DMatrix<f64> {
    let (c, s) = (0.6, 0.8);
    DMatrix::from_row_slice(
        4,
        4,
        &[c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, c, s, 0.0, 0.0, -s, c],
    )
}

#[test]
fn fid_oracles() {
    let q = rotation4();
    let a = GaussianStats::from_features(&gaussian_cloud(500, &[0.0; 4], &[1.0, 2.0, 1.0, 3.0], &q, 0)).unwrap();
    assert!(fid(&a, &a).unwrap() < 1e-6);

    // identical covariance, shifted mean
    let shifted = GaussianStats {
        mean: &a.mean + DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]),
        ..a.clone()
    };
    assert!((fid(&a, &shifted).unwrap() - 5.25).abs() < 1e-6);

    let b = GaussianStats::from_features(&gaussian_cloud(500, &[1.0; 4], &[2.0, 1.0, 3.0, 1.0], &q, 1)).unwrap();
    assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
}

#[test]
fn fid_matches_closed_form_for_gaussians() {
    // With covariances Q·diag(s²)·Qᵀ sharing a rotation, the distance is
    // ‖μA − μB‖² + Σ (sA − sB)².
    let q = rotation4();
    let (sa, sb) = ([1.0, 2.0, 1.0, 3.0], [2.0, 1.0, 3.0, 1.0]);
    let (ma, mb) = ([0.0; 4], [1.0; 4]);
    let want: f64 = 4.0
        + sa.iter()
            .zip(&sb)
            .map(|(a, b): (&f64, &f64)| (a - b).powi(2))
            .sum::<f64>();
    let a = feature_stats(&gaussian_cloud(40_000, &ma, &sa, &q, 2), &Flatten).unwrap();
    let b = feature_stats(&gaussian_cloud(40_000, &mb, &sb, &q, 3), &Flatten).unwrap();
    let got = fid(&a, &b).unwrap();
    assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
}

#[test]
fn covariance_ridge_when_undersampled() {
    let f = gaussian_cloud(3, &[0.0; 4], &[1.0; 4], &DMatrix::identity(4, 4), 4);
    let s = GaussianStats::from_features(&f).unwrap();
    let eig = SymmetricEigen::new(s.cov.clone()).eigenvalues;
    assert!(eig.iter().all(|&v| v > 0.0));
    assert!(fid(&s, &s).unwrap() < 1e-6);
    assert!(GaussianStats::from_features(&Tensor::zeros(&[1, 4])).is_err());
}

#[test]
fn kid_point_masses_by_hand() {
    let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
    // k(p,p) = 1.5³, k(q,q) = 3³, k(p,q) = 1
    assert_eq!(kid(&a, &b, 0).unwrap(), 3.375 + 27.0 - 2.0);
    assert!(kid(&a, &Tensor::zeros(&[1, 2]), 0).is_err());
}

#[test]
fn kid_identical_sets_are_non_positive() {
    let f = gaussian_cloud(50, &[0.0; 4], &[1.0; 4], &DMatrix::identity(4, 4), 5);
    assert!(kid(&f, &f, 0).unwrap() <= 0.0);
}

#[test]
fn kid_is_unbiased_under_same_distribution() {
    let id = DMatrix::identity(4, 4);
    let vals: Vec<f64> = (0..100)
        .map(|k| {
            let a = gaussian_cloud(60, &[0.0; 4], &[1.0; 4], &id, 100 + 2 * k);
            let b = gaussian_cloud(60, &[0.0; 4], &[1.0; 4], &id, 101 + 2 * k);
            kid_with(&a, &b, 1, 1000, k).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / 100.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!(mean.abs() <= 3.0 * sd / 10.0, "mean {mean}, sd {sd}");
    // a real shift is clearly detected
    let a = gaussian_cloud(200, &[0.0; 4], &[1.0; 4], &id, 7);
    let b = gaussian_cloud(200, &[1.0; 4], &[1.0; 4], &id, 8);
    assert!(kid(&a, &b, 0).unwrap() > 10.0 * sd);
}

#[test]
fn energy_distance_properties() {
    let id = DMatrix::identity(2, 2);
    let a = gaussian_cloud(300, &[0.0; 2], &[1.0; 2], &id, 9);
    let b = gaussian_cloud(300, &[2.0, 0.0], &[1.0; 2], &id, 10);
    assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    let ab = energy_distance(&a, &b).unwrap();
    assert!((ab - energy_distance(&b, &a).unwrap()).abs() < 1e-12);
    assert!(ab > 0.5);
    // two point masses at distance δ: 2δ − 0 − 0
    let p = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let q = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(energy_distance(&p, &q).unwrap(), 10.0);
}

#[test]
fn pixel_stats_extractor() {
    let imgs = image(11, &[5, 3, 32, 32]);
    let e = PixelStats::default();
    let f = e.extract(&imgs).unwrap();
    assert_eq!(f.shape(), &[5, PIXEL_STATS_DIM]);
    assert_eq!(e.extract(&imgs).unwrap(), f);
    let small = e.extract(&image(11, &[2, 1, 8, 8])).unwrap();
    assert_eq!(small.shape(), &[2, PIXEL_STATS_DIM]);
    assert!(e.extract(&Tensor::zeros(&[2, 8])).is_err());
}

#[test]
fn report_deltas_and_absent_cells() {
    let d = delta_percent(Some(4.95), Some(8.57)).unwrap();
    assert!((d - 73.13).abs() < 0.01, "{d}");
    let d = delta_percent(Some(2.37), Some(1.06)).unwrap();
    assert!((d + 55.27).abs() < 0.01, "{d}");
    assert_eq!(delta_percent(Some(0.4), Some(0.4)), Some(0.0));
    assert_eq!(delta_percent(None, Some(1.0)), None);

    let mut r = MetricReport::new();
    r.overall.insert(
        "meanflow".into(),
        MethodSummary {
            fid: Some(12.5),
            kid_x1000: None,
            nfe: Some(1),
            images_per_sec: None,
        },
    );
    r.per_class.insert(("meanflow".into(), "3".into()), Some(20.0));
    r.inpainting.insert(
        "center".into(),
        InpaintComparison {
            base: Recovery {
                nmse: Some(2.0),
                psnr: Some(5.0),
                ssim: None,
            },
            finetuned: Recovery {
                nmse: Some(1.0),
                psnr: Some(10.0),
                ssim: None,
            },
        },
    );
    let csv = r.to_csv();
    assert!(csv.starts_with("method,class,mask,metric,value\n"));
    assert!(csv.contains("meanflow,all,none,kid_x1000,absent\n"));
    assert!(csv.contains("meanflow,all,none,nfe,1\n"));
    assert!(csv.contains("meanflow,3,none,fid,20\n"));
    assert!(csv.contains("delta_pct,all,center,psnr_db,100\n"));
    assert!(csv.contains("delta_pct,all,center,nmse,-50\n"));
    assert!(csv.contains("delta_pct,all,center,ssim,absent\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 5));
    let table = r.to_table();
    assert!(table.contains("absent") && table.contains("center"));
}
