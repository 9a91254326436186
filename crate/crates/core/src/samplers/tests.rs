use super::*;
use crate::autodiff::Backend;
use crate::model::{build, MlpConfig, ModelConfig, NetInput};
use crate::processes::ddpm_forward;

/// Evaluation-only test network defined by a closure over plain tensors.
struct Oracle<F>(F);

impl<F> Network for Oracle<F>
where
    F: Fn(&Tensor, &[f64], Option<&[f64]>, &[Label]) -> Tensor,
{
    fn params(&self) -> &[Tensor] {
        &[]
    }
    fn forward_with<B: Backend>(&self, b: &mut B, _: &[B::Value], input: &NetInput<B::Value>) -> Result<B::Value> {
        let x = b.primal(&input.x).clone();
        let t = b.primal(&input.t).data().to_vec();
        let r = input.r.as_ref().map(|r| b.primal(r).data().to_vec());
        let out = (self.0)(&x, &t, r.as_deref(), &input.labels);
        Ok(b.constant(out))
    }
}

/// Noise oracle for a known clean batch: inverts `x_t = √ᾱ x0 + √(1−ᾱ) ε`.
fn true_eps(x0: Tensor, schedule: CosineSchedule) -> impl Network {
    Oracle(move |x: &Tensor, t: &[f64], _: Option<&[f64]>, _: &[Label]| {
        let per = x.len() / t.len();
        let total = schedule.steps() as f64;
        let data = x
            .data()
            .iter()
            .zip(x0.data())
            .enumerate()
            .map(|(k, (xt, x0))| {
                let ab = schedule.alpha_bar((t[k / per] * total).round() as usize);
                (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()
            })
            .collect();
        Tensor::new(x.shape(), data).unwrap()
    })
}

/// Class-dependent field: `x · (1 + y)` for a label, `x / 2` for NULL.
fn labelled_field() -> impl Network {
    Oracle(|x: &Tensor, t: &[f64], _: Option<&[f64]>, y: &[Label]| {
        let per = x.len() / t.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| match y[k / per] {
                Some(c) => v * (1.0 + c as f64),
                None => v * 0.5,
            })
            .collect();
        Tensor::new(x.shape(), data).unwrap()
    })
}

fn noise(seed: u64, shape: &[usize]) -> Tensor {
    initial_noise(seed, shape[0], &shape[1..])
}

#[test]
fn ddim_single_jump_inverts_forward_process() {
    let s = CosineSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..100u64 {
        let x0 = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let eps = noise(k, &[1, 3, 4, 4]);
        let t = rand::Rng::random_range(&mut rng, 1..=200usize);
        let xt = ddpm_forward(&x0, &[t], &eps, &s).unwrap();
        let back = ddim_step(&xt, &eps, s.alpha_bar(t), s.alpha_bar(0), false).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-6, "t={t}");
    }
}

#[test]
fn ddim_full_chain_with_true_noise_recovers_x0() {
    let s = CosineSchedule::default();
    let x0 = Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let eps = noise(2, &[2, 1, 4, 4]);
    let xt = ddpm_forward(&x0, &[200, 200], &eps, &s).unwrap();
    let net = true_eps(x0.clone(), s.clone());
    for steps in [1, 7, 50, 200] {
        let out = ddim_sample_from(&net, &s, &SamplerConfig::ddim(steps), xt.clone()).unwrap();
        assert!(out.images.max_abs_diff(&x0).unwrap() < 1e-6, "N={steps}");
        assert_eq!((out.nfe_steps, out.model_evals), (steps, steps));
    }
}

#[test]
fn ddim_zero_noise_rescales_each_step() {
    let s = CosineSchedule::default();
    let zero = Oracle(|x: &Tensor, _: &[f64], _: Option<&[f64]>, _: &[Label]| Tensor::zeros(x.shape()));
    let xt = noise(3, &[1, 4]);
    let out = ddim_sample_from(&zero, &s, &SamplerConfig::ddim(200), xt.clone()).unwrap();
    let gain: f64 = (1..=200)
        .map(|t| (s.alpha_bar(t - 1) / s.alpha_bar(t)).sqrt())
        .product();
    let want = xt.scale(gain);
    let rel = out.images.max_abs_diff(&want).unwrap() / want.max_abs();
    assert!(rel < 1e-12, "{rel}");
}

#[test]
fn ddim_timestep_subsequence() {
    assert_eq!(ddim_timesteps(200, 4).unwrap(), vec![200, 150, 100, 50, 0]);
    assert_eq!(ddim_timesteps(200, 3).unwrap(), vec![200, 133, 67, 0]);
    let all = ddim_timesteps(200, 200).unwrap();
    assert_eq!(all, (0..=200).rev().collect::<Vec<_>>());
    assert!(ddim_timesteps(200, 201).is_err());
    let s = CosineSchedule::default();
    let p = build(&ModelConfig::Mlp(MlpConfig::default()), 0).unwrap();
    assert!(ddim_sample(&p, &s, &SamplerConfig::ddim(201)).is_err());
}

#[test]
fn euler_is_exact_on_constant_fields() {
    let c = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, -3.0]).unwrap();
    let field = {
        let c = c.clone();
        Oracle(move |_: &Tensor, _: &[f64], _: Option<&[f64]>, _: &[Label]| c.clone())
    };
    let z0 = noise(4, &[2, 3]);
    for n in [1, 2, 3, 50, 1000] {
        let out = cfm_euler_from(&field, &SamplerConfig::cfm(n, 0.0), z0.clone()).unwrap();
        let want = z0.add(&c).unwrap();
        assert!(out.images.max_abs_diff(&want).unwrap() < 1e-12);
        assert_eq!(out.nfe_steps, n);
    }
}

#[test]
fn euler_on_linear_decay() {
    let field = Oracle(|x: &Tensor, _: &[f64], _: Option<&[f64]>, _: &[Label]| x.scale(-1.0));
    let z0 = Tensor::new(&[1, 1], vec![1.7]).unwrap();
    let out = cfm_euler_from(&field, &SamplerConfig::cfm(1000, 0.0), z0).unwrap();
    let want = 1.7 * (-1.0f64).exp();
    assert!((out.images.data()[0] - want).abs() < 1e-2);
}

#[test]
fn euler_evaluates_times_left_to_right() {
    let seen = std::cell::RefCell::new(Vec::new());
    let field = Oracle(|x: &Tensor, t: &[f64], _: Option<&[f64]>, _: &[Label]| {
        seen.borrow_mut().push(t[0]);
        Tensor::zeros(x.shape())
    });
    cfm_euler_from(&field, &SamplerConfig::cfm(4, 0.0), noise(0, &[1, 1])).unwrap();
    assert_eq!(*seen.borrow(), vec![0.0, 0.25, 0.5, 0.75]);
}

#[test]
fn guidance_combination() {
    let net = labelled_field();
    let x = noise(5, &[3, 2]);
    let t = [0.5; 3];
    let y = [Some(2); 3];
    let (v0, n0) = cfg_velocity(&net, &x, &t, None, &y, 0.0).unwrap();
    assert_eq!((v0, n0), (x.scale(0.5), 1));
    let (v1, n1) = cfg_velocity(&net, &x, &t, None, &y, 1.0).unwrap();
    assert_eq!((v1, n1), (x.scale(3.0), 1));
    let (v2, n2) = cfg_velocity(&net, &x, &t, None, &y, 2.0).unwrap();
    let want = x.scale(3.0).scale(2.0).sub(&x.scale(0.5)).unwrap();
    assert!(v2.max_abs_diff(&want).unwrap() < 1e-12);
    assert_eq!(n2, 2);
    let (vn, nn) = cfg_velocity(&net, &x, &t, None, &[None; 3], 4.0).unwrap();
    assert_eq!((vn, nn), (x.scale(0.5), 1));
}

#[test]
fn guidance_is_affine_in_scale() {
    let net = labelled_field();
    let x = noise(6, &[2, 5]);
    let (t, y) = ([0.3; 2], [Some(1), Some(4)]);
    let (w1, w2) = (0.7, 5.3);
    let a = cfg_velocity(&net, &x, &t, None, &y, w1).unwrap().0;
    let b = cfg_velocity(&net, &x, &t, None, &y, w2).unwrap().0;
    let m = cfg_velocity(&net, &x, &t, None, &y, (w1 + w2) / 2.0).unwrap().0;
    assert!(a.add(&b).unwrap().max_abs_diff(&m.scale(2.0)).unwrap() < 1e-12);
}

#[test]
fn meanflow_one_step_oracles() {
    let p = 0.37;
    let point = Oracle(move |z: &Tensor, t: &[f64], r: Option<&[f64]>, _: &[Label]| {
        assert_eq!((t[0], r.unwrap()[0]), (1.0, 0.0));
        z.map(|v| v - p)
    });
    let eps = noise(7, &[6, 2]);
    let out = meanflow_onestep_from(&point, &SamplerConfig::meanflow(0.0), eps.clone()).unwrap();
    assert!(out.images.data().iter().all(|&v| (v - p).abs() < 1e-12));
    assert_eq!((out.nfe_steps, out.model_evals), (1, 1));

    let zero = Oracle(|z: &Tensor, _: &[f64], _: Option<&[f64]>, _: &[Label]| Tensor::zeros(z.shape()));
    let out = meanflow_onestep_from(&zero, &SamplerConfig::meanflow(0.0), eps.clone()).unwrap();
    assert_eq!(out.images, eps);
}

#[test]
fn evaluation_accounting() {
    let net = labelled_field();
    let z = noise(8, &[2, 2]);
    let s = CosineSchedule::default();
    for (w, factor) in [(0.0, 1), (1.0, 1), (3.0, 2)] {
        let cfg = SamplerConfig::cfm(50, w).with_class(Some(1));
        let out = cfm_euler_from(&net, &cfg, z.clone()).unwrap();
        assert_eq!((out.nfe_steps, out.model_evals), (50, 50 * factor));
        let cfg = SamplerConfig::cfm(100, w).with_class(Some(1));
        assert_eq!(cfm_euler_from(&net, &cfg, z.clone()).unwrap().model_evals, 100 * factor);
        let cfg = SamplerConfig::meanflow(w).with_class(Some(1));
        let out = meanflow_onestep_from(&net, &cfg, z.clone()).unwrap();
        assert_eq!((out.nfe_steps, out.model_evals), (1, factor));
        let cfg = SamplerConfig {
            cfg_scale: w,
            class: Some(1),
            ..SamplerConfig::ddim(20)
        };
        let out = ddim_sample_from(&net, &s, &cfg, z.clone()).unwrap();
        assert_eq!((out.nfe_steps, out.model_evals), (20, 20 * factor));
    }
}

#[test]
fn config_validation() {
    let net = labelled_field();
    let z = noise(9, &[1, 2]);
    assert!(meanflow_onestep_from(&net, &SamplerConfig::cfm(1, 0.0), z.clone()).is_err());
    let bad = SamplerConfig {
        steps: 2,
        ..SamplerConfig::meanflow(0.0)
    };
    assert!(bad.validate().is_err());
    assert!(SamplerConfig::cfm(0, 1.0).validate().is_err());
    assert!(SamplerConfig::cfm(10, -1.0).validate().is_err());
    assert!(cfm_euler_from(&net, &SamplerConfig::ddim(10), z).is_err());
    assert_eq!("meanflow_onestep".parse::<Method>().unwrap(), Method::MeanflowOnestep);
    assert!("euler".parse::<Method>().is_err());
    let d = SamplerConfig::default();
    assert_eq!((d.method, d.steps, d.cfg_scale), (Method::CfmEuler, 50, 3.0));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let p = build(&ModelConfig::Mlp(MlpConfig::default()), 3).unwrap();
    let s = CosineSchedule::default();
    let cfg = SamplerConfig::cfm(5, 2.0)
        .with_class(Some(3))
        .with_seed(11)
        .with_batch(4);
    let a = sample(&p, &s, &cfg).unwrap();
    let b = sample(&p, &s, &cfg).unwrap();
    assert_eq!(a, b);
    let c = sample(&p, &s, &cfg.clone().with_seed(12)).unwrap();
    assert_ne!(a.images, c.images);
    let ddim = sample(&p, &s, &SamplerConfig::ddim(10).with_seed(11)).unwrap();
    assert!(ddim.images.all_finite());
}

#[test]
fn throughput_reports_rate_and_evals() {
    let mut cfg = ModelConfig::Mlp(MlpConfig::default());
    let s = CosineSchedule::default();
    let p = build(&cfg, 0).unwrap();
    let cfm = throughput(
        &p,
        &s,
        &SamplerConfig::cfm(50, 3.0).with_class(Some(0)).with_batch(8),
        16,
    )
    .unwrap();
    assert!(cfm.images_per_sec > 0.0);
    assert_eq!(cfm.model_evals, 2 * 2 * 50);
    cfg.set_meanflow_mode(true);
    let p = build(&cfg, 0).unwrap();
    let mf = throughput(
        &p,
        &s,
        &SamplerConfig::meanflow(3.0).with_class(Some(0)).with_batch(8),
        16,
    )
    .unwrap();
    assert_eq!(mf.model_evals * 50, cfm.model_evals);
}
