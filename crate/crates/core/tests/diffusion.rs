use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wmlab_core::diffusion::*;
use wmlab_core::noise::NoiseStream;
use wmlab_core::Result;
use wmlab_tensor::{Tape, Tensor};

fn desk_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

/// Cumulative product computed through log space, independent of the
/// running-product loop in the library.
fn alpha_bar_oracle(t: usize) -> f64 {
    (0..t)
        .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
        .sum::<f64>()
        .exp()
}

#[test]
fn alpha_bar_matches_oracle() {
    let s = desk_schedule();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 1e-7);
    for t in [1, 2, 17, 250, 500, 999, 1000] {
        let o = alpha_bar_oracle(t);
        assert!((s.alpha_bar(t) - o).abs() <= 1e-12 * o.max(1e-3), "t={t}");
    }
    let ab = s.alpha_bars();
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
    assert!((1..=1000).all(|t| s.beta(t) >= s.beta(t - 1).max(1e-4) - 1e-18));
}

#[test]
fn shared_timestep_is_uniform() {
    // 1e5 draws over 1000 bins; chi-square critical value at p = 0.01 with
    // 999 degrees of freedom.
    const CRITICAL: f64 = 1105.917;
    let p = FramePartition::new(4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; 1000];
    let n = 100_000;
    for _ in 0..n {
        let t = sample_timesteps(&mut rng, &p, 1000);
        assert_eq!(t[0], 0);
        assert!(t[1..].iter().all(|&k| k == t[1]));
        counts[t[1] - 1] += 1;
    }
    let expected = n as f64 / 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CRITICAL, "chi2 {chi2}");
}

#[test]
fn stepwise_forward_matches_marginal() {
    let s = desk_schedule();
    let x0 = 0.6;
    let t = 120;
    let trials = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut x = x0;
        for k in 1..=t {
            let z: f64 = StandardNormal.sample(&mut rng);
            x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * z;
        }
        samples.push(x);
    }
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want_mean = s.alpha_bar(t).sqrt() * x0;
    let want_var = 1.0 - s.alpha_bar(t);
    assert!((mean - want_mean).abs() < 3.0 * (want_var / n).sqrt());
    // sample variance of a Gaussian has standard error var * sqrt(2/(n-1))
    assert!((var - want_var).abs() < 3.0 * want_var * (2.0 / (n - 1.0)).sqrt());
}

#[test]
fn memory_frames_are_bit_exact_and_gradient_free() {
    let s = desk_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0v: Vec<f64> = (0..5 * 2 * 3 * 3).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.7).collect();
    let x0 = Tensor::<f32>::from_f64([5, 2, 3, 3], &x0v).unwrap();
    let part = FramePartition::new(5, 2).unwrap();
    let batch = MemoryMaskedBatch::sample(x0.clone(), part, &s, &mut rng, &NoiseStream::new(3), &[1]).unwrap();
    let frame = 18;
    assert_eq!(&batch.xt.data()[..2 * frame], &x0.data()[..2 * frame]);
    assert_eq!(&batch.t[..2], &[0, 0]);

    // the model sees all frames; only the future slice reaches the loss
    let tape = Tape::<f32>::new();
    let out = tape.param(Tensor::full([5, 2, 3, 3], 0.1));
    let vraw = tape.param(Tensor::full([5, 2, 3, 3], 0.3));
    let pred = DenoisePrediction {
        eps_hat: out.slice(0, 2, 3).unwrap(),
        v_hat: vraw.slice(0, 2, 3).unwrap().sigmoid().unwrap(),
    };
    let w = LossWeights::new(&part, 2.0).unwrap();
    let loss = total_loss(&batch, &pred, &w, &s).unwrap();
    let g = tape.backward(loss).unwrap();
    for grad in [g.get_or_zero(out), g.get_or_zero(vraw)] {
        assert!(grad.data()[..2 * frame].iter().all(|&v| v == 0.0));
        assert!(grad.data()[2 * frame..].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn all_memory_batch_rejected_for_training() {
    let s = desk_schedule();
    let x0 = Tensor::<f64>::zeros([2, 1, 1, 1]);
    let part = FramePartition::new(2, 2).unwrap();
    let batch = MemoryMaskedBatch::new(x0, part, vec![0, 0], Tensor::zeros([0, 1, 1, 1]), &s).unwrap();
    let tape = Tape::<f64>::new();
    let e = tape.param(Tensor::zeros([0, 1, 1, 1]));
    let pred = DenoisePrediction { eps_hat: e, v_hat: e };
    let w = LossWeights::new(&part, 2.0).unwrap();
    assert!(total_loss(&batch, &pred, &w, &s).is_err());
}

/// Evaluates the VB term with the library and again with the scalar
/// closed-form KL, elementwise.
fn vb_both(x0: f64, eps: f64, eps_hat: f64, v: f64, t: usize) -> (f64, f64) {
    let s = desk_schedule();
    let ab = s.alpha_bar(t);
    let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
    let tape = Tape::<f64>::new();
    let pred = DenoisePrediction {
        eps_hat: tape.param(Tensor::from_f64([1, 1, 1, 1], &[eps_hat]).unwrap()),
        v_hat: tape.param(Tensor::from_f64([1, 1, 1, 1], &[v]).unwrap()),
    };
    let tx0 = Tensor::from_f64([1, 1, 1, 1], &[x0]).unwrap();
    let txt = Tensor::from_f64([1, 1, 1, 1], &[xt]).unwrap();
    let got = vb_loss(&pred, &tx0, &txt, &[t], &s).unwrap().to_tensor().data()[0];

    let (c0, ct) = s.posterior_mean_coefs(t).unwrap();
    let mq = c0 * x0 + ct * xt;
    let x0h = (xt - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt();
    let mp = c0 * x0h + ct * xt;
    let lq = s.posterior_log_variance_clipped(t).unwrap();
    let lp = v * s.beta(t).ln() + (1.0 - v) * lq;
    (got, normal_kl(mq, lq, mp, lp))
}

#[test]
fn vb_zero_for_matching_gaussians() {
    let (got, oracle) = vb_both(0.4, -0.8, -0.8, 0.0, 300);
    assert!(got.abs() < 1e-12 && oracle.abs() < 1e-12);
}

#[test]
fn vb_gradient_flows_to_variance_only() {
    let s = desk_schedule();
    let tape = Tape::<f64>::new();
    let e = tape.param(Tensor::from_f64([1, 1, 1, 2], &[0.3, -0.1]).unwrap());
    let v = tape.param(Tensor::from_f64([1, 1, 1, 2], &[0.2, 0.7]).unwrap());
    let x0 = Tensor::from_f64([1, 1, 1, 2], &[0.5, 0.1]).unwrap();
    let xt = Tensor::from_f64([1, 1, 1, 2], &[0.9, -0.4]).unwrap();
    let l = vb_loss(&DenoisePrediction { eps_hat: e, v_hat: v }, &x0, &xt, &[40], &s)
        .unwrap()
        .sum_all()
        .unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(e).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    assert!(g.get_or_zero(v).data().iter().any(|&x| x != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vb_matches_closed_form_and_is_nonnegative(
        x0 in -1.0f64..1.0, eps in -2.0f64..2.0, eps_hat in -2.0f64..2.0, v in 0.0f64..1.0, t in 1usize..=1000
    ) {
        let (got, oracle) = vb_both(x0, eps, eps_hat, v, t);
        prop_assert!(got >= -1e-12);
        prop_assert!((got - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
    }

    #[test]
    fn weights_follow_decay_law(len in 2usize..20, mem in 0usize..6, lambda in 0.0f64..5.0) {
        prop_assume!(mem < len);
        let p = FramePartition::new(len, mem).unwrap();
        let w = LossWeights::new(&p, lambda).unwrap();
        let f = len - mem;
        for (k, &wk) in w.weights().iter().enumerate() {
            let tn = if f == 1 { 0.0 } else { k as f64 / (f - 1) as f64 };
            prop_assert!((wk - (-lambda * tn).exp()).abs() <= 1e-15);
        }
        prop_assert_eq!(w.weights()[0], 1.0);
        if lambda > 0.0 {
            prop_assert!(w.weights().windows(2).all(|p| p[1] < p[0]));
        }
    }

    #[test]
    fn noised_memory_is_bit_exact(seed in 0u64..500, mem in 0usize..4) {
        let s = desk_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..4 * 3 * 2).map(|i| ((seed as usize + i * 13) % 17) as f64 / 8.5 - 1.0).collect();
        let x0 = Tensor::<f32>::from_f64([4, 1, 3, 2], &vals).unwrap();
        let p = FramePartition::new(4, mem).unwrap();
        let b = MemoryMaskedBatch::sample(x0.clone(), p, &s, &mut rng, &NoiseStream::new(seed), &[seed]).unwrap();
        prop_assert_eq!(&b.xt.data()[..mem * 6], &x0.data()[..mem * 6]);
    }
}

/// Knows the clean clip and returns the exact noise that maps it to `xt`.
struct Oracle {
    x0: Tensor<f64>,
    schedule: NoiseSchedule,
}

impl Denoiser<f64> for Oracle {
    fn predict(&self, xt: &Tensor<f64>, t: &[usize], _drop: bool) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let frame = xt.len() / t.len();
        let mut eps = vec![0.0; xt.len()];
        for (f, &tf) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(tf);
            for j in f * frame..(f + 1) * frame {
                eps[j] = if tf == 0 {
                    0.0
                } else {
                    (xt.data()[j] - ab.sqrt() * self.x0.data()[j]) / (1.0 - ab).sqrt()
                };
            }
        }
        Ok((Tensor::new(xt.shape(), eps)?, Tensor::full(xt.shape(), 0.5)))
    }
}

/// Deterministic toy model with a condition-dependent output.
struct Toy;

impl Denoiser<f32> for Toy {
    fn predict(&self, xt: &Tensor<f32>, t: &[usize], drop: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let k = if drop { 0.3 } else { 0.7 } + t[t.len() - 1] as f32 * 1e-4;
        Ok((xt.map(|v| v * k), Tensor::full(xt.shape(), 0.25)))
    }
}

#[test]
fn exact_noise_oracle_reconstructs_clean_frame() {
    let s = desk_schedule();
    let x0 = Tensor::<f64>::from_f64([1, 1, 2, 2], &[0.8, -0.3, 0.05, -0.95]).unwrap();
    let model = Oracle {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let cfg = SamplerConfig {
        steps: 1000,
        ..Default::default()
    };
    let part = FramePartition::new(1, 0).unwrap();
    let out = sample_clip(&model, &Tensor::zeros([0, 1, 2, 2]), &part, &s, &cfg, &NoiseStream::new(1), &[0]).unwrap();
    assert!(out.max_abs_diff(&x0).unwrap() < 1e-3);
}

#[test]
fn sampler_pins_memory_and_is_deterministic() {
    let s = desk_schedule();
    let part = FramePartition::new(4, 2).unwrap();
    let cond = Tensor::<f32>::from_f64([2, 1, 2, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, -0.8]).unwrap();
    let cfg = SamplerConfig {
        steps: 20,
        ..Default::default()
    };
    let run = |seed| sample_clip(&Toy, &cond, &part, &s, &cfg, &NoiseStream::new(seed), &[4]).unwrap();
    let a = run(11);
    assert_eq!(&a.data()[..8], cond.data());
    assert_eq!(a, run(11));
    assert_ne!(a, run(12));
    assert!(sample_clip(&Toy, &cond, &part, &s, &SamplerConfig { steps: 0, ..cfg }, &NoiseStream::new(1), &[0]).is_err());
    let wrong = Tensor::<f32>::zeros([1, 1, 2, 2]);
    assert!(sample_clip(&Toy, &wrong, &part, &s, &cfg, &NoiseStream::new(1), &[0]).is_err());
}

#[test]
fn unit_guidance_is_plain_conditional_sampling() {
    struct CondOnly;
    impl Denoiser<f32> for CondOnly {
        fn predict(&self, xt: &Tensor<f32>, t: &[usize], drop: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
            assert!(!drop, "guidance 1.0 must not run an unconditional pass");
            Toy.predict(xt, t, false)
        }
    }
    let s = desk_schedule();
    let part = FramePartition::new(3, 1).unwrap();
    let cond = Tensor::<f32>::full([1, 1, 2, 2], 0.2);
    let cfg = SamplerConfig {
        steps: 10,
        guidance: 1.0,
        clip_denoised: true,
    };
    let noise = NoiseStream::new(8);
    let guided = sample_clip(&Toy, &cond, &part, &s, &cfg, &noise, &[1]).unwrap();
    let plain = sample_clip(&CondOnly, &cond, &part, &s, &cfg, &noise, &[1]).unwrap();
    assert_eq!(guided, plain);
    let strong = sample_clip(&Toy, &cond, &part, &s, &SamplerConfig { guidance: 3.0, ..cfg }, &noise, &[1]).unwrap();
    assert_ne!(guided, strong);
}
