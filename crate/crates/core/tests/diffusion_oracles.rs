//! Monte-Carlo and stub-model oracles for the diffusion process and sampler.

use std::cell::RefCell;

use dis_core::diffusion::{
    ddpm_sample, draw_noise, p_sample_step, q_sample, respace, training_loss, GraphDenoiser,
    NoisePredictor, NoiseSchedule, SamplerConfig,
};
use dis_core::model::{DisModel, ModelConfig, ModelError};
use dis_core::rng::Rng;
use dis_core::tensor::{Buffer, DType, Graph, NodeId, Tensor};

fn sched1000() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
}

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::sized(3, 8);
    cfg.ssm_dim = 4;
    cfg.patch_size = 2;
    cfg.image_h = 4;
    cfg.image_w = 4;
    cfg.image_c = 1;
    cfg.num_classes = 2;
    cfg
}

/// Composing the single-step kernels q(x_t | x_{t-1}) five times reproduces
/// the closed-form marginal in mean and variance (1e5 chains, 3 standard
/// errors).
#[test]
fn composed_kernel_matches_closed_form_marginal() {
    let s = sched1000();
    let x0 = 0.7f64;
    let n = 100_000usize;
    let steps = 5usize;
    let mut rng = Rng::seed(2024);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let mut x = x0;
        for t in 0..steps {
            // x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps
            x = s.alphas[t].sqrt() * x + s.betas[t].sqrt() * rng.normal();
        }
        sum += x;
        sumsq += x * x;
    }
    let mean = sum / n as f64;
    let var = sumsq / n as f64 - mean * mean;
    let want_mean = s.alpha_bars[steps - 1].sqrt() * x0;
    let want_var = 1.0 - s.alpha_bars[steps - 1];
    let se_mean = want_var.sqrt() / (n as f64).sqrt();
    let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!(
        (mean - want_mean).abs() < 3.0 * se_mean,
        "mean {mean} vs {want_mean} (3se {})",
        3.0 * se_mean
    );
    assert!(
        (var - want_var).abs() < 3.0 * se_var,
        "var {var} vs {want_var} (3se {})",
        3.0 * se_var
    );

    // cross-check against q_sample's closed form directly
    let x0t = Tensor::from_f64(&[1], vec![x0]).unwrap();
    let e = Tensor::from_f64(&[1], vec![1.0]).unwrap();
    let xt = q_sample(&s, &x0t, steps - 1, &e).unwrap().to_f64_vec()[0];
    assert!((xt - (want_mean + want_var.sqrt())).abs() < 1e-12);
}

/// Stub denoiser emitting fixed tensors as graph constants.
struct ConstDenoiser {
    cfg: ModelConfig,
    eps: RefCell<Option<Tensor>>, // if none, zeros
}

impl GraphDenoiser for ConstDenoiser {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn forward_on(
        &self,
        g: &mut Graph,
        x: NodeId,
        _t: &[usize],
        _classes: Option<&[usize]>,
    ) -> Result<(NodeId, Option<NodeId>), ModelError> {
        let shape = g.shape(x).to_vec();
        let eps = match self.eps.borrow().as_ref() {
            Some(t) => g.constant(&t.cast(g.dtype())).unwrap(),
            None => {
                let z = Tensor::zeros(g.dtype(), &shape);
                g.constant(&z).unwrap()
            }
        };
        let v = if self.cfg.learn_sigma {
            let numel: usize = shape.iter().product();
            let m1 = Tensor::new(shape.clone(), Buffer::from_f64(g.dtype(), &vec![-1.0; numel]))
                .unwrap();
            Some(g.constant(&m1).unwrap())
        } else {
            None
        };
        Ok((eps, v))
    }
}

#[test]
fn perfect_predictor_has_zero_simple_loss() {
    let s = sched1000();
    let mut cfg = tiny_cfg();
    cfg.learn_sigma = false;
    let stub = ConstDenoiser {
        cfg,
        eps: RefCell::new(None),
    };
    let mut rng = Rng::seed(5);
    let x0 = Tensor::from_f64(&[2, 4, 4, 1], (0..32).map(|_| rng.normal() * 0.3).collect())
        .unwrap();
    let draw = draw_noise(&s, 2, &[4, 4, 1], DType::F64, &mut rng);
    *stub.eps.borrow_mut() = Some(draw.eps.clone());
    let (_, _, comps) = training_loss(&stub, &s, &x0, None, 0.0, &draw).unwrap();
    assert_eq!(comps.simple, 0.0);
    assert_eq!(comps.total, 0.0);
}

#[test]
fn zero_predictor_loss_is_unit_noise_energy() {
    // L_simple of the zero predictor estimates E||eps||^2 = 1 per element;
    // accumulate > 1e5 elements and gate at 3 standard errors of chi^2.
    let s = sched1000();
    let mut cfg = tiny_cfg();
    cfg.learn_sigma = false;
    let stub = ConstDenoiser {
        cfg,
        eps: RefCell::new(None),
    };
    let mut rng = Rng::seed(6);
    let batch = 64usize;
    let per = 16usize;
    let rounds = 110usize; // 112,640 elements total
    let mut acc = 0.0;
    let total_elems = (batch * per * rounds) as f64;
    for _ in 0..rounds {
        let x0 = Tensor::zeros(DType::F64, &[batch, 4, 4, 1]);
        let draw = draw_noise(&s, batch, &[4, 4, 1], DType::F64, &mut rng);
        let (_, _, comps) = training_loss(&stub, &s, &x0, None, 0.0, &draw).unwrap();
        acc += comps.simple * (batch * per) as f64;
    }
    let mean = acc / total_elems;
    let se = (2.0 / total_elems).sqrt(); // var of chi2_1 is 2
    assert!(
        (mean - 1.0).abs() < 3.0 * se,
        "mean {mean}, 3se {}",
        3.0 * se
    );
}

#[test]
fn untrained_model_loss_finite_positive_and_vlb_present() {
    let s = sched1000();
    let model = DisModel::new(tiny_cfg(), DType::F32, 3).unwrap();
    let mut rng = Rng::seed(7);
    let x0 = Tensor::from_f32(
        &[4, 4, 4, 1],
        (0..64).map(|_| rng.normal() as f32 * 0.5).collect(),
    )
    .unwrap();
    let draw = draw_noise(&s, 4, &[4, 4, 1], DType::F32, &mut rng);
    let (_, _, comps) =
        training_loss(&model, &s, &x0, Some(&[0, 1, 2, 0]), 1e-3, &draw).unwrap();
    assert!(comps.total.is_finite() && comps.total > 0.0);
    assert!(comps.simple > 0.0);
    assert!(comps.vlb.is_finite());
    assert!((comps.total - (comps.simple + 1e-3 * comps.vlb)).abs() < 1e-6);
}

/// Tensor-level stub: predicts eps = 0 and v = -1, counting calls and
/// recording which class rows were requested.
struct ZeroPredictor {
    h: usize,
    w: usize,
    c: usize,
    num_classes: usize,
    calls: RefCell<usize>,
    saw_null: RefCell<bool>,
}

impl ZeroPredictor {
    fn new(h: usize, w: usize, c: usize, num_classes: usize) -> Self {
        ZeroPredictor {
            h,
            w,
            c,
            num_classes,
            calls: RefCell::new(0),
            saw_null: RefCell::new(false),
        }
    }
}

impl NoisePredictor for ZeroPredictor {
    fn geometry(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict(
        &self,
        x: &Tensor,
        _t: usize,
        classes: Option<&[usize]>,
    ) -> Result<(Tensor, Option<Tensor>), ModelError> {
        *self.calls.borrow_mut() += 1;
        if let Some(ids) = classes {
            if ids.iter().any(|&id| id == self.num_classes) {
                *self.saw_null.borrow_mut() = true;
            }
        }
        let n: usize = x.shape().iter().product();
        let eps = Tensor::zeros(DType::F32, x.shape());
        let v = Tensor::new(x.shape().to_vec(), Buffer::F32(vec![-1.0; n])).unwrap();
        Ok((eps, Some(v)))
    }
}

/// Schedule-only oracle: the same reverse recursion written independently,
/// with the model output pinned to eps = 0, v = -1 (so variance is the
/// posterior one).
fn schedule_only_oracle(s: &NoiseSchedule, num_steps: usize, seed: u64, per: usize) -> Vec<f64> {
    let rs = respace(s, num_steps).unwrap();
    let d = &rs.sched;
    let mut rng = Rng::seed_stream(seed, 0x5A17_0000);
    let mut x: Vec<f64> = (0..per).map(|_| rng.normal()).collect();
    for i in (0..num_steps).rev() {
        for v in x.iter_mut() {
            let abar = d.alpha_bars[i];
            let x0 = (*v / abar.sqrt()).clamp(-1.0, 1.0);
            let mean = d.posterior_coef_x0[i] * x0 + d.posterior_coef_xt[i] * *v;
            *v = if i > 0 {
                mean + d.posterior_variance[i].max(d.posterior_variance[1]).sqrt() * rng.normal()
            } else {
                mean
            };
        }
    }
    x
}

#[test]
fn sampler_with_identity_stub_matches_schedule_oracle() {
    let s = sched1000();
    let stub = ZeroPredictor::new(2, 2, 1, 0);
    let cfg = SamplerConfig {
        num_steps: 50,
        guidance_scale: 1.0,
        seed: 9,
        clip_x0: Some((-1.0, 1.0)),
    };
    let out = ddpm_sample(&stub, &s, 1, None, &cfg).unwrap();
    let got = out.to_f64_vec();
    let want = schedule_only_oracle(&s, 50, 9, 4);
    for i in 0..4 {
        // f32 casts inside the sampler x-state round-trip; the oracle stays
        // in f64, so agreement is approximate but tight
        assert!(
            (got[i] - want[i]).abs() < 1e-4,
            "{} vs {}",
            got[i],
            want[i]
        );
    }
    assert_eq!(*stub.calls.borrow(), 50);
}

#[test]
fn sampling_is_seed_deterministic() {
    let s = sched1000();
    let stub = ZeroPredictor::new(2, 2, 1, 3);
    let cfg = SamplerConfig {
        num_steps: 25,
        guidance_scale: 1.0,
        seed: 123,
        clip_x0: Some((-1.0, 1.0)),
    };
    let a = ddpm_sample(&stub, &s, 3, Some(vec![0, 1, 2]), &cfg).unwrap();
    let b = ddpm_sample(&stub, &s, 3, Some(vec![0, 1, 2]), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn guidance_one_single_call_and_no_null_rows() {
    let s = sched1000();
    let stub = ZeroPredictor::new(2, 2, 1, 3);
    let cfg = SamplerConfig {
        num_steps: 20,
        guidance_scale: 1.0,
        seed: 1,
        clip_x0: Some((-1.0, 1.0)),
    };
    ddpm_sample(&stub, &s, 2, Some(vec![0, 1]), &cfg).unwrap();
    assert_eq!(*stub.calls.borrow(), 20, "one call per step at scale 1");
    assert!(!*stub.saw_null.borrow(), "null row untouched at scale 1");

    let stub2 = ZeroPredictor::new(2, 2, 1, 3);
    let cfg2 = SamplerConfig {
        guidance_scale: 2.5,
        ..cfg
    };
    ddpm_sample(&stub2, &s, 2, Some(vec![0, 1]), &cfg2).unwrap();
    assert_eq!(*stub2.calls.borrow(), 40, "two calls per step at scale > 1");
    assert!(*stub2.saw_null.borrow());
}

#[test]
fn guidance_one_invariant_to_null_row_contents() {
    // With a real conditional model, scale-1 sampling must not depend on the
    // null embedding row.
    let s = sched1000();
    let model = DisModel::new(tiny_cfg(), DType::F32, 21).unwrap();
    let cfg = SamplerConfig {
        num_steps: 8,
        guidance_scale: 1.0,
        seed: 4,
        clip_x0: Some((-1.0, 1.0)),
    };
    let a = ddpm_sample(&model, &s, 2, Some(vec![0, 1]), &cfg).unwrap();

    let mut model2 = DisModel::new(tiny_cfg(), DType::F32, 21).unwrap();
    let id = model2.store.find("class_embed").unwrap();
    let mut vals = model2.store.value(id).to_f64_vec();
    let d = model2.config.hidden_dim;
    let null_row = model2.config.null_class();
    for q in 0..d {
        vals[null_row * d + q] = 1e3; // garbage in the null row
    }
    model2
        .store
        .set_value(id, Buffer::from_f64(DType::F32, &vals));
    let b = ddpm_sample(&model2, &s, 2, Some(vec![0, 1]), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn v_endpoints_interpolate_posterior_and_beta() {
    // v = -1 -> variance beta_tilde; v = +1 -> beta_t. Recover sigma from a
    // single step with a known noise draw.
    let s = sched1000();
    let rs = respace(&s, 100).unwrap();
    let i = 57usize;

    struct VStub {
        v: f32,
    }
    impl NoisePredictor for VStub {
        fn geometry(&self) -> (usize, usize, usize) {
            (1, 1, 1)
        }
        fn num_classes(&self) -> usize {
            0
        }
        fn predict(
            &self,
            x: &Tensor,
            _t: usize,
            _c: Option<&[usize]>,
        ) -> Result<(Tensor, Option<Tensor>), ModelError> {
            let n: usize = x.shape().iter().product();
            Ok((
                Tensor::zeros(DType::F32, x.shape()),
                Some(Tensor::new(x.shape().to_vec(), Buffer::F32(vec![self.v; n])).unwrap()),
            ))
        }
    }

    let cfg = SamplerConfig {
        num_steps: 100,
        guidance_scale: 1.0,
        seed: 0,
        clip_x0: None,
    };
    let x_start = 0.42f64;
    let run = |v: f32| -> (f64, f64) {
        let stub = VStub { v };
        let mut x = vec![x_start];
        let mut rngs = vec![Rng::seed(777)];
        let z = Rng::seed(777).normal();
        p_sample_step(&stub, &rs, i, &mut x, 1, None, &cfg, &mut rngs).unwrap();
        (x[0], z)
    };
    // mean is identical in both runs (same eps); extract sigma via z
    let d = &rs.sched;
    let x0 = x_start / d.alpha_bars[i].sqrt();
    let mean = d.posterior_coef_x0[i] * x0 + d.posterior_coef_xt[i] * x_start;
    let (xa, z) = run(-1.0);
    let (xb, _) = run(1.0);
    let sigma_a = (xa - mean) / z;
    let sigma_b = (xb - mean) / z;
    assert!(
        (sigma_a * sigma_a - d.posterior_variance[i]).abs() < 1e-9,
        "v=-1 variance {} vs {}",
        sigma_a * sigma_a,
        d.posterior_variance[i]
    );
    assert!(
        (sigma_b * sigma_b - d.betas[i]).abs() < 1e-9,
        "v=+1 variance {} vs {}",
        sigma_b * sigma_b,
        d.betas[i]
    );
}

#[test]
fn final_step_adds_no_noise() {
    let s = sched1000();
    let rs = respace(&s, 50).unwrap();
    let stub = ZeroPredictor::new(2, 2, 1, 0);
    let cfg = SamplerConfig {
        num_steps: 50,
        guidance_scale: 1.0,
        seed: 0,
        clip_x0: Some((-1.0, 1.0)),
    };
    let start: Vec<f64> = vec![0.3, -0.2, 0.9, 0.0];
    let mut xa = start.clone();
    let mut xb = start;
    let mut ra = vec![Rng::seed(1)];
    let mut rb = vec![Rng::seed(999_999)];
    p_sample_step(&stub, &rs, 0, &mut xa, 1, None, &cfg, &mut ra).unwrap();
    p_sample_step(&stub, &rs, 0, &mut xb, 1, None, &cfg, &mut rb).unwrap();
    assert_eq!(xa, xb);
}

#[test]
fn respaced_full_equals_direct_sampling_bitwise() {
    let s = NoiseSchedule::linear(40, 1e-4, 2e-2).unwrap();
    let stub = ZeroPredictor::new(2, 2, 1, 0);
    let full = SamplerConfig {
        num_steps: 40,
        guidance_scale: 1.0,
        seed: 5,
        clip_x0: Some((-1.0, 1.0)),
    };
    let a = ddpm_sample(&stub, &s, 2, None, &full).unwrap();
    // the unrespaced path IS num_steps == T; assert the derived schedule is
    // bitwise the base schedule and sampling reproduces
    let rs = respace(&s, 40).unwrap();
    assert_eq!(rs.sched, s);
    let b = ddpm_sample(&stub, &s, 2, None, &full).unwrap();
    assert_eq!(a, b);
}
