//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured numbers (run with `-- --nocapture` to
//! see them; the per-test result line carries the same verdict).

use dis_core::bench::{fit_line_origin, fit_quadratic, model_gflops, run_scaling_sweep, KernelKind};
use dis_core::diffusion::{
    ddpm_sample, draw_noise, respace, training_loss, NoisePredictor, NoiseSchedule, SamplerConfig,
};
use dis_core::gradcheck::check_input_gradient;
use dis_core::model::{
    param_count, patchify, unpatchify, DisModel, ModelConfig, ModelError, REFERENCE_SIZES,
};
use dis_core::rng::Rng;
use dis_core::ssm::reference::{AttentionReference, SsmFormulaScan};
use dis_core::ssm::{discretize_zoh, flops_attention, flops_ssm};
use dis_core::tensor::{Buffer, DType, Graph, ParamId, Tensor};
use dis_core::trainer::data::two_gaussians_8x8;
use dis_core::trainer::{smoothed_tail_loss, train, TrainConfig};

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

fn xs_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::sized(3, 64);
    cfg.patch_size = 2;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.image_c = 1;
    cfg.num_classes = 2;
    cfg
}

#[test]
fn criterion_01_complexity_formulas_exact() {
    let t0 = std::time::Instant::now();
    assert_eq!(flops_ssm(64, 384, 16), 14_942_208);
    assert_eq!(flops_attention(64, 384), 40_894_464);

    // instrumented formula-scope counters at the same point
    let (j, d, n) = (64usize, 384usize, 16usize);
    let mut rng = Rng::seed(1);
    let din = 2 * d;
    let scan = SsmFormulaScan::new(din, n);
    let x: Vec<f32> = (0..j * din).map(|_| rng.normal() as f32).collect();
    let delta: Vec<f32> = (0..j * din).map(|_| 0.01 + rng.uniform() as f32 * 0.05).collect();
    let bsel: Vec<f32> = (0..j * n).map(|_| rng.normal() as f32).collect();
    let csel: Vec<f32> = (0..j * n).map(|_| rng.normal() as f32).collect();
    let (_, ssm_macs) = scan.run(&x, &delta, &bsel, &csel, j);
    assert_eq!(ssm_macs, 14_942_208);

    let att = AttentionReference::new(d, 2);
    let xa: Vec<f32> = (0..j * d).map(|_| rng.normal() as f32).collect();
    let (_, att_macs) = att.forward(&xa, j);
    assert_eq!(att_macs, 40_894_464);

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 1.0, "runtime {secs:.2}s exceeds 1s");
    println!(
        "[criterion 1] PASS: flops_ssm(64,384,16)={ssm_macs}, flops_attention(64,384)={att_macs}, instrumented==formula, {secs:.2}s"
    );
}

#[test]
fn criterion_02_linear_vs_quadratic_scaling() {
    let t0 = std::time::Instant::now();
    let j_list = [64usize, 128, 256, 512];
    let (d, n) = (384usize, 16usize);
    let records = run_scaling_sweep(&j_list, d, n, 5).unwrap();
    let xs: Vec<f64> = j_list.iter().map(|&j| j as f64).collect();
    let ssm: Vec<f64> = records
        .iter()
        .filter(|r| matches!(r.kernel, KernelKind::Ssm))
        .map(|r| r.counted_macs as f64)
        .collect();
    let att: Vec<f64> = records
        .iter()
        .filter(|r| matches!(r.kernel, KernelKind::Attention))
        .map(|r| r.counted_macs as f64)
        .collect();

    let line = fit_line_origin(&xs, &ssm);
    assert!(line.r2 > 0.9999, "ssm linear fit R^2 = {}", line.r2);
    // degree-2 fit of the ssm counts has a negligible quadratic term
    let qs = fit_quadratic(&xs, &ssm);
    let quad_share = (qs.c2 * 512.0 * 512.0).abs() / ssm[3];
    assert!(quad_share < 0.01, "ssm quadratic share {quad_share}");

    let qa = fit_quadratic(&xs, &att);
    let c2_target = 2.0 * d as f64;
    let c2_dev = (qa.c2 - c2_target).abs() / c2_target;
    assert!(qa.c2 > 0.0 && c2_dev < 0.05, "attention c2 {} vs {c2_target}", qa.c2);

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 1 min");
    println!(
        "[criterion 2] PASS: ssm R^2={:.6} (quad share {quad_share:.2e}), attention c2={:.1} vs 2D={c2_target} ({:.2}% off), {secs:.1}s",
        line.r2, qa.c2, 100.0 * c2_dev
    );
}

/// Independent brute-force oracle: textbook per-step coefficients, unrolled.
#[allow(clippy::too_many_arguments)]
fn oracle_scan(
    x: &[f64],
    delta: &[f64],
    bsel: &[f64],
    csel: &[f64],
    a: &[f64],
    d_skip: &[f64],
    j: usize,
    din: usize,
    n: usize,
) -> Vec<f64> {
    let mut h = vec![vec![0.0f64; n]; din];
    let mut y = vec![0.0f64; j * din];
    for t in 0..j {
        for d in 0..din {
            let dt = delta[t * din + d];
            let xv = x[t * din + d];
            let mut acc = 0.0;
            for k in 0..n {
                let av = a[d * n + k];
                let a_bar = (dt * av).exp();
                let b_bar = ((dt * av).exp() - 1.0) / av * bsel[t * n + k];
                h[d][k] = a_bar * h[d][k] + b_bar * xv;
                acc += csel[t * n + k] * h[d][k];
            }
            y[t * din + d] = acc + d_skip[d] * xv;
        }
    }
    y
}

#[test]
fn criterion_03_scan_matches_oracle() {
    let t0 = std::time::Instant::now();
    let mut worst = 0.0f64;
    let cases = 120usize;
    for seed in 0..cases as u64 {
        let mut rng = Rng::seed_stream(0xACCE97, seed);
        let j = 1 + rng.below(16);
        let din = 1 + rng.below(4);
        let n = 1 + rng.below(4);
        let x: Vec<f64> = (0..j * din).map(|_| rng.normal()).collect();
        let delta: Vec<f64> = (0..j * din)
            .map(|_| (0.001f64.ln() + rng.uniform() * (1.0f64.ln() - 0.001f64.ln())).exp())
            .collect();
        let bsel: Vec<f64> = (0..j * n).map(|_| rng.normal()).collect();
        let csel: Vec<f64> = (0..j * n).map(|_| rng.normal()).collect();
        let a: Vec<f64> = (0..din * n).map(|_| -(rng.normal().abs() + 0.05)).collect();
        let d_skip: Vec<f64> = (0..din).map(|_| rng.normal()).collect();

        let mut g = Graph::new(DType::F64);
        let xn = g.leaf(&Tensor::from_f64(&[j, din], x.clone()).unwrap(), false).unwrap();
        let dn = g.leaf(&Tensor::from_f64(&[j, din], delta.clone()).unwrap(), false).unwrap();
        let bn = g.leaf(&Tensor::from_f64(&[j, n], bsel.clone()).unwrap(), false).unwrap();
        let cn = g.leaf(&Tensor::from_f64(&[j, n], csel.clone()).unwrap(), false).unwrap();
        let an = g.leaf(&Tensor::from_f64(&[din, n], a.clone()).unwrap(), false).unwrap();
        let sn = g.leaf(&Tensor::from_f64(&[din], d_skip.clone()).unwrap(), false).unwrap();
        let y = g.selective_scan(xn, dn, bn, cn, an, sn).unwrap();
        let got = g.value(y).to_f64_vec();
        let want = oracle_scan(&x, &delta, &bsel, &csel, &a, &d_skip, j, din, n);
        for i in 0..got.len() {
            worst = worst.max((got[i] - want[i]).abs());
        }
    }
    assert!(worst < 1e-10, "max abs deviation {worst}");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0);
    println!("[criterion 3] PASS: {cases} random cases, max |scan - oracle| = {worst:.2e}, {secs:.1}s");
}

#[test]
fn criterion_04_zoh_discretization() {
    let (a_bar, b_bar) = discretize_zoh(-1.0, 1.0, 0.1);
    assert!((a_bar - 0.9048374).abs() < 1e-6, "{a_bar}");
    assert!((b_bar - 0.0951626).abs() < 1e-6, "{b_bar}");

    // first-order limits as delta -> 0: a_bar = 1 + delta*a + O(d^2),
    // b_bar = delta*b + O(d^2)
    let (a0, b0) = (-1.3f64, 0.7f64);
    for &dt in &[1e-3, 1e-4, 1e-5] {
        let (ab, bb) = discretize_zoh(a0, b0, dt);
        assert!((ab - (1.0 + dt * a0)).abs() < dt * dt * a0 * a0, "a_bar at {dt}");
        assert!((bb - dt * b0).abs() < dt * dt * (a0 * b0).abs(), "b_bar at {dt}");
    }
    println!("[criterion 4] PASS: zoh(-1, 1, 0.1) = ({a_bar:.7}, {b_bar:.7}); first-order limits hold");
}

#[test]
fn criterion_05_gradient_fidelity() {
    let t0 = std::time::Instant::now();
    let h = 1e-4;
    let mut rng = Rng::seed(55);
    let randt = |rng: &mut Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    };

    // every tensor operation, small random shapes, rel err < 1e-4
    let mut worst_op = 0.0f64;
    macro_rules! check {
        ($name:expr, $x:expr, $build:expr) => {{
            let rep = check_input_gradient($build, &$x, h).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{}: rel {}", $name, rep.max_rel_err);
            worst_op = worst_op.max(rep.max_rel_err);
        }};
    }
    let w = randt(&mut rng, &[4, 3]);
    let x0 = randt(&mut rng, &[2, 4]);
    check!("matmul", x0, |g: &mut Graph, x| {
        let wn = g.leaf(&w, false)?;
        let y = g.matmul(x, wn)?;
        let s = g.mul(y, y)?;
        g.sum_all(s)
    });
    let xe = randt(&mut rng, &[3, 4]);
    check!("elementwise", xe, |g: &mut Graph, x| {
        let a = g.silu(x)?;
        let b = g.softplus(a)?;
        let c = g.sigmoid(b)?;
        let d = g.exp(c)?;
        let e = g.neg(d)?;
        let f = g.affine(e, 1.5, 0.25)?;
        let s = g.mul(f, f)?;
        g.mean_all(s)
    });
    let xl = randt(&mut rng, &[3, 6]);
    let gamma = randt(&mut rng, &[6]);
    let beta = randt(&mut rng, &[6]);
    check!("layer_norm", xl, |g: &mut Graph, x| {
        let gn = g.leaf(&gamma, false)?;
        let bn = g.leaf(&beta, false)?;
        let y = g.layer_norm(x, gn, bn, 1e-5)?;
        let s = g.mul(y, y)?;
        g.sum_all(s)
    });
    let xs = randt(&mut rng, &[2, 5]);
    let wsm = randt(&mut rng, &[2, 5]);
    check!("softmax_last", xs, |g: &mut Graph, x| {
        let y = g.softmax_last(x)?;
        let wn = g.leaf(&wsm, false)?;
        let p = g.mul(y, wn)?;
        g.sum_all(p)
    });
    let (j, din, n) = (4usize, 2usize, 3usize);
    let xsc = randt(&mut rng, &[j, din]);
    let dr = randt(&mut rng, &[j, din]);
    let bs = randt(&mut rng, &[j, n]);
    let cs = randt(&mut rng, &[j, n]);
    let al = randt(&mut rng, &[din, n]);
    let dsk = randt(&mut rng, &[din]);
    check!("selective_scan", xsc, |g: &mut Graph, x| {
        let d0 = g.leaf(&dr, false)?;
        let delta = g.softplus(d0)?;
        let bn = g.leaf(&bs, false)?;
        let cn = g.leaf(&cs, false)?;
        let a0 = g.leaf(&al, false)?;
        let ea = g.exp(a0)?;
        let a = g.neg(ea)?;
        let sn = g.leaf(&dsk, false)?;
        let y = g.selective_scan(x, delta, bn, cn, a, sn)?;
        let s = g.mul(y, y)?;
        g.sum_all(s)
    });
    let xc = randt(&mut rng, &[5, 3]);
    let cw = randt(&mut rng, &[3, 4]);
    let cb = randt(&mut rng, &[3]);
    check!("dw_conv1d", xc, |g: &mut Graph, x| {
        let wn = g.leaf(&cw, false)?;
        let bn = g.leaf(&cb, false)?;
        let y = g.dw_conv1d(x, wn, bn)?;
        let s = g.mul(y, y)?;
        g.sum_all(s)
    });

    // full tiny model end to end (the noise-prediction objective), ten
    // randomly chosen parameters, rel err < 1e-3
    let mut model = DisModel::new(tiny_cfg(), DType::F64, 99).unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let mut r2 = Rng::seed(314);
    let x_img = Tensor::from_f64(&[2, 4, 4, 1], (0..32).map(|_| r2.normal() * 0.4).collect()).unwrap();
    let classes = [0usize, 1];
    let draw = draw_noise(&schedule, 2, &[4, 4, 1], DType::F64, &mut r2);

    let analytic: Vec<(ParamId, usize, f64)> = {
        let (mut g, loss, _) =
            training_loss(&model, &schedule, &x_img, Some(&classes), 0.0, &draw).unwrap();
        g.backward(loss).unwrap();
        let mut picked = Vec::new();
        let mut rp = Rng::seed(777);
        while picked.len() < 10 {
            let id = ParamId(rp.below(model.store.len()));
            if picked.iter().any(|&(p, _, _)| p == id) {
                continue;
            }
            let coord = rp.below(model.store.value(id).len());
            let ad = g.param_grad(id).map(|b| b.to_f64_vec()[coord]).unwrap_or(0.0);
            picked.push((id, coord, ad));
        }
        picked
    };
    let mut worst_model = 0.0f64;
    for &(id, coord, ad) in &analytic {
        let base = model.store.value(id).to_f64_vec();
        let mut eval_at = |v: f64| -> f64 {
            let mut vals = base.clone();
            vals[coord] = v;
            model.store.set_value(id, Buffer::F64(vals));
            let (_, _, comps) =
                training_loss(&model, &schedule, &x_img, Some(&classes), 0.0, &draw).unwrap();
            comps.simple
        };
        let fp = eval_at(base[coord] + h);
        let fm = eval_at(base[coord] - h);
        model.store.set_value(id, Buffer::F64(base));
        let fd = (fp - fm) / (2.0 * h);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-3, "param {:?} coord {coord}: ad {ad} fd {fd} rel {rel}", id);
        worst_model = worst_model.max(rel);
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "runtime {secs:.0}s exceeds 5 min");
    println!(
        "[criterion 5] PASS: per-op worst rel err {worst_op:.2e} (< 1e-4), end-to-end worst {worst_model:.2e} (< 1e-3), {secs:.1}s"
    );
}

#[test]
fn criterion_06_schedule_and_marginal() {
    let t0 = std::time::Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    assert_eq!(s.betas[0], 1e-4);
    assert_eq!(s.betas[999], 2e-2);
    assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-12);
    for t in 1..1000 {
        assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }

    // composed kernel vs closed-form marginal, 1e5 chains, 3 sigma
    let x0 = 0.65f64;
    let n = 100_000usize;
    let steps = 5usize;
    let mut rng = Rng::seed(66);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = x0;
        for t in 0..steps {
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
    assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean}");
    assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0);
    println!(
        "[criterion 6] PASS: endpoints exact, abar_1={:.4}, monotone; MC mean dev {:.2} se, var dev {:.2} se, {secs:.1}s",
        s.alpha_bars[0],
        (mean - want_mean).abs() / se_mean,
        (var - want_var).abs() / se_var
    );
}

#[test]
fn criterion_07_architecture_contracts() {
    // patchify/unpatchify exact inverse
    let mut rng = Rng::seed(7);
    for &(hh, ww, cc, p) in &[(8usize, 8usize, 1usize, 2usize), (32, 32, 3, 4), (16, 8, 2, 8)] {
        let vals: Vec<f32> = (0..hh * ww * cc).map(|_| rng.normal() as f32).collect();
        let img = Tensor::from_f32(&[hh, ww, cc], vals).unwrap();
        let back = unpatchify(&patchify(&img, p).unwrap(), p, hh, ww, cc).unwrap();
        assert_eq!(img, back);
    }

    // 25 blocks: 12 shallow / 1 middle / 12 deep with exactly 12 fusions
    let mut cfg25 = ModelConfig::sized(25, 8);
    cfg25.ssm_dim = 2;
    cfg25.image_h = 8;
    cfg25.image_w = 8;
    cfg25.image_c = 1;
    cfg25.patch_size = 2;
    let m25 = DisModel::new(cfg25.clone(), DType::F32, 0).unwrap();
    let fusions = m25
        .store
        .ids()
        .filter(|&id| m25.store.name(id).ends_with(".skip.w"))
        .count();
    assert_eq!(fusions, 12);
    for i in 13..25 {
        assert!(m25.store.find(&format!("blocks.{i}.skip.w")).is_some());
    }
    assert!(m25.store.find("blocks.12.skip.w").is_none(), "middle block has no fusion");
    assert!(m25.store.find("blocks.11.skip.w").is_none(), "shallow blocks have no fusion");

    // concat skip at documented init == no skip
    let mut c1 = tiny_cfg();
    c1.skip_mode = dis_core::model::SkipMode::Concat;
    let mut c2 = tiny_cfg();
    c2.skip_mode = dis_core::model::SkipMode::None;
    let ma = DisModel::new(c1, DType::F64, 3).unwrap();
    let mb = DisModel::new(c2, DType::F64, 3).unwrap();
    let xi = Tensor::from_f64(&[1, 4, 4, 1], (0..16).map(|v| v as f64 * 0.1 - 0.8).collect()).unwrap();
    let (ea, _) = ma.predict(&xi, &[7], Some(&[1])).unwrap();
    let (eb, _) = mb.predict(&xi, &[7], Some(&[1])).unwrap();
    let (va, vb) = (ea.to_f64_vec(), eb.to_f64_vec());
    for i in 0..va.len() {
        assert!((va[i] - vb[i]).abs() < 1e-12);
    }

    // condition tokens present through the blocks, absent at decode
    let cfg = tiny_cfg();
    let model = DisModel::new(cfg.clone(), DType::F32, 5).unwrap();
    assert_eq!(cfg.n_cond(), 2);
    assert_eq!(cfg.seq_len(), cfg.tokens() + 2);
    let pos = model.store.find("pos_embed").unwrap();
    assert_eq!(model.store.shape(pos), &[cfg.seq_len(), cfg.hidden_dim]);
    let x = Tensor::zeros(DType::F32, &[1, 4, 4, 1]);
    let (eps, v) = model.predict(&x, &[3], Some(&[0])).unwrap();
    assert_eq!(eps.shape(), &[1, 4, 4, 1], "decoded output drops condition tokens");
    assert_eq!(v.unwrap().shape(), &[1, 4, 4, 1]);
    let (eps_other, _) = model.predict(&x, &[3], Some(&[1])).unwrap();
    assert_ne!(eps.to_f64_vec(), eps_other.to_f64_vec(), "class token reaches the output");

    // guidance scale 1 reduces exactly to the conditional prediction
    struct ClassSensitive;
    impl NoisePredictor for ClassSensitive {
        fn geometry(&self) -> (usize, usize, usize) {
            (2, 2, 1)
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn predict(
            &self,
            x: &Tensor,
            _t: usize,
            classes: Option<&[usize]>,
        ) -> Result<(Tensor, Option<Tensor>), ModelError> {
            let n = x.shape()[0];
            let mut eps = Vec::new();
            for i in 0..n {
                let c = classes.map(|cs| cs[i]).unwrap_or(9) as f32;
                eps.extend_from_slice(&[0.1 * c, -0.2 * c, 0.05 * c, 0.3 * c]);
            }
            Ok((Tensor::from_f32(x.shape(), eps).unwrap(), None))
        }
    }
    let s = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
    let sampler = SamplerConfig {
        num_steps: 10,
        guidance_scale: 1.0,
        seed: 11,
        clip_x0: Some((-1.0, 1.0)),
    };
    let guided = ddpm_sample(&ClassSensitive, &s, 2, Some(vec![1, 0]), &sampler).unwrap();
    // reference recursion: conditional prediction only, same noise streams
    let rs = respace(&s, 10).unwrap();
    let mut rngs: Vec<Rng> = (0..2).map(|i| Rng::seed_stream(11, 0x5A17_0000 + i as u64)).collect();
    let mut x = vec![0.0f64; 8];
    for (i, chunk) in x.chunks_mut(4).enumerate() {
        for v in chunk.iter_mut() {
            *v = rngs[i].normal();
        }
    }
    let d = &rs.sched;
    let classes = [1usize, 0];
    for i in (0..10).rev() {
        for smp in 0..2 {
            let eps_vals = [0.1, -0.2, 0.05, 0.3].map(|e| e * classes[smp] as f64);
            for q in 0..4 {
                let idx = smp * 4 + q;
                let e = eps_vals[q] as f32 as f64;
                let x0 = ((x[idx] - (1.0 - d.alpha_bars[i]).sqrt() * e) / d.alpha_bars[i].sqrt())
                    .clamp(-1.0, 1.0);
                let mean = d.posterior_coef_x0[i] * x0 + d.posterior_coef_xt[i] * x[idx];
                x[idx] = if i > 0 {
                    mean + d.posterior_variance[i].max(d.posterior_variance[1]).sqrt()
                        * rngs[smp].normal()
                } else {
                    mean
                };
            }
        }
    }
    let got = guided.to_f64_vec();
    for i in 0..8 {
        assert!(
            (got[i] - x[i]).abs() < 1e-4,
            "guided[{i}] {} vs conditional-only {}",
            got[i],
            x[i]
        );
    }
    println!("[criterion 7] PASS: inverse patchify, 12/1/12 grouping with 12 fusions, identity-init skip, token lifecycle, cfg-scale-1 identity");
}

#[test]
fn criterion_08_parameter_and_gflops_bands() {
    let t0 = std::time::Instant::now();
    let mut lines = Vec::new();
    for r in REFERENCE_SIZES {
        let cfg = ModelConfig::sized(r.blocks, r.hidden_dim);
        let params = param_count(&cfg) as f64 / 1e6;
        let p_dev = (params - r.params_millions) / r.params_millions;
        let rep = model_gflops(&cfg, r.name).unwrap();
        let g_dev = (rep.measured_gflops - r.gflops) / r.gflops;
        lines.push(format!(
            "  {:<7} params {params:>7.1}M vs {:>6.1}M ({:+.1}%)   gflops {:>6.3} vs {:>5.2} ({:+.1}%)   total {:>7.3}G",
            r.name,
            r.params_millions,
            100.0 * p_dev,
            rep.measured_gflops,
            r.gflops,
            100.0 * g_dev,
            rep.total_gflops
        ));
        assert!(
            p_dev.abs() <= 0.20,
            "{}: parameter deviation {:+.1}% outside +/-20%",
            r.name,
            100.0 * p_dev
        );
        assert!(
            g_dev.abs() <= 0.25,
            "{}: gflops deviation {:+.1}% outside +/-25%",
            r.name,
            100.0 * g_dev
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    println!("[criterion 8] PASS ({secs:.0}s):");
    for l in lines {
        println!("{l}");
    }
}

fn quadrant_energy(mean_img: &[f64], top_left: bool) -> f64 {
    let (y0, x0) = if top_left { (0, 0) } else { (4, 4) };
    let mut e = 0.0;
    for y in y0..y0 + 4 {
        for x in x0..x0 + 4 {
            e += mean_img[y * 8 + x] + 1.0;
        }
    }
    e
}

#[test]
fn criterion_09_toy_training_learns_both_classes() {
    let t0 = std::time::Instant::now();
    let baseline = 1.0; // zero-predictor loss per element on unit noise
    let mut summaries = Vec::new();
    for seed in [101u64, 202, 303] {
        // The published recipe's EMA horizon is a small fraction of its run
        // length; matched proportionally here (decay 0.99 over 2000 steps).
        let tcfg = TrainConfig {
            steps: 2000,
            batch_size: 64,
            checkpoint_every: 0,
            ema_decay: 0.99,
            seed,
            ..TrainConfig::default()
        };
        let data = two_gaussians_8x8(512, seed);
        let out = train(xs_cfg(), &tcfg, &data, None).unwrap();
        let tail = smoothed_tail_loss(&out.metrics, 100);
        assert!(
            tail < baseline * 0.7,
            "seed {seed}: smoothed tail loss {tail:.4} not 30% below {baseline}"
        );

        // 250-step sampling from the EMA weights, both classes
        let mut model = out.model;
        out.ema.apply_to(&mut model.store);
        let schedule = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        // the model trains with condition dropout, so sample with guidance
        let sampler = SamplerConfig {
            num_steps: 250,
            guidance_scale: 2.0,
            seed,
            clip_x0: Some((-1.0, 1.0)),
        };
        let per_class = 16usize;
        let mut ratios = Vec::new();
        for class in 0..2usize {
            let imgs = ddpm_sample(
                &model,
                &schedule,
                per_class,
                Some(vec![class; per_class]),
                &sampler,
            )
            .unwrap();
            let flat = imgs.to_f64_vec();
            let mut mean_img = vec![0.0f64; 64];
            for s in 0..per_class {
                for q in 0..64 {
                    mean_img[q] += flat[s * 64 + q] / per_class as f64;
                }
            }
            let tl = quadrant_energy(&mean_img, true);
            let br = quadrant_energy(&mean_img, false);
            let (own, other) = if class == 0 { (tl, br) } else { (br, tl) };
            assert!(
                own > other,
                "seed {seed} class {class}: conditioned quadrant {own:.3} vs {other:.3}"
            );
            ratios.push(own / other.max(1e-9));
        }
        summaries.push(format!(
            "seed {seed}: tail loss {tail:.4}, quadrant ratios c0 {:.2} c1 {:.2}",
            ratios[0], ratios[1]
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "runtime {secs:.0}s exceeds 30 min");
    println!("[criterion 9] PASS ({:.1} min):", secs / 60.0);
    for s in summaries {
        println!("  {s}");
    }
}

#[test]
fn criterion_10_byte_determinism() {
    let t0 = std::time::Instant::now();
    let dir = std::env::temp_dir().join(format!("dis_accept10_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);

    let mut cfg = xs_cfg();
    cfg.hidden_dim = 32;
    let tcfg = TrainConfig {
        steps: 30,
        batch_size: 16,
        checkpoint_every: 20,
        seed: 99,
        ..TrainConfig::default()
    };
    let data = two_gaussians_8x8(64, 4);
    let (da, db) = (dir.join("a"), dir.join("b"));
    train(cfg.clone(), &tcfg, &data, Some(&da)).unwrap();
    train(cfg, &tcfg, &data, Some(&db)).unwrap();

    // metrics CSVs: byte-identical in every state column; the wall-clock
    // column is physical timing and is excluded from the comparison
    let strip_wall = |p: &std::path::Path| {
        std::fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map(|(h, _)| h.to_string()).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_wall(&da), strip_wall(&db), "metrics differ");

    for name in ["ckpt_000020.dis", "final.dis"] {
        assert_eq!(
            std::fs::read(da.join(name)).unwrap(),
            std::fs::read(db.join(name)).unwrap(),
            "{name} differs"
        );
    }

    // sampling twice from the same checkpoint: identical images
    let loaded = dis_core::trainer::checkpoint::load(&da.join("final.dis")).unwrap();
    let schedule = NoiseSchedule::linear(
        loaded.schedule.timesteps,
        loaded.schedule.beta_start,
        loaded.schedule.beta_end,
    )
    .unwrap();
    let model = loaded.model_with_ema();
    let sampler = SamplerConfig {
        num_steps: 25,
        guidance_scale: 1.5,
        seed: 7,
        clip_x0: Some((-1.0, 1.0)),
    };
    let img1 = ddpm_sample(&model, &schedule, 3, Some(vec![0, 1, 0]), &sampler).unwrap();
    let img2 = ddpm_sample(&model, &schedule, 3, Some(vec![0, 1, 0]), &sampler).unwrap();
    assert_eq!(img1, img2);

    std::fs::remove_dir_all(&dir).unwrap();
    println!(
        "[criterion 10] PASS ({:.1}s): repeated runs byte-identical (metrics modulo the wall-clock column), checkpoints and images bit-exact",
        t0.elapsed().as_secs_f64()
    );
}
