//! Forward noising process, training losses, and ancestral sampling with
//! learned covariance and classifier-free guidance.
//!
//! All schedule tables are precomputed in 64-bit arithmetic; the sampler's
//! per-step posterior math also runs in 64-bit with model calls in the
//! model's own precision.

use thiserror::Error;

use crate::model::{DisModel, ModelConfig, ModelError};
use crate::rng::Rng;
use crate::tensor::{Buffer, DType, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} out of range (T = {timesteps})")]
    TimestepRange { t: usize, timesteps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Precomputed noising schedule: `beta_t`, `alpha_t = 1 - beta_t` (exact),
/// cumulative products, and the reverse-posterior coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)`; zero at t=0.
    pub posterior_variance: Vec<f64>,
    /// log of the above with the t=0 entry clipped to the t=1 value.
    pub posterior_log_variance: Vec<f64>,
    /// coefficient of the predicted x0 in the posterior mean
    pub posterior_coef_x0: Vec<f64>,
    /// coefficient of x_t in the posterior mean
    pub posterior_coef_xt: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>) -> NoiseSchedule {
        let t_max = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Self::from_parts(betas, alphas, alpha_bars)
    }

    fn from_parts(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> NoiseSchedule {
        let t_max = betas.len();
        let abar_prev = |t: usize| if t == 0 { 1.0 } else { alpha_bars[t - 1] };
        let mut posterior_variance = Vec::with_capacity(t_max);
        let mut posterior_coef_x0 = Vec::with_capacity(t_max);
        let mut posterior_coef_xt = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let ab_prev = abar_prev(t);
            let denom = 1.0 - alpha_bars[t];
            posterior_variance.push(betas[t] * (1.0 - ab_prev) / denom);
            posterior_coef_x0.push(ab_prev.sqrt() * betas[t] / denom);
            posterior_coef_xt.push(alphas[t].sqrt() * (1.0 - ab_prev) / denom);
        }
        let floor = if t_max > 1 {
            posterior_variance[1]
        } else {
            betas[0]
        };
        let posterior_log_variance = posterior_variance
            .iter()
            .map(|&v| v.max(floor).ln())
            .collect();
        NoiseSchedule {
            timesteps: t_max,
            betas,
            alphas,
            alpha_bars,
            posterior_variance,
            posterior_log_variance,
            posterior_coef_x0,
            posterior_coef_xt,
        }
    }

    /// Variances linearly spaced from `beta_1` to `beta_t` inclusive.
    pub fn linear(timesteps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
        if timesteps < 2 || !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need T >= 2 and 0 < beta_1 < beta_T < 1, got T={timesteps}, {beta_1}, {beta_t}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (timesteps - 1) as f64)
            .collect();
        Ok(NoiseSchedule::from_betas(betas))
    }
}

/// A strictly increasing subset of the base timesteps with the derived
/// schedule over it. With `num_steps == T` this reproduces the base schedule
/// bit-for-bit.
#[derive(Debug, Clone)]
pub struct RespacedSchedule {
    /// original timestep fed to the model at each respaced index
    pub base_timesteps: Vec<usize>,
    pub sched: NoiseSchedule,
}

pub fn respace(base: &NoiseSchedule, num_steps: usize) -> Result<RespacedSchedule> {
    let t_max = base.timesteps;
    if num_steps == 0 || num_steps > t_max {
        return Err(DiffusionError::Schedule(format!(
            "num_steps {num_steps} must be in 1..={t_max}"
        )));
    }
    let taus: Vec<usize> = (0..num_steps).map(|i| i * t_max / num_steps).collect();
    // strictly increasing by construction (i*T/S is nondecreasing and S <= T
    // makes consecutive values distinct); first entry is t = 0.
    debug_assert!(taus.windows(2).all(|w| w[0] < w[1]));

    let mut betas = Vec::with_capacity(num_steps);
    let mut alpha_bars = Vec::with_capacity(num_steps);
    for (i, &tau) in taus.iter().enumerate() {
        alpha_bars.push(base.alpha_bars[tau]);
        if i == 0 {
            betas.push(base.betas[tau]);
        } else if taus[i - 1] + 1 == tau {
            // consecutive base steps: reuse the exact base coefficient
            betas.push(base.betas[tau]);
        } else {
            betas.push(1.0 - base.alpha_bars[tau] / base.alpha_bars[taus[i - 1]]);
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    Ok(RespacedSchedule {
        base_timesteps: taus,
        sched: NoiseSchedule::from_parts(betas, alphas, alpha_bars),
    })
}

/// Closed-form forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if t >= schedule.timesteps {
        return Err(DiffusionError::TimestepRange {
            t,
            timesteps: schedule.timesteps,
        });
    }
    if x0.shape() != eps.shape() || x0.dtype() != eps.dtype() {
        return Err(DiffusionError::Tensor(TensorError::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }));
    }
    let c0 = schedule.alpha_bars[t].sqrt();
    let c1 = (1.0 - schedule.alpha_bars[t]).sqrt();
    let data = match (x0.data(), eps.data()) {
        (Buffer::F32(a), Buffer::F32(b)) => {
            let (c0, c1) = (c0 as f32, c1 as f32);
            Buffer::F32(a.iter().zip(b).map(|(&x, &e)| c0 * x + c1 * e).collect())
        }
        (Buffer::F64(a), Buffer::F64(b)) => {
            Buffer::F64(a.iter().zip(b).map(|(&x, &e)| c0 * x + c1 * e).collect())
        }
        _ => unreachable!("dtype equality checked above"),
    };
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

/// Anything that can put a noise prediction on a graph; the full model
/// implements it, tests substitute stubs.
pub trait GraphDenoiser {
    fn config(&self) -> &ModelConfig;
    fn forward_on(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: &[usize],
        classes: Option<&[usize]>,
    ) -> std::result::Result<(NodeId, Option<NodeId>), ModelError>;
}

impl GraphDenoiser for DisModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn forward_on(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: &[usize],
        classes: Option<&[usize]>,
    ) -> std::result::Result<(NodeId, Option<NodeId>), ModelError> {
        DisModel::forward_on(self, g, x, t, classes)
    }
}

/// Per-batch noise draw: one uniform timestep per sample plus a standard
/// normal field, separated from the loss so oracles can fix it.
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

pub fn draw_noise(
    schedule: &NoiseSchedule,
    batch: usize,
    elem_shape: &[usize],
    dtype: DType,
    rng: &mut Rng,
) -> NoiseDraw {
    let t: Vec<usize> = (0..batch).map(|_| rng.below(schedule.timesteps)).collect();
    let per: usize = elem_shape.iter().product();
    let vals: Vec<f64> = (0..batch * per).map(|_| rng.normal()).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(elem_shape);
    NoiseDraw {
        t,
        eps: Tensor::new(shape, Buffer::from_f64(dtype, &vals)).unwrap(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub simple: f64,
    pub vlb: f64,
}

/// Mean-squared noise-prediction loss, plus (for learned covariance) the
/// variational term weighted by `vlb_lambda`. The variational term's mean
/// uses a detached noise prediction, so its gradient reaches only the
/// covariance head. Returns the graph, the total-loss node, and evaluated
/// components.
pub fn training_loss(
    model: &dyn GraphDenoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    classes: Option<&[usize]>,
    vlb_lambda: f64,
    draw: &NoiseDraw,
) -> Result<(Graph, NodeId, LossComponents)> {
    let sh = x0.shape();
    if sh.len() != 4 {
        return Err(DiffusionError::Model(ModelError::Config(format!(
            "training batch must be [B, H, W, C], got {sh:?}"
        ))));
    }
    let batch = sh[0];
    let per: usize = sh[1..].iter().product();
    let dtype = x0.dtype();
    for &t in &draw.t {
        if t >= schedule.timesteps {
            return Err(DiffusionError::TimestepRange {
                t,
                timesteps: schedule.timesteps,
            });
        }
    }

    // x_t per sample (its own timestep), outside the graph
    let x0v = x0.to_f64_vec();
    let epsv = draw.eps.to_f64_vec();
    let mut xt = vec![0.0f64; batch * per];
    for (b, &t) in draw.t.iter().enumerate() {
        let c0 = schedule.alpha_bars[t].sqrt();
        let c1 = (1.0 - schedule.alpha_bars[t]).sqrt();
        for i in 0..per {
            let idx = b * per + i;
            xt[idx] = c0 * x0v[idx] + c1 * epsv[idx];
        }
    }
    // Match the training precision: noising is computed in f64 above and
    // stored at the model dtype.
    let xt_t = Tensor::new(sh.to_vec(), Buffer::from_f64(dtype, &xt))?;

    let mut g = Graph::new(dtype);
    let xt_node = g.leaf(&xt_t, false)?;
    let (eps_pred, v_pred) = model.forward_on(&mut g, xt_node, &draw.t, classes)?;

    let eps_node = g.constant(&draw.eps.cast(dtype))?;
    let diff = g.sub(eps_pred, eps_node)?;
    let sq = g.mul(diff, diff)?;
    let simple = g.mean_all(sq)?;

    let per_sample = |vals: Vec<f64>| -> Tensor {
        Tensor::new(vec![batch, 1, 1, 1], Buffer::from_f64(dtype, &vals)).unwrap()
    };

    let (loss, vlb_value) = match v_pred {
        Some(v) if vlb_lambda > 0.0 => {
            // per-sample schedule constants, broadcast over the image
            let tv = &draw.t;
            let log_beta = per_sample(tv.iter().map(|&t| schedule.betas[t].ln()).collect());
            let log_btilde =
                per_sample(tv.iter().map(|&t| schedule.posterior_log_variance[t]).collect());
            let btilde =
                per_sample(tv.iter().map(|&t| schedule.posterior_variance[t]).collect());
            let c0 = per_sample(tv.iter().map(|&t| schedule.posterior_coef_x0[t]).collect());
            let c1 = per_sample(tv.iter().map(|&t| schedule.posterior_coef_xt[t]).collect());
            let inv_sqrt_abar =
                per_sample(tv.iter().map(|&t| 1.0 / schedule.alpha_bars[t].sqrt()).collect());
            let sqrt_1m_abar = per_sample(
                tv.iter()
                    .map(|&t| (1.0 - schedule.alpha_bars[t]).sqrt())
                    .collect(),
            );
            let is_t0 = per_sample(
                tv.iter()
                    .map(|&t| if t == 0 { 1.0 } else { 0.0 })
                    .collect(),
            );

            let lb = g.constant(&log_beta)?;
            let lbt = g.constant(&log_btilde)?;
            let bt = g.constant(&btilde)?;
            let c0n = g.constant(&c0)?;
            let c1n = g.constant(&c1)?;
            let isan = g.constant(&inv_sqrt_abar)?;
            let s1an = g.constant(&sqrt_1m_abar)?;
            let t0n = g.constant(&is_t0)?;
            let x0n = g.constant(&x0.cast(dtype))?;

            // interpolated log-variance from the v head
            let frac = g.affine(v, 0.5, 0.5)?;
            let one_minus = g.affine(frac, -1.0, 1.0)?;
            let a = g.mul(frac, lb)?;
            let b = g.mul(one_minus, lbt)?;
            let log_sigma = g.add(a, b)?;

            // posterior mean from the detached noise prediction
            let eps_det = g.detach(eps_pred)?;
            let scaled_eps = g.mul(eps_det, s1an)?;
            let x_minus = g.sub(xt_node, scaled_eps)?;
            let x0_pred = g.mul(x_minus, isan)?;
            let m0 = g.mul(x0_pred, c0n)?;
            let m1 = g.mul(xt_node, c1n)?;
            let mu_theta = g.add(m0, m1)?;

            // true posterior mean (constants)
            let q0 = g.mul(x0n, c0n)?;
            let q1 = g.mul(xt_node, c1n)?;
            let mu_tilde = g.add(q0, q1)?;

            // KL(q || p) per element for t > 0
            let dmu = g.sub(mu_tilde, mu_theta)?;
            let dmu2 = g.mul(dmu, dmu)?;
            let num = g.add(bt, dmu2)?;
            let neg_ls = g.neg(log_sigma)?;
            let inv_sigma = g.exp(neg_ls)?;
            let ratio = g.mul(num, inv_sigma)?;
            let ls_minus_lbt = g.sub(log_sigma, lbt)?;
            let kl_inner = g.add(ls_minus_lbt, ratio)?;
            let kl = g.affine(kl_inner, 0.5, -0.5)?;

            // Gaussian NLL of x0 under p for t = 0
            let d0 = g.sub(x0n, mu_theta)?;
            let d02 = g.mul(d0, d0)?;
            let quad = g.mul(d02, inv_sigma)?;
            let nll_inner = g.add(log_sigma, quad)?;
            let ln2pi = (2.0 * std::f64::consts::PI).ln();
            let nll = g.affine(nll_inner, 0.5, 0.5 * ln2pi)?;

            // select per sample
            let masked_nll = g.mul(nll, t0n)?;
            let not_t0 = g.affine(t0n, -1.0, 1.0)?;
            let masked_kl = g.mul(kl, not_t0)?;
            let vlb_elem = g.add(masked_nll, masked_kl)?;
            let vlb = g.mean_all(vlb_elem)?;

            let scaled_vlb = g.affine(vlb, vlb_lambda, 0.0)?;
            let total = g.add(simple, scaled_vlb)?;
            (total, g.value(vlb).get(0))
        }
        _ => (simple, 0.0),
    };

    let components = LossComponents {
        total: g.value(loss).get(0),
        simple: g.value(simple).get(0),
        vlb: vlb_value,
    };
    Ok((g, loss, components))
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Tensor-level noise predictor used by the sampler. `t` is the base-schedule
/// timestep shared by the batch.
pub trait NoisePredictor {
    fn geometry(&self) -> (usize, usize, usize);
    fn num_classes(&self) -> usize;
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        classes: Option<&[usize]>,
    ) -> std::result::Result<(Tensor, Option<Tensor>), ModelError>;
}

impl NoisePredictor for DisModel {
    fn geometry(&self) -> (usize, usize, usize) {
        (
            self.config.image_h,
            self.config.image_w,
            self.config.image_c,
        )
    }
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        classes: Option<&[usize]>,
    ) -> std::result::Result<(Tensor, Option<Tensor>), ModelError> {
        let batch = x.shape()[0];
        DisModel::predict(self, x, &vec![t; batch], classes)
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub clip_x0: Option<(f64, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 250,
            guidance_scale: 1.0,
            seed: 0,
            clip_x0: Some((-1.0, 1.0)),
        }
    }
}

/// One reverse transition at respaced index `i`, in place over the batch
/// state `x` (64-bit, flattened `[n, H*W*C]`). Draws one normal field per
/// sample from its own stream except at the final index, which adds no
/// noise. With guidance scale 1 the combined prediction is exactly the
/// conditional one (single model call); above 1 the conditional and
/// null-class passes are combined as `eps_u + s (eps_c - eps_u)`.
#[allow(clippy::too_many_arguments)]
pub fn p_sample_step(
    model: &dyn NoisePredictor,
    rs: &RespacedSchedule,
    i: usize,
    x: &mut [f64],
    n: usize,
    classes: Option<&[usize]>,
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<()> {
    let (h, w, c) = model.geometry();
    let per = h * w * c;
    assert_eq!(x.len(), n * per);
    let sched = &rs.sched;
    let t_model = rs.base_timesteps[i];

    let x_t = Tensor::new(
        vec![n, h, w, c],
        Buffer::F32(x.iter().map(|&v| v as f32).collect()),
    )?;

    let (eps, v) = match classes {
        Some(ids) if cfg.guidance_scale > 1.0 => {
            let (eps_c, v_c) = model.predict(&x_t, t_model, Some(ids))?;
            let null_ids = vec![model.num_classes(); n];
            let (eps_u, _) = model.predict(&x_t, t_model, Some(&null_ids))?;
            let s = cfg.guidance_scale;
            let ec = eps_c.to_f64_vec();
            let eu = eps_u.to_f64_vec();
            let combined: Vec<f64> = eu
                .iter()
                .zip(&ec)
                .map(|(&u, &cv)| u + s * (cv - u))
                .collect();
            (combined, v_c.map(|t| t.to_f64_vec()))
        }
        Some(ids) => {
            let (eps_c, v_c) = model.predict(&x_t, t_model, Some(ids))?;
            (eps_c.to_f64_vec(), v_c.map(|t| t.to_f64_vec()))
        }
        None => {
            let (eps_u, v_u) = model.predict(&x_t, t_model, None)?;
            (eps_u.to_f64_vec(), v_u.map(|t| t.to_f64_vec()))
        }
    };

    let abar = sched.alpha_bars[i];
    for s in 0..n {
        for q in 0..per {
            let idx = s * per + q;
            let e = eps[idx];
            if !e.is_finite() {
                return Err(DiffusionError::Tensor(TensorError::NonFinite {
                    op: "p_sample_step",
                    step: i,
                }));
            }
            let mut x0 = (x[idx] - (1.0 - abar).sqrt() * e) / abar.sqrt();
            if let Some((lo, hi)) = cfg.clip_x0 {
                x0 = x0.clamp(lo, hi);
            }
            let mean = sched.posterior_coef_x0[i] * x0 + sched.posterior_coef_xt[i] * x[idx];
            x[idx] = if i > 0 {
                let log_sigma = match &v {
                    Some(vv) => {
                        let frac = (vv[idx] + 1.0) / 2.0;
                        frac * sched.betas[i].ln()
                            + (1.0 - frac) * sched.posterior_log_variance[i]
                    }
                    None => sched.posterior_log_variance[i],
                };
                mean + (0.5 * log_sigma).exp() * rngs[s].normal()
            } else {
                mean
            };
        }
    }
    Ok(())
}

/// Ancestral sampling over an evenly respaced timestep subset. Per-sample
/// noise streams derive from `(seed, sample index)`, so results are
/// reproducible and independent of batch composition.
pub fn ddpm_sample(
    model: &dyn NoisePredictor,
    base: &NoiseSchedule,
    n: usize,
    classes: Option<Vec<usize>>,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let rs = respace(base, cfg.num_steps)?;
    let (h, w, c) = model.geometry();
    let per = h * w * c;
    if let Some(ids) = &classes {
        if ids.len() != n {
            return Err(DiffusionError::Model(ModelError::Config(format!(
                "{} class ids for {n} samples",
                ids.len()
            ))));
        }
    }
    let mut rngs: Vec<Rng> = (0..n)
        .map(|i| Rng::seed_stream(cfg.seed, 0x5A17_0000 + i as u64))
        .collect();
    let mut x = vec![0.0f64; n * per];
    for (s, chunk) in x.chunks_mut(per).enumerate() {
        for v in chunk.iter_mut() {
            *v = rngs[s].normal();
        }
    }

    for i in (0..cfg.num_steps).rev() {
        p_sample_step(model, &rs, i, &mut x, n, classes.as_deref(), cfg, &mut rngs)?;
    }
    Ok(Tensor::new(
        vec![n, h, w, c],
        Buffer::F32(x.iter().map(|&v| v as f32).collect()),
    )?)
}
