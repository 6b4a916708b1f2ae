//! Optimization loop: bias-corrected AdamW (decoupled weight decay, zero by
//! default), cosine learning-rate decay without warmup, an exponential
//! moving average of the weights updated once per optimizer step, condition
//! dropout for guidance training, metrics logging, and checkpointing.

pub mod checkpoint;
pub mod data;

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::diffusion::{draw_noise, training_loss, DiffusionError, NoiseSchedule};
use crate::model::{DisModel, ModelConfig, ModelError};
use crate::rng::Rng;
use crate::tensor::{Buffer, DType, Element, ParamStore, TensorError};
use data::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step} (value {value})")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("non-finite gradient for parameter '{param}' at step {step}")]
    NonFiniteGrad { step: usize, param: String },
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CkptError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Buffer>,
    pub v: Vec<Buffer>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Buffer> = store
            .ids()
            .map(|id| Buffer::zeros(store.value(id).dtype(), store.value(id).len()))
            .collect();
        OptimState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_kernel<T: Element>(
    p: &mut [T],
    g: Option<&[T]>,
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    wd: f64,
    bias1: f64,
    bias2: f64,
) {
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (nb1, nb2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (ib1, ib2) = (T::from_f64(1.0 / bias1), T::from_f64(1.0 / bias2));
    let lrt = T::from_f64(lr);
    let epst = T::from_f64(eps);
    let wdt = T::from_f64(wd);
    for i in 0..p.len() {
        let gi = g.map(|g| g[i]).unwrap_or(T::ZERO);
        m[i] = b1t * m[i] + nb1 * gi;
        v[i] = b2t * v[i] + nb2 * gi * gi;
        let mhat = m[i] * ib1;
        let vhat = v[i] * ib2;
        p[i] = p[i] - lrt * (mhat / (vhat.sqrt() + epst) + wdt * p[i]);
    }
}

/// One bias-corrected AdamW update. Missing gradients are exactly zero
/// (unused parameters). Aborts with the parameter name if a gradient is
/// non-finite.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Buffer>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    assert_eq!(grads.len(), store.len(), "gradient/parameter alignment");
    for (i, g) in grads.iter().enumerate() {
        if let Some(buf) = g {
            let finite = match buf {
                Buffer::F32(v) => v.iter().all(|x| x.is_finite()),
                Buffer::F64(v) => v.iter().all(|x| x.is_finite()),
            };
            if !finite {
                return Err(TrainError::NonFiniteGrad {
                    step: state.step as usize,
                    param: store.name(crate::tensor::ParamId(i)).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let bias1 = 1.0 - state.beta1.powi(state.step as i32);
    let bias2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    for i in 0..store.len() {
        let id = crate::tensor::ParamId(i);
        let p = store.value_mut(id);
        match p {
            Buffer::F32(pv) => {
                let g = grads[i].as_ref().map(<f32 as Element>::slice);
                adamw_kernel::<f32>(
                    pv,
                    g,
                    <f32 as Element>::slice_mut(&mut state.m[i]),
                    <f32 as Element>::slice_mut(&mut state.v[i]),
                    lr,
                    b1,
                    b2,
                    eps,
                    wd,
                    bias1,
                    bias2,
                );
            }
            Buffer::F64(pv) => {
                let g = grads[i].as_ref().map(<f64 as Element>::slice);
                adamw_kernel::<f64>(
                    pv,
                    g,
                    <f64 as Element>::slice_mut(&mut state.m[i]),
                    <f64 as Element>::slice_mut(&mut state.v[i]),
                    lr,
                    b1,
                    b2,
                    eps,
                    wd,
                    bias1,
                    bias2,
                );
            }
        }
    }
    Ok(())
}

/// Cosine decay without warmup: `base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    assert!(total > 0 && step <= total, "step {step} of {total}");
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Buffer>,
}

impl EmaState {
    /// Shadow starts as a copy of the parameters.
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: store.ids().map(|id| store.value(id).clone()).collect(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`, once per step.
    pub fn update(&mut self, store: &ParamStore) {
        for (i, id) in store.ids().enumerate() {
            match (&mut self.shadow[i], store.value(id)) {
                (Buffer::F32(s), Buffer::F32(p)) => {
                    let (d, nd) = (self.decay as f32, (1.0 - self.decay) as f32);
                    for (sv, &pv) in s.iter_mut().zip(p) {
                        *sv = d * *sv + nd * pv;
                    }
                }
                (Buffer::F64(s), Buffer::F64(p)) => {
                    let (d, nd) = (self.decay, 1.0 - self.decay);
                    for (sv, &pv) in s.iter_mut().zip(p) {
                        *sv = d * *sv + nd * pv;
                    }
                }
                _ => unreachable!("shadow dtype tracks parameters"),
            }
        }
    }

    /// Write the shadow weights into a parameter store.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            store.set_value(id, self.shadow[i].clone());
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub cond_dropout: f64,
    pub ema_decay: f64,
    /// global-norm clip; zero disables (the default)
    pub grad_clip: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub vlb_lambda: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 64,
            base_lr: 1e-4,
            cond_dropout: 0.1,
            ema_decay: 0.9999,
            grad_clip: 0.0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            vlb_lambda: 1e-3,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_simple: f64,
    pub loss_vlb: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,loss_simple,loss_vlb,wall_ms";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.loss_simple, self.loss_vlb, self.wall_ms
        )
    }
}

pub struct TrainOutput {
    pub model: DisModel,
    pub optim: OptimState,
    pub ema: EmaState,
    pub metrics: Vec<MetricsRow>,
    pub rng_state: [u64; 4],
}

/// Deterministic epoch ordering over dataset indices.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(n: usize) -> Self {
        BatchCursor {
            order: (0..n).collect(),
            pos: n, // force shuffle on first use
        }
    }
    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Run the optimization loop. When `out_dir` is given, a metrics CSV and
/// periodic checkpoints are written there as the run progresses.
pub fn train(
    model_cfg: ModelConfig,
    tcfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    if dataset.images.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if dataset.h != model_cfg.image_h
        || dataset.w != model_cfg.image_w
        || dataset.c != model_cfg.image_c
    {
        return Err(TrainError::Config(format!(
            "dataset geometry {}x{}x{} does not match model {}x{}x{}",
            dataset.h, dataset.w, dataset.c, model_cfg.image_h, model_cfg.image_w, model_cfg.image_c
        )));
    }
    let conditional = model_cfg.num_classes > 0;
    if conditional && dataset.labels.is_none() {
        return Err(TrainError::Config(
            "class-conditional model needs a labelled dataset".into(),
        ));
    }

    let schedule = NoiseSchedule::linear(tcfg.timesteps, tcfg.beta_start, tcfg.beta_end)?;
    let sched_spec = checkpoint::ScheduleSpec {
        timesteps: tcfg.timesteps,
        beta_start: tcfg.beta_start,
        beta_end: tcfg.beta_end,
    };
    let model = DisModel::new(model_cfg.clone(), DType::F32, tcfg.seed)?;
    let mut store = model.store.clone();
    let mut optim = OptimState::new(&store);
    let mut ema = EmaState::new(&store, tcfg.ema_decay);
    let mut rng = Rng::seed_stream(tcfg.seed, 0x7E41);
    let mut cursor = BatchCursor::new(dataset.images.len());
    let mut metrics = Vec::with_capacity(tcfg.steps);

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            use std::io::Write;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    // Rebuild the model around the evolving store each step is unnecessary:
    // the store is shared by reference through a model whose params we swap.
    let mut model = model;
    let per_elem_shape = [model_cfg.image_h, model_cfg.image_w, model_cfg.image_c];
    let per: usize = per_elem_shape.iter().product();

    for step in 0..tcfg.steps {
        let t0 = Instant::now();
        // batch assembly
        let mut x0 = vec![0.0f32; tcfg.batch_size * per];
        let mut classes: Vec<usize> = Vec::with_capacity(tcfg.batch_size);
        for b in 0..tcfg.batch_size {
            let idx = cursor.next(&mut rng);
            let img = &dataset.images[idx];
            let flip = dataset.flip_augment && rng.below(2) == 1;
            copy_image(img, &mut x0[b * per..(b + 1) * per], dataset, flip);
            if conditional {
                let label = dataset.labels.as_ref().unwrap()[idx];
                let dropped = tcfg.cond_dropout > 0.0 && rng.uniform() < tcfg.cond_dropout;
                classes.push(if dropped { model_cfg.null_class() } else { label });
            }
        }
        let x0_t = crate::tensor::Tensor::new(
            vec![tcfg.batch_size, per_elem_shape[0], per_elem_shape[1], per_elem_shape[2]],
            Buffer::F32(x0),
        )?;
        let draw = draw_noise(&schedule, tcfg.batch_size, &per_elem_shape, DType::F32, &mut rng);

        // forward/backward
        model.store = store;
        let class_arg = conditional.then_some(classes.as_slice());
        let (mut g, loss, comps) =
            training_loss(&model, &schedule, &x0_t, class_arg, tcfg.vlb_lambda, &draw)?;
        if !comps.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                value: comps.total,
            });
        }
        g.backward(loss)?;
        let mut grads = g.param_grads(&model.store);
        drop(g);
        store = std::mem::replace(&mut model.store, ParamStore::new());

        if tcfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, tcfg.grad_clip);
        }
        let lr = cosine_lr(step, tcfg.steps, tcfg.base_lr);
        adamw_step(&mut store, &grads, &mut optim, lr)?;
        ema.update(&store);

        let row = MetricsRow {
            step,
            lr,
            loss: comps.total,
            loss_simple: comps.simple,
            loss_vlb: comps.vlb,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some(f) = csv.as_mut() {
            use std::io::Write;
            writeln!(f, "{}", row.csv())?;
        }
        metrics.push(row);

        if let Some(dir) = out_dir {
            let done = step + 1;
            if tcfg.checkpoint_every > 0 && done % tcfg.checkpoint_every == 0 && done < tcfg.steps
            {
                model.store = store.clone();
                checkpoint::save(
                    &dir.join(format!("ckpt_{done:06}.dis")),
                    &model,
                    &sched_spec,
                    &optim,
                    &ema,
                    rng.state(),
                    done as u64,
                )?;
                store = std::mem::replace(&mut model.store, ParamStore::new());
            }
        }
    }

    model.store = store;
    if let Some(dir) = out_dir {
        checkpoint::save(
            &dir.join("final.dis"),
            &model,
            &sched_spec,
            &optim,
            &ema,
            rng.state(),
            tcfg.steps as u64,
        )?;
    }
    Ok(TrainOutput {
        model,
        optim,
        ema,
        metrics,
        rng_state: rng.state(),
    })
}

fn copy_image(img: &crate::tensor::Tensor, dst: &mut [f32], ds: &Dataset, flip: bool) {
    let src = match img.data() {
        Buffer::F32(v) => v,
        _ => unreachable!("datasets are 32-bit"),
    };
    if !flip {
        dst.copy_from_slice(src);
        return;
    }
    let (h, w, c) = (ds.h, ds.w, ds.c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[(y * w + x) * c + ch] = src[(y * w + (w - 1 - x)) * c + ch];
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Option<Buffer>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        match g {
            Buffer::F32(v) => {
                for &x in v {
                    sq += (x as f64) * (x as f64);
                }
            }
            Buffer::F64(v) => {
                for &x in v {
                    sq += x * x;
                }
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        match g {
            Buffer::F32(v) => {
                let s = scale as f32;
                for x in v.iter_mut() {
                    *x *= s;
                }
            }
            Buffer::F64(v) => {
                for x in v.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
}

/// Smoothed mean of the last `window` simple-loss values.
pub fn smoothed_tail_loss(metrics: &[MetricsRow], window: usize) -> f64 {
    let n = metrics.len();
    let take = window.min(n);
    if take == 0 {
        return f64::NAN;
    }
    metrics[n - take..].iter().map(|r| r.loss_simple).sum::<f64>() / take as f64
}
