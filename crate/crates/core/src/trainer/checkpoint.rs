//! Versioned binary checkpoint container: magic + version header, config
//! record, named parameter table, optimizer moments, EMA shadow, generator
//! state, and step counter. Little-endian, length-prefixed; save -> load ->
//! save is byte-identical.

use std::path::Path;

use thiserror::Error;

use crate::model::{CondMode, DisModel, ModelConfig, SkipMode};
use crate::ssm::Combine;
use crate::tensor::{Buffer, DType};

use super::{EmaState, OptimState};

/// Diffusion-process settings that travel with the weights so sampling can
/// rebuild the exact training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

pub const MAGIC: &[u8; 8] = b"DISCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    Version(u32),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str16(&mut self, s: &str) {
        let b = s.as_bytes();
        assert!(b.len() <= u16::MAX as usize);
        self.u16(b.len() as u16);
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.buf.len() {
            return Err(CkptError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CkptError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CkptError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CkptError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CkptError> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str16(&mut self) -> Result<String, CkptError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CkptError::Corrupt("non-utf8 parameter name".into()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_schedule(w: &mut Writer, s: &ScheduleSpec) {
    w.u32(s.timesteps as u32);
    w.f64(s.beta_start);
    w.f64(s.beta_end);
}

fn read_schedule(r: &mut Reader) -> Result<ScheduleSpec, CkptError> {
    Ok(ScheduleSpec {
        timesteps: r.u32()? as usize,
        beta_start: r.f64()?,
        beta_end: r.f64()?,
    })
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    w.u32(c.blocks as u32);
    w.u32(c.hidden_dim as u32);
    w.u32(c.expand as u32);
    w.u32(c.ssm_dim as u32);
    w.u32(c.patch_size as u32);
    w.u32(c.image_h as u32);
    w.u32(c.image_w as u32);
    w.u32(c.image_c as u32);
    w.u32(c.num_classes as u32);
    w.u8(match c.cond_mode {
        CondMode::Token => 0,
        CondMode::AdaLn => 1,
    });
    w.u8(match c.skip_mode {
        SkipMode::Concat => 0,
        SkipMode::Add => 1,
        SkipMode::None => 2,
    });
    w.u8(c.learn_sigma as u8);
    w.u8(c.pos_embed_cond as u8);
    w.u8(match c.bidir_combine {
        Combine::Mean => 0,
        Combine::Sum => 1,
    });
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CkptError> {
    let blocks = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let expand = r.u32()? as usize;
    let ssm_dim = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let image_h = r.u32()? as usize;
    let image_w = r.u32()? as usize;
    let image_c = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let cond_mode = match r.u8()? {
        0 => CondMode::Token,
        1 => CondMode::AdaLn,
        x => return Err(CkptError::Corrupt(format!("bad cond_mode tag {x}"))),
    };
    let skip_mode = match r.u8()? {
        0 => SkipMode::Concat,
        1 => SkipMode::Add,
        2 => SkipMode::None,
        x => return Err(CkptError::Corrupt(format!("bad skip_mode tag {x}"))),
    };
    let learn_sigma = r.u8()? != 0;
    let pos_embed_cond = r.u8()? != 0;
    let bidir_combine = match r.u8()? {
        0 => Combine::Mean,
        1 => Combine::Sum,
        x => return Err(CkptError::Corrupt(format!("bad combine tag {x}"))),
    };
    Ok(ModelConfig {
        blocks,
        hidden_dim,
        expand,
        ssm_dim,
        patch_size,
        image_h,
        image_w,
        image_c,
        num_classes,
        cond_mode,
        skip_mode,
        learn_sigma,
        pos_embed_cond,
        bidir_combine,
    })
}

fn buf_f32(buf: &Buffer) -> Vec<f32> {
    match buf {
        Buffer::F32(v) => v.clone(),
        Buffer::F64(v) => v.iter().map(|&x| x as f32).collect(),
    }
}

pub fn to_bytes(
    model: &DisModel,
    schedule: &ScheduleSpec,
    optim: &OptimState,
    ema: &EmaState,
    rng_state: [u64; 4],
    step: u64,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    write_config(&mut w, &model.config);
    write_schedule(&mut w, schedule);

    let store = &model.store;
    w.u32(store.len() as u32);
    for id in store.ids() {
        w.str16(store.name(id));
        let shape = store.shape(id);
        w.u8(shape.len() as u8);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32s(&buf_f32(store.value(id)));
    }

    // optimizer
    w.u64(optim.step);
    w.f64(optim.beta1);
    w.f64(optim.beta2);
    w.f64(optim.eps);
    w.f64(optim.weight_decay);
    for b in &optim.m {
        w.f32s(&buf_f32(b));
    }
    for b in &optim.v {
        w.f32s(&buf_f32(b));
    }

    // ema
    w.f64(ema.decay);
    for b in &ema.shadow {
        w.f32s(&buf_f32(b));
    }

    for s in rng_state {
        w.u64(s);
    }
    w.u64(step);
    w.buf
}

pub struct LoadedCheckpoint {
    pub model: DisModel,
    pub schedule: ScheduleSpec,
    pub optim: OptimState,
    pub ema: EmaState,
    pub rng_state: [u64; 4],
    pub step: u64,
}

impl LoadedCheckpoint {
    /// Swap the EMA shadow weights into the model (the evaluation weights).
    pub fn model_with_ema(mut self) -> DisModel {
        self.ema.apply_to(&mut self.model.store);
        self.model
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint, CkptError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(CkptError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::Version(version));
    }
    let config = read_config(&mut r)?;
    let schedule = read_schedule(&mut r)?;

    let mut model = DisModel::new(config, DType::F32, 0)?;
    let n_params = r.u32()? as usize;
    if n_params != model.store.len() {
        return Err(CkptError::Mismatch(format!(
            "{n_params} stored parameters, config builds {}",
            model.store.len()
        )));
    }
    let mut sizes = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str16()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let vals = r.f32s(numel)?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| CkptError::Mismatch(format!("unknown parameter '{name}'")))?;
        if model.store.shape(id) != shape.as_slice() {
            return Err(CkptError::Mismatch(format!(
                "parameter '{name}': stored shape {:?}, config wants {:?}",
                shape,
                model.store.shape(id)
            )));
        }
        model.store.set_value(id, Buffer::F32(vals));
        sizes.push(numel);
    }

    let mut optim = OptimState::new(&model.store);
    optim.step = r.u64()?;
    optim.beta1 = r.f64()?;
    optim.beta2 = r.f64()?;
    optim.eps = r.f64()?;
    optim.weight_decay = r.f64()?;
    for (i, &n) in sizes.iter().enumerate() {
        optim.m[i] = Buffer::F32(r.f32s(n)?);
    }
    for (i, &n) in sizes.iter().enumerate() {
        optim.v[i] = Buffer::F32(r.f32s(n)?);
    }

    let decay = r.f64()?;
    let mut shadow = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        shadow.push(Buffer::F32(r.f32s(n)?));
    }
    let ema = EmaState { decay, shadow };

    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let step = r.u64()?;
    if !r.done() {
        return Err(CkptError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        schedule,
        optim,
        ema,
        rng_state,
        step,
    })
}

pub fn save(
    path: &Path,
    model: &DisModel,
    schedule: &ScheduleSpec,
    optim: &OptimState,
    ema: &EmaState,
    rng_state: [u64; 4],
    step: u64,
) -> Result<(), CkptError> {
    std::fs::write(path, to_bytes(model, schedule, optim, ema, rng_state, step))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint, CkptError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
