//! The noise-prediction network: patch embedding, token-based (or adaptive
//! norm) conditioning, a stack of bidirectional selective-scan blocks with
//! long skip fusions between mirrored shallow/deep blocks, and a linear
//! decoder producing the noise and diagonal covariance heads.

use std::rc::Rc;

use thiserror::Error;

use crate::rng::Rng;
use crate::ssm::{bidirectional_ssm, Combine, SsmDirectionParams};
use crate::tensor::{
    count, Buffer, DType, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError,
};

pub const LN_EPS: f64 = 1e-5;
pub const CONV_KERNEL: usize = 4;
pub const TIME_FREQ_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("class id {id} out of range ({num_classes} classes)")]
    ClassRange { id: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    Token,
    AdaLn,
}

impl CondMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "token" => Some(CondMode::Token),
            "adaln" => Some(CondMode::AdaLn),
            _ => None,
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            CondMode::Token => "token",
            CondMode::AdaLn => "adaln",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    Concat,
    Add,
    None,
}

impl SkipMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concat" => Some(SkipMode::Concat),
            "add" => Some(SkipMode::Add),
            "none" => Some(SkipMode::None),
            _ => None,
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            SkipMode::Concat => "concat",
            SkipMode::Add => "add",
            SkipMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden_dim: usize,
    pub expand: usize,
    pub ssm_dim: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub num_classes: usize,
    pub cond_mode: CondMode,
    pub skip_mode: SkipMode,
    pub learn_sigma: bool,
    pub pos_embed_cond: bool,
    pub bidir_combine: Combine,
}

impl ModelConfig {
    /// Baseline geometry used by the cost reports: 32x32x3 pixels, patch 4,
    /// unconditional, token conditioning, concat skips, learned covariance.
    pub fn sized(blocks: usize, hidden_dim: usize) -> Self {
        ModelConfig {
            blocks,
            hidden_dim,
            expand: 2,
            ssm_dim: 16,
            patch_size: 4,
            image_h: 32,
            image_w: 32,
            image_c: 3,
            num_classes: 0,
            cond_mode: CondMode::Token,
            skip_mode: SkipMode::Concat,
            learn_sigma: true,
            pos_embed_cond: true,
            bidir_combine: Combine::Mean,
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        REFERENCE_SIZES
            .iter()
            .find(|r| r.name == name)
            .map(|r| ModelConfig::sized(r.blocks, r.hidden_dim))
            .or(match name {
                "xs" => Some(ModelConfig::sized(3, 64)),
                _ => None,
            })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.blocks == 0 || self.blocks % 2 == 0 {
            return err(format!(
                "block count must be odd (shallow half, middle, deep half), got {}",
                self.blocks
            ));
        }
        if ![2, 4, 8].contains(&self.patch_size) {
            return err(format!("patch size must be 2, 4 or 8, got {}", self.patch_size));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return err(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.hidden_dim == 0 || self.expand == 0 || self.ssm_dim == 0 || self.image_c == 0 {
            return err("dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.hidden_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.hidden_dim.div_ceil(16)
    }

    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn n_cond(&self) -> usize {
        match self.cond_mode {
            CondMode::Token => {
                if self.num_classes > 0 {
                    2
                } else {
                    1
                }
            }
            CondMode::AdaLn => 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.tokens() + self.n_cond()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_c
    }

    pub fn decoder_width(&self) -> usize {
        if self.learn_sigma {
            2 * self.patch_dim()
        } else {
            self.patch_dim()
        }
    }

    /// Class row used as the unconditional ("null") embedding.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Published reference sizes for this architecture family, with their
/// reported parameter counts (millions) and forward costs (Gflops) at the
/// 32x32/patch-4 unconditional measurement point.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePoint {
    pub name: &'static str,
    pub blocks: usize,
    pub hidden_dim: usize,
    pub params_millions: f64,
    pub gflops: f64,
}

pub const REFERENCE_SIZES: [ReferencePoint; 5] = [
    ReferencePoint { name: "small", blocks: 25, hidden_dim: 384, params_millions: 28.4, gflops: 0.43 },
    ReferencePoint { name: "base", blocks: 25, hidden_dim: 768, params_millions: 119.1, gflops: 1.86 },
    ReferencePoint { name: "medium", blocks: 49, hidden_dim: 768, params_millions: 229.4, gflops: 3.70 },
    ReferencePoint { name: "large", blocks: 49, hidden_dim: 1024, params_millions: 404.0, gflops: 6.57 },
    ReferencePoint { name: "huge", blocks: 49, hidden_dim: 1536, params_millions: 900.6, gflops: 14.79 },
];

// ---------------------------------------------------------------------------
// Patch layout
// ---------------------------------------------------------------------------

/// Flat gather map turning `[batch, H, W, C]` into `[batch, J, p*p*C]`:
/// patches ordered row-major top-left to bottom-right, channel-fastest
/// within a patch.
pub fn patchify_map(batch: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<u32> {
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for tile_y in 0..gh {
            for tile_x in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let y = tile_y * p + py;
                            let x = tile_x * p + px;
                            map.push((((b * h + y) * w + x) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Exact inverse of [`patchify_map`]: `[batch, J, p*p*C]` back to
/// `[batch, H, W, C]`.
pub fn unpatchify_map(batch: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<u32> {
    let gw = w / p;
    let pd = p * p * c;
    let j = (h / p) * gw;
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (tile_y, py) = (y / p, y % p);
                    let (tile_x, px) = (x / p, x % p);
                    let token = tile_y * gw + tile_x;
                    let inner = py * p * c + px * c + ch;
                    map.push(((b * j + token) * pd + inner) as u32);
                }
            }
        }
    }
    map
}

fn apply_map(src: &Tensor, map: &[u32], out_shape: &[usize]) -> Tensor {
    let vals = src.data();
    let data = match vals {
        Buffer::F32(v) => Buffer::F32(map.iter().map(|&i| v[i as usize]).collect()),
        Buffer::F64(v) => Buffer::F64(map.iter().map(|&i| v[i as usize]).collect()),
    };
    Tensor::new(out_shape.to_vec(), data).unwrap()
}

/// Split an image `[H, W, C]` (or batch `[B, H, W, C]`) into flattened
/// patch tokens.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let sh = img.shape();
    let (batch, h, w, c, batched) = match sh.len() {
        3 => (1, sh[0], sh[1], sh[2], false),
        4 => (sh[0], sh[1], sh[2], sh[3], true),
        _ => {
            return Err(ModelError::Config(format!(
                "patchify expects [H,W,C] or [B,H,W,C], got {sh:?}"
            )))
        }
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(ModelError::Config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let j = (h / p) * (w / p);
    let map = patchify_map(batch, h, w, c, p);
    let out_shape: Vec<usize> = if batched {
        vec![batch, j, p * p * c]
    } else {
        vec![j, p * p * c]
    };
    Ok(apply_map(img, &map, &out_shape))
}

/// Reassemble patch tokens into the spatial layout.
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let sh = tokens.shape();
    let (batch, j, pd, batched) = match sh.len() {
        2 => (1, sh[0], sh[1], false),
        3 => (sh[0], sh[1], sh[2], true),
        _ => {
            return Err(ModelError::Config(format!(
                "unpatchify expects [J,p2c] or [B,J,p2c], got {sh:?}"
            )))
        }
    };
    if pd != p * p * c || j * p * p != h * w {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "unpatchify",
            lhs: sh.to_vec(),
            rhs: vec![h, w, c],
        }));
    }
    let map = unpatchify_map(batch, h, w, c, p);
    let out_shape: Vec<usize> = if batched {
        vec![batch, h, w, c]
    } else {
        vec![h, w, c]
    };
    Ok(apply_map(tokens, &map, &out_shape))
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of an integer timestep: first half sines, second
/// half cosines, frequencies geometric from 1 down to 1/10000. Deterministic
/// in `t` and injective over any practical step range (the learned
/// projection comes after this).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        dtype: DType,
        rng: &mut Rng,
    ) -> Linear {
        let vals: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.trunc_normal(0.02)).collect();
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![in_dim, out_dim], Buffer::from_f64(dtype, &vals)).unwrap(),
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.b"),
                Tensor::zeros(dtype, &[out_dim]),
            )
        });
        Linear { w, b }
    }

    /// Skip-fusion projection `[2D, D]` initialized to select the deep
    /// branch: top rows (shallow half) zero, bottom rows identity, so at
    /// initialization concat-skip computes the same function as no-skip.
    fn init_select_deep(store: &mut ParamStore, name: &str, d: usize, dtype: DType) -> Linear {
        let mut vals = vec![0.0f64; 2 * d * d];
        for i in 0..d {
            vals[(d + i) * d + i] = 1.0;
        }
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![2 * d, d], Buffer::from_f64(dtype, &vals)).unwrap(),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(dtype, &[d]));
        Linear { w, b: Some(b) }
    }

    /// Conditioning projection initialized to the identity modulation:
    /// zero weights, bias = [ones (scale) | zeros (shift)].
    fn init_identity_modulation(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        dtype: DType,
    ) -> Linear {
        let w = store.add(
            format!("{name}.w"),
            Tensor::zeros(dtype, &[d, 2 * d]),
        );
        let mut bias = vec![0.0f64; 2 * d];
        for v in bias.iter_mut().take(d) {
            *v = 1.0;
        }
        let b = store.add(
            format!("{name}.b"),
            Tensor::new(vec![2 * d], Buffer::from_f64(dtype, &bias)).unwrap(),
        );
        Linear { w, b: Some(b) }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bn = g.param(store, b)?;
                Ok(g.add(y, bn)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug)]
struct DisBlock {
    norm: Option<(ParamId, ParamId)>, // gamma, beta (token mode)
    adaln_proj: Option<Linear>,       // D -> 2D (adaln mode)
    lin_in: Linear,                   // D -> Din
    lin_g: Linear,                    // D -> Din
    conv_w: ParamId,                  // [Din, K]
    conv_b: ParamId,                  // [Din]
    fwd: SsmDirectionParams,
    bwd: SsmDirectionParams,
    out_proj: Linear, // Din -> D
    skip: Option<Linear>, // 2D -> D, deep blocks under concat mode
}

impl DisBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        idx: usize,
        cfg: &ModelConfig,
        with_skip: bool,
        dtype: DType,
        rng: &mut Rng,
    ) -> DisBlock {
        let d = cfg.hidden_dim;
        let din = cfg.inner_dim();
        let prefix = format!("blocks.{idx}");
        let (norm, adaln_proj) = match cfg.cond_mode {
            CondMode::Token => {
                let gamma = store.add(
                    format!("{prefix}.norm.gamma"),
                    Tensor::new(vec![d], Buffer::from_f64(dtype, &vec![1.0; d])).unwrap(),
                );
                let beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(dtype, &[d]));
                (Some((gamma, beta)), None)
            }
            CondMode::AdaLn => (
                None,
                Some(Linear::init_identity_modulation(
                    store,
                    &format!("{prefix}.adaln"),
                    d,
                    dtype,
                )),
            ),
        };
        let lin_in = Linear::init(store, &format!("{prefix}.lin_in"), d, din, false, dtype, rng);
        let lin_g = Linear::init(store, &format!("{prefix}.lin_g"), d, din, false, dtype, rng);
        let conv_vals: Vec<f64> = (0..din * CONV_KERNEL).map(|_| rng.trunc_normal(0.02)).collect();
        let conv_w = store.add(
            format!("{prefix}.conv.w"),
            Tensor::new(vec![din, CONV_KERNEL], Buffer::from_f64(dtype, &conv_vals)).unwrap(),
        );
        let conv_b = store.add(format!("{prefix}.conv.b"), Tensor::zeros(dtype, &[din]));
        let fwd = SsmDirectionParams::init(
            store,
            &format!("{prefix}.fwd"),
            din,
            cfg.ssm_dim,
            cfg.dt_rank(),
            dtype,
            rng,
        );
        let bwd = SsmDirectionParams::init(
            store,
            &format!("{prefix}.bwd"),
            din,
            cfg.ssm_dim,
            cfg.dt_rank(),
            dtype,
            rng,
        );
        let out_proj = Linear::init(store, &format!("{prefix}.out_proj"), din, d, false, dtype, rng);
        let skip = with_skip
            .then(|| Linear::init_select_deep(store, &format!("{prefix}.skip"), d, dtype));
        DisBlock {
            norm,
            adaln_proj,
            lin_in,
            lin_g,
            conv_w,
            conv_b,
            fwd,
            bwd,
            out_proj,
            skip,
        }
    }

    /// Pre-norm residual body:
    /// `x + out_proj( silu(lin_g(norm(x))) * bidir_scan( silu(conv(lin_in(norm(x)))) ) )`.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        cond: Option<NodeId>,
        cfg: &ModelConfig,
    ) -> Result<NodeId> {
        let d = cfg.hidden_dim;
        let normed = match (&self.norm, &self.adaln_proj) {
            (Some((gamma, beta)), None) => {
                let gn = g.param(store, *gamma)?;
                let bn = g.param(store, *beta)?;
                g.layer_norm(x, gn, bn, LN_EPS)?
            }
            (None, Some(proj)) => {
                // plain (non-affine) normalization, modulated by scale/shift
                // regressed from the conditioning embedding
                let ones = Tensor::new(vec![d], Buffer::from_f64(g.dtype(), &vec![1.0; d]))
                    .unwrap();
                let zeros = Tensor::zeros(g.dtype(), &[d]);
                let gn = g.constant(&ones)?;
                let bn = g.constant(&zeros)?;
                let ln = g.layer_norm(x, gn, bn, LN_EPS)?;
                let emb = cond.ok_or_else(|| {
                    ModelError::Config("adaln mode requires a conditioning embedding".into())
                })?;
                let sb = proj.apply(g, store, emb)?; // [B, 2D]
                let batch = g.shape(sb)[0];
                let scale = g.narrow(sb, 1, 0, d)?;
                let scale = g.reshape(scale, &[batch, 1, d])?;
                let shift = g.narrow(sb, 1, d, d)?;
                let shift = g.reshape(shift, &[batch, 1, d])?;
                let scaled = g.mul(ln, scale)?;
                g.add(scaled, shift)?
            }
            _ => unreachable!("block built with exactly one norm flavour"),
        };
        let gate_pre = self.lin_g.apply(g, store, normed)?;
        let gate = g.silu(gate_pre)?;
        let xin_pre = self.lin_in.apply(g, store, normed)?;
        let cw = g.param(store, self.conv_w)?;
        let cb = g.param(store, self.conv_b)?;
        let conved = g.dw_conv1d(xin_pre, cw, cb)?;
        let xin = g.silu(conved)?;
        let scanned = bidirectional_ssm(g, store, xin, &self.fwd, &self.bwd, cfg.bidir_combine)?;
        let gated = g.mul(gate, scanned)?;
        let out = self.out_proj.apply(g, store, gated)?;
        Ok(g.add(x, out)?)
    }
}

/// Shallow partner of a deep block in the U-shaped pairing: deep block `i`
/// (for `i > L/2`) fuses with the stored output of block `L-1-i`.
pub fn skip_partner(blocks: usize, deep_idx: usize) -> usize {
    blocks - 1 - deep_idx
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

pub struct DisModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    dtype: DType,
    patch_embed: Linear,
    pos_embed: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    class_embed: Option<ParamId>,
    blocks: Vec<DisBlock>,
    final_gamma: ParamId,
    final_beta: ParamId,
    decoder: Linear,
}

impl DisModel {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<DisModel> {
        config.validate()?;
        let mut rng = Rng::seed_stream(seed, 0x1217);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;

        let patch_embed = Linear::init(
            &mut store,
            "patch_embed",
            config.patch_dim(),
            d,
            true,
            dtype,
            &mut rng,
        );
        let pos_rows = if config.pos_embed_cond {
            config.seq_len()
        } else {
            config.tokens()
        };
        let pos_vals: Vec<f64> = (0..pos_rows * d).map(|_| rng.trunc_normal(0.02)).collect();
        let pos_embed = store.add(
            "pos_embed",
            Tensor::new(vec![pos_rows, d], Buffer::from_f64(dtype, &pos_vals)).unwrap(),
        );
        let time_fc1 = Linear::init(
            &mut store,
            "time_mlp.fc1",
            TIME_FREQ_DIM,
            d,
            true,
            dtype,
            &mut rng,
        );
        let time_fc2 = Linear::init(&mut store, "time_mlp.fc2", d, d, true, dtype, &mut rng);
        let class_embed = (config.num_classes > 0).then(|| {
            let rows = config.num_classes + 1; // final row is the null class
            let vals: Vec<f64> = (0..rows * d).map(|_| rng.trunc_normal(0.02)).collect();
            store.add(
                "class_embed",
                Tensor::new(vec![rows, d], Buffer::from_f64(dtype, &vals)).unwrap(),
            )
        });

        let half = config.blocks / 2;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let deep = i > half;
            let with_skip = deep && config.skip_mode == SkipMode::Concat;
            blocks.push(DisBlock::init(
                &mut store, i, &config, with_skip, dtype, &mut rng,
            ));
        }

        let final_gamma = store.add(
            "final_norm.gamma",
            Tensor::new(vec![d], Buffer::from_f64(dtype, &vec![1.0; d])).unwrap(),
        );
        let final_beta = store.add("final_norm.beta", Tensor::zeros(dtype, &[d]));
        let decoder = Linear::init(
            &mut store,
            "decoder",
            d,
            config.decoder_width(),
            true,
            dtype,
            &mut rng,
        );

        Ok(DisModel {
            config,
            store,
            dtype,
            patch_embed,
            pos_embed,
            time_fc1,
            time_fc2,
            class_embed,
            blocks,
            final_gamma,
            final_beta,
            decoder,
        })
    }

    /// All-zero parameters; forward costs and shapes are value-independent,
    /// so this is what the profiler builds for large configs.
    pub fn new_zeroed(config: ModelConfig, dtype: DType) -> Result<DisModel> {
        let mut model = DisModel::new(config, dtype, 0)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let n = model.store.value(id).len();
            model.store.set_value(id, Buffer::zeros(dtype, n));
        }
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Build the forward computation on `g`. `x_img` is `[B, H, W, C]`;
    /// `t` holds one timestep per sample; `classes` must be given exactly
    /// when the model is class-conditional (ids may use
    /// [`ModelConfig::null_class`] for the dropped/unconditional row).
    /// Returns the noise head and, when covariance is learned, the `v` head,
    /// both shaped `[B, H, W, C]`.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        x_img: NodeId,
        t: &[usize],
        classes: Option<&[usize]>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let cfg = &self.config;
        let sh = g.shape(x_img).to_vec();
        if sh.len() != 4 || sh[1] != cfg.image_h || sh[2] != cfg.image_w || sh[3] != cfg.image_c {
            return Err(ModelError::Config(format!(
                "input shape {sh:?} does not match configured geometry [B, {}, {}, {}]",
                cfg.image_h, cfg.image_w, cfg.image_c
            )));
        }
        let batch = sh[0];
        if t.len() != batch {
            return Err(ModelError::Config(format!(
                "{} timesteps for batch of {batch}",
                t.len()
            )));
        }
        match (cfg.num_classes > 0, classes) {
            (true, None) => {
                return Err(ModelError::Config(
                    "class-conditional model requires class ids (use the null class to drop)"
                        .into(),
                ))
            }
            (false, Some(_)) => {
                return Err(ModelError::Config(
                    "unconditional model cannot take class ids".into(),
                ))
            }
            (true, Some(ids)) => {
                if ids.len() != batch {
                    return Err(ModelError::Config(format!(
                        "{} class ids for batch of {batch}",
                        ids.len()
                    )));
                }
                for &id in ids {
                    if id > cfg.num_classes {
                        return Err(ModelError::ClassRange {
                            id,
                            num_classes: cfg.num_classes,
                        });
                    }
                }
            }
            (false, None) => {}
        }

        let (p, d, j) = (cfg.patch_size, cfg.hidden_dim, cfg.tokens());
        let n_cond = cfg.n_cond();

        // patchify + embed
        let pmap = Rc::new(patchify_map(batch, cfg.image_h, cfg.image_w, cfg.image_c, p));
        let patches = g.gather(x_img, pmap, &[batch, j, cfg.patch_dim()])?;
        let x_tokens = self.patch_embed.apply(g, &self.store, patches)?;

        // timestep embedding: sinusoidal features, then the shared MLP
        let mut sin_feats = Vec::with_capacity(batch * TIME_FREQ_DIM);
        for &ti in t {
            sin_feats.extend(timestep_embedding(ti, TIME_FREQ_DIM));
        }
        let sin_t = Tensor::new(
            vec![batch, TIME_FREQ_DIM],
            Buffer::from_f64(self.dtype, &sin_feats),
        )
        .unwrap();
        let sin_node = g.constant(&sin_t)?;
        let h1 = self.time_fc1.apply(g, &self.store, sin_node)?;
        let h1s = g.silu(h1)?;
        let t_emb = self.time_fc2.apply(g, &self.store, h1s)?; // [B, D]

        let c_emb = match (self.class_embed, classes) {
            (Some(table), Some(ids)) => {
                let tn = g.param(&self.store, table)?;
                Some(g.row_gather(tn, Rc::new(ids.to_vec()))?)
            }
            _ => None,
        };

        // assemble the block input sequence
        let pos = g.param(&self.store, self.pos_embed)?;
        let mut h = match cfg.cond_mode {
            CondMode::Token => {
                let t_tok = g.reshape(t_emb, &[batch, 1, d])?;
                let mut parts = vec![t_tok];
                if let Some(ce) = c_emb {
                    parts.push(g.reshape(ce, &[batch, 1, d])?);
                }
                parts.push(x_tokens);
                let seq = g.concat(&parts, 1)?;
                if cfg.pos_embed_cond {
                    g.add(seq, pos)?
                } else {
                    // positional rows cover patch tokens only
                    let zeros = Tensor::zeros(self.dtype, &[n_cond, d]);
                    let zn = g.constant(&zeros)?;
                    let full = g.concat(&[zn, pos], 0)?;
                    g.add(seq, full)?
                }
            }
            CondMode::AdaLn => g.add(x_tokens, pos)?,
        };

        // conditioning embedding for adaptive normalization
        let cond = match cfg.cond_mode {
            CondMode::AdaLn => Some(match c_emb {
                Some(ce) => g.add(t_emb, ce)?,
                None => t_emb,
            }),
            CondMode::Token => None,
        };

        // shallow half stores outputs; deep half fuses with its mirror
        let half = cfg.blocks / 2;
        let mut stored: Vec<NodeId> = Vec::with_capacity(half);
        for (i, block) in self.blocks.iter().enumerate() {
            if i > half {
                let partner = stored[skip_partner(cfg.blocks, i)];
                h = match cfg.skip_mode {
                    SkipMode::Concat => {
                        let cat = g.concat(&[partner, h], 2)?;
                        block
                            .skip
                            .as_ref()
                            .expect("deep block has a fusion projection")
                            .apply(g, &self.store, cat)?
                    }
                    SkipMode::Add => g.add(partner, h)?,
                    SkipMode::None => h,
                };
            }
            let _interior = count::enter_interior();
            h = block.forward(g, &self.store, h, cond, cfg)?;
            drop(_interior);
            if i < half {
                stored.push(h);
            }
        }

        // drop condition tokens, normalize, decode
        let h = if n_cond > 0 {
            g.narrow(h, 1, n_cond, j)?
        } else {
            h
        };
        let fg = g.param(&self.store, self.final_gamma)?;
        let fb = g.param(&self.store, self.final_beta)?;
        let hn = g.layer_norm(h, fg, fb, LN_EPS)?;
        let decoded = self.decoder.apply(g, &self.store, hn)?; // [B, J, width]

        let pd = cfg.patch_dim();
        let umap = Rc::new(unpatchify_map(batch, cfg.image_h, cfg.image_w, cfg.image_c, p));
        let out_shape = [batch, cfg.image_h, cfg.image_w, cfg.image_c];
        let eps_tok = if cfg.learn_sigma {
            g.narrow(decoded, 2, 0, pd)?
        } else {
            decoded
        };
        let eps = g.gather(eps_tok, Rc::clone(&umap), &out_shape)?;
        let v = if cfg.learn_sigma {
            let v_tok = g.narrow(decoded, 2, pd, pd)?;
            Some(g.gather(v_tok, umap, &out_shape)?)
        } else {
            None
        };
        Ok((eps, v))
    }

    /// Inference helper: run one forward without gradients and return plain
    /// tensors.
    pub fn predict(
        &self,
        x: &Tensor,
        t: &[usize],
        classes: Option<&[usize]>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::inference(self.dtype);
        let xn = g.leaf(x, false)?;
        let (eps, v) = self.forward_on(&mut g, xn, t, classes)?;
        Ok((g.value_tensor(eps), v.map(|n| g.value_tensor(n))))
    }

    /// Parameter inventory grouped by component; subtotals sum to the total.
    pub fn inventory(&self) -> Vec<(String, u64)> {
        let mut rows: Vec<(String, u64)> = Vec::new();
        let mut bump = |key: String, n: u64| {
            if let Some(r) = rows.iter_mut().find(|(k, _)| *k == key) {
                r.1 += n;
            } else {
                rows.push((key, n));
            }
        };
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            let n = self.store.value(id).len() as u64;
            let key = if name.starts_with("blocks.") {
                if name.contains(".skip.") {
                    "skip_projections".to_string()
                } else {
                    "ssm_blocks".to_string()
                }
            } else {
                name.split('.').next().unwrap_or(&name).to_string()
            };
            bump(key, n);
        }
        rows
    }

    pub fn total_params(&self) -> u64 {
        self.store.total_scalars() as u64
    }
}

/// Closed-form parameter count for a config; equals
/// [`DisModel::total_params`] of the built model.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden_dim as u64;
    let din = cfg.inner_dim() as u64;
    let n = cfg.ssm_dim as u64;
    let dt = cfg.dt_rank() as u64;
    let l = cfg.blocks as u64;
    let k = CONV_KERNEL as u64;

    let patch_embed = cfg.patch_dim() as u64 * d + d;
    let pos_rows = if cfg.pos_embed_cond {
        cfg.seq_len() as u64
    } else {
        cfg.tokens() as u64
    };
    let pos = pos_rows * d;
    let time_mlp = (TIME_FREQ_DIM as u64 * d + d) + (d * d + d);
    let class_embed = if cfg.num_classes > 0 {
        (cfg.num_classes as u64 + 1) * d
    } else {
        0
    };

    let per_direction = din * n      // a_log
        + din * dt + dt * din + din  // step-size projection (low rank) + bias
        + 2 * din * n                // b_proj, c_proj
        + din; // d_skip
    let norm_cost = match cfg.cond_mode {
        CondMode::Token => 2 * d,
        CondMode::AdaLn => d * 2 * d + 2 * d,
    };
    let per_block = norm_cost
        + 2 * d * din          // lin_in, lin_g
        + din * k + din        // conv
        + 2 * per_direction
        + din * d; // out_proj
    let skips = if cfg.skip_mode == SkipMode::Concat {
        (l / 2) * (2 * d * d + d)
    } else {
        0
    };

    let final_norm = 2 * d;
    let decoder = d * cfg.decoder_width() as u64 + cfg.decoder_width() as u64;

    patch_embed + pos + time_mlp + class_embed + l * per_block + skips + final_norm + decoder
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::sized(3, 8);
        cfg.ssm_dim = 4;
        cfg.patch_size = 2;
        cfg.image_h = 4;
        cfg.image_w = 4;
        cfg.image_c = 1;
        cfg.num_classes = 2;
        cfg
    }

    #[test]
    fn patchify_token_counts() {
        let img = Tensor::zeros(DType::F32, &[32, 32, 3]);
        let t4 = patchify(&img, 4).unwrap();
        assert_eq!(t4.shape(), &[64, 48]);
        let t2 = patchify(&img, 2).unwrap();
        assert_eq!(t2.shape(), &[256, 12]);
    }

    #[test]
    fn patchify_unpatchify_inverse_bit_exact() {
        let mut rng = Rng::seed(4);
        for &(h, w, c, p) in &[(8usize, 8usize, 1usize, 2usize), (8, 4, 3, 2), (16, 16, 2, 4), (8, 8, 3, 8)] {
            let vals: Vec<f32> = (0..h * w * c).map(|_| rng.normal() as f32).collect();
            let img = Tensor::from_f32(&[h, w, c], vals).unwrap();
            let tokens = patchify(&img, p).unwrap();
            let back = unpatchify(&tokens, p, h, w, c).unwrap();
            assert_eq!(img, back, "geometry {h}x{w}x{c} p={p}");
        }
    }

    #[test]
    fn patchify_layout_channel_fastest() {
        // 4x4 single-channel image, p=2: token 0 is the top-left patch in
        // row-major (y, x) order.
        let vals: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Tensor::from_f32(&[4, 4, 1], vals).unwrap();
        let tokens = patchify(&img, 2).unwrap();
        let tv = tokens.to_f64_vec();
        assert_eq!(&tv[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tv[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn unpatchify_rejects_count_mismatch() {
        let tokens = Tensor::zeros(DType::F32, &[3, 4]);
        assert!(unpatchify(&tokens, 2, 4, 4, 1).is_err());
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let mut cfg = tiny_config();
        cfg.patch_size = 4;
        cfg.image_h = 6;
        assert!(cfg.validate().is_err());
        let img = Tensor::zeros(DType::F32, &[6, 4, 1]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn single_token_roundtrip() {
        let img = Tensor::from_f32(&[8, 8, 1], (0..64).map(|v| v as f32).collect()).unwrap();
        let tokens = patchify(&img, 8).unwrap();
        assert_eq!(tokens.shape(), &[1, 64]);
        let back = unpatchify(&tokens, 8, 8, 8, 1).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn timestep_embedding_zero_and_distinct() {
        let e0 = timestep_embedding(0, 16);
        for i in 0..8 {
            assert_eq!(e0[i], 0.0);
            assert_eq!(e0[8 + i], 1.0);
        }
        let mut seen = std::collections::HashSet::new();
        for t in 0..1000 {
            let e = timestep_embedding(t, TIME_FREQ_DIM);
            let bits: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "duplicate embedding at t={t}");
        }
    }

    #[test]
    fn sequence_lengths_by_conditioning() {
        let mut cfg = tiny_config();
        cfg.num_classes = 0;
        assert_eq!(cfg.n_cond(), 1);
        assert_eq!(cfg.seq_len(), 4 + 1);
        cfg.num_classes = 5;
        assert_eq!(cfg.n_cond(), 2);
        cfg.cond_mode = CondMode::AdaLn;
        assert_eq!(cfg.n_cond(), 0);
    }

    #[test]
    fn skip_grouping_counts() {
        // 25 blocks: 12 shallow, 1 middle, 12 deep with 12 fusions.
        let l = 25;
        let half = l / 2;
        assert_eq!(half, 12);
        let deep: Vec<usize> = (0..l).filter(|&i| i > half).collect();
        assert_eq!(deep.len(), 12);
        for &i in &deep {
            let p = skip_partner(l, i);
            assert!(p < half, "deep {i} pairs with shallow {p}");
        }
        assert_eq!(skip_partner(l, 13), 11);
        assert_eq!(skip_partner(l, 24), 0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config();
        let model = DisModel::new(cfg.clone(), DType::F32, 7).unwrap();
        let x = Tensor::from_f32(&[2, 4, 4, 1], (0..32).map(|v| v as f32 * 0.01).collect()).unwrap();
        let (eps1, v1) = model.predict(&x, &[3, 500], Some(&[0, 1])).unwrap();
        assert_eq!(eps1.shape(), &[2, 4, 4, 1]);
        let v1 = v1.unwrap();
        assert_eq!(v1.shape(), &[2, 4, 4, 1]);
        let (eps2, v2) = model.predict(&x, &[3, 500], Some(&[0, 1])).unwrap();
        assert_eq!(eps1, eps2);
        assert_eq!(v1, v2.unwrap());

        // same seed, fresh model: bit-identical outputs
        let model2 = DisModel::new(cfg, DType::F32, 7).unwrap();
        let (eps3, _) = model2.predict(&x, &[3, 500], Some(&[0, 1])).unwrap();
        assert_eq!(eps1, eps3);
    }

    #[test]
    fn class_errors() {
        let cfg = tiny_config();
        let model = DisModel::new(cfg, DType::F32, 1).unwrap();
        let x = Tensor::zeros(DType::F32, &[1, 4, 4, 1]);
        // missing ids
        assert!(model.predict(&x, &[0], None).is_err());
        // out of range (null class 2 is allowed, 3 is not)
        assert!(model.predict(&x, &[0], Some(&[2])).is_ok());
        let err = model.predict(&x, &[0], Some(&[3])).unwrap_err();
        assert!(matches!(err, ModelError::ClassRange { id: 3, num_classes: 2 }));
    }

    #[test]
    fn concat_skip_at_init_equals_no_skip() {
        let mut cfg = tiny_config();
        cfg.skip_mode = SkipMode::Concat;
        let m_concat = DisModel::new(cfg.clone(), DType::F64, 11).unwrap();
        cfg.skip_mode = SkipMode::None;
        let m_none = DisModel::new(cfg, DType::F64, 11).unwrap();

        let x = Tensor::from_f64(&[1, 4, 4, 1], (0..16).map(|v| v as f64 * 0.1 - 0.8).collect())
            .unwrap();
        let (e1, _) = m_concat.predict(&x, &[10], Some(&[1])).unwrap();
        let (e2, _) = m_none.predict(&x, &[10], Some(&[1])).unwrap();
        let (a, b) = (e1.to_f64_vec(), e2.to_f64_vec());
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-12, "{} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn add_skip_with_zero_shallow_is_identity_of_deep() {
        // skip_fuse(add) with zero shallow branch equals the deep branch:
        // exercised by the mode-dispatch directly on buffers through tiny
        // graphs rather than a full model.
        let mut g = Graph::new(DType::F64);
        let zero = g.leaf(&Tensor::zeros(DType::F64, &[3, 2]), false).unwrap();
        let vals: Vec<f64> = (0..6).map(|v| v as f64 * 0.3 - 0.7).collect();
        let deep = g
            .leaf(&Tensor::from_f64(&[3, 2], vals).unwrap(), false)
            .unwrap();
        let fused = g.add(zero, deep).unwrap();
        assert_eq!(g.value(fused).to_f64_vec(), g.value(deep).to_f64_vec());
    }

    #[test]
    fn adaln_at_init_equals_plain_layer_norm() {
        let mut cfg = tiny_config();
        cfg.cond_mode = CondMode::AdaLn;
        let model = DisModel::new(cfg, DType::F64, 3).unwrap();
        // identity modulation at init: scale 1, shift 0, so each block's
        // normalization matches an unmodulated layer norm. Check indirectly:
        // two different timesteps produce identical normalization behaviour
        // only through the (zero-weight) projection, so a fresh model's
        // outputs must differ in t solely via... the zero projection kills
        // the conditioning path entirely at init.
        let x = Tensor::from_f64(&[1, 4, 4, 1], (0..16).map(|v| (v as f64) * 0.05).collect())
            .unwrap();
        let (e1, _) = model.predict(&x, &[0], Some(&[0])).unwrap();
        let (e2, _) = model.predict(&x, &[900], Some(&[1])).unwrap();
        assert_eq!(e1.to_f64_vec(), e2.to_f64_vec());
    }

    #[test]
    fn adaln_gradient_reaches_projection() {
        let mut cfg = tiny_config();
        cfg.cond_mode = CondMode::AdaLn;
        let model = DisModel::new(cfg, DType::F64, 5).unwrap();
        let x = Tensor::from_f64(&[1, 4, 4, 1], (0..16).map(|v| (v as f64) * 0.07 - 0.5).collect())
            .unwrap();
        let mut g = Graph::new(DType::F64);
        let xn = g.leaf(&x, false).unwrap();
        let (eps, _) = model.forward_on(&mut g, xn, &[5], Some(&[0])).unwrap();
        let sq = g.mul(eps, eps).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        let id = model.store.find("blocks.0.adaln.w").unwrap();
        let grad = g.param_grad(id).expect("projection receives gradient");
        assert!(grad.to_f64_vec().iter().any(|&v| v != 0.0));
    }

    /// Permuting input patches permutes the corresponding output patches
    /// when position is the only order-sensitive ingredient: positional
    /// table zeroed, both scan directions sharing parameters, and the conv
    /// reduced to its current tap. The probe permutation is full token
    /// reversal (adaptive-norm conditioning, so no prefix tokens).
    #[test]
    fn token_position_correspondence_under_symmetric_setup() {
        let mut cfg = tiny_config();
        cfg.cond_mode = CondMode::AdaLn;
        let mut model = DisModel::new(cfg.clone(), DType::F64, 17).unwrap();

        let zero_pos = Buffer::zeros(DType::F64, cfg.tokens() * cfg.hidden_dim);
        let pos = model.store.find("pos_embed").unwrap();
        model.store.set_value(pos, zero_pos);
        let din = cfg.inner_dim();
        for b in 0..cfg.blocks {
            // pointwise conv: only the current tap survives
            let cid = model.store.find(&format!("blocks.{b}.conv.w")).unwrap();
            let mut w = vec![0.0f64; din * CONV_KERNEL];
            let mut rng = Rng::seed_stream(55, b as u64);
            for d in 0..din {
                w[d * CONV_KERNEL + CONV_KERNEL - 1] = rng.trunc_normal(0.5);
            }
            model.store.set_value(cid, Buffer::from_f64(DType::F64, &w));
            // mirror-direction parameters shared with the forward direction
            for name in ["a_log", "delta_lo.w", "delta_hi.w", "delta_hi.b", "b_proj.w", "c_proj.w", "d_skip"] {
                let src = model.store.find(&format!("blocks.{b}.fwd.{name}")).unwrap();
                let dst = model.store.find(&format!("blocks.{b}.bwd.{name}")).unwrap();
                let vals = model.store.value(src).clone();
                model.store.set_value(dst, vals);
            }
        }

        let mut rng = Rng::seed(7);
        let vals: Vec<f64> = (0..16).map(|_| rng.normal() * 0.3).collect();
        let img = Tensor::from_f64(&[1, 4, 4, 1], vals.clone()).unwrap();
        // reversal of the patch-token order as a spatial permutation
        let fwd_map = patchify_map(1, 4, 4, 1, 2);
        let inv_map = unpatchify_map(1, 4, 4, 1, 2);
        let j = cfg.tokens();
        let pd = cfg.patch_dim();
        let permute = |v: &[f64]| -> Vec<f64> {
            let tokens: Vec<f64> = fwd_map.iter().map(|&i| v[i as usize]).collect();
            let mut rev = vec![0.0; tokens.len()];
            for t in 0..j {
                rev[(j - 1 - t) * pd..(j - t) * pd].copy_from_slice(&tokens[t * pd..(t + 1) * pd]);
            }
            inv_map.iter().map(|&i| rev[i as usize]).collect()
        };
        let img_perm = Tensor::from_f64(&[1, 4, 4, 1], permute(&vals)).unwrap();

        let (out_a, _) = model.predict(&img, &[42], Some(&[1])).unwrap();
        let (out_b, _) = model.predict(&img_perm, &[42], Some(&[1])).unwrap();
        let want = permute(&out_a.to_f64_vec());
        let got = out_b.to_f64_vec();
        for i in 0..want.len() {
            assert!(
                (want[i] - got[i]).abs() < 1e-12,
                "index {i}: {} vs {}",
                want[i],
                got[i]
            );
        }
    }

    #[test]
    fn param_count_matches_built_model() {
        for (cfg_name, cfg) in [
            ("tiny", tiny_config()),
            ("xs", ModelConfig::named("xs").unwrap()),
            ("adaln", {
                let mut c = tiny_config();
                c.cond_mode = CondMode::AdaLn;
                c
            }),
            ("no_skip", {
                let mut c = tiny_config();
                c.skip_mode = SkipMode::None;
                c
            }),
            ("fixed_sigma", {
                let mut c = tiny_config();
                c.learn_sigma = false;
                c
            }),
        ] {
            let model = DisModel::new(cfg.clone(), DType::F32, 0).unwrap();
            assert_eq!(
                param_count(&cfg),
                model.total_params(),
                "config {cfg_name}"
            );
            let inv_total: u64 = model.inventory().iter().map(|(_, n)| n).sum();
            assert_eq!(inv_total, model.total_params(), "inventory sum {cfg_name}");
        }
    }

    #[test]
    fn param_count_scales_quadratically_in_width() {
        let small = param_count(&ModelConfig::sized(25, 384));
        let base = param_count(&ModelConfig::sized(25, 768));
        let ratio = base as f64 / small as f64;
        assert!(ratio > 3.4 && ratio < 4.2, "ratio {ratio}");
    }

    #[test]
    fn reference_band_within_20_percent() {
        for r in &REFERENCE_SIZES {
            let cfg = ModelConfig::sized(r.blocks, r.hidden_dim);
            let count = param_count(&cfg) as f64 / 1e6;
            let dev = (count - r.params_millions) / r.params_millions;
            assert!(
                dev.abs() <= 0.20,
                "{}: {count:.1}M vs reference {}M ({:+.1}%)",
                r.name,
                r.params_millions,
                dev * 100.0
            );
        }
    }
}
