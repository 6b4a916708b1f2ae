//! Run configuration: a section-free UTF-8 file of `key = value` lines.
//! Unknown keys are rejected; parse -> emit -> parse is idempotent (emits
//! every key in a fixed order with round-tripping number formatting).

use dis_core::model::{CondMode, ModelConfig, SkipMode};
use dis_core::ssm::Combine;
use dis_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
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
    // diffusion + training
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub vlb_lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub cond_dropout: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub dataset: String,
    pub dataset_size: usize,
    pub flip_augment: bool,
    pub seed: u64,
    // sampling
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub clip_x0: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            blocks: 3,
            hidden_dim: 64,
            expand: 2,
            ssm_dim: 16,
            patch_size: 2,
            image_h: 8,
            image_w: 8,
            image_c: 1,
            num_classes: 2,
            cond_mode: CondMode::Token,
            skip_mode: SkipMode::Concat,
            learn_sigma: true,
            pos_embed_cond: true,
            bidir_combine: Combine::Mean,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            vlb_lambda: 1e-3,
            steps: 2000,
            batch_size: 64,
            base_lr: 1e-4,
            cond_dropout: 0.1,
            ema_decay: 0.9999,
            grad_clip: 0.0,
            checkpoint_every: 1000,
            dataset: "two-gaussians-8x8".to_string(),
            dataset_size: 512,
            flip_augment: false,
            seed: 0,
            sample_steps: 250,
            guidance_scale: 1.0,
            clip_x0: true,
        }
    }
}

macro_rules! keys {
    ($m:ident, $cfg:ident) => {
        $m!($cfg, blocks);
        $m!($cfg, hidden_dim);
        $m!($cfg, expand);
        $m!($cfg, ssm_dim);
        $m!($cfg, patch_size);
        $m!($cfg, image_h);
        $m!($cfg, image_w);
        $m!($cfg, image_c);
        $m!($cfg, num_classes);
        $m!($cfg, cond_mode);
        $m!($cfg, skip_mode);
        $m!($cfg, learn_sigma);
        $m!($cfg, pos_embed_cond);
        $m!($cfg, bidir_combine);
        $m!($cfg, timesteps);
        $m!($cfg, beta_start);
        $m!($cfg, beta_end);
        $m!($cfg, vlb_lambda);
        $m!($cfg, steps);
        $m!($cfg, batch_size);
        $m!($cfg, base_lr);
        $m!($cfg, cond_dropout);
        $m!($cfg, ema_decay);
        $m!($cfg, grad_clip);
        $m!($cfg, checkpoint_every);
        $m!($cfg, dataset);
        $m!($cfg, dataset_size);
        $m!($cfg, flip_augment);
        $m!($cfg, seed);
        $m!($cfg, sample_steps);
        $m!($cfg, guidance_scale);
        $m!($cfg, clip_x0);
    };
}

trait Field: Sized {
    fn render(&self) -> String;
    fn read(s: &str) -> Result<Self, String>;
}

macro_rules! field_fromstr {
    ($t:ty) => {
        impl Field for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("bad value '{s}'"))
            }
        }
    };
}
field_fromstr!(usize);
field_fromstr!(u64);
field_fromstr!(f64);
field_fromstr!(bool);

impl Field for String {
    fn render(&self) -> String {
        self.clone()
    }
    fn read(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
}

impl Field for CondMode {
    fn render(&self) -> String {
        self.as_str().to_string()
    }
    fn read(s: &str) -> Result<Self, String> {
        CondMode::parse(s).ok_or_else(|| format!("cond_mode must be token|adaln, got '{s}'"))
    }
}

impl Field for SkipMode {
    fn render(&self) -> String {
        self.as_str().to_string()
    }
    fn read(s: &str) -> Result<Self, String> {
        SkipMode::parse(s).ok_or_else(|| format!("skip_mode must be concat|add|none, got '{s}'"))
    }
}

impl Field for Combine {
    fn render(&self) -> String {
        self.as_str().to_string()
    }
    fn read(s: &str) -> Result<Self, String> {
        Combine::parse(s).ok_or_else(|| format!("bidir_combine must be mean|sum, got '{s}'"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(format!("line {}: duplicate key '{key}'", lineno + 1));
            }
            seen.push(key.to_string());
            let mut matched = false;
            macro_rules! try_set {
                ($cfg:ident, $field:ident) => {
                    if key == stringify!($field) {
                        $cfg.$field = Field::read(value)
                            .map_err(|e| format!("line {}: {key}: {e}", lineno + 1))?;
                        matched = true;
                    }
                };
            }
            keys!(try_set, cfg);
            if !matched {
                return Err(format!("line {}: unknown key '{key}'", lineno + 1));
            }
        }
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        macro_rules! emit_key {
            ($cfg:ident, $field:ident) => {
                out.push_str(&format!(
                    "{} = {}\n",
                    stringify!($field),
                    Field::render(&$cfg.$field)
                ));
            };
        }
        let cfg = self;
        keys!(emit_key, cfg);
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            hidden_dim: self.hidden_dim,
            expand: self.expand,
            ssm_dim: self.ssm_dim,
            patch_size: self.patch_size,
            image_h: self.image_h,
            image_w: self.image_w,
            image_c: self.image_c,
            num_classes: self.num_classes,
            cond_mode: self.cond_mode,
            skip_mode: self.skip_mode,
            learn_sigma: self.learn_sigma,
            pos_embed_cond: self.pos_embed_cond,
            bidir_combine: self.bidir_combine,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            cond_dropout: self.cond_dropout,
            ema_decay: self.ema_decay,
            grad_clip: self.grad_clip,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            vlb_lambda: self.vlb_lambda,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }
}
