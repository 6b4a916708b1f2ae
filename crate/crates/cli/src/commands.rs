//! Command implementations. Each writes only under its --out directory and
//! persists the resolved configuration so a run is reproducible from
//! (config, seed) alone.

use std::path::{Path, PathBuf};

use dis_core::bench::{
    fit_line_origin, fit_quadratic, model_gflops, run_scaling_sweep, whole_block_macs,
    BENCH_CSV_HEADER,
};
use dis_core::diffusion::{ddpm_sample, NoiseSchedule, SamplerConfig};
use dis_core::model::{param_count, ModelConfig, REFERENCE_SIZES};
use dis_core::ssm::flops_ssm;
use dis_core::trainer::data::{load_dataset, write_pnm};
use dis_core::trainer::{checkpoint, smoothed_tail_loss, train, TrainError};

use crate::config::RunConfig;

/// Exit status conventions: usage/config problems are 1, numeric aborts 2.
pub enum CmdError {
    Config(String),
    Numeric(String),
}

impl CmdError {
    pub fn code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 1,
            CmdError::Numeric(_) => 2,
        }
    }
    pub fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Numeric(m) => m,
        }
    }
}

fn tensor_is_numeric(e: &dis_core::TensorError) -> bool {
    matches!(
        e,
        dis_core::TensorError::NonFinite { .. } | dis_core::TensorError::NumericDomain { .. }
    )
}

fn classify(err: TrainError) -> CmdError {
    use dis_core::diffusion::DiffusionError;
    use dis_core::model::ModelError;
    let numeric = match &err {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } => true,
        TrainError::Tensor(t) => tensor_is_numeric(t),
        TrainError::Model(ModelError::Tensor(t)) => tensor_is_numeric(t),
        TrainError::Diffusion(DiffusionError::Tensor(t)) => tensor_is_numeric(t),
        TrainError::Diffusion(DiffusionError::Model(ModelError::Tensor(t))) => tensor_is_numeric(t),
        _ => false,
    };
    if numeric {
        CmdError::Numeric(err.to_string())
    } else {
        CmdError::Config(err.to_string())
    }
}

fn cfg_err<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Config(e.to_string())
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CmdError::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    steps_override: Option<usize>,
) -> Result<(), CmdError> {
    let mut run = load_run_config(config_path)?;
    if let Some(seed) = seed_override {
        run.seed = seed;
    }
    if let Some(steps) = steps_override {
        run.steps = steps;
    }
    run_training(&run, out_dir).map(|_| ())
}

/// Shared by train and ablate: writes resolved.cfg, metrics.csv and
/// checkpoints into `out_dir`, returning the final smoothed loss.
fn run_training(run: &RunConfig, out_dir: &Path) -> Result<f64, CmdError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::Config(format!("{}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("resolved.cfg"), run.emit())
        .map_err(|e| CmdError::Config(e.to_string()))?;

    let dataset = load_dataset(&run.dataset, run.dataset_size, run.seed).map_err(classify)?;
    let model_cfg = run.model_config();
    if model_cfg.num_classes > 0 && dataset.num_classes != model_cfg.num_classes {
        return Err(CmdError::Config(format!(
            "config expects {} classes, dataset provides {}",
            model_cfg.num_classes, dataset.num_classes
        )));
    }
    let out = train(model_cfg, &run.train_config(), &dataset, Some(out_dir)).map_err(classify)?;
    let tail = smoothed_tail_loss(&out.metrics, 100);
    println!(
        "trained {} steps; final 100-step smoothed loss_simple = {tail:.4}",
        out.metrics.len()
    );
    Ok(tail)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    ckpt_path: &Path,
    out_dir: &Path,
    n: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    class: Option<usize>,
    raw_weights: bool,
) -> Result<(), CmdError> {
    let loaded = checkpoint::load(ckpt_path).map_err(cfg_err)?;
    let schedule = NoiseSchedule::linear(
        loaded.schedule.timesteps,
        loaded.schedule.beta_start,
        loaded.schedule.beta_end,
    )
    .map_err(cfg_err)?;
    let num_classes = loaded.model.config.num_classes;
    if let Some(c) = class {
        if c >= num_classes {
            return Err(CmdError::Config(format!(
                "class {c} out of range: model has num_classes = {num_classes}"
            )));
        }
    }
    // evaluation uses the EMA weights unless explicitly asked otherwise
    let model = if raw_weights {
        loaded.model
    } else {
        loaded.model_with_ema()
    };

    let classes: Option<Vec<usize>> = if num_classes > 0 {
        Some(match class {
            Some(c) => vec![c; n],
            None => (0..n).map(|i| i % num_classes).collect(),
        })
    } else {
        None
    };

    let sampler = SamplerConfig {
        num_steps: steps,
        guidance_scale: cfg_scale,
        seed,
        clip_x0: Some((-1.0, 1.0)),
    };
    let images = ddpm_sample(&model, &schedule, n, classes.clone(), &sampler).map_err(cfg_err)?;

    std::fs::create_dir_all(out_dir).map_err(cfg_err)?;
    let (h, w, c) = (
        model.config.image_h,
        model.config.image_w,
        model.config.image_c,
    );
    let ext = if c == 3 { "ppm" } else { "pgm" };
    let mut manifest = String::from("filename,index,class,seed,steps,cfg_scale\n");
    let flat = images.to_f64_vec();
    for i in 0..n {
        let class_tag = classes
            .as_ref()
            .map(|cs| cs[i].to_string())
            .unwrap_or_else(|| "x".to_string());
        let name = format!("sample_s{seed}_c{class_tag}_{i:03}.{ext}");
        let vals: Vec<f32> = flat[i * h * w * c..(i + 1) * h * w * c]
            .iter()
            .map(|&v| v as f32)
            .collect();
        let img = dis_core::Tensor::from_f32(&[h, w, c], vals).map_err(cfg_err)?;
        write_pnm(&out_dir.join(&name), &img).map_err(cfg_err)?;
        manifest.push_str(&format!(
            "{name},{i},{class_tag},{seed},{steps},{cfg_scale}\n"
        ));
    }
    std::fs::write(out_dir.join("manifest.csv"), manifest).map_err(cfg_err)?;
    println!("wrote {n} samples to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench(
    j_list: &[usize],
    d: usize,
    n: usize,
    out_csv: Option<&Path>,
    configs_mode: bool,
) -> Result<(), CmdError> {
    if configs_mode {
        println!("size     params        ref(M)   dev%    gflops   ref(G)   dev%     total(G)");
        for r in REFERENCE_SIZES {
            let cfg = ModelConfig::sized(r.blocks, r.hidden_dim);
            let rep = model_gflops(&cfg, r.name).map_err(cfg_err)?;
            let p_m = rep.params as f64 / 1e6;
            let p_dev = 100.0 * (p_m - r.params_millions) / r.params_millions;
            let g_dev = 100.0 * (rep.measured_gflops - r.gflops) / r.gflops;
            println!(
                "{:<8} {:<13} {:<8} {:<+7.1} {:<8.3} {:<8} {:<+8.1} {:.3}",
                r.name, rep.params, r.params_millions, p_dev, rep.measured_gflops, r.gflops,
                g_dev, rep.total_gflops
            );
        }
        println!(
            "\n(gflops = module-visible linear layers at 2 flops/MAC, sequence blocks fused;\n total = every forward multiply at 2 flops/MAC)"
        );
        return Ok(());
    }

    let records = run_scaling_sweep(j_list, d, n, 5).map_err(cfg_err)?;
    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    println!("{BENCH_CSV_HEADER}");
    for r in &records {
        println!("{}", r.csv());
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    if let Some(path) = out_csv {
        std::fs::write(path, &csv).map_err(cfg_err)?;
    }

    let xs: Vec<f64> = j_list.iter().map(|&j| j as f64).collect();
    let ssm_counts: Vec<f64> = records
        .iter()
        .filter(|r| matches!(r.kernel, dis_core::bench::KernelKind::Ssm))
        .map(|r| r.counted_macs as f64)
        .collect();
    let att_counts: Vec<f64> = records
        .iter()
        .filter(|r| matches!(r.kernel, dis_core::bench::KernelKind::Attention))
        .map(|r| r.counted_macs as f64)
        .collect();
    let line = fit_line_origin(&xs, &ssm_counts);
    let quad = fit_quadratic(&xs, &att_counts);
    println!(
        "\nssm:  macs ~ {:.1} * J  (R^2 = {:.6}); formula slope {} per J",
        line.slope,
        line.r2,
        flops_ssm(1, d as u64, n as u64)
    );
    println!(
        "attn: macs ~ {:.1} + {:.1} J + {:.3} J^2  (J^2 coefficient: 2D = {})",
        quad.c0,
        quad.c1,
        quad.c2,
        2 * d
    );
    println!("\nwhole-block scope (projections + conv + both scans), per J:");
    for &j in j_list {
        println!(
            "  J={j:<5} whole_block={:<12} formula={}",
            whole_block_macs(j, d, n),
            flops_ssm(j as u64, d as u64, n as u64)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn cmd_ablate(axis: &str, config_path: &Path, out_dir: &Path) -> Result<(), CmdError> {
    let base = load_run_config(config_path)?;
    let variants: Vec<(String, RunConfig)> = match axis {
        "patch" => [2usize, 4, 8]
            .iter()
            .map(|&p| {
                let mut c = base.clone();
                c.patch_size = p;
                (format!("patch{p}"), c)
            })
            .collect(),
        "skip" => ["concat", "add", "none"]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.skip_mode = dis_core::model::SkipMode::parse(m).unwrap();
                (format!("skip_{m}"), c)
            })
            .collect(),
        "cond" => ["token", "adaln"]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.cond_mode = dis_core::model::CondMode::parse(m).unwrap();
                (format!("cond_{m}"), c)
            })
            .collect(),
        "scale" => [("xs", 3usize, 64usize), ("s-like", 5, 96), ("b-like", 7, 128)]
            .iter()
            .map(|&(name, l, d)| {
                let mut c = base.clone();
                c.blocks = l;
                c.hidden_dim = d;
                (format!("scale_{name}"), c)
            })
            .collect(),
        other => {
            return Err(CmdError::Config(format!(
                "unknown ablation axis '{other}' (patch|skip|cond|scale)"
            )))
        }
    };

    std::fs::create_dir_all(out_dir).map_err(cfg_err)?;
    let mut summary = String::from("variant,final_smoothed_loss\n");
    for (name, run) in &variants {
        // every variant shares the base seed, hence identical data order
        println!("[ablate] {name}");
        let tail = run_training(run, &out_dir.join(name))?;
        summary.push_str(&format!("{name},{tail}\n"));
    }
    std::fs::write(out_dir.join("summary.csv"), &summary).map_err(cfg_err)?;
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

pub fn cmd_inspect(ckpt_path: &Path) -> Result<(), CmdError> {
    let loaded = checkpoint::load(ckpt_path).map_err(cfg_err)?;
    let model = &loaded.model;
    let cfg = &model.config;
    println!("checkpoint: {}", ckpt_path.display());
    println!("trained steps: {}", loaded.step);
    println!(
        "schedule: T={} betas [{}, {}]",
        loaded.schedule.timesteps, loaded.schedule.beta_start, loaded.schedule.beta_end
    );
    println!(
        "model: L={} D={} E={} N={} p={} image {}x{}x{} classes={} cond={} skip={} learn_sigma={}",
        cfg.blocks,
        cfg.hidden_dim,
        cfg.expand,
        cfg.ssm_dim,
        cfg.patch_size,
        cfg.image_h,
        cfg.image_w,
        cfg.image_c,
        cfg.num_classes,
        cfg.cond_mode.as_str(),
        cfg.skip_mode.as_str(),
        cfg.learn_sigma,
    );
    println!("\nparameter inventory:");
    let inv = model.inventory();
    let mut total = 0u64;
    for (component, count) in &inv {
        println!("  {component:<18} {count:>12}");
        total += count;
    }
    println!("  {:<18} {total:>12}", "total");
    assert_eq!(total, model.total_params());
    assert_eq!(total, param_count(cfg), "analytic count matches built model");
    if let Some(r) = REFERENCE_SIZES
        .iter()
        .find(|r| r.blocks == cfg.blocks && r.hidden_dim == cfg.hidden_dim)
    {
        println!(
            "\nreference size '{}': {:.1}M params (this build: {:.1}M, {:+.1}%)",
            r.name,
            r.params_millions,
            total as f64 / 1e6,
            100.0 * (total as f64 / 1e6 - r.params_millions) / r.params_millions
        );
    }
    Ok(())
}

pub fn parse_j_list(s: &str) -> Result<Vec<usize>, CmdError> {
    let list: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match list {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CmdError::Config(format!(
            "malformed sequence-length list '{s}' (expected e.g. 64,128,256,512)"
        ))),
    }
}

pub fn default_out_dir(prefix: &str) -> PathBuf {
    PathBuf::from(format!("runs/{prefix}"))
}
