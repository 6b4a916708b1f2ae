//! Empirical cost verification: instrumented MAC counts and wall-clock
//! medians for the scan and attention kernels across sequence lengths, plus
//! whole-model Gflops reports for the standard sizes.
//!
//! Counts are deterministic (they depend on shapes only). Two scopes exist:
//! the *formula scope* executes exactly the multiplies the closed-form cost
//! functions model (see [`crate::ssm::reference`]), and the *whole block*
//! scope additionally includes the gate/conv/projection work of a full
//! sequence block.

use std::time::Instant;

use thiserror::Error;

use crate::model::{param_count, DisModel, ModelConfig, REFERENCE_SIZES};
use crate::rng::Rng;
use crate::ssm::reference::{AttentionReference, SsmFormulaScan};
use crate::ssm::{flops_attention, flops_ssm};
use crate::tensor::{count, Tensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Ssm,
    Attention,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Ssm => "ssm",
            KernelKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub kernel: KernelKind,
    pub j: usize,
    pub d: usize,
    pub n: usize,
    pub counted_macs: u64,
    pub formula_macs: u64,
    pub wall_ns: u64,
    pub repeats: usize,
}

pub const BENCH_CSV_HEADER: &str = "kernel,J,D,N,counted_macs,formula_macs,wall_ns";

impl BenchRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.kernel.as_str(),
            self.j,
            self.d,
            self.n,
            self.counted_macs,
            self.formula_macs,
            self.wall_ns
        )
    }
}

fn median_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Run both kernels at each sequence length; counted MACs come from the
/// instrumented reference kernels, wall times are medians over `repeats`.
pub fn run_scaling_sweep(
    j_list: &[usize],
    d: usize,
    n: usize,
    repeats: usize,
) -> Result<Vec<BenchRecord>, BenchError> {
    if j_list.len() < 4 {
        return Err(BenchError::Invalid(format!(
            "need at least 4 sequence lengths, got {}",
            j_list.len()
        )));
    }
    if !j_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(BenchError::Invalid(
            "sequence lengths must be strictly increasing".into(),
        ));
    }
    if j_list[0] == 0 || d == 0 || n == 0 {
        return Err(BenchError::Invalid("dimensions must be positive".into()));
    }
    let repeats = repeats.max(5);
    let din = 2 * d;
    let mut records = Vec::with_capacity(2 * j_list.len());

    for &j in j_list {
        let mut rng = Rng::seed_stream(17, j as u64);
        // SSM formula-scope kernel
        let scan = SsmFormulaScan::new(din, n);
        let x: Vec<f32> = (0..j * din).map(|_| rng.normal() as f32).collect();
        let delta: Vec<f32> = (0..j * din)
            .map(|_| 0.001 + rng.uniform() as f32 * 0.05)
            .collect();
        let bsel: Vec<f32> = (0..j * n).map(|_| rng.normal() as f32 * 0.3).collect();
        let csel: Vec<f32> = (0..j * n).map(|_| rng.normal() as f32 * 0.3).collect();
        let mut macs = 0;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let (y, m) = scan.run(&x, &delta, &bsel, &csel, j);
            times.push(t0.elapsed().as_nanos() as u64);
            macs = m;
            std::hint::black_box(y);
        }
        records.push(BenchRecord {
            kernel: KernelKind::Ssm,
            j,
            d,
            n,
            counted_macs: macs,
            formula_macs: flops_ssm(j as u64, d as u64, n as u64),
            wall_ns: median_ns(times),
            repeats,
        });

        // attention kernel
        let att = AttentionReference::new(d, 23);
        let xa: Vec<f32> = (0..j * d).map(|_| rng.normal() as f32).collect();
        let mut macs = 0;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let (y, m) = att.forward(&xa, j);
            times.push(t0.elapsed().as_nanos() as u64);
            macs = m;
            std::hint::black_box(y);
        }
        records.push(BenchRecord {
            kernel: KernelKind::Attention,
            j,
            d,
            n,
            counted_macs: macs,
            formula_macs: flops_attention(j as u64, d as u64),
            wall_ns: median_ns(times),
            repeats,
        });
    }
    Ok(records)
}

/// Whole-block MAC count at one sequence length: the two input projections,
/// depthwise conv, both directional selection projections and scans, the
/// gate multiply and the output projection, counted per executed multiply.
pub fn whole_block_macs(j: usize, d: usize, n: usize) -> u64 {
    let din = 2 * d;
    let dt_rank = d.div_ceil(16);
    let mut macs = 0u64;
    // lin_in, lin_g: [J, D] @ [D, Din] twice
    macs += 2 * (j * d * din) as u64;
    // depthwise conv, kernel 4
    macs += (j * din * 4) as u64;
    // per direction: delta low/high, b/c projections, production scan
    let per_dir = (j * din * dt_rank) as u64
        + (j * dt_rank * din) as u64
        + 2 * (j * din * n) as u64
        + (j * din * (6 * n + 1)) as u64;
    macs += 2 * per_dir;
    // gate multiply is elementwise (not counted); out_proj:
    macs += (j * din * d) as u64;
    macs
}

// ---------------------------------------------------------------------------
// Least-squares fits over the sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct OriginLineFit {
    pub slope: f64,
    pub r2: f64,
}

/// Least squares of `y = slope * x` (zero intercept), with the coefficient
/// of determination about the mean.
pub fn fit_line_origin(xs: &[f64], ys: &[f64]) -> OriginLineFit {
    assert_eq!(xs.len(), ys.len());
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|&x| x * x).sum();
    let slope = sxy / sxx;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|&y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - slope * x).powi(2))
        .sum();
    OriginLineFit {
        slope,
        r2: 1.0 - ss_res / ss_tot,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Degree-2 least squares via the 3x3 normal equations.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> QuadFit {
    assert!(xs.len() >= 3);
    let mut s = [0.0f64; 5]; // sums of x^0..x^4
    let mut t = [0.0f64; 3]; // sums of y x^0..x^2
    for (&x, &y) in xs.iter().zip(ys) {
        let mut xp = 1.0;
        for sv in s.iter_mut() {
            *sv += xp;
            xp *= x;
        }
        let mut xp = 1.0;
        for tv in t.iter_mut() {
            *tv += y * xp;
            xp *= x;
        }
    }
    // normal matrix rows: [s0 s1 s2; s1 s2 s3; s2 s3 s4]
    let mut a = [
        [s[0], s[1], s[2], t[0]],
        [s[1], s[2], s[3], t[1]],
        [s[2], s[3], s[4], t[2]],
    ];
    // Gaussian elimination with partial pivoting
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..4 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    QuadFit {
        c0: a[0][3] / a[0][0],
        c1: a[1][3] / a[1][1],
        c2: a[2][3] / a[2][2],
    }
}

// ---------------------------------------------------------------------------
// Whole-model cost report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GflopsReport {
    pub name: String,
    /// Module-visible linear layers only (patch embedding, skip fusions,
    /// conditioning MLP, decoder) at two flops per MAC, with each sequence
    /// block treated as one fused kernel. This is the scope a module-hook
    /// profiler observes, and the comparable number for the reference
    /// column.
    pub measured_gflops: f64,
    /// Every multiply in the forward pass, at two flops per MAC.
    pub total_gflops: f64,
    pub visible_macs: u64,
    pub total_macs: u64,
    pub params: u64,
    pub reference_gflops: Option<f64>,
    pub reference_params_millions: Option<f64>,
}

/// One instrumented forward at the measurement geometry (unchanged from the
/// config; the standard reports use 32x32, patch 4, unconditional).
pub fn model_gflops(config: &ModelConfig, name: &str) -> Result<GflopsReport, BenchError> {
    let model = DisModel::new_zeroed(config.clone(), crate::tensor::DType::F32)?;
    let x = Tensor::zeros(
        crate::tensor::DType::F32,
        &[1, config.image_h, config.image_w, config.image_c],
    );
    count::reset_and_enable();
    let classes_store;
    let classes = if config.num_classes > 0 {
        classes_store = vec![0usize];
        Some(classes_store.as_slice())
    } else {
        None
    };
    model.predict(&x, &[0], classes)?;
    let snap = count::snapshot();
    count::disable();

    let reference = REFERENCE_SIZES
        .iter()
        .find(|r| r.blocks == config.blocks && r.hidden_dim == config.hidden_dim);
    Ok(GflopsReport {
        name: name.to_string(),
        measured_gflops: 2.0 * snap.visible_linear as f64 / 1e9,
        total_gflops: 2.0 * snap.total as f64 / 1e9,
        visible_macs: snap.visible_linear,
        total_macs: snap.total,
        params: param_count(config),
        reference_gflops: reference.map(|r| r.gflops),
        reference_params_millions: reference.map(|r| r.params_millions),
    })
}
