//! Selective state-space building blocks: zero-order-hold discretization,
//! per-direction parameter bundles, the bidirectional combiner, and the
//! closed-form cost functions for SSM and self-attention kernels together
//! with instrumented reference implementations of both.

use crate::rng::Rng;
use crate::tensor::{
    kernels, DType, Graph, NodeId, ParamId, ParamStore, Result, Tensor, TensorError,
};

/// Zero-order-hold discretization of a scalar (diagonal-element) system:
/// `a_bar = exp(delta*a)`, `b_bar = (delta*a)^-1 (exp(delta*a) - 1) delta*b`.
/// At `a = 0` the removable singularity is filled with the analytic limit
/// `b_bar = delta * b`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let u = delta * a;
    let a_bar = u.exp();
    let b_bar = if a == 0.0 {
        delta * b
    } else {
        u.exp_m1() / a * b
    };
    (a_bar, b_bar)
}

/// How the two direction outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Mean,
    Sum,
}

impl Combine {
    pub fn parse(s: &str) -> Option<Combine> {
        match s {
            "mean" => Some(Combine::Mean),
            "sum" => Some(Combine::Sum),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Combine::Mean => "mean",
            Combine::Sum => "sum",
        }
    }
}

/// Parameters of one scan direction. The step size is produced by a low-rank
/// affine map `din -> dt_rank -> din` followed by softplus, so it is strictly
/// positive; the diagonal state matrix is stored as `log(-A)`, so
/// `A = -exp(a_log)` is strictly negative and `|exp(delta*A)| < 1` for any
/// positive step.
#[derive(Debug, Clone)]
pub struct SsmDirectionParams {
    pub a_log: ParamId,      // [din, n]
    pub delta_lo: ParamId,   // [din, dt_rank]
    pub delta_hi_w: ParamId, // [dt_rank, din]
    pub delta_hi_b: ParamId, // [din]
    pub b_proj: ParamId,     // [din, n]
    pub c_proj: ParamId,     // [din, n]
    pub d_skip: ParamId,     // [din]
}

fn trunc_normal(rng: &mut Rng, dtype: DType, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.trunc_normal(std)).collect();
    Tensor::new(shape.to_vec(), crate::tensor::Buffer::from_f64(dtype, &vals)).unwrap()
}

fn full(dtype: DType, shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        crate::tensor::Buffer::from_f64(dtype, &vec![v; n]),
    )
    .unwrap()
}

impl SsmDirectionParams {
    /// Register freshly initialized parameters under `prefix`.
    ///
    /// * `a_log[d][k] = ln(k+1)` so the state decay spans the standard
    ///   real-diagonal spectrum `A_k = -(k+1)`.
    /// * `delta_hi_b` is set so `softplus(bias)` lands log-uniformly in
    ///   `[0.001, 0.1]`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        n: usize,
        dt_rank: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Self {
        let mut a_vals = Vec::with_capacity(din * n);
        for _ in 0..din {
            for k in 0..n {
                a_vals.push(((k + 1) as f64).ln());
            }
        }
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::new(vec![din, n], crate::tensor::Buffer::from_f64(dtype, &a_vals)).unwrap(),
        );
        let delta_lo = store.add(
            format!("{prefix}.delta_lo.w"),
            trunc_normal(rng, dtype, &[din, dt_rank], 0.02),
        );
        let delta_hi_w = store.add(
            format!("{prefix}.delta_hi.w"),
            trunc_normal(rng, dtype, &[dt_rank, din], 0.02),
        );
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let bias: Vec<f64> = (0..din)
            .map(|_| {
                let dt = (lo + rng.uniform() * (hi - lo)).exp();
                // softplus^-1(dt) = dt + ln(1 - exp(-dt))
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let delta_hi_b = store.add(
            format!("{prefix}.delta_hi.b"),
            Tensor::new(vec![din], crate::tensor::Buffer::from_f64(dtype, &bias)).unwrap(),
        );
        let b_proj = store.add(
            format!("{prefix}.b_proj.w"),
            trunc_normal(rng, dtype, &[din, n], 0.02),
        );
        let c_proj = store.add(
            format!("{prefix}.c_proj.w"),
            trunc_normal(rng, dtype, &[din, n], 0.02),
        );
        let d_skip = store.add(format!("{prefix}.d_skip"), full(dtype, &[din], 1.0));
        SsmDirectionParams {
            a_log,
            delta_lo,
            delta_hi_w,
            delta_hi_b,
            b_proj,
            c_proj,
            d_skip,
        }
    }

    /// One selective scan over `x: [..., J, din]` in this direction's order.
    pub fn scan(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let lo = g.param(store, self.delta_lo)?;
        let hi_w = g.param(store, self.delta_hi_w)?;
        let hi_b = g.param(store, self.delta_hi_b)?;
        let bp = g.param(store, self.b_proj)?;
        let cp = g.param(store, self.c_proj)?;
        let al = g.param(store, self.a_log)?;
        let dsk = g.param(store, self.d_skip)?;

        let d1 = g.matmul(x, lo)?;
        let d2 = g.matmul(d1, hi_w)?;
        let d3 = g.add(d2, hi_b)?;
        let delta = g.softplus(d3)?;
        let bsel = g.matmul(x, bp)?;
        let csel = g.matmul(x, cp)?;
        let ea = g.exp(al)?;
        let a = g.neg(ea)?;
        g.selective_scan(x, delta, bsel, csel, a, dsk)
    }
}

/// Forward scan plus reversed backward scan, combined elementwise.
/// The backward branch sees the sequence reversed and its output is reversed
/// back, so both branches produce `[..., J, din]` in input order.
pub fn bidirectional_ssm(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    fwd: &SsmDirectionParams,
    bwd: &SsmDirectionParams,
    combine: Combine,
) -> Result<NodeId> {
    let rank = g.shape(x).len();
    if rank < 2 {
        return Err(TensorError::Invalid {
            op: "bidirectional_ssm",
            msg: "input must be at least [J, din]".into(),
        });
    }
    let token_axis = rank - 2;
    let y_f = fwd.scan(g, store, x)?;
    let x_rev = g.flip(x, token_axis)?;
    let y_b_rev = bwd.scan(g, store, x_rev)?;
    let y_b = g.flip(y_b_rev, token_axis)?;
    let s = g.add(y_f, y_b)?;
    match combine {
        Combine::Mean => g.affine(s, 0.5, 0.0),
        Combine::Sum => Ok(s),
    }
}

// ---------------------------------------------------------------------------
// Closed-form kernel costs (exact integer arithmetic, E = 2 fixed).
// ---------------------------------------------------------------------------

/// MACs of one selective-scan kernel on `J` tokens of width `2D` with state
/// size `N`: `3*J*(2D)*N + J*(2D)*N^2`. Linear in `J`.
pub fn flops_ssm(j: u64, d: u64, n: u64) -> u64 {
    let din = 2 * d;
    3 * j * din * n + j * din * n * n
}

/// MACs of single-head self-attention on `J` tokens of width `D`:
/// `4*J*D^2 + 2*J^2*D`. Quadratic in `J`.
pub fn flops_attention(j: u64, d: u64) -> u64 {
    4 * j * d * d + 2 * j * j * d
}

// ---------------------------------------------------------------------------
// Instrumented reference kernels for the profiler. Each counts the
// multiply-accumulates it actually executes, by loop trip, and is written so
// that the executed multiplies are exactly the ones the closed forms model:
// nonlinearities, additions and elementwise scalings are outside the counting
// convention.
// ---------------------------------------------------------------------------

pub mod reference {
    use super::*;

    /// Reference scan in the dense-state cost convention: the discretized
    /// state matrix is applied as a full `N x N` matrix-vector product per
    /// channel per step (its off-diagonal entries are zero, so the result
    /// equals the diagonal recurrence), and the selection inputs arrive
    /// pre-discretized. Executed multiplies per `(t, d)`:
    ///
    /// * `N`   for `u = delta * a`
    /// * `N^2` for `h <- A_bar h`
    /// * `N`   for `h <- h + b x`
    /// * `N`   for `y = c . h`
    ///
    /// totalling `J * din * (3N + N^2)` = [`flops_ssm`] when `din = 2D`.
    pub struct SsmFormulaScan {
        pub din: usize,
        pub n: usize,
        a: Vec<f32>, // [n], negative
    }

    impl SsmFormulaScan {
        pub fn new(din: usize, n: usize) -> Self {
            let a = (0..n).map(|k| -((k + 1) as f32)).collect();
            SsmFormulaScan { din, n, a }
        }

        /// Returns the outputs and the number of executed MACs.
        pub fn run(&self, x: &[f32], delta: &[f32], bsel: &[f32], csel: &[f32], j: usize) -> (Vec<f32>, u64) {
            let (din, n) = (self.din, self.n);
            assert_eq!(x.len(), j * din);
            assert_eq!(delta.len(), j * din);
            assert_eq!(bsel.len(), j * n);
            assert_eq!(csel.len(), j * n);
            let mut macs = 0u64;
            let mut y = vec![0.0f32; j * din];
            let mut h = vec![0.0f32; din * n];
            let mut abar_dense = vec![0.0f32; n * n];
            let mut h_new = vec![0.0f32; n];
            for t in 0..j {
                let brow = &bsel[t * n..(t + 1) * n];
                let crow = &csel[t * n..(t + 1) * n];
                for d in 0..din {
                    let dt = delta[t * din + d];
                    let xv = x[t * din + d];
                    let hrow = &mut h[d * n..(d + 1) * n];
                    // u = dt * a; A_bar = diag(exp(u)) materialized dense
                    for v in abar_dense.iter_mut() {
                        *v = 0.0;
                    }
                    for k in 0..n {
                        let u = dt * self.a[k];
                        macs += 1;
                        abar_dense[k * n + k] = u.exp();
                    }
                    // h <- A_bar @ h (full dense matvec)
                    for (r, hn) in h_new.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for c in 0..n {
                            acc += abar_dense[r * n + c] * hrow[c];
                            macs += 1;
                        }
                        *hn = acc;
                    }
                    // h <- h + b_bar * x
                    for k in 0..n {
                        h_new[k] += brow[k] * xv;
                        macs += 1;
                    }
                    // y = c . h
                    let mut acc = 0.0f32;
                    for k in 0..n {
                        acc += crow[k] * h_new[k];
                        macs += 1;
                    }
                    hrow.copy_from_slice(&h_new);
                    y[t * din + d] = acc;
                }
            }
            (y, macs)
        }
    }

    /// Single-head scaled dot-product self-attention with Q/K/V/O
    /// projections, used only for the empirical cost comparison. The six
    /// matrix products are the counted multiplies: `4JD^2 + 2J^2D` =
    /// [`flops_attention`]; the `1/sqrt(D)` scaling and the softmax are
    /// outside the convention.
    pub struct AttentionReference {
        pub d: usize,
        wq: Vec<f32>,
        wk: Vec<f32>,
        wv: Vec<f32>,
        wo: Vec<f32>,
    }

    impl AttentionReference {
        pub fn new(d: usize, seed: u64) -> Self {
            let mut rng = Rng::seed(seed);
            let std = (1.0 / d as f64).sqrt();
            let mk = |rng: &mut Rng| -> Vec<f32> {
                (0..d * d).map(|_| (rng.normal() * std) as f32).collect()
            };
            AttentionReference {
                d,
                wq: mk(&mut rng),
                wk: mk(&mut rng),
                wv: mk(&mut rng),
                wo: mk(&mut rng),
            }
        }

        pub fn forward(&self, x: &[f32], j: usize) -> (Vec<f32>, u64) {
            fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, macs: &mut u64) -> Vec<f32> {
                let mut out = vec![0.0f32; m * n];
                kernels::mm_nn(a, b, &mut out, m, k, n);
                *macs += (m * k * n) as u64;
                out
            }
            let d = self.d;
            assert_eq!(x.len(), j * d);
            let mut macs = 0u64;
            let q = mm(x, &self.wq, j, d, d, &mut macs);
            let k = mm(x, &self.wk, j, d, d, &mut macs);
            let v = mm(x, &self.wv, j, d, d, &mut macs);
            // scores = q @ k^T (counted), then scaled and row-softmaxed
            let mut scores = vec![0.0f32; j * j];
            kernels::mm_nt(&q, &k, &mut scores, j, d, j);
            macs += (j * d * j) as u64;
            let scale = 1.0 / (d as f32).sqrt();
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let probs = kernels::softmax_last_forward(&scores, j);
            let ctx = mm(&probs, &v, j, j, d, &mut macs);
            let out = mm(&ctx, &self.wo, j, d, d, &mut macs);
            (out, macs)
        }
    }
}
