//! Recorded operation graph for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, which is already a topological
//! order, so the backward pass is a single reverse sweep that visits each
//! node exactly once. Gradients accumulate additively across fan-out.
//! Tensors never mutate once recorded; parameters enter through a
//! [`ParamStore`] and re-registering the same parameter returns the same
//! node, so its gradient accumulates across every use.

use std::collections::HashMap;
use std::rc::Rc;

use super::count;
use super::kernels::{self, Element, UnaryKind};
use super::scan::{self, ScanDims};
use super::{broadcast_shapes, broadcast_strides, Buffer, DType, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes checkpoint layout and optimizer traversal.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Rc<Buffer>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.shapes.push(t.shape().to_vec());
        self.values.push(t.data_rc());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Buffer {
        &self.values[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        Tensor::from_rc(self.shapes[id.0].clone(), Rc::clone(&self.values[id.0]))
    }

    /// Mutable access for the optimizer; copy-on-write if a graph still
    /// holds the buffer.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Buffer {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set_value(&mut self, id: ParamId, data: Buffer) {
        let numel: usize = self.shapes[id.0].iter().product();
        assert_eq!(numel, data.len(), "parameter {} size", self.names[id.0]);
        self.values[id.0] = Rc::new(data);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach {
        #[allow(dead_code)] // provenance; backward never follows it
        x: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinKind,
    },
    Unary {
        x: NodeId,
        kind: UnaryKind,
    },
    Affine {
        x: NodeId,
        scale: f64,
        #[allow(dead_code)] // recorded for completeness; gradient is scale only
        shift: f64,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved_mean: Buffer,
        saved_rstd: Buffer,
    },
    SoftmaxLast {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Flip {
        x: NodeId,
        axis: usize,
    },
    Reshape {
        x: NodeId,
    },
    Gather {
        x: NodeId,
        map: Rc<Vec<u32>>,
    },
    RowGather {
        table: NodeId,
        rows: Rc<Vec<usize>>,
    },
    DwConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    },
    SelectiveScan {
        x: NodeId,
        delta: NodeId,
        bsel: NodeId,
        csel: NodeId,
        a: NodeId,
        d_skip: NodeId,
        dims: ScanDims,
        saved_h: Option<Buffer>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Buffer>,
    op: Op,
    requires_grad: bool,
}

/// One differentiation graph. Create per forward/backward episode and drop
/// (or reset) afterwards; nodes are immutable once recorded.
pub struct Graph {
    dtype: DType,
    train: bool,
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
    grads: Vec<Option<Buffer>>,
}

macro_rules! dispatch {
    ($self:ident, $m:ident ( $($arg:expr),* )) => {
        match $self.dtype {
            DType::F32 => $self.$m::<f32>($($arg),*),
            DType::F64 => $self.$m::<f64>($($arg),*),
        }
    };
}

impl Graph {
    pub fn new(dtype: DType) -> Self {
        Graph {
            dtype,
            train: true,
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    /// Graph that records values but never gradients; fused ops skip their
    /// backward bookkeeping.
    pub fn inference(dtype: DType) -> Self {
        let mut g = Graph::new(dtype);
        g.train = false;
        g
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &Buffer {
        &self.nodes[id.0].value
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_rc(self.nodes[id.0].shape.clone(), Rc::clone(&self.nodes[id.0].value))
    }

    /// Gradient of the last `backward` call w.r.t. this node, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Buffer> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Explicitly clear recorded nodes and gradients for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Buffer, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            requires_grad: requires_grad && self.train,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        value: Rc<Buffer>,
        op: Op,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.train,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_dtype(&self, op: &'static str, dt: DType) -> Result<()> {
        if dt != self.dtype {
            return Err(TensorError::DtypeMismatch {
                op,
                lhs: self.dtype,
                rhs: dt,
            });
        }
        Ok(())
    }

    // -- inputs ------------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<NodeId> {
        self.check_dtype("leaf", t.dtype())?;
        Ok(self.push_shared(t.shape().to_vec(), t.data_rc(), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        self.leaf(t, false)
    }

    /// Register a parameter; repeats return the cached node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.params.get(&id.0) {
            return Ok(n);
        }
        self.check_dtype("param", store.value(id).dtype())?;
        let node = self.push_shared(
            store.shape(id).to_vec(),
            Rc::clone(&store.values[id.0]),
            Op::Leaf,
            true,
        );
        self.params.insert(id.0, node);
        Ok(node)
    }

    // -- ops ----------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        dispatch!(self, matmul_impl(a, b))
    }

    fn matmul_impl<T: Element>(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k1) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch = broadcast_shapes(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
        if k1 != k2 || batch.is_none() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let batch = batch.unwrap();
        let nb: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);

        let av = T::slice(self.value(a));
        let bv = T::slice(self.value(b));
        let mut out = vec![T::ZERO; nb * m * n];
        let sa = broadcast_strides(&ash[..ash.len() - 2], &batch);
        let sb = broadcast_strides(&bsh[..bsh.len() - 2], &batch);
        zip_broadcast(&batch, &sa, &sb, |oi, ai, bi| {
            kernels::mm_nn(
                &av[ai * m * k1..(ai + 1) * m * k1],
                &bv[bi * k1 * n..(bi + 1) * k1 * n],
                &mut out[oi * m * n..(oi + 1) * m * n],
                m,
                k1,
                n,
            );
        });
        count::record_matmul((nb * m * k1 * n) as u64);
        let rg = self.requires_grad2(a, b);
        Ok(self.push(out_shape, T::buffer(out), Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        dispatch!(self, binary_impl(a, b, BinKind::Add))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        dispatch!(self, binary_impl(a, b, BinKind::Sub))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        dispatch!(self, binary_impl(a, b, BinKind::Mul))
    }

    fn binary_impl<T: Element>(&mut self, a: NodeId, b: NodeId, kind: BinKind) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&ash, &bsh).ok_or(TensorError::ShapeMismatch {
            op: "elementwise",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let av = T::slice(self.value(a));
        let bv = T::slice(self.value(b));
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        if ash == bsh {
            for i in 0..numel {
                out[i] = f(av[i], bv[i]);
            }
        } else {
            let sa = broadcast_strides(&ash, &out_shape);
            let sb = broadcast_strides(&bsh, &out_shape);
            zip_broadcast(&out_shape, &sa, &sb, |oi, ai, bi| {
                out[oi] = f(av[ai], bv[bi]);
            });
        }
        let rg = self.requires_grad2(a, b);
        Ok(self.push(out_shape, T::buffer(out), Op::Binary { a, b, kind }, rg))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Log)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Silu)
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        dispatch!(self, unary_impl(x, kind))
    }

    fn unary_impl<T: Element>(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let xv = T::slice(self.value(x));
        let out = kernels::unary_forward(kind, xv)?;
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, T::buffer(out), Op::Unary { x, kind }, rg))
    }

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        dispatch!(self, affine_impl(x, scale, shift))
    }

    fn affine_impl<T: Element>(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let out: Vec<T> = T::slice(self.value(x)).iter().map(|&v| v * s + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, T::buffer(out), Op::Affine { x, scale, shift }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        dispatch!(self, reduce_impl(x, false))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        dispatch!(self, reduce_impl(x, true))
    }

    fn reduce_impl<T: Element>(&mut self, x: NodeId, mean: bool) -> Result<NodeId> {
        let xv = T::slice(self.value(x));
        let mut acc = kernels::sum_all(xv);
        if mean {
            acc = acc / T::from_f64(xv.len() as f64);
        }
        let rg = self.nodes[x.0].requires_grad;
        let op = if mean { Op::MeanAll { x } } else { Op::SumAll { x } };
        Ok(self.push(vec![], T::buffer(vec![acc]), op, rg))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        dispatch!(self, layer_norm_impl(x, gamma, beta, eps))
    }

    fn layer_norm_impl<T: Element>(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = T::slice(self.value(x));
        let gv = T::slice(self.value(gamma));
        let bv = T::slice(self.value(beta));
        let (out, saved) = kernels::layer_norm_forward(xv, gv, bv, d, eps);
        let rg = self.requires_grad2(x, gamma) || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            shape,
            T::buffer(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved_mean: T::buffer(saved.mean),
                saved_rstd: T::buffer(saved.rstd),
            },
            rg,
        ))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        dispatch!(self, softmax_impl(x))
    }

    fn softmax_impl<T: Element>(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::Invalid {
            op: "softmax_last",
            msg: "rank-0 input".into(),
        })?;
        let out = kernels::softmax_last_forward(T::slice(self.value(x)), n);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, T::buffer(out), Op::SoftmaxLast { x }, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        dispatch!(self, concat_impl(parts, axis))
    }

    fn concat_impl<T: Element>(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh
                    .iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let sh_axis = self.shape(p)[axis];
            let pv = T::slice(self.value(p));
            for o in 0..outer {
                let src = &pv[o * sh_axis * inner..(o + 1) * sh_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + sh_axis * inner].copy_from_slice(src);
            }
            offset += sh_axis;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            out_shape,
            T::buffer(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        dispatch!(self, narrow_impl(x, axis, start, len))
    }

    fn narrow_impl<T: Element>(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("axis {axis} window {start}+{len} on shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mid = shape[axis];
        let xv = T::slice(self.value(x));
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out_shape,
            T::buffer(out),
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn flip(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        dispatch!(self, flip_impl(x, axis))
    }

    fn flip_impl<T: Element>(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "flip",
                msg: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = T::slice(self.value(x));
        let mut out = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for m in 0..mid {
                let src = (o * mid + m) * inner;
                let dst = (o * mid + (mid - 1 - m)) * inner;
                out[dst..dst + inner].copy_from_slice(&xv[src..src + inner]);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, T::buffer(out), Op::Flip { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let value = Rc::clone(&self.nodes[x.0].value);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_shared(new_shape.to_vec(), value, Op::Reshape { x }, rg))
    }

    /// `out[i] = x[map[i]]`; the map is an arbitrary flat-index gather.
    pub fn gather(&mut self, x: NodeId, map: Rc<Vec<u32>>, out_shape: &[usize]) -> Result<NodeId> {
        dispatch!(self, gather_impl(x, map, out_shape))
    }

    fn gather_impl<T: Element>(
        &mut self,
        x: NodeId,
        map: Rc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("map length {} vs shape {:?}", map.len(), out_shape),
            });
        }
        let xv = T::slice(self.value(x));
        let mut out = Vec::with_capacity(map.len());
        for &src in map.iter() {
            out.push(xv[src as usize]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out_shape.to_vec(), T::buffer(out), Op::Gather { x, map }, rg))
    }

    /// Select rows of a `[R, D]` table; output `[rows.len(), D]`.
    pub fn row_gather(&mut self, table: NodeId, rows: Rc<Vec<usize>>) -> Result<NodeId> {
        dispatch!(self, row_gather_impl(table, rows))
    }

    fn row_gather_impl<T: Element>(
        &mut self,
        table: NodeId,
        rows: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "row_gather",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (r, d) = (shape[0], shape[1]);
        let tv = T::slice(self.value(table));
        let mut out = Vec::with_capacity(rows.len() * d);
        for &row in rows.iter() {
            if row >= r {
                return Err(TensorError::Invalid {
                    op: "row_gather",
                    msg: format!("row {row} out of range ({r} rows)"),
                });
            }
            out.extend_from_slice(&tv[row * d..(row + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![rows.len(), d],
            T::buffer(out),
            Op::RowGather { table, rows },
            rg,
        ))
    }

    /// Depthwise causal 1-d convolution over the second-to-last axis.
    /// `x: [..., J, C]`, `w: [C, K]`, `b: [C]`.
    pub fn dw_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        dispatch!(self, dw_conv1d_impl(x, w, b))
    }

    fn dw_conv1d_impl<T: Element>(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "dw_conv1d",
                msg: format!("need rank >= 2, got {shape:?}"),
            });
        }
        let c = shape[shape.len() - 1];
        let j = shape[shape.len() - 2];
        let wsh = self.shape(w).to_vec();
        if wsh.len() != 2 || wsh[0] != c || self.shape(b) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "dw_conv1d",
                lhs: shape,
                rhs: wsh,
            });
        }
        let k = wsh[1];
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let xv = T::slice(self.value(x));
        let wv = T::slice(self.value(w));
        let bv = T::slice(self.value(b));
        let mut out = vec![T::ZERO; xv.len()];
        for bi in 0..batch {
            let seg = kernels::dw_conv1d_forward(&xv[bi * j * c..(bi + 1) * j * c], wv, bv, j, c, k);
            out[bi * j * c..(bi + 1) * j * c].copy_from_slice(&seg);
        }
        count::record_scan_or_conv((batch * j * c * k) as u64);
        let rg = self.requires_grad2(x, w) || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, T::buffer(out), Op::DwConv1d { x, w, b, k }, rg))
    }

    /// Selective scan over `x: [J, Din]` or `[B, J, Din]` with per-token
    /// `delta` (already positive), selection inputs `bsel`/`csel`
    /// (`[..., J, N]`), diagonal state coefficients `a: [Din, N]` (negative
    /// for stability) and direct feedthrough `d_skip: [Din]`.
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        bsel: NodeId,
        csel: NodeId,
        a: NodeId,
        d_skip: NodeId,
    ) -> Result<NodeId> {
        dispatch!(self, selective_scan_impl(x, delta, bsel, csel, a, d_skip))
    }

    #[allow(clippy::too_many_arguments)]
    fn selective_scan_impl<T: Element>(
        &mut self,
        x: NodeId,
        delta: NodeId,
        bsel: NodeId,
        csel: NodeId,
        a: NodeId,
        d_skip: NodeId,
    ) -> Result<NodeId> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 && xsh.len() != 3 {
            return Err(TensorError::Invalid {
                op: "selective_scan",
                msg: format!("x must be [J, Din] or [B, J, Din], got {xsh:?}"),
            });
        }
        let (batch, j, din) = if xsh.len() == 2 {
            (1, xsh[0], xsh[1])
        } else {
            (xsh[0], xsh[1], xsh[2])
        };
        if j == 0 {
            return Err(TensorError::Invalid {
                op: "selective_scan",
                msg: "empty sequence".into(),
            });
        }
        let ash = self.shape(a).to_vec();
        if ash.len() != 2 || ash[0] != din {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: xsh,
                rhs: ash,
            });
        }
        let n = ash[1];
        let expect_sel: Vec<usize> = if xsh.len() == 2 {
            vec![j, n]
        } else {
            vec![batch, j, n]
        };
        if self.shape(delta) != xsh.as_slice()
            || self.shape(bsel) != expect_sel.as_slice()
            || self.shape(csel) != expect_sel.as_slice()
            || self.shape(d_skip) != [din]
        {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: xsh,
                rhs: self.shape(delta).to_vec(),
            });
        }
        let dims = ScanDims { batch, j, din, n };
        let rg = [x, delta, bsel, csel, a, d_skip]
            .iter()
            .any(|&i| self.nodes[i.0].requires_grad)
            && self.train;
        let (y, h_all) = scan::scan_forward(
            T::slice(self.value(x)),
            T::slice(self.value(delta)),
            T::slice(self.value(bsel)),
            T::slice(self.value(csel)),
            T::slice(self.value(a)),
            T::slice(self.value(d_skip)),
            dims,
            rg,
        )?;
        Ok(self.push(
            xsh,
            T::buffer(y),
            Op::SelectiveScan {
                x,
                delta,
                bsel,
                csel,
                a,
                d_skip,
                dims,
                saved_h: h_all.map(T::buffer),
            },
            rg,
        ))
    }

    /// Forward identity that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Rc::clone(&self.nodes[x.0].value);
        let shape = self.shape(x).to_vec();
        Ok(self.push_shared(shape, value, Op::Detach { x }, false))
    }

    fn requires_grad2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of every reachable node
    /// that requires them are accumulated; parameters registered through
    /// [`Graph::param`] can then be read with [`Graph::param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        match self.dtype {
            DType::F32 => self.backward_impl::<f32>(loss),
            DType::F64 => self.backward_impl::<f64>(loss),
        }
    }

    fn backward_impl<T: Element>(&mut self, loss: NodeId) -> Result<()> {
        let mut grads: Vec<Option<Buffer>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(T::buffer(vec![T::ONE]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for retrieval
            }
            let g = grads[i].take().unwrap();
            self.distribute::<T>(i, T::slice(&g), &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    /// Route the output gradient `gy` of node `i` into its inputs.
    fn distribute<T: Element>(
        &self,
        i: usize,
        gy: &[T],
        grads: &mut [Option<Buffer>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Matmul { a, b } => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b));
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: Vec<usize> = node.shape[..node.shape.len() - 2].to_vec();
                let sa = broadcast_strides(&ash[..ash.len() - 2], &batch);
                let sb = broadcast_strides(&bsh[..bsh.len() - 2], &batch);
                let av = T::slice(self.value(*a));
                let bv = T::slice(self.value(*b));
                if needs(*a) {
                    // dA = gy @ B^T; transpose each B block once so the
                    // contraction runs on contiguous rows (the per-element
                    // accumulation order over n is unchanged).
                    let n_bblocks = bv.len() / (k * n);
                    let mut bt = vec![T::ZERO; bv.len()];
                    for blk in 0..n_bblocks {
                        let src = &bv[blk * k * n..(blk + 1) * k * n];
                        let dst = &mut bt[blk * k * n..(blk + 1) * k * n];
                        for kk in 0..k {
                            for nn in 0..n {
                                dst[nn * k + kk] = src[kk * n + nn];
                            }
                        }
                    }
                    let ga = self.grad_buf::<T>(grads, *a);
                    zip_broadcast(&batch, &sa, &sb, |oi, ai, bi| {
                        kernels::mm_nn(
                            &gy[oi * m * n..(oi + 1) * m * n],
                            &bt[bi * k * n..(bi + 1) * k * n],
                            &mut ga[ai * m * k..(ai + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    });
                    count::record_matmul((batch.iter().product::<usize>() * m * n * k) as u64);
                }
                if needs(*b) {
                    let gb = self.grad_buf::<T>(grads, *b);
                    zip_broadcast(&batch, &sa, &sb, |oi, ai, bi| {
                        kernels::mm_tn(
                            &av[ai * m * k..(ai + 1) * m * k],
                            &gy[oi * m * n..(oi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    });
                    count::record_matmul((batch.iter().product::<usize>() * m * k * n) as u64);
                }
            }
            Op::Binary { a, b, kind } => {
                let (ash, bsh) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let out_shape = &node.shape;
                let av = T::slice(self.value(*a));
                let bv = T::slice(self.value(*b));
                let sa = broadcast_strides(&ash, out_shape);
                let sb = broadcast_strides(&bsh, out_shape);
                if needs(*a) {
                    let ga = self.grad_buf::<T>(grads, *a);
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            zip_broadcast(out_shape, &sa, &sb, |oi, ai, _| ga[ai] += gy[oi])
                        }
                        BinKind::Mul => zip_broadcast(out_shape, &sa, &sb, |oi, ai, bi| {
                            ga[ai] += gy[oi] * bv[bi]
                        }),
                    }
                }
                if needs(*b) {
                    let gb = self.grad_buf::<T>(grads, *b);
                    match kind {
                        BinKind::Add => {
                            zip_broadcast(out_shape, &sa, &sb, |oi, _, bi| gb[bi] += gy[oi])
                        }
                        BinKind::Sub => {
                            zip_broadcast(out_shape, &sa, &sb, |oi, _, bi| gb[bi] += -gy[oi])
                        }
                        BinKind::Mul => zip_broadcast(out_shape, &sa, &sb, |oi, ai, bi| {
                            gb[bi] += gy[oi] * av[ai]
                        }),
                    }
                }
            }
            Op::Unary { x, kind } => {
                if needs(*x) {
                    let xv = T::slice(self.value(*x));
                    let yv = T::slice(&node.value);
                    let gx = self.grad_buf::<T>(grads, *x);
                    kernels::unary_backward(*kind, xv, yv, gy, gx);
                }
            }
            Op::Affine { x, scale, .. } => {
                if needs(*x) {
                    let s = T::from_f64(*scale);
                    let gx = self.grad_buf::<T>(grads, *x);
                    for (g, &v) in gx.iter_mut().zip(gy.iter()) {
                        *g += v * s;
                    }
                }
            }
            Op::SumAll { x } => {
                if needs(*x) {
                    let g0 = gy[0];
                    let gx = self.grad_buf::<T>(grads, *x);
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                }
            }
            Op::MeanAll { x } => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    let g0 = gy[0] / T::from_f64(n as f64);
                    let gx = self.grad_buf::<T>(grads, *x);
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved_mean,
                saved_rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let xv = T::slice(self.value(*x));
                let gv = T::slice(self.value(*gamma));
                let saved = kernels::LayerNormSaved {
                    mean: T::slice(saved_mean).to_vec(),
                    rstd: T::slice(saved_rstd).to_vec(),
                };
                // gx, ggamma, gbeta all may be needed; compute into scratch
                // then accumulate only the requested ones.
                let mut gx = vec![T::ZERO; xv.len()];
                let mut gg = vec![T::ZERO; d];
                let mut gb = vec![T::ZERO; d];
                kernels::layer_norm_backward(xv, gv, &saved, gy, d, &mut gx, &mut gg, &mut gb);
                if needs(*x) {
                    let dst = self.grad_buf::<T>(grads, *x);
                    for (o, v) in dst.iter_mut().zip(gx) {
                        *o += v;
                    }
                }
                if needs(*gamma) {
                    let dst = self.grad_buf::<T>(grads, *gamma);
                    for (o, v) in dst.iter_mut().zip(gg) {
                        *o += v;
                    }
                }
                if needs(*beta) {
                    let dst = self.grad_buf::<T>(grads, *beta);
                    for (o, v) in dst.iter_mut().zip(gb) {
                        *o += v;
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if needs(*x) {
                    let n = *node.shape.last().unwrap();
                    let yv = T::slice(&node.value);
                    let gx = self.grad_buf::<T>(grads, *x);
                    kernels::softmax_last_backward(yv, gy, n, gx);
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let plen = self.shape(p)[axis];
                    if needs(p) {
                        let gp = self.grad_buf::<T>(grads, p);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            for q in 0..plen * inner {
                                gp[dst + q] += gy[src + q];
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                if needs(*x) {
                    let xsh = self.shape(*x);
                    let outer: usize = xsh[..*axis].iter().product();
                    let mid = xsh[*axis];
                    let inner: usize = xsh[*axis + 1..].iter().product();
                    let gx = self.grad_buf::<T>(grads, *x);
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        let src = o * len * inner;
                        for q in 0..len * inner {
                            gx[dst + q] += gy[src + q];
                        }
                    }
                }
            }
            Op::Flip { x, axis } => {
                if needs(*x) {
                    let sh = &node.shape;
                    let outer: usize = sh[..*axis].iter().product();
                    let mid = sh[*axis];
                    let inner: usize = sh[*axis + 1..].iter().product();
                    let gx = self.grad_buf::<T>(grads, *x);
                    for o in 0..outer {
                        for m in 0..mid {
                            let src = (o * mid + m) * inner;
                            let dst = (o * mid + (mid - 1 - m)) * inner;
                            for q in 0..inner {
                                gx[dst + q] += gy[src + q];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if needs(*x) {
                    let gx = self.grad_buf::<T>(grads, *x);
                    for (o, &v) in gx.iter_mut().zip(gy.iter()) {
                        *o += v;
                    }
                }
            }
            Op::Gather { x, map } => {
                if needs(*x) {
                    let gx = self.grad_buf::<T>(grads, *x);
                    for (i, &src) in map.iter().enumerate() {
                        gx[src as usize] += gy[i];
                    }
                }
            }
            Op::RowGather { table, rows } => {
                if needs(*table) {
                    let d = node.shape[1];
                    let gt = self.grad_buf::<T>(grads, *table);
                    for (r, &row) in rows.iter().enumerate() {
                        for q in 0..d {
                            gt[row * d + q] += gy[r * d + q];
                        }
                    }
                }
            }
            Op::DwConv1d { x, w, b, k } => {
                let sh = &node.shape;
                let c = sh[sh.len() - 1];
                let j = sh[sh.len() - 2];
                let batch: usize = sh[..sh.len() - 2].iter().product();
                let xv = T::slice(self.value(*x));
                let wv = T::slice(self.value(*w));
                let mut gx = vec![T::ZERO; xv.len()];
                let mut gw = vec![T::ZERO; wv.len()];
                let mut gb = vec![T::ZERO; c];
                for bi in 0..batch {
                    kernels::dw_conv1d_backward(
                        &xv[bi * j * c..(bi + 1) * j * c],
                        wv,
                        &gy[bi * j * c..(bi + 1) * j * c],
                        j,
                        c,
                        *k,
                        &mut gx[bi * j * c..(bi + 1) * j * c],
                        &mut gw,
                        &mut gb,
                    );
                }
                if needs(*x) {
                    let dst = self.grad_buf::<T>(grads, *x);
                    for (o, v) in dst.iter_mut().zip(gx) {
                        *o += v;
                    }
                }
                if needs(*w) {
                    let dst = self.grad_buf::<T>(grads, *w);
                    for (o, v) in dst.iter_mut().zip(gw) {
                        *o += v;
                    }
                }
                if needs(*b) {
                    let dst = self.grad_buf::<T>(grads, *b);
                    for (o, v) in dst.iter_mut().zip(gb) {
                        *o += v;
                    }
                }
            }
            Op::SelectiveScan {
                x,
                delta,
                bsel,
                csel,
                a,
                d_skip,
                dims,
                saved_h,
            } => {
                let h_all = saved_h.as_ref().expect("scan trained without saved state");
                let mut gx = vec![T::ZERO; self.value(*x).len()];
                let mut gdelta = vec![T::ZERO; self.value(*delta).len()];
                let mut gbsel = vec![T::ZERO; self.value(*bsel).len()];
                let mut gcsel = vec![T::ZERO; self.value(*csel).len()];
                let mut ga = vec![T::ZERO; self.value(*a).len()];
                let mut gdskip = vec![T::ZERO; self.value(*d_skip).len()];
                scan::scan_backward(
                    T::slice(self.value(*x)),
                    T::slice(self.value(*delta)),
                    T::slice(self.value(*bsel)),
                    T::slice(self.value(*csel)),
                    T::slice(self.value(*a)),
                    T::slice(self.value(*d_skip)),
                    T::slice(h_all),
                    gy,
                    *dims,
                    &mut gx,
                    &mut gdelta,
                    &mut gbsel,
                    &mut gcsel,
                    &mut ga,
                    &mut gdskip,
                );
                for (id, owned) in [
                    (*x, gx),
                    (*delta, gdelta),
                    (*bsel, gbsel),
                    (*csel, gcsel),
                    (*a, ga),
                    (*d_skip, gdskip),
                ] {
                    if needs(id) {
                        let dst = self.grad_buf::<T>(grads, id);
                        for (o, v) in dst.iter_mut().zip(owned) {
                            *o += v;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Lazily-initialized gradient accumulator for a node.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g, T: Element>(&self, grads: &'g mut [Option<Buffer>], id: NodeId) -> &'g mut [T] {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Buffer::zeros(self.dtype, self.value(id).len()));
        }
        T::slice_mut(slot.as_mut().unwrap())
    }

    /// Take parameter gradients aligned with the store's parameter order.
    /// `None` means the parameter was unused (its gradient is exactly zero).
    pub fn param_grads(&mut self, store: &ParamStore) -> Vec<Option<Buffer>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&i)
                    .and_then(|node| self.grads.get_mut(node.0).and_then(|g| g.take()))
            })
            .collect()
    }

    /// Gradient for a single parameter (clones).
    pub fn param_grad(&self, id: ParamId) -> Option<Buffer> {
        self.params
            .get(&id.0)
            .and_then(|node| self.grads.get(node.0).and_then(|g| g.clone()))
    }
}

/// Walk `out_shape` in row-major order, producing the flat output index plus
/// the (broadcast) flat offsets into two operands.
pub(crate) fn zip_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: F,
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..numel {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}
