//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array. Ops applied to tensors
//! that (transitively) require gradients record themselves into the resulting
//! node, forming a DAG that [`Tensor::backward`] walks in reverse topological
//! order. Gradients accumulate additively into each requiring node until the
//! owning parameter is re-seated.
//!
//! There is no broadcasting: shapes must match exactly except where an op
//! defines otherwise.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Relu(Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    Conv2d {
        x: Tensor<T>,
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        dims: ConvDims,
    },
    BilinearResize(Tensor<T>),
    /// `rows[r * n_cols + j]` is the source row of output element `(r, j)`.
    TopkCols {
        x: Tensor<T>,
        rows: Vec<usize>,
    },
    GatherRows {
        x: Tensor<T>,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Tensor<T>,
        idx: Vec<usize>,
    },
    Reshape(Tensor<T>),
    Permute {
        x: Tensor<T>,
        perm: Vec<usize>,
    },
    MeanAxis {
        x: Tensor<T>,
        axis: usize,
    },
    Sum(Tensor<T>),
    SoftmaxCe {
        logits: Tensor<T>,
        probs: Vec<T>,
        labels: Vec<u32>,
        ignore: u32,
        count: usize,
    },
}

/// Dense n-dimensional array, cheap to clone (shared node).
pub struct Tensor<T: Scalar> {
    inner: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        // Nodes that do not participate in a gradient path drop their input
        // references so the graph stays a single linear tape's worth of memory.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), Rc::new(data), false, Op::Leaf))
    }

    /// Leaf that accumulates gradients (parameter storage).
    pub fn leaf_with_grad(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: Rc::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                op: Op::Leaf,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), Rc::new(vec![T::ZERO; numel(shape)]), false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::new(shape.to_vec(), Rc::new(vec![v; numel(shape)]), false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient of this node, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Multiply the accumulated gradient in place, if present.
    pub fn scale_grad(&self, s: T) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Arg(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Same data, cut off from the gradient graph.
    pub fn detach(&self) -> Self {
        Tensor::new(self.inner.shape.clone(), Rc::clone(&self.inner.data), false, Op::Leaf)
    }

    fn binary_elementwise_check(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise_check(other, "add")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new(
            self.inner.shape.clone(),
            Rc::new(data),
            rg,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-T::ONE))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary_elementwise_check(other, "mul")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new(
            self.inner.shape.clone(),
            Rc::new(data),
            rg,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: T) -> Self {
        let data: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        Tensor::new(
            self.inner.shape.clone(),
            Rc::new(data),
            self.requires_grad(),
            Op::Scale(self.clone(), c),
        )
    }

    pub fn relu(&self) -> Self {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&a| if a > T::ZERO { a } else { T::ZERO })
            .collect();
        Tensor::new(
            self.inner.shape.clone(),
            Rc::new(data),
            self.requires_grad(),
            Op::Relu(self.clone()),
        )
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::ZERO; m * n];
        kernels::matmul(self.data(), other.data(), m, k, n, &mut data);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new(
            vec![m, n],
            Rc::new(data),
            rg,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// 2D cross-correlation over `[C_in, H, W]` with kernel
    /// `[C_out, C_in, k_h, k_w]`, zero padding.
    pub fn conv2d(
        &self,
        kernel: &Self,
        bias: Option<&Self>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Dim(format!("conv2d: input {xs:?}, kernel {ks:?}")));
        }
        if xs[0] != ks[1] {
            return Err(Error::Dim(format!(
                "conv2d: input channels {} vs kernel channels {}",
                xs[0], ks[1]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Arg("conv2d: zero stride".into()));
        }
        if xs[1] + 2 * padding.0 < ks[2] || xs[2] + 2 * padding.1 < ks[3] {
            return Err(Error::Dim(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                ks[2],
                ks[3],
                xs[1] + 2 * padding.0,
                xs[2] + 2 * padding.1
            )));
        }
        let dims = ConvDims {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            k_h: ks[2],
            k_w: ks[3],
            s_h: stride.0,
            s_w: stride.1,
            p_h: padding.0,
            p_w: padding.1,
        };
        if let Some(b) = bias {
            if b.shape() != [dims.c_out] {
                return Err(Error::Dim(format!(
                    "conv2d bias: {:?}, expected [{}]",
                    b.shape(),
                    dims.c_out
                )));
            }
        }
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let mut data = vec![T::ZERO; dims.c_out * oh * ow];
        kernels::conv2d(self.data(), kernel.data(), &dims, &mut data);
        if let Some(b) = bias {
            for co in 0..dims.c_out {
                let bv = b.data()[co];
                for v in &mut data[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(Tensor::new(
            vec![dims.c_out, oh, ow],
            Rc::new(data),
            rg,
            Op::Conv2d {
                x: self.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                dims,
            },
        ))
    }

    /// Bilinear resize of `[C, H, W]` with half-pixel centers, clamped.
    /// Handles both directions; `bilinear_upsample` is the enlarge-only wrapper.
    pub fn bilinear_resize(&self, target: (usize, usize)) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::Dim(format!("bilinear_resize: input {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::Arg("bilinear_resize: zero target extent".into()));
        }
        let ys = sample_coords(h, th);
        let xcs = sample_coords(w, tw);
        let mut data = vec![T::ZERO; c * th * tw];
        for ch in 0..c {
            let src = &self.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[ch * th * tw..(ch + 1) * th * tw];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xcs.iter().enumerate() {
                    let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
                    let one = T::ONE;
                    let v = src[y0 * w + x0] * (one - fy) * (one - fx)
                        + src[y0 * w + x1] * (one - fy) * fx
                        + src[y1 * w + x0] * fy * (one - fx)
                        + src[y1 * w + x1] * fy * fx;
                    dst[oy * tw + ox] = v;
                }
            }
        }
        Ok(Tensor::new(
            vec![c, th, tw],
            Rc::new(data),
            self.requires_grad(),
            Op::BilinearResize(self.clone()),
        ))
    }

    /// Upsampling operation: enlarging bilinear resize only.
    pub fn bilinear_upsample(&self, target: (usize, usize)) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::Dim(format!("bilinear_upsample: input {xs:?}")));
        }
        if target.0 < xs[1] || target.1 < xs[2] {
            return Err(Error::Dim(format!(
                "bilinear_upsample only enlarges: {}x{} -> {}x{}",
                xs[1], xs[2], target.0, target.1
            )));
        }
        self.bilinear_resize(target)
    }

    /// Per-column top-k of a `[M, N]` matrix: output `[n, N]`, each column
    /// sorted descending, ties resolved to the lower row index. Gradients
    /// flow only into the selected entries.
    pub fn topk_per_column(&self, n: usize) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::Dim(format!("topk_per_column: input {xs:?}")));
        }
        let (m, cols) = (xs[0], xs[1]);
        if n == 0 || n > m {
            return Err(Error::Arg(format!(
                "topk_per_column: n={n} out of range 1..={m}"
            )));
        }
        let mut rows = vec![0usize; n * cols];
        let mut data = vec![T::ZERO; n * cols];
        let mut order: Vec<usize> = Vec::with_capacity(m);
        for j in 0..cols {
            order.clear();
            order.extend(0..m);
            let col = self.data();
            order.sort_by(|&a, &b| {
                let (va, vb) = (col[a * cols + j], col[b * cols + j]);
                vb.partial_cmp(&va)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for r in 0..n {
                rows[r * cols + j] = order[r];
                data[r * cols + j] = col[order[r] * cols + j];
            }
        }
        Ok(Tensor::new(
            vec![n, cols],
            Rc::new(data),
            self.requires_grad(),
            Op::TopkCols {
                x: self.clone(),
                rows,
            },
        ))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::Dim(format!("gather_rows: input {xs:?}")));
        }
        let (m, c) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Arg(format!("gather_rows: index {bad} >= {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Ok(Tensor::new(
            vec![idx.len(), c],
            Rc::new(data),
            self.requires_grad(),
            Op::GatherRows {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn gather_cols(&self, idx: &[usize]) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::Dim(format!("gather_cols: input {xs:?}")));
        }
        let (m, n) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Arg(format!("gather_cols: index {bad} >= {n}")));
        }
        let mut data = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            for &j in idx {
                data.push(self.data()[i * n + j]);
            }
        }
        Ok(Tensor::new(
            vec![m, idx.len()],
            Rc::new(data),
            self.requires_grad(),
            Op::GatherCols {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    /// Metadata-only reshape; shares the underlying buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::new(
            shape.to_vec(),
            Rc::clone(&self.inner.data),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let xs = self.shape();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Arg(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let (out_shape, data) = permute_copy(self.data(), xs, perm);
        Ok(Tensor::new(
            out_shape,
            Rc::new(data),
            self.requires_grad(),
            Op::Permute {
                x: self.clone(),
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn transpose2(&self) -> Result<Self> {
        self.permute(&[1, 0])
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let xs = self.shape();
        if axis >= xs.len() {
            return Err(Error::Arg(format!(
                "mean_axis: axis {axis} for shape {xs:?}"
            )));
        }
        let extent = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let inv = T::from_f64(1.0 / extent as f64);
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data()[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let mut out_shape: Vec<usize> = xs[..axis].to_vec();
        out_shape.extend_from_slice(&xs[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::new(
            out_shape,
            Rc::new(data),
            self.requires_grad(),
            Op::MeanAxis {
                x: self.clone(),
                axis,
            },
        ))
    }

    pub fn sum(&self) -> Self {
        let s: T = self.data().iter().copied().sum();
        Tensor::new(vec![1], Rc::new(vec![s]), self.requires_grad(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Self {
        self.sum().scale(T::from_f64(1.0 / self.numel() as f64))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against `N` labels,
    /// skipping `ignore` labels.
    pub fn softmax_cross_entropy(&self, labels: &[u32], ignore: u32) -> Result<Self> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::Dim(format!("softmax_cross_entropy: logits {xs:?}")));
        }
        let (rows, classes) = (xs[0], xs[1]);
        if labels.len() != rows {
            return Err(Error::Dim(format!(
                "softmax_cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
            return Err(Error::Arg(format!(
                "softmax_cross_entropy: label {bad} >= {classes}"
            )));
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(Error::Arg("softmax_cross_entropy: all labels ignored".into()));
        }
        let mut probs = vec![T::ZERO; rows * classes];
        let mut loss = T::ZERO;
        for r in 0..rows {
            let row = &self.data()[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_s(v);
            }
            let mut denom = T::ZERO;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * classes + c] = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for c in 0..classes {
                probs[r * classes + c] *= inv;
            }
            if labels[r] != ignore {
                let lse = denom.ln() + mx;
                loss += lse - row[labels[r] as usize];
            }
        }
        loss *= T::from_f64(1.0 / count as f64);
        Ok(Tensor::new(
            vec![1],
            Rc::new(vec![loss]),
            self.requires_grad(),
            Op::SoftmaxCe {
                logits: self.clone(),
                probs,
                labels: labels.to_vec(),
                ignore,
                count,
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients land in every node on the tape
    /// that requires them, accumulating with previous passes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Arg(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            // Loss detached from every parameter: nothing to propagate.
            return Ok(());
        }
        let order = topo_order(self);
        accumulate(&self.inner, &[T::ONE]);
        for node in order.iter().rev() {
            let grad = match node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            backprop_one(node, &grad)?;
        }
        Ok(())
    }
}

/// (lo, hi, frac) source sample coordinates for half-pixel-center resize.
fn sample_coords(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let u = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let u = u.clamp(0.0, (src - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

fn permute_copy<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride of output dim i in the input buffer
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut midx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..rank).rev() {
            midx[d] += 1;
            src += strides[d];
            if midx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            midx[d] = 0;
        }
    }
    (out_shape, out)
}

fn accumulate<T: Scalar>(node: &Node<T>, g: &[T]) {
    if !node.requires_grad {
        return;
    }
    let mut slot = node.grad.borrow_mut();
    match slot.as_mut() {
        Some(buf) => {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn op_inputs<T: Scalar>(node: &Node<T>) -> Vec<Tensor<T>> {
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::BilinearResize(a)
        | Op::Reshape(a)
        | Op::Sum(a) => vec![a.clone()],
        Op::Conv2d { x, kernel, bias, .. } => {
            let mut v = vec![x.clone(), kernel.clone()];
            if let Some(b) = bias {
                v.push(b.clone());
            }
            v
        }
        Op::TopkCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::GatherCols { x, .. }
        | Op::Permute { x, .. }
        | Op::MeanAxis { x, .. } => vec![x.clone()],
        Op::SoftmaxCe { logits, .. } => vec![logits.clone()],
    }
}

/// Post-order over the DAG; reversing it gives a valid reverse topological
/// visit order for the backward sweep.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Rc<Node<T>>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(Rc::clone(&t.inner));
            continue;
        }
        if !visited.insert(t.inner.id) {
            continue;
        }
        let inputs = op_inputs(&t.inner);
        stack.push((t, true));
        for inp in inputs {
            if inp.requires_grad() && !visited.contains(&inp.inner.id) {
                stack.push((inp, false));
            }
        }
    }
    order
}

fn backprop_one<T: Scalar>(node: &Node<T>, g: &[T]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(&a.inner, g);
            accumulate(&b.inner, g);
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let ga: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                accumulate(&a.inner, &ga);
            }
            if b.requires_grad() {
                let gb: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                accumulate(&b.inner, &gb);
            }
        }
        Op::Scale(a, c) => {
            let ga: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
            accumulate(&a.inner, &ga);
        }
        Op::Relu(a) => {
            let ga: Vec<T> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &av)| if av > T::ZERO { gv } else { T::ZERO })
                .collect();
            accumulate(&a.inner, &ga);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = dC . B^T
                let mut ga = vec![T::ZERO; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = T::ZERO;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[kk * n + j];
                        }
                        ga[i * k + kk] = acc;
                    }
                }
                accumulate(&a.inner, &ga);
            }
            if b.requires_grad() {
                // dB = A^T . dC
                let mut gb = vec![T::ZERO; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        for j in 0..n {
                            gb[kk * n + j] += av * g[i * n + j];
                        }
                    }
                }
                accumulate(&b.inner, &gb);
            }
        }
        Op::Conv2d { x, kernel, bias, dims } => {
            let d = dims;
            let (oh, ow) = (d.out_h(), d.out_w());
            let mut gx = vec![T::ZERO; d.c_in * d.h * d.w];
            let mut gk = vec![T::ZERO; d.c_out * d.c_in * d.k_h * d.k_w];
            for co in 0..d.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[co * oh * ow + oy * ow + ox];
                        for ci in 0..d.c_in {
                            for ky in 0..d.k_h {
                                let iy = (oy * d.s_h + ky) as isize - d.p_h as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.k_w {
                                    let ix = (ox * d.s_w + kx) as isize - d.p_w as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xi = ci * d.h * d.w + iy as usize * d.w + ix as usize;
                                    let ki = co * d.c_in * d.k_h * d.k_w
                                        + ci * d.k_h * d.k_w
                                        + ky * d.k_w
                                        + kx;
                                    gx[xi] += go * kernel.data()[ki];
                                    gk[ki] += go * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
            if x.requires_grad() {
                accumulate(&x.inner, &gx);
            }
            if kernel.requires_grad() {
                accumulate(&kernel.inner, &gk);
            }
            if let Some(b) = bias {
                if b.requires_grad() {
                    let mut gb = vec![T::ZERO; d.c_out];
                    for co in 0..d.c_out {
                        gb[co] = g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
                    }
                    accumulate(&b.inner, &gb);
                }
            }
        }
        Op::BilinearResize(x) => {
            let xs = x.shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (th, tw) = (node.shape[1], node.shape[2]);
            let ys = sample_coords(h, th);
            let xcs = sample_coords(w, tw);
            let mut gx = vec![T::ZERO; c * h * w];
            for ch in 0..c {
                let dst = &g[ch * th * tw..(ch + 1) * th * tw];
                let src = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xcs.iter().enumerate() {
                        let gv = dst[oy * tw + ox];
                        let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
                        let one = T::ONE;
                        src[y0 * w + x0] += gv * (one - fy) * (one - fx);
                        src[y0 * w + x1] += gv * (one - fy) * fx;
                        src[y1 * w + x0] += gv * fy * (one - fx);
                        src[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            accumulate(&x.inner, &gx);
        }
        Op::TopkCols { x, rows } => {
            let cols = node.shape[1];
            let mut gx = vec![T::ZERO; x.numel()];
            for (i, &src_row) in rows.iter().enumerate() {
                let j = i % cols;
                gx[src_row * cols + j] += g[i];
            }
            accumulate(&x.inner, &gx);
        }
        Op::GatherRows { x, idx } => {
            let c = x.shape()[1];
            let mut gx = vec![T::ZERO; x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] += g[r * c + j];
                }
            }
            accumulate(&x.inner, &gx);
        }
        Op::GatherCols { x, idx } => {
            let n = x.shape()[1];
            let m = x.shape()[0];
            let mut gx = vec![T::ZERO; x.numel()];
            for i in 0..m {
                for (j2, &j) in idx.iter().enumerate() {
                    gx[i * n + j] += g[i * idx.len() + j2];
                }
            }
            accumulate(&x.inner, &gx);
        }
        Op::Reshape(x) => {
            accumulate(&x.inner, g);
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, gx) = permute_copy(g, &node.shape, &inv);
            accumulate(&x.inner, &gx);
        }
        Op::MeanAxis { x, axis } => {
            let xs = x.shape();
            let extent = xs[*axis];
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis + 1..].iter().product();
            let inv = T::from_f64(1.0 / extent as f64);
            let mut gx = vec![T::ZERO; x.numel()];
            for o in 0..outer {
                for a in 0..extent {
                    let base = (o * extent + a) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i] * inv;
                    }
                }
            }
            accumulate(&x.inner, &gx);
        }
        Op::Sum(x) => {
            let gx = vec![g[0]; x.numel()];
            accumulate(&x.inner, &gx);
        }
        Op::SoftmaxCe {
            logits,
            probs,
            labels,
            ignore,
            count,
        } => {
            let classes = logits.shape()[1];
            let scale = g[0] * T::from_f64(1.0 / *count as f64);
            let mut gx = vec![T::ZERO; logits.numel()];
            for (r, &lab) in labels.iter().enumerate() {
                if lab == *ignore {
                    continue;
                }
                for c in 0..classes {
                    let mut v = probs[r * classes + c];
                    if c == lab as usize {
                        v -= T::ONE;
                    }
                    gx[r * classes + c] = v * scale;
                }
            }
            accumulate(&logits.inner, &gx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_left() {
        let a = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[2.0, 0.0, 0.0, 3.0], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Tensor::<f64>::zeros(&[3, 4]);
        let b = t(&(0..20).map(|i| i as f64).collect::<Vec<_>>(), &[4, 5]);
        let c = a.matmul(&b).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[3, 5]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let e = a.matmul(&b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
    }

    #[test]
    fn conv2d_dirac_identity() {
        // 3x3 kernel, 1 at center, diagonal over channels
        let c = 2;
        let x: Vec<f64> = (0..c * 5 * 4).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let xt = t(&x, &[c, 5, 4]);
        let mut k = vec![0.0; c * c * 9];
        for ch in 0..c {
            k[ch * c * 9 + ch * 9 + 4] = 1.0;
        }
        let kt = t(&k, &[c, c, 3, 3]);
        let y = xt.conv2d(&kt, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(y.data(), xt.data());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = t(&vec![1.5; 3 * 4 * 4], &[3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        let y = x.conv2d(&k, None, (1, 1), (1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(x.conv2d(&k, None, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = t(&(0..12).map(|i| i as f64).collect::<Vec<_>>(), &[1, 3, 4]);
        let y = x.bilinear_upsample((3, 4)).unwrap();
        assert_eq!(y.data(), x.data());
        let c = Tensor::<f64>::full(&[2, 3, 3], 0.7);
        let u = c.bilinear_upsample((7, 5)).unwrap();
        for &v in u.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_half_pixel_formula() {
        let x = t(&[0.0, 1.0], &[1, 1, 2]);
        let y = x.bilinear_upsample((1, 4)).unwrap();
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", y.data());
        }
    }

    #[test]
    fn bilinear_downsample_via_upsample_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(x.bilinear_upsample((2, 2)).is_err());
        assert!(x.bilinear_resize((2, 2)).is_ok());
    }

    #[test]
    fn topk_identity_and_saturation() {
        let eye = t(
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            &[4, 4],
        );
        let top1 = eye.topk_per_column(1).unwrap();
        assert_eq!(top1.data(), &[1.0, 1.0, 1.0, 1.0]);
        let a = t(&[3.0, 1.0, 7.0, 2.0, 5.0, 5.0], &[3, 2]);
        let full = a.topk_per_column(3).unwrap();
        assert_eq!(full.data(), &[7.0, 5.0, 5.0, 2.0, 3.0, 1.0]);
        assert!(a.topk_per_column(4).is_err());
    }

    #[test]
    fn topk_tie_breaks_to_lower_row() {
        let a = t(&[2.0, 2.0, 2.0], &[3, 1]);
        let y = a.topk_per_column(2).unwrap();
        // grads reveal which rows were picked
        let p = Tensor::leaf_with_grad(vec![2.0, 2.0, 2.0], &[3, 1]).unwrap();
        let loss = p.topk_per_column(2).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(y.data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_sum_of_params_is_ones() {
        let p = Tensor::leaf_with_grad(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        p.reshape(&[3, 1]).unwrap().sum().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_detached_leaves_grad_empty() {
        let p = Tensor::leaf_with_grad(vec![1.0, 2.0], &[2]).unwrap();
        let loss = p.detach().sum();
        loss.backward().unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let p = Tensor::leaf_with_grad(vec![1.0], &[1]).unwrap();
        p.sum().backward().unwrap();
        p.sum().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Tensor::leaf_with_grad(vec![1.0, 2.0], &[2]).unwrap();
        assert!(p.scale(2.0).backward().is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_c() {
        let classes = 5;
        let logits = Tensor::<f64>::zeros(&[4, classes]);
        let loss = logits.softmax_cross_entropy(&[0, 1, 2, 3], 255).unwrap();
        assert!((loss.item().unwrap() - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_large_margin_goes_to_zero() {
        let mut d = vec![0.0; 3];
        d[1] = 50.0;
        let logits = t(&d, &[1, 3]);
        let loss = logits.softmax_cross_entropy(&[1], 255).unwrap();
        assert!(loss.item().unwrap() < 1e-9);
    }

    #[test]
    fn softmax_ce_all_ignored_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(logits.softmax_cross_entropy(&[255, 255], 255).is_err());
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(
            c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000
        ) {
            let n = c * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64).collect();
            let x = Tensor::from_vec(data.clone(), &[c, h, w]).unwrap();
            let perm = [2usize, 0, 1];
            let mut inv = [0usize; 3];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            let back = x.permute(&perm).unwrap().permute(&inv).unwrap();
            prop_assert_eq!(back.data(), &data[..]);
            let r = x.reshape(&[n]).unwrap().reshape(&[c, h, w]).unwrap();
            prop_assert_eq!(r.data(), &data[..]);
        }

        #[test]
        fn topk_matches_sort_oracle(seed in 0u64..500, m in 1usize..9, ncols in 1usize..7) {
            let n_top = 1 + (seed as usize) % m;
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut next = || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                ((s % 19) as f64) - 9.0
            };
            let data: Vec<f64> = (0..m * ncols).map(|_| next()).collect();
            let x = Tensor::from_vec(data.clone(), &[m, ncols]).unwrap();
            let y = x.topk_per_column(n_top).unwrap();
            for j in 0..ncols {
                let mut col: Vec<f64> = (0..m).map(|i| data[i * ncols + j]).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                for r in 0..n_top {
                    prop_assert_eq!(y.data()[r * ncols + j], col[r]);
                }
            }
        }
    }
}
