//! Eager reverse-mode autodiff over a per-pass operation tape.
//!
//! A `Tape` is rebuilt for every forward pass and never shared across
//! concurrent passes. Values are computed eagerly; `backward` walks the
//! record in reverse, visiting each node exactly once. Node order is the
//! topological order by construction (parents always precede children).
//!
//! Tensors are viewed as `[rows, cols]` with `cols` = last extent; most
//! binary ops require equal shapes or a scalar on one side, plus explicit
//! row/column broadcast primitives for batched affine layers.

use std::sync::Arc;

use super::{det_dot, det_sum, Tensor, TensorError};

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    RhsScalar,
    LhsScalar,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Sqrt,
    Recip,
    Scale(f64),
    AddConst(f64),
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Bcast },
    Sub { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    AddRows { mat: Var, row: Var },
    MulRows { mat: Var, row: Var },
    MulCols { mat: Var, col: Var },
    Unary { x: Var, kind: UnaryKind },
    Gather { x: Var, idx: Arc<Vec<usize>>, in_group: usize },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    SumAll { x: Var },
    SumRows { x: Var },
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (if cols == 0 { 0 } else { numel / cols }, cols)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// Enable NaN/Inf detection on every produced value (debug mode).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var, TensorError> {
        self.push_shared(op, shape, Arc::new(value), requires_grad)
    }

    fn push_shared(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if self.check_finite {
            assert!(
                value.iter().all(|v| v.is_finite()),
                "non-finite value produced by {}",
                op_name(&op)
            );
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; gradient participation follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_shared(Op::Leaf, t.shape().to_vec(), t.arc(), t.requires_grad)
            .expect("leaf insert")
    }

    /// Insert a tensor as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_shared(Op::Leaf, t.shape().to_vec(), t.arc(), true)
            .expect("param insert")
    }

    /// Constant leaf from raw values; never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let expected: usize = shape.iter().product();
        assert_eq!(expected, data.len(), "constant shape/data length mismatch");
        self.push(Op::Leaf, shape, data, false).expect("constant insert")
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    // ── Access ───────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if any flowed to this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    // ── Matrix product ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a), self.value(b), m, k, n, &mut out);
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, req)
    }

    // ── Elementwise binary (equal shape or one scalar) ───────────────

    fn bcast_of(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            Ok(Bcast::None)
        } else if nb == 1 {
            Ok(Bcast::RhsScalar)
        } else if na == 1 {
            Ok(Bcast::LhsScalar)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast_of(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (out, shape) = match bc {
            Bcast::None => (va.iter().zip(vb).map(|(x, y)| x + y).collect(), self.shape(a).to_vec()),
            Bcast::RhsScalar => {
                let s = vb[0];
                (va.iter().map(|x| x + s).collect(), self.shape(a).to_vec())
            }
            Bcast::LhsScalar => {
                let s = va[0];
                (vb.iter().map(|y| s + y).collect(), self.shape(b).to_vec())
            }
        };
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Add { a, b, bc }, shape, out, req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast_of(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (out, shape) = match bc {
            Bcast::None => (va.iter().zip(vb).map(|(x, y)| x - y).collect(), self.shape(a).to_vec()),
            Bcast::RhsScalar => {
                let s = vb[0];
                (va.iter().map(|x| x - s).collect(), self.shape(a).to_vec())
            }
            Bcast::LhsScalar => {
                let s = va[0];
                (vb.iter().map(|y| s - y).collect(), self.shape(b).to_vec())
            }
        };
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Sub { a, b, bc }, shape, out, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast_of(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (out, shape) = match bc {
            Bcast::None => (va.iter().zip(vb).map(|(x, y)| x * y).collect(), self.shape(a).to_vec()),
            Bcast::RhsScalar => {
                let s = vb[0];
                (va.iter().map(|x| x * s).collect(), self.shape(a).to_vec())
            }
            Bcast::LhsScalar => {
                let s = va[0];
                (vb.iter().map(|y| s * y).collect(), self.shape(b).to_vec())
            }
        };
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Mul { a, b, bc }, shape, out, req)
    }

    // ── Row / column broadcasts for batched layers ───────────────────

    /// `mat[r, :] + row` for every row; `row` length must equal the column count.
    pub fn add_rows(&mut self, mat: Var, row: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(mat));
        if self.value(row).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                lhs: self.shape(mat).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let (vm, vr) = (self.value(mat), self.value(row));
        let out = vm
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(vr).map(|(x, y)| x + y))
            .collect();
        let req = self.requires_grad(mat) || self.requires_grad(row);
        let shape = self.shape(mat).to_vec();
        self.push(Op::AddRows { mat, row }, shape, out, req)
    }

    /// `mat[r, :] * row` for every row.
    pub fn mul_rows(&mut self, mat: Var, row: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(mat));
        if self.value(row).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                lhs: self.shape(mat).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let (vm, vr) = (self.value(mat), self.value(row));
        let out = vm
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(vr).map(|(x, y)| x * y))
            .collect();
        let req = self.requires_grad(mat) || self.requires_grad(row);
        let shape = self.shape(mat).to_vec();
        self.push(Op::MulRows { mat, row }, shape, out, req)
    }

    /// Scale each row `r` of `mat` by `col[r]`.
    pub fn mul_cols(&mut self, mat: Var, col: Var) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(mat));
        if self.value(col).len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mul_cols",
                lhs: self.shape(mat).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let (vm, vc) = (self.value(mat), self.value(col));
        let mut out = vec![0.0; vm.len()];
        for (r, chunk) in vm.chunks_exact(cols).enumerate() {
            let s = vc[r];
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(chunk) {
                *o = x * s;
            }
        }
        let req = self.requires_grad(mat) || self.requires_grad(col);
        let shape = self.shape(mat).to_vec();
        self.push(Op::MulCols { mat, col }, shape, out, req)
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let mut out = Vec::with_capacity(vx.len());
        for &v in vx {
            let y = match kind {
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => {
                    if v <= 0.0 {
                        return Err(TensorError::Domain { op: "log", value: v });
                    }
                    v.ln()
                }
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sqrt => {
                    if v < 0.0 {
                        return Err(TensorError::Domain { op: "sqrt", value: v });
                    }
                    v.sqrt()
                }
                UnaryKind::Recip => {
                    if v == 0.0 {
                        return Err(TensorError::Domain { op: "recip", value: v });
                    }
                    1.0 / v
                }
                UnaryKind::Scale(c) => v * c,
                UnaryKind::AddConst(c) => v + c,
                UnaryKind::ClampMin(c) => v.max(c),
                UnaryKind::ClampMax(c) => v.min(c),
            };
            out.push(y);
        }
        let req = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Unary { x, kind }, shape, out, req)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp).expect("exp")
    }
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Log)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid).expect("sigmoid")
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus).expect("softplus")
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu).expect("relu")
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn recip(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Recip)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::Scale(c)).expect("scale")
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::AddConst(c)).expect("add_const")
    }
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::ClampMin(c)).expect("clamp_min")
    }
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::ClampMax(c)).expect("clamp_max")
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Within each contiguous group of `in_group` values, emit `idx` entries:
    /// `out[g, i] = x[g, idx[i]]`. Indices may repeat (expansion); the
    /// gradient scatter-adds. `out_shape` must hold `groups * idx.len()`.
    pub fn gather_groups(
        &mut self,
        x: Var,
        idx: Vec<usize>,
        in_group: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        let vx = self.value(x);
        assert!(in_group > 0 && vx.len() % in_group == 0, "gather group width");
        assert!(idx.iter().all(|&i| i < in_group), "gather index out of range");
        let groups = vx.len() / in_group;
        let out_w = idx.len();
        let expected: usize = out_shape.iter().product();
        if expected != groups * out_w {
            return Err(TensorError::BadLength {
                op: "gather_groups",
                shape: out_shape,
                expected: groups * out_w,
            });
        }
        let mut out = Vec::with_capacity(groups * out_w);
        for g in 0..groups {
            let base = &vx[g * in_group..(g + 1) * in_group];
            out.extend(idx.iter().map(|&i| base[i]));
        }
        let req = self.requires_grad(x);
        self.push(
            Op::Gather {
                x,
                idx: Arc::new(idx),
                in_group,
            },
            out_shape,
            out,
            req,
        )
    }

    /// Concatenate along the last dimension; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat of nothing");
        let (rows0, _) = rows_cols(self.shape(parts[0]));
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_cols += c;
        }
        let mut out = Vec::with_capacity(rows0 * total_cols);
        for r in 0..rows0 {
            for &p in parts {
                let (_, c) = rows_cols(self.shape(p));
                let vp = self.value(p);
                out.extend_from_slice(&vp[r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let shape = if rows0 == 1 && self.shape(parts[0]).len() == 1 {
            vec![total_cols]
        } else {
            vec![rows0, total_cols]
        };
        self.push(Op::Concat { parts: parts.to_vec() }, shape, out, req)
    }

    /// Metadata-only reshape; the flat buffer is shared with the input.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let expected: usize = shape.iter().product();
        if expected != n {
            return Err(TensorError::BadLength {
                op: "reshape",
                shape,
                expected: n,
            });
        }
        let value = Arc::clone(&self.nodes[x.0].value);
        let req = self.requires_grad(x);
        self.push_shared(Op::Reshape { x }, shape, value, req)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = det_sum(self.value(x));
        let req = self.requires_grad(x);
        self.push(Op::SumAll { x }, vec![1], vec![s], req).expect("sum_all")
    }

    /// Row sums: `[r, n] -> [r]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let vx = self.value(x);
        let out = (0..rows).map(|r| det_sum(&vx[r * cols..(r + 1) * cols])).collect();
        let req = self.requires_grad(x);
        self.push(Op::SumRows { x }, vec![rows], out, req).expect("sum_rows")
    }

    /// Per-row cross entropy between logit rows and integer targets.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vx = self.value(logits);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx[r * cols..(r + 1) * cols];
            out.push(log_sum_exp(row) - row[targets[r]]);
        }
        let req = self.requires_grad(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets),
            },
            vec![rows],
            out,
            req,
        )
    }

    // ── Pixel shuffle ────────────────────────────────────────────────

    /// Rearrange `[c*r*r, h, w]` into `[c, r*h, r*w]` (pure index permutation).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (c_in, h, w) = expect_chw(&shape)?;
        let rsq = r * r;
        if r == 0 || c_in % rsq != 0 {
            return Err(TensorError::BadPixelShuffle { channels: c_in, rsq });
        }
        let c_out = c_in / rsq;
        let idx = pixel_shuffle_perm(c_in, h, w, r);
        self.gather_groups(x, idx, c_in * h * w, vec![c_out, r * h, r * w])
    }

    /// Inverse of `pixel_shuffle`: `[c, r*h, r*w]` back to `[c*r*r, h, w]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (c, rh, rw) = expect_chw(&shape)?;
        if r == 0 || rh % r != 0 || rw % r != 0 {
            return Err(TensorError::BadPixelShuffle { channels: c, rsq: r * r });
        }
        let (h, w) = (rh / r, rw / r);
        let fwd = pixel_shuffle_perm(c * r * r, h, w, r);
        let mut inv = vec![0usize; fwd.len()];
        for (o, &i) in fwd.iter().enumerate() {
            inv[i] = o;
        }
        self.gather_groups(x, inv, c * rh * rw, vec![c * r * r, h, w])
    }

    /// Pixel shuffle applied to each row of `[m, c*r*r*h*w]`.
    pub fn pixel_shuffle_rows(
        &mut self,
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
        r: usize,
    ) -> Result<Var, TensorError> {
        let rsq = r * r;
        if r == 0 || channels % rsq != 0 {
            return Err(TensorError::BadPixelShuffle { channels, rsq });
        }
        let group = channels * h * w;
        let idx = pixel_shuffle_perm(channels, h, w, r);
        let shape = self.shape(x).to_vec();
        self.gather_groups(x, idx, group, shape)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients land on every node with
    /// `requires_grad` reachable from the loss. Deterministic given an
    /// identical forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let n = nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                if let Some(da) = Self::accum(grads, nodes, *a) {
                    // da[i,l] += <g[i,:], b[l,:]>
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            da[i * k + l] += det_dot(gi, &vb[l * n..(l + 1) * n]);
                        }
                    }
                }
                if let Some(db) = Self::accum(grads, nodes, *b) {
                    // db[l,:] += a[i,l] * g[i,:]
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let av = va[i * k + l];
                            if av != 0.0 {
                                for (d, &gv) in db[l * n..(l + 1) * n].iter_mut().zip(gi) {
                                    *d = av.mul_add(gv, *d);
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, bc } => {
                match bc {
                    Bcast::None | Bcast::RhsScalar => {
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            for (d, &gv) in da.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                    Bcast::LhsScalar => {
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            da[0] += det_sum(g);
                        }
                    }
                }
                match bc {
                    Bcast::None | Bcast::LhsScalar => {
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            for (d, &gv) in db.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                    Bcast::RhsScalar => {
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            db[0] += det_sum(g);
                        }
                    }
                }
            }
            Op::Sub { a, b, bc } => {
                match bc {
                    Bcast::None | Bcast::RhsScalar => {
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            for (d, &gv) in da.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                    Bcast::LhsScalar => {
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            da[0] += det_sum(g);
                        }
                    }
                }
                match bc {
                    Bcast::None | Bcast::LhsScalar => {
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            for (d, &gv) in db.iter_mut().zip(g) {
                                *d -= gv;
                            }
                        }
                    }
                    Bcast::RhsScalar => {
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            db[0] -= det_sum(g);
                        }
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                match bc {
                    Bcast::None => {
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(vb.iter()) {
                                *d = gv.mul_add(bv, *d);
                            }
                        }
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            for ((d, &gv), &av) in db.iter_mut().zip(g).zip(va.iter()) {
                                *d = gv.mul_add(av, *d);
                            }
                        }
                    }
                    Bcast::RhsScalar => {
                        let s = vb[0];
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            for (d, &gv) in da.iter_mut().zip(g) {
                                *d = gv.mul_add(s, *d);
                            }
                        }
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            db[0] += det_dot(g, va);
                        }
                    }
                    Bcast::LhsScalar => {
                        let s = va[0];
                        if let Some(db) = Self::accum(grads, nodes, *b) {
                            for (d, &gv) in db.iter_mut().zip(g) {
                                *d = gv.mul_add(s, *d);
                            }
                        }
                        if let Some(da) = Self::accum(grads, nodes, *a) {
                            da[0] += det_dot(g, vb);
                        }
                    }
                }
            }
            Op::AddRows { mat, row } => {
                if let Some(dm) = Self::accum(grads, nodes, *mat) {
                    for (d, &gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                let cols = nodes[row.0].value.len();
                if let Some(dr) = Self::accum(grads, nodes, *row) {
                    for chunk in g.chunks_exact(cols) {
                        for (d, &gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulRows { mat, row } => {
                let vm = &nodes[mat.0].value;
                let vr = &nodes[row.0].value;
                let cols = vr.len();
                if let Some(dm) = Self::accum(grads, nodes, *mat) {
                    for (chunk, gchunk) in dm.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((d, &gv), &rv) in chunk.iter_mut().zip(gchunk).zip(vr.iter()) {
                            *d = gv.mul_add(rv, *d);
                        }
                    }
                }
                if let Some(dr) = Self::accum(grads, nodes, *row) {
                    for (mchunk, gchunk) in vm.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for ((d, &gv), &mv) in dr.iter_mut().zip(gchunk).zip(mchunk.iter()) {
                            *d = gv.mul_add(mv, *d);
                        }
                    }
                }
            }
            Op::MulCols { mat, col } => {
                let vm = &nodes[mat.0].value;
                let vc = &nodes[col.0].value;
                let rows = vc.len();
                let cols = vm.len() / rows;
                if let Some(dm) = Self::accum(grads, nodes, *mat) {
                    for r in 0..rows {
                        let s = vc[r];
                        for (d, &gv) in dm[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d = gv.mul_add(s, *d);
                        }
                    }
                }
                if let Some(dc) = Self::accum(grads, nodes, *col) {
                    for r in 0..rows {
                        dc[r] += det_dot(&g[r * cols..(r + 1) * cols], &vm[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Unary { x, kind } => {
                let vx = &nodes[x.0].value;
                let vy = &nodes[id].value;
                if let Some(dx) = Self::accum(grads, nodes, *x) {
                    match kind {
                        UnaryKind::Exp => {
                            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(vy.iter()) {
                                *d = gv.mul_add(yv, *d);
                            }
                        }
                        UnaryKind::Log => {
                            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx.iter()) {
                                *d += gv / xv;
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(vy.iter()) {
                                *d += gv * yv * (1.0 - yv);
                            }
                        }
                        UnaryKind::Softplus => {
                            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx.iter()) {
                                *d += gv * sigmoid(xv);
                            }
                        }
                        UnaryKind::Relu => {
                            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx.iter()) {
                                if xv > 0.0 {
                                    *d += gv;
                                }
                            }
                        }
                        UnaryKind::Sqrt => {
                            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(vy.iter()) {
                                if yv > 0.0 {
                                    *d += gv * 0.5 / yv;
                                }
                            }
                        }
                        UnaryKind::Recip => {
                            for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(vy.iter()) {
                                *d -= gv * yv * yv;
                            }
                        }
                        UnaryKind::Scale(c) => {
                            for (d, &gv) in dx.iter_mut().zip(g) {
                                *d = gv.mul_add(*c, *d);
                            }
                        }
                        UnaryKind::AddConst(_) => {
                            for (d, &gv) in dx.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                        UnaryKind::ClampMin(c) => {
                            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx.iter()) {
                                if xv > *c {
                                    *d += gv;
                                }
                            }
                        }
                        UnaryKind::ClampMax(c) => {
                            for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx.iter()) {
                                if xv < *c {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx, in_group } => {
                let out_w = idx.len();
                if let Some(dx) = Self::accum(grads, nodes, *x) {
                    let groups = dx.len() / in_group;
                    for gr in 0..groups {
                        let base = gr * in_group;
                        let gbase = gr * out_w;
                        for (i, &src) in idx.iter().enumerate() {
                            dx[base + src] += g[gbase + i];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| rows_cols(&nodes[p.0].shape).1)
                    .collect();
                let rows = rows_cols(&nodes[id].shape).0;
                let total: usize = widths.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    let off: usize = widths[..pi].iter().sum();
                    let w = widths[pi];
                    if let Some(dp) = Self::accum(grads, nodes, p) {
                        for r in 0..rows {
                            for (d, &gv) in dp[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = Self::accum(grads, nodes, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SumAll { x } => {
                let g0 = g[0];
                if let Some(dx) = Self::accum(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::SumRows { x } => {
                let cols = rows_cols(&nodes[x.0].shape).1;
                if let Some(dx) = Self::accum(grads, nodes, *x) {
                    for (r, chunk) in dx.chunks_exact_mut(cols).enumerate() {
                        let gv = g[r];
                        for d in chunk {
                            *d += gv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let vx = &nodes[logits.0].value;
                let cols = rows_cols(&nodes[logits.0].shape).1;
                if let Some(dl) = Self::accum(grads, nodes, *logits) {
                    for (r, row) in vx.chunks_exact(cols).enumerate() {
                        let lse = log_sum_exp(row);
                        let gv = g[r];
                        let t = targets[r];
                        for (j, (d, &lv)) in dl[r * cols..(r + 1) * cols].iter_mut().zip(row).enumerate() {
                            let sm = (lv - lse).exp();
                            *d += gv * (sm - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRows { .. } => "add_rows",
        Op::MulRows { .. } => "mul_rows",
        Op::MulCols { .. } => "mul_cols",
        Op::Unary { .. } => "unary",
        Op::Gather { .. } => "gather",
        Op::Concat { .. } => "concat",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum_all",
        Op::SumRows { .. } => "sum_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = det_sum(&row.iter().map(|&v| (v - m).exp()).collect::<Vec<_>>());
    m + s.ln()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

fn expect_chw(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "pixel_shuffle",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Permutation with `out[flat(c, r*y+dy, r*x+dx)] = in[flat(c*r*r + dy*r + dx, y, x)]`.
fn pixel_shuffle_perm(c_in: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = vec![0usize; c_in * h * w];
    for c in 0..c_out {
        for oy in 0..oh {
            let (y, dy) = (oy / r, oy % r);
            for ox in 0..ow {
                let (x, dx) = (ox / r, ox % r);
                let src = ((c * r * r + dy * r + dx) * h + y) * w + x;
                let dst = (c * oh + oy) * ow + ox;
                idx[dst] = src;
            }
        }
    }
    idx
}
