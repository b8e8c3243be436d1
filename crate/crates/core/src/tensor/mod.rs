//! Reverse-mode autodiff on a flat tape of f64 tensors.
//!
//! A [`Graph`] owns every tensor created through it. Operations validate
//! shapes, compute results eagerly, and record enough structure for
//! [`Graph::backward`] to push gradients to all tensors that require them.
//! Evaluation order is fixed by construction order, so repeated runs over
//! the same inputs are bitwise deterministic.

mod check;
pub(crate) mod raw;

pub use check::{grad_check, GradCheckReport};

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

/// A dense row-major f64 tensor plus its gradient slot.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        input: TensorId,
    },
    /// Elementwise with trailing-dimension broadcasting: the smaller
    /// operand's shape must be a suffix of the larger one's.
    Binary {
        kind: BinaryKind,
        lhs: TensorId,
        rhs: TensorId,
    },
    Matmul {
        lhs: TensorId,
        rhs: TensorId,
    },
    /// `lhs * rhs^T`, avoids materializing the transpose.
    MatmulNT {
        lhs: TensorId,
        rhs: TensorId,
    },
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LogSoftmax {
        input: TensorId,
        axis: usize,
    },
    Sum {
        input: TensorId,
    },
    SumRows {
        input: TensorId,
    },
    GatherRows {
        input: TensorId,
        indices: Vec<usize>,
    },
    ScatterRows {
        input: TensorId,
        indices: Vec<usize>,
    },
    SliceCols {
        input: TensorId,
        start: usize,
    },
    ConcatCols {
        inputs: Vec<TensorId>,
    },
    PickPerRow {
        input: TensorId,
        cols: Vec<usize>,
    },
    Reshape {
        input: TensorId,
    },
    /// Row i of the output is row i of `input` times `scales[i]`.
    ScaleRows {
        input: TensorId,
        scales: TensorId,
    },
    Rope {
        input: TensorId,
        positions: Vec<usize>,
        base: f64,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Autodiff tape. Create leaves, build a computation, call
/// [`Graph::backward`] on a scalar, and read gradients back.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_data_len(data: &[f64], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(Error::contract(format!(
            "data length {} does not match shape {:?} (numel {})",
            data.len(),
            shape,
            numel
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        check_data_len(&data, shape)?;
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        ))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], &[1], false).expect("scalar leaf")
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> Result<f64> {
        let t = self.tensor(id);
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn unary(&mut self, kind: UnaryKind, input: TensorId) -> TensorId {
        let src = &self.nodes[input.0].tensor;
        let data: Vec<f64> = src
            .data
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sigmoid => raw::sigmoid(x),
                UnaryKind::Silu => raw::silu(x),
                UnaryKind::Softplus => raw::softplus(x),
                UnaryKind::Scale(c) => x * c,
                UnaryKind::AddScalar(c) => x + c,
                UnaryKind::Powf(p) => x.powf(p),
            })
            .collect();
        let t = Tensor {
            shape: src.shape.clone(),
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        self.push(t, Op::Unary { kind, input })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn powf(&mut self, a: TensorId, p: f64) -> TensorId {
        self.unary(UnaryKind::Powf(p), a)
    }

    /// Checks trailing-dimension broadcast compatibility. Returns the output
    /// shape plus the repeat count of the smaller operand (1 if equal).
    fn broadcast_shape(
        &self,
        op: &'static str,
        lhs: TensorId,
        rhs: TensorId,
    ) -> Result<(Vec<usize>, bool)> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        if ls == rs {
            return Ok((ls.to_vec(), false));
        }
        if ls.len() > rs.len() && ls.ends_with(rs) {
            return Ok((ls.to_vec(), false));
        }
        if rs.len() > ls.len() && rs.ends_with(ls) {
            return Ok((rs.to_vec(), true));
        }
        Err(Error::Shape {
            op,
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        })
    }

    fn binary(&mut self, kind: BinaryKind, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (shape, lhs_is_small) = self.broadcast_shape(name, lhs, rhs)?;
        let numel: usize = shape.iter().product();
        let a = &self.nodes[lhs.0].tensor.data;
        let b = &self.nodes[rhs.0].tensor.data;
        let (an, bn) = (a.len(), b.len());
        let mut data = Vec::with_capacity(numel);
        for f in 0..numel {
            let (x, y) = if lhs_is_small {
                (a[f % an], b[f])
            } else {
                (a[f], b[f % bn])
            };
            data.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            });
        }
        let requires_grad = self.requires(lhs) || self.requires(rhs);
        let t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::Binary { kind, lhs, rhs }))
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, lhs, rhs)
    }

    fn matmul_dims(&self, op: &'static str, lhs: TensorId, rhs: TensorId, transposed: bool) -> Result<(usize, usize, usize)> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        let bad = || Error::Shape {
            op,
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        if ls.len() != 2 || rs.len() != 2 {
            return Err(bad());
        }
        let (m, k) = (ls[0], ls[1]);
        let (rk, n) = if transposed { (rs[1], rs[0]) } else { (rs[0], rs[1]) };
        if k != rk {
            return Err(bad());
        }
        Ok((m, k, n))
    }

    /// `[m, k] x [k, n] -> [m, n]`. Rank-2 only.
    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (m, k, n) = self.matmul_dims("matmul", lhs, rhs, false)?;
        let data = raw::matmul_nn(self.data(lhs), self.data(rhs), m, k, n);
        let requires_grad = self.requires(lhs) || self.requires(rhs);
        let t = Tensor {
            shape: vec![m, n],
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::Matmul { lhs, rhs }))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`. Rank-2 only.
    pub fn matmul_nt(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (m, k, n) = self.matmul_dims("matmul_nt", lhs, rhs, true)?;
        let data = raw::matmul_nt(self.data(lhs), self.data(rhs), m, k, n);
        let requires_grad = self.requires(lhs) || self.requires(rhs);
        let t = Tensor {
            shape: vec![m, n],
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::MatmulNT { lhs, rhs }))
    }

    fn lane_geometry(&self, id: TensorId, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(id);
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, lane, inner))
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, lane, inner) = self.lane_geometry(input, axis)?;
        let src = &self.nodes[input.0].tensor;
        let mut data = src.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                raw::softmax_strided(&mut data, o * lane * inner + i, lane, inner);
            }
        }
        let t = Tensor {
            shape: src.shape.clone(),
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::Softmax { input, axis }))
    }

    pub fn log_softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, lane, inner) = self.lane_geometry(input, axis)?;
        let src = &self.nodes[input.0].tensor;
        let mut data = src.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                raw::log_softmax_strided(&mut data, o * lane * inner + i, lane, inner);
            }
        }
        let t = Tensor {
            shape: src.shape.clone(),
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::LogSoftmax { input, axis }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let src = &self.nodes[input.0].tensor;
        let total: f64 = src.data.iter().sum();
        let t = Tensor {
            shape: vec![1],
            data: vec![total],
            requires_grad: src.requires_grad,
            grad: None,
        };
        self.push(t, Op::Sum { input })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, input: TensorId) -> TensorId {
        let n = self.tensor(input).numel();
        let s = self.sum(input);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[n, m] -> [n]`, summing each row.
    pub fn sum_rows(&mut self, input: TensorId) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.len() != 2 {
            return Err(Error::contract(format!(
                "sum_rows expects rank 2, got shape {:?}",
                src.shape
            )));
        }
        let (n, m) = (src.shape[0], src.shape[1]);
        let mut data = vec![0.0; n];
        for i in 0..n {
            for j in 0..m {
                data[i] += src.data[i * m + j];
            }
        }
        let t = Tensor {
            shape: vec![n],
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::SumRows { input }))
    }

    /// Selects slices along axis 0. Output shape `[indices.len(), rest...]`.
    /// Indices may repeat.
    pub fn gather_rows(&mut self, input: TensorId, indices: &[usize]) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.is_empty() {
            return Err(Error::contract("gather_rows on rank-0 tensor".to_string()));
        }
        let rows = src.shape[0];
        let row_size: usize = src.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row_size);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::input(format!(
                    "gather_rows index {ix} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&src.data[ix * row_size..(ix + 1) * row_size]);
        }
        let mut shape = src.shape.clone();
        shape[0] = indices.len();
        let t = Tensor {
            shape,
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Inverse of gather: places row i of `input` at row `indices[i]` of a
    /// zero tensor with `out_rows` rows, adding on collisions.
    pub fn scatter_rows(
        &mut self,
        input: TensorId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.is_empty() || src.shape[0] != indices.len() {
            return Err(Error::contract(format!(
                "scatter_rows: {} indices for shape {:?}",
                indices.len(),
                src.shape
            )));
        }
        let row_size: usize = src.shape[1..].iter().product();
        let mut data = vec![0.0; out_rows * row_size];
        for (i, &ix) in indices.iter().enumerate() {
            if ix >= out_rows {
                return Err(Error::input(format!(
                    "scatter_rows index {ix} out of range for {out_rows} rows"
                )));
            }
            for j in 0..row_size {
                data[ix * row_size + j] += src.data[i * row_size + j];
            }
        }
        let mut shape = src.shape.clone();
        shape[0] = out_rows;
        let t = Tensor {
            shape,
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::ScatterRows {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Column range `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.len() != 2 || start >= end || end > src.shape[1] {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {end}) invalid for shape {:?}",
                src.shape
            )));
        }
        let (n, m) = (src.shape[0], src.shape[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src.data[i * m + start..i * m + end]);
        }
        let t = Tensor {
            shape: vec![n, w],
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::SliceCols { input, start }))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("concat_cols with no inputs".to_string()));
        }
        let n = self.shape(inputs[0])[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total_w: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total_w);
        for i in 0..n {
            for (&id, &w) in inputs.iter().zip(widths.iter()) {
                let src = &self.nodes[id.0].tensor.data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let requires_grad = inputs.iter().any(|&id| self.requires(id));
        let t = Tensor {
            shape: vec![n, total_w],
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `[n, m] -> [n]`, element i is `input[i, cols[i]]`.
    pub fn pick_per_row(&mut self, input: TensorId, cols: &[usize]) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.len() != 2 || src.shape[0] != cols.len() {
            return Err(Error::contract(format!(
                "pick_per_row: {} cols for shape {:?}",
                cols.len(),
                src.shape
            )));
        }
        let (n, m) = (src.shape[0], src.shape[1]);
        let mut data = Vec::with_capacity(n);
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::input(format!(
                    "pick_per_row column {c} out of range for width {m}"
                )));
            }
            data.push(src.data[i * m + c]);
        }
        let t = Tensor {
            shape: vec![n],
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::PickPerRow {
                input,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        let numel: usize = shape.iter().product();
        if numel != src.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: src.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::Reshape { input }))
    }

    /// Multiplies row i of a rank-2 tensor by `scales[i]` (rank-1, length n).
    pub fn scale_rows(&mut self, input: TensorId, scales: TensorId) -> Result<TensorId> {
        let src_shape = self.shape(input).to_vec();
        let sc_shape = self.shape(scales).to_vec();
        if src_shape.len() != 2 || sc_shape.len() != 1 || sc_shape[0] != src_shape[0] {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: src_shape,
                rhs: sc_shape,
            });
        }
        let (n, m) = (src_shape[0], src_shape[1]);
        let src = &self.nodes[input.0].tensor.data;
        let sc = &self.nodes[scales.0].tensor.data;
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(src[i * m + j] * sc[i]);
            }
        }
        let requires_grad = self.requires(input) || self.requires(scales);
        let t = Tensor {
            shape: vec![n, m],
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(t, Op::ScaleRows { input, scales }))
    }

    /// Rotary position embedding on a `[T, d]` tensor (d even): row t is
    /// rotated by `positions[t]`, pairing dimensions (2i, 2i+1) with
    /// frequency `base^(-2i/d)`.
    pub fn rope(&mut self, input: TensorId, positions: &[usize], base: f64) -> Result<TensorId> {
        let src = &self.nodes[input.0].tensor;
        if src.shape.len() != 2 || src.shape[1] % 2 != 0 {
            return Err(Error::contract(format!(
                "rope expects [T, d] with even d, got {:?}",
                src.shape
            )));
        }
        if positions.len() != src.shape[0] {
            return Err(Error::contract(format!(
                "rope: {} positions for {} rows",
                positions.len(),
                src.shape[0]
            )));
        }
        if !(base > 0.0) {
            return Err(Error::config(format!("rope base must be positive, got {base}")));
        }
        let d = src.shape[1];
        let mut data = src.data.clone();
        for (t, &pos) in positions.iter().enumerate() {
            raw::rope_rotate_row(&mut data[t * d..(t + 1) * d], pos, base, 1.0);
        }
        let t = Tensor {
            shape: src.shape.clone(),
            data,
            requires_grad: src.requires_grad,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::Rope {
                input,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` slot of every tensor with `requires_grad`; tensors the loss
    /// does not depend on end up with zero-filled gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let t = self.tensor(loss);
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_to_parents(i, &g, &mut grads);
            let tensor = &mut self.nodes[i].tensor;
            match tensor.grad.as_mut() {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g.iter()) {
                        *e += v;
                    }
                }
                None => tensor.grad = Some(g),
            }
        }

        for node in &mut self.nodes {
            let t = &mut node.tensor;
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorId,
        mut write: impl FnMut(&mut [f64]),
    ) {
        if !self.requires(target) {
            return;
        }
        let numel = self.nodes[target.0].tensor.data.len();
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; numel]);
        write(slot);
    }

    fn push_to_parents(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = &self.nodes[i].op;
        let out = &self.nodes[i].tensor;
        match op {
            Op::Leaf => {}
            Op::Unary { kind, input } => {
                let x = &self.nodes[input.0].tensor.data;
                let y = &out.data;
                self.accumulate(grads, *input, |dst| {
                    for j in 0..dst.len() {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => y[j],
                            UnaryKind::Log => 1.0 / x[j],
                            UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                            UnaryKind::Silu => {
                                let s = raw::sigmoid(x[j]);
                                s + x[j] * s * (1.0 - s)
                            }
                            UnaryKind::Softplus => raw::sigmoid(x[j]),
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Powf(p) => p * x[j].powf(p - 1.0),
                        };
                        dst[j] += g[j] * d;
                    }
                });
            }
            Op::Binary { kind, lhs, rhs } => {
                let a = &self.nodes[lhs.0].tensor.data;
                let b = &self.nodes[rhs.0].tensor.data;
                let (an, bn) = (a.len(), b.len());
                // Gradient w.r.t. lhs.
                self.accumulate(grads, *lhs, |dst| match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % an] += gv;
                        }
                    }
                    BinaryKind::Mul => {
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % an] += gv * b[f % bn];
                        }
                    }
                });
                // Gradient w.r.t. rhs.
                self.accumulate(grads, *rhs, |dst| match kind {
                    BinaryKind::Add => {
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % bn] += gv;
                        }
                    }
                    BinaryKind::Sub => {
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % bn] -= gv;
                        }
                    }
                    BinaryKind::Mul => {
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % bn] += gv * a[f % an];
                        }
                    }
                });
            }
            Op::Matmul { lhs, rhs } => {
                let a = &self.nodes[lhs.0].tensor.data;
                let b = &self.nodes[rhs.0].tensor.data;
                let m = self.nodes[lhs.0].tensor.shape[0];
                let k = self.nodes[lhs.0].tensor.shape[1];
                let n = out.shape[1];
                if self.requires(*lhs) {
                    let da = raw::matmul_nt(g, b, m, n, k);
                    self.accumulate(grads, *lhs, |dst| {
                        for (d, v) in dst.iter_mut().zip(da.iter()) {
                            *d += v;
                        }
                    });
                }
                if self.requires(*rhs) {
                    let db = raw::matmul_tn(a, g, m, k, n);
                    self.accumulate(grads, *rhs, |dst| {
                        for (d, v) in dst.iter_mut().zip(db.iter()) {
                            *d += v;
                        }
                    });
                }
            }
            Op::MatmulNT { lhs, rhs } => {
                // out = A * B^T, so dA = G * B and dB = G^T * A.
                let a = &self.nodes[lhs.0].tensor.data;
                let b = &self.nodes[rhs.0].tensor.data;
                let m = self.nodes[lhs.0].tensor.shape[0];
                let k = self.nodes[lhs.0].tensor.shape[1];
                let n = out.shape[1];
                if self.requires(*lhs) {
                    let da = raw::matmul_nn(g, b, m, n, k);
                    self.accumulate(grads, *lhs, |dst| {
                        for (d, v) in dst.iter_mut().zip(da.iter()) {
                            *d += v;
                        }
                    });
                }
                if self.requires(*rhs) {
                    let db = raw::matmul_tn(g, a, m, n, k);
                    self.accumulate(grads, *rhs, |dst| {
                        for (d, v) in dst.iter_mut().zip(db.iter()) {
                            *d += v;
                        }
                    });
                }
            }
            Op::Softmax { input, axis } => {
                let y = &out.data;
                let (outer, lane, inner) = self.lane_geometry(TensorId(i), *axis).expect("geometry");
                self.accumulate(grads, *input, |dst| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let start = o * lane * inner + ii;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = start + l * inner;
                                dot += g[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = start + l * inner;
                                dst[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let y = &out.data;
                let (outer, lane, inner) = self.lane_geometry(TensorId(i), *axis).expect("geometry");
                self.accumulate(grads, *input, |dst| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let start = o * lane * inner + ii;
                            let mut gsum = 0.0;
                            for l in 0..lane {
                                gsum += g[start + l * inner];
                            }
                            for l in 0..lane {
                                let idx = start + l * inner;
                                dst[idx] += g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Sum { input } => {
                let gv = g[0];
                self.accumulate(grads, *input, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumRows { input } => {
                let m = self.nodes[input.0].tensor.shape[1];
                self.accumulate(grads, *input, |dst| {
                    for (f, d) in dst.iter_mut().enumerate() {
                        *d += g[f / m];
                    }
                });
            }
            Op::GatherRows { input, indices } => {
                let row_size: usize = self.nodes[input.0].tensor.shape[1..].iter().product();
                self.accumulate(grads, *input, |dst| {
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..row_size {
                            dst[ix * row_size + j] += g[r * row_size + j];
                        }
                    }
                });
            }
            Op::ScatterRows { input, indices } => {
                let row_size: usize = self.nodes[input.0].tensor.shape[1..].iter().product();
                self.accumulate(grads, *input, |dst| {
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..row_size {
                            dst[r * row_size + j] += g[ix * row_size + j];
                        }
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let m = self.nodes[input.0].tensor.shape[1];
                let w = out.shape[1];
                self.accumulate(grads, *input, |dst| {
                    for r in 0..out.shape[0] {
                        for j in 0..w {
                            dst[r * m + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { inputs } => {
                let n = out.shape[0];
                let total_w = out.shape[1];
                let mut offset = 0;
                for &id in inputs {
                    let w = self.nodes[id.0].tensor.shape[1];
                    self.accumulate(grads, id, |dst| {
                        for r in 0..n {
                            for j in 0..w {
                                dst[r * w + j] += g[r * total_w + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::PickPerRow { input, cols } => {
                let m = self.nodes[input.0].tensor.shape[1];
                self.accumulate(grads, *input, |dst| {
                    for (r, &c) in cols.iter().enumerate() {
                        dst[r * m + c] += g[r];
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, |dst| {
                    for (d, v) in dst.iter_mut().zip(g.iter()) {
                        *d += v;
                    }
                });
            }
            Op::ScaleRows { input, scales } => {
                let x = &self.nodes[input.0].tensor.data;
                let s = &self.nodes[scales.0].tensor.data;
                let (n, m) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *input, |dst| {
                    for r in 0..n {
                        for j in 0..m {
                            dst[r * m + j] += g[r * m + j] * s[r];
                        }
                    }
                });
                self.accumulate(grads, *scales, |dst| {
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[r * m + j] * x[r * m + j];
                        }
                        dst[r] += acc;
                    }
                });
            }
            Op::Rope {
                input,
                positions,
                base,
            } => {
                let d = out.shape[1];
                self.accumulate(grads, *input, |dst| {
                    let mut buf = vec![0.0; d];
                    for (t, &pos) in positions.iter().enumerate() {
                        buf.copy_from_slice(&g[t * d..(t + 1) * d]);
                        raw::rope_rotate_row(&mut buf, pos, *base, -1.0);
                        for j in 0..d {
                            dst[t * d + j] += buf[j];
                        }
                    }
                });
            }
        }
    }
}
