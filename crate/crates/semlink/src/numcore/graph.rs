//! Wengert-tape computation graph: forward op constructors and reverse-mode
//! backward rules.
//!
//! Every op validates shapes/dtypes, computes its output eagerly, checks the
//! result is finite, and appends a node. `backward` walks the tape once in
//! reverse, accumulating gradients into every node that requires them.

use super::linalg;
use super::{shapes_eq, Dtype, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on one specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Default)]
enum Op {
    #[default]
    Leaf,
    Constant,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Affine {
        a: usize,
        mul: f64,
    },
    ScaleVar {
        a: usize,
        s: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    ScaleRows {
        x: usize,
        s: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Hermitian {
        a: usize,
    },
    ComplexExpPhase {
        theta: usize,
    },
    RealImagConcat {
        a: usize,
    },
    ComplexFromPair {
        a: usize,
    },
    Abs2 {
        a: usize,
    },
    FrobNorm {
        a: usize,
    },
    Recip {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    MeanAxes {
        a: usize,
        axes: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        a: usize,
    },
    QuantizeSte {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    LogDetHpd {
        a: usize,
        inverse: Vec<f64>,
    },
    CrossEntropyMean {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    inner: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Raw gradient slots for a node, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value; zeros when the
    /// node was not reached by backpropagation.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let val = graph.value(v);
        match self.get(v) {
            Some(g) => Tensor {
                shape: val.shape.clone(),
                dtype: val.dtype,
                data: g.to_vec(),
            },
            None => Tensor::zeros(&val.shape, val.dtype),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value in op output"))
    }
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

    /// Insert a differentiable leaf (e.g. a trainable parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t, true)
    }

    /// Insert a non-differentiable value (data, noise, channel realizations).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Constant, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite(name, &value)?;
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── Arithmetic ───────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub("add", a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub("sub", a, b, -1.0)
    }

    fn add_sub(&mut self, name: &'static str, a: Var, b: Var, sign: f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dtype != tb.dtype {
            return Err(Error::dtype(name, format!("{:?} vs {:?}", ta.dtype, tb.dtype)));
        }
        if !shapes_eq(ta, tb) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data: Vec<f64> = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(x, y)| x + sign * y)
            .collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: ta.dtype,
            data,
        };
        let op = if sign > 0.0 {
            Op::Add { a: a.0, b: b.0 }
        } else {
            Op::Sub { a: a.0, b: b.0 }
        };
        let rg = self.req2(a, b);
        self.push(name, op, out, rg)
    }

    /// Elementwise product; complex inputs multiply as complex numbers.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dtype != tb.dtype {
            return Err(Error::dtype("mul", format!("{:?} vs {:?}", ta.dtype, tb.dtype)));
        }
        if !shapes_eq(ta, tb) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let out = match ta.dtype {
            Dtype::Real => Tensor {
                shape: ta.shape.clone(),
                dtype: Dtype::Real,
                data: ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
            },
            Dtype::Complex => {
                let n = ta.numel();
                let mut data = vec![0.0; 2 * n];
                for i in 0..n {
                    let (ar, ai) = ta.c_at(i);
                    let (br, bi) = tb.c_at(i);
                    data[2 * i] = ar * br - ai * bi;
                    data[2 * i + 1] = ar * bi + ai * br;
                }
                Tensor {
                    shape: ta.shape.clone(),
                    dtype: Dtype::Complex,
                    data,
                }
            }
        };
        let rg = self.req2(a, b);
        self.push("mul", Op::Mul { a: a.0, b: b.0 }, out, rg)
    }

    /// Multiply by a real constant (applies to both complex components).
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: ta.dtype,
            data: ta.data.iter().map(|x| c * x).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("scale", Op::Scale { a: a.0, c }, out, rg)
    }

    /// out = mul * a + add, real tensors only.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("affine", "expected real input"));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data: ta.data.iter().map(|x| mul * x + add).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("affine", Op::Affine { a: a.0, mul }, out, rg)
    }

    /// Multiply by a real scalar variable (shape [1]).
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.dtype != Dtype::Real || !ts.is_scalar() {
            return Err(Error::shape("scale_var", "scale factor must be a real scalar"));
        }
        let sv = ts.data[0];
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: ta.dtype,
            data: ta.data.iter().map(|x| sv * x).collect(),
        };
        let rg = self.req2(a, s);
        self.push("scale_var", Op::ScaleVar { a: a.0, s: s.0 }, out, rg)
    }

    /// x [r×d] + row-broadcast bias b [d], real.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tx.dtype != Dtype::Real || tb.dtype != Dtype::Real {
            return Err(Error::dtype("add_bias", "expected real inputs"));
        }
        let (r, d) = tx.dims2("add_bias")?;
        if tb.shape != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs row width {d}", tb.shape),
            ));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] += tb.data[j];
            }
        }
        let out = Tensor::from_real(&tx.shape, data);
        let rg = self.req2(x, b);
        self.push("add_bias", Op::AddBias { x: x.0, b: b.0 }, out, rg)
    }

    /// Per-row gate: out[i, :] = s[i] * x[i, :], real.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if tx.dtype != Dtype::Real || ts.dtype != Dtype::Real {
            return Err(Error::dtype("scale_rows", "expected real inputs"));
        }
        let (r, d) = tx.dims2("scale_rows")?;
        if ts.shape != [r] {
            return Err(Error::shape(
                "scale_rows",
                format!("gate {:?} vs row count {r}", ts.shape),
            ));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] *= ts.data[i];
            }
        }
        let out = Tensor::from_real(&tx.shape, data);
        let rg = self.req2(x, s);
        self.push("scale_rows", Op::ScaleRows { x: x.0, s: s.0 }, out, rg)
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dtype != tb.dtype {
            return Err(Error::dtype(
                "matmul",
                format!("{:?} vs {:?}", ta.dtype, tb.dtype),
            ));
        }
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} vs {k2} ({:?} x {:?})", ta.shape, tb.shape),
            ));
        }
        let out = match ta.dtype {
            Dtype::Real => {
                let mut data = vec![0.0; m * n];
                rmm_acc(&mut data, &ta.data, false, &tb.data, false, m, k, n);
                Tensor::from_real(&[m, n], data)
            }
            Dtype::Complex => {
                let mut data = vec![0.0; 2 * m * n];
                linalg::cmm_acc(&mut data, &ta.data, false, &tb.data, false, m, k, n);
                Tensor::from_complex(&[m, n], data)
            }
        };
        let rg = self.req2(a, b);
        self.push("matmul", Op::MatMul { a: a.0, b: b.0 }, out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2("transpose")?;
        let w = ta.dtype.width();
        let mut data = vec![0.0; ta.data.len()];
        for i in 0..m {
            for j in 0..n {
                for s in 0..w {
                    data[(j * m + i) * w + s] = ta.data[(i * n + j) * w + s];
                }
            }
        }
        let out = Tensor {
            shape: vec![n, m],
            dtype: ta.dtype,
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("transpose", Op::Transpose { a: a.0 }, out, rg)
    }

    /// Conjugate transpose of a complex matrix.
    pub fn hermitian(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Complex {
            return Err(Error::dtype("hermitian", "expected complex input"));
        }
        let (m, n) = ta.dims2("hermitian")?;
        let mut data = vec![0.0; ta.data.len()];
        for i in 0..m {
            for j in 0..n {
                data[2 * (j * m + i)] = ta.data[2 * (i * n + j)];
                data[2 * (j * m + i) + 1] = -ta.data[2 * (i * n + j) + 1];
            }
        }
        let out = Tensor::from_complex(&[n, m], data);
        let rg = self.nodes[a.0].requires_grad;
        self.push("hermitian", Op::Hermitian { a: a.0 }, out, rg)
    }

    // ── Complex structure ────────────────────────────────────────────

    /// Entry-wise e^{j theta} of a real phase tensor.
    pub fn complex_exp_phase(&mut self, theta: Var) -> Result<Var> {
        let tt = &self.nodes[theta.0].value;
        if tt.dtype != Dtype::Real {
            return Err(Error::dtype("complex_exp_phase", "phase input must be real"));
        }
        let n = tt.numel();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let (s, c) = tt.data[i].sin_cos();
            data[2 * i] = c;
            data[2 * i + 1] = s;
        }
        let out = Tensor {
            shape: tt.shape.clone(),
            dtype: Dtype::Complex,
            data,
        };
        let rg = self.nodes[theta.0].requires_grad;
        self.push(
            "complex_exp_phase",
            Op::ComplexExpPhase { theta: theta.0 },
            out,
            rg,
        )
    }

    /// Complex [m×k] -> real [m×2k] with [Re | Im] column blocks.
    pub fn real_imag_concat(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Complex {
            return Err(Error::dtype("real_imag_concat", "expected complex input"));
        }
        let (m, k) = ta.dims2("real_imag_concat")?;
        let mut data = vec![0.0; m * 2 * k];
        for i in 0..m {
            for j in 0..k {
                data[i * 2 * k + j] = ta.data[2 * (i * k + j)];
                data[i * 2 * k + k + j] = ta.data[2 * (i * k + j) + 1];
            }
        }
        let out = Tensor::from_real(&[m, 2 * k], data);
        let rg = self.nodes[a.0].requires_grad;
        self.push("real_imag_concat", Op::RealImagConcat { a: a.0 }, out, rg)
    }

    /// Real 1-D [2n] -> complex [n]; first half is Re, second half Im.
    pub fn complex_from_pair(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("complex_from_pair", "expected real input"));
        }
        let total = ta.numel();
        if ta.rank() != 1 || total % 2 != 0 {
            return Err(Error::shape(
                "complex_from_pair",
                format!("expected 1-D of even length, got {:?}", ta.shape),
            ));
        }
        let n = total / 2;
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[2 * i] = ta.data[i];
            data[2 * i + 1] = ta.data[n + i];
        }
        let out = Tensor::from_complex(&[n], data);
        let rg = self.nodes[a.0].requires_grad;
        self.push("complex_from_pair", Op::ComplexFromPair { a: a.0 }, out, rg)
    }

    /// |z|^2 entrywise, complex -> real.
    pub fn abs2(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Complex {
            return Err(Error::dtype("abs2", "expected complex input"));
        }
        let n = ta.numel();
        let mut data = vec![0.0; n];
        for i in 0..n {
            let (re, im) = ta.c_at(i);
            data[i] = re * re + im * im;
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("abs2", Op::Abs2 { a: a.0 }, out, rg)
    }

    /// Frobenius norm, any dtype -> real scalar.
    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n = ta.sq_norm().sqrt();
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "frobenius_norm",
            Op::FrobNorm { a: a.0 },
            Tensor::scalar(n),
            rg,
        )
    }

    // ── Activations & reductions ─────────────────────────────────────

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("recip", "expected real input"));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data: ta.data.iter().map(|x| 1.0 / x).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("recip", Op::Recip { a: a.0 }, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("relu", "expected real input"));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data: ta.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("relu", Op::Relu { a: a.0 }, out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("sigmoid", "expected real input"));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data: ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("sigmoid", Op::Sigmoid { a: a.0 }, out, rg)
    }

    /// Numerically stable softmax along `axis` of a real 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("softmax", "expected real input"));
        }
        let (r, c) = ta.dims2("softmax")?;
        if axis > 1 {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: 2,
            });
        }
        let mut data = ta.data.clone();
        let (groups, len, gs, es) = if axis == 1 {
            (r, c, c, 1usize) // rows: group stride c, element stride 1
        } else {
            (c, r, 1, c) // columns
        };
        for g in 0..groups {
            let base = g * gs;
            let mut mx = f64::NEG_INFINITY;
            for e in 0..len {
                mx = mx.max(data[base + e * es]);
            }
            let mut sum = 0.0;
            for e in 0..len {
                let v = (data[base + e * es] - mx).exp();
                data[base + e * es] = v;
                sum += v;
            }
            for e in 0..len {
                data[base + e * es] /= sum;
            }
        }
        let out = Tensor::from_real(&ta.shape, data);
        let rg = self.nodes[a.0].requires_grad;
        self.push("softmax", Op::Softmax { a: a.0, axis }, out, rg)
    }

    /// Mean over the given axes of a real tensor; reduced axes are removed
    /// from the output shape.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("mean", "expected real input"));
        }
        let rank = ta.rank();
        let mut ax = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        for &x in &ax {
            if x >= rank {
                return Err(Error::Axis {
                    op: "mean",
                    axis: x,
                    rank,
                });
            }
        }
        let keep: Vec<usize> = (0..rank).filter(|d| !ax.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| ta.shape[d]).collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let reduced: usize = ax.iter().map(|&d| ta.shape[d]).product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let strides = strides_of(&ta.shape);
        let out_strides = strides_of(&out_shape);
        for (flat, &v) in ta.data.iter().enumerate() {
            let mut oi = 0;
            for (ki, &d) in keep.iter().enumerate() {
                let coord = (flat / strides[d]) % ta.shape[d];
                oi += coord * out_strides[ki.min(out_strides.len() - 1)];
            }
            if keep.is_empty() {
                oi = 0;
            }
            data[oi] += v;
        }
        for v in data.iter_mut() {
            *v /= reduced as f64;
        }
        let out = Tensor::from_real(&out_shape, data);
        let rg = self.nodes[a.0].requires_grad;
        self.push("mean", Op::MeanAxes { a: a.0, axes: ax }, out, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let rank = self.nodes[a.0].value.rank();
        let axes: Vec<usize> = (0..rank).collect();
        self.mean_axes(a, &axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("sum", "expected real input"));
        }
        let s: f64 = ta.data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push("sum", Op::SumAll { a: a.0 }, Tensor::scalar(s), rg)
    }

    /// Row-wise layer normalization with learned gain/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if tx.dtype != Dtype::Real {
            return Err(Error::dtype("layer_norm", "expected real input"));
        }
        let (r, d) = tx.dims2("layer_norm")?;
        if tg.shape != [d] || tb.shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs width {d}", tg.shape, tb.shape),
            ));
        }
        let mut data = vec![0.0; r * d];
        let mut means = vec![0.0; r];
        let mut rstds = vec![0.0; r];
        for i in 0..r {
            let row = &tx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..d {
                data[i * d + j] = tg.data[j] * (row[j] - mean) * rstd + tb.data[j];
            }
        }
        let out = Tensor::from_real(&tx.shape, data);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: means,
                rstd: rstds,
            },
            out,
            rg,
        )
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Concatenate 1-D or 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = &self.nodes[parts[0].0].value;
        let dtype = first.dtype;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        let w = dtype.width();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.dtype != dtype {
                return Err(Error::dtype("concat", "mixed dtypes"));
            }
            if t.rank() != rank {
                return Err(Error::shape("concat", "mixed ranks"));
            }
            for d in 0..rank {
                if d != axis && t.shape[d] != first.shape[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?} along non-concat axis", t.shape, first.shape),
                    ));
                }
            }
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = parts
            .iter()
            .map(|p| self.nodes[p.0].value.shape[axis])
            .sum();
        let mut data = vec![0.0; out_shape.iter().product::<usize>() * w];
        if rank == 1 || axis == 0 {
            // Contiguous blocks.
            let mut off = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                data[off..off + t.data.len()].copy_from_slice(&t.data);
                off += t.data.len();
            }
        } else {
            // 2-D axis-1: interleave rows.
            let rows = first.shape[0];
            let out_cols = out_shape[1];
            let mut col_off = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                let cols = t.shape[1];
                for i in 0..rows {
                    for j in 0..cols {
                        for s in 0..w {
                            data[(i * out_cols + col_off + j) * w + s] =
                                t.data[(i * cols + j) * w + s];
                        }
                    }
                }
                col_off += cols;
            }
        }
        let out = Tensor {
            shape: out_shape,
            dtype,
            data,
        };
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        };
        self.push("concat", op, out, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("slice {start}..{} of {c} columns", start + len),
            ));
        }
        let w = ta.dtype.width();
        let mut data = vec![0.0; r * len * w];
        for i in 0..r {
            for j in 0..len {
                for s in 0..w {
                    data[(i * len + j) * w + s] = ta.data[(i * c + start + j) * w + s];
                }
            }
        }
        let out = Tensor {
            shape: vec![r, len],
            dtype: ta.dtype,
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "slice_cols",
            Op::SliceCols {
                a: a.0,
                start,
                len,
            },
            out,
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("slice {start}..{} of {r} rows", start + len),
            ));
        }
        let w = ta.dtype.width();
        let data = ta.data[start * c * w..(start + len) * c * w].to_vec();
        let out = Tensor {
            shape: vec![len, c],
            dtype: ta.dtype,
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "slice_rows",
            Op::SliceRows {
                a: a.0,
                start,
                len,
            },
            out,
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", ta.shape, shape),
            ));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            dtype: ta.dtype,
            data: ta.data.clone(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("reshape", Op::Reshape { a: a.0 }, out, rg)
    }

    // ── Network-specific ops ─────────────────────────────────────────

    /// Hard threshold at 0.5 with straight-through gradient.
    pub fn quantize_ste(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Real {
            return Err(Error::dtype("quantize_ste", "expected real input"));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            dtype: Dtype::Real,
            data: ta
                .data
                .iter()
                .map(|&x| if x >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("quantize_ste", Op::QuantizeSte { a: a.0 }, out, rg)
    }

    /// 2-D convolution: x [cin,h,w], w [cout,cin,kh,kw], bias [cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tx.dtype != Dtype::Real || tw.dtype != Dtype::Real || tb.dtype != Dtype::Real {
            return Err(Error::dtype("conv2d", "expected real inputs"));
        }
        let [cin, h, wd] = tx.shape[..] else {
            return Err(Error::shape("conv2d", format!("input {:?}", tx.shape)));
        };
        let [cout, cin2, kh, kw] = tw.shape[..] else {
            return Err(Error::shape("conv2d", format!("kernel {:?}", tw.shape)));
        };
        if cin != cin2 || tb.shape != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("channels: x {cin}, w {cin2}, b {:?}", tb.shape),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = tb.data[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                acc += tw.data[((oc * cin + ic) * kh + ky) * kw + kx]
                                    * tx.data[(ic * h + iy - pad) * wd + ix - pad];
                            }
                        }
                    }
                    data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::from_real(&[cout, oh, ow], data);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(
            "conv2d",
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            out,
            rg,
        )
    }

    /// Nearest-neighbor spatial upsampling of a [c,h,w] tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.dtype != Dtype::Real {
            return Err(Error::dtype("upsample_nearest", "expected real input"));
        }
        let [c, h, w] = tx.shape[..] else {
            return Err(Error::shape("upsample_nearest", format!("{:?}", tx.shape)));
        };
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    data[(ch * oh + oy) * ow + ox] =
                        tx.data[(ch * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let out = Tensor::from_real(&[c, oh, ow], data);
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "upsample_nearest",
            Op::UpsampleNearest { x: x.0, factor },
            out,
            rg,
        )
    }

    /// Natural-log determinant of a small Hermitian positive definite
    /// matrix. The input is symmetrized before factorization so the
    /// gradient is well defined slot-by-slot; callers pass I + c*M*M^H.
    pub fn logdet_hpd(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.dtype != Dtype::Complex {
            return Err(Error::dtype("logdet_hpd", "expected complex input"));
        }
        let (n, n2) = ta.dims2("logdet_hpd")?;
        if n != n2 {
            return Err(Error::shape("logdet_hpd", format!("non-square {:?}", ta.shape)));
        }
        if n > 8 {
            return Err(Error::shape(
                "logdet_hpd",
                format!("restricted to matrices of size <= 8, got {n}"),
            ));
        }
        // Hermitian part (A + A^H)/2.
        let mut ah = vec![0.0; 2 * n * n];
        for i in 0..n {
            for j in 0..n {
                let (ar, ai) = ta.c_at(i * n + j);
                let (br, bi) = ta.c_at(j * n + i);
                ah[2 * (i * n + j)] = 0.5 * (ar + br);
                ah[2 * (i * n + j) + 1] = 0.5 * (ai - bi);
            }
        }
        let l = linalg::cholesky(&ah, n)?;
        let mut ld = 0.0;
        for i in 0..n {
            ld += 2.0 * l[2 * (i * n + i)].ln();
        }
        let rg = self.nodes[a.0].requires_grad;
        let inverse = if rg {
            linalg::inverse_from_cholesky(&l, n)
        } else {
            Vec::new()
        };
        self.push(
            "logdet_hpd",
            Op::LogDetHpd { a: a.0, inverse },
            Tensor::scalar(ld),
            rg,
        )
    }

    /// Mean per-pixel cross entropy: logits [C×N], labels length N.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.dtype != Dtype::Real {
            return Err(Error::dtype("cross_entropy", "expected real logits"));
        }
        let (cls, n) = tl.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels vs {n} pixels", labels.len()),
            ));
        }
        let mut probs = vec![0.0; cls * n];
        let mut loss = 0.0;
        for p in 0..n {
            let y = labels[p];
            if y >= cls {
                return Err(Error::numeric(
                    "cross_entropy",
                    format!("label {y} out of range for {cls} classes"),
                ));
            }
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cls {
                mx = mx.max(tl.data[c * n + p]);
            }
            let mut sum = 0.0;
            for c in 0..cls {
                let e = (tl.data[c * n + p] - mx).exp();
                probs[c * n + p] = e;
                sum += e;
            }
            for c in 0..cls {
                probs[c * n + p] /= sum;
            }
            loss += sum.ln() + mx - tl.data[y * n + p];
        }
        loss /= n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            "cross_entropy",
            Op::CrossEntropyMean {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a real scalar loss. Returns gradients for
    /// every node reached; unreached leaves read back as zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        {
            let lt = &self.nodes[loss.0].value;
            if lt.dtype != Dtype::Real || !lt.is_scalar() {
                return Err(Error::Usage(format!(
                    "backward requires a real scalar loss, got {:?} {:?}",
                    lt.dtype, lt.shape
                )));
            }
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if g[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = g[idx].take().unwrap();
            let op = std::mem::take(&mut self.nodes[idx].op);
            self.backprop_op(&op, idx, &gout, &mut g)?;
            self.nodes[idx].op = op;
            g[idx] = Some(gout);
        }
        Ok(Grads { inner: g })
    }

    fn grad_buf<'a>(
        &self,
        g: &'a mut Vec<Option<Vec<f64>>>,
        node: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[node].requires_grad {
            return None;
        }
        let len = self.nodes[node].value.data.len();
        Some(g[node].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_op(
        &self,
        op: &Op,
        idx: usize,
        gout: &[f64],
        g: &mut Vec<Option<Vec<f64>>>,
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.grad_buf(g, *b) {
                    for (x, d) in gb.iter_mut().zip(gout) {
                        *x += d;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.grad_buf(g, *b) {
                    for (x, d) in gb.iter_mut().zip(gout) {
                        *x -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                match ta.dtype {
                    Dtype::Real => {
                        if let Some(ga) = self.grad_buf(g, *a) {
                            for i in 0..gout.len() {
                                ga[i] += gout[i] * tb.data[i];
                            }
                        }
                        if let Some(gb) = self.grad_buf(g, *b) {
                            for i in 0..gout.len() {
                                gb[i] += gout[i] * ta.data[i];
                            }
                        }
                    }
                    Dtype::Complex => {
                        // Packed rule: g_a = g * conj(b), g_b = g * conj(a).
                        let n = ta.numel();
                        if let Some(ga) = self.grad_buf(g, *a) {
                            for i in 0..n {
                                let (gr, gi) = (gout[2 * i], gout[2 * i + 1]);
                                let (br, bi) = tb.c_at(i);
                                ga[2 * i] += gr * br + gi * bi;
                                ga[2 * i + 1] += gi * br - gr * bi;
                            }
                        }
                        if let Some(gb) = self.grad_buf(g, *b) {
                            for i in 0..n {
                                let (gr, gi) = (gout[2 * i], gout[2 * i + 1]);
                                let (ar, ai) = ta.c_at(i);
                                gb[2 * i] += gr * ar + gi * ai;
                                gb[2 * i + 1] += gi * ar - gr * ai;
                            }
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += c * d;
                    }
                }
            }
            Op::Affine { a, mul } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += mul * d;
                    }
                }
            }
            Op::ScaleVar { a, s } => {
                let sv = self.nodes[*s].value.data[0];
                let ta = &self.nodes[*a].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += sv * d;
                    }
                }
                if let Some(gs) = self.grad_buf(g, *s) {
                    let mut acc = 0.0;
                    for (x, d) in ta.data.iter().zip(gout) {
                        acc += x * d;
                    }
                    gs[0] += acc;
                }
            }
            Op::AddBias { x, b } => {
                let (r, d) = self.nodes[*x].value.dims2("add_bias")?;
                if let Some(gx) = self.grad_buf(g, *x) {
                    for (v, dd) in gx.iter_mut().zip(gout) {
                        *v += dd;
                    }
                }
                if let Some(gb) = self.grad_buf(g, *b) {
                    for i in 0..r {
                        for j in 0..d {
                            gb[j] += gout[i * d + j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let tx = &self.nodes[*x].value;
                let ts = &self.nodes[*s].value;
                let (r, d) = tx.dims2("scale_rows")?;
                if let Some(gx) = self.grad_buf(g, *x) {
                    for i in 0..r {
                        for j in 0..d {
                            gx[i * d + j] += ts.data[i] * gout[i * d + j];
                        }
                    }
                }
                if let Some(gs) = self.grad_buf(g, *s) {
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += tx.data[i * d + j] * gout[i * d + j];
                        }
                        gs[i] += acc;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                match ta.dtype {
                    Dtype::Real => {
                        if let Some(ga) = self.grad_buf(g, *a) {
                            // gA += G * B^T
                            rmm_acc(ga, gout, false, &tb.data, true, m, n, k);
                        }
                        if let Some(gb) = self.grad_buf(g, *b) {
                            // gB += A^T * G
                            rmm_acc(gb, &ta.data, true, gout, false, k, m, n);
                        }
                    }
                    Dtype::Complex => {
                        if let Some(ga) = self.grad_buf(g, *a) {
                            // gA += G * B^H
                            linalg::cmm_acc(ga, gout, false, &tb.data, true, m, n, k);
                        }
                        if let Some(gb) = self.grad_buf(g, *b) {
                            // gB += A^H * G
                            linalg::cmm_acc(gb, &ta.data, true, gout, false, k, m, n);
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let ta = &self.nodes[*a].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let w = ta.dtype.width();
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            for s in 0..w {
                                ga[(i * n + j) * w + s] += gout[(j * m + i) * w + s];
                            }
                        }
                    }
                }
            }
            Op::Hermitian { a } => {
                let ta = &self.nodes[*a].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[2 * (i * n + j)] += gout[2 * (j * m + i)];
                            ga[2 * (i * n + j) + 1] -= gout[2 * (j * m + i) + 1];
                        }
                    }
                }
            }
            Op::ComplexExpPhase { theta } => {
                let out = &self.nodes[idx].value;
                if let Some(gt) = self.grad_buf(g, *theta) {
                    for i in 0..gt.len() {
                        let (re, im) = out.c_at(i);
                        gt[i] += -gout[2 * i] * im + gout[2 * i + 1] * re;
                    }
                }
            }
            Op::RealImagConcat { a } => {
                let ta = &self.nodes[*a].value;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..m {
                        for j in 0..k {
                            ga[2 * (i * k + j)] += gout[i * 2 * k + j];
                            ga[2 * (i * k + j) + 1] += gout[i * 2 * k + k + j];
                        }
                    }
                }
            }
            Op::ComplexFromPair { a } => {
                let n = self.nodes[idx].value.numel();
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..n {
                        ga[i] += gout[2 * i];
                        ga[n + i] += gout[2 * i + 1];
                    }
                }
            }
            Op::Abs2 { a } => {
                let ta = &self.nodes[*a].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..gout.len() {
                        let (re, im) = ta.c_at(i);
                        ga[2 * i] += 2.0 * re * gout[i];
                        ga[2 * i + 1] += 2.0 * im * gout[i];
                    }
                }
            }
            Op::FrobNorm { a } => {
                let norm = self.nodes[idx].value.data[0];
                if self.nodes[*a].requires_grad && norm == 0.0 {
                    return Err(Error::numeric(
                        "frobenius_norm",
                        "gradient undefined at zero norm",
                    ));
                }
                let ta = &self.nodes[*a].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    let c = gout[0] / norm;
                    for (x, v) in ga.iter_mut().zip(ta.data.iter()) {
                        *x += c * v;
                    }
                }
            }
            Op::Recip { a } => {
                let out = &self.nodes[idx].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..gout.len() {
                        ga[i] -= gout[i] * out.data[i] * out.data[i];
                    }
                }
            }
            Op::Relu { a } => {
                let ta = &self.nodes[*a].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..gout.len() {
                        if ta.data[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[idx].value;
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..gout.len() {
                        let y = out.data[i];
                        ga[i] += gout[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let out = &self.nodes[idx].value;
                let (r, c) = (out.shape[0], out.shape[1]);
                let (groups, len, gs, es) = if *axis == 1 {
                    (r, c, c, 1usize)
                } else {
                    (c, r, 1, c)
                };
                if let Some(ga) = self.grad_buf(g, *a) {
                    for grp in 0..groups {
                        let base = grp * gs;
                        let mut dot = 0.0;
                        for e in 0..len {
                            dot += gout[base + e * es] * out.data[base + e * es];
                        }
                        for e in 0..len {
                            let i = base + e * es;
                            ga[i] += out.data[i] * (gout[i] - dot);
                        }
                    }
                }
            }
            Op::MeanAxes { a, axes } => {
                let ta = &self.nodes[*a].value;
                let rank = ta.rank();
                let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
                let reduced: usize = axes.iter().map(|&d| ta.shape[d]).product();
                let strides = strides_of(&ta.shape);
                let out_shape = &self.nodes[idx].value.shape;
                let out_strides = strides_of(out_shape);
                if let Some(ga) = self.grad_buf(g, *a) {
                    let inv = 1.0 / reduced as f64;
                    for flat in 0..ta.numel() {
                        let mut oi = 0;
                        for (ki, &d) in keep.iter().enumerate() {
                            let coord = (flat / strides[d]) % ta.shape[d];
                            oi += coord * out_strides[ki.min(out_strides.len() - 1)];
                        }
                        if keep.is_empty() {
                            oi = 0;
                        }
                        ga[flat] += gout[oi] * inv;
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for x in ga.iter_mut() {
                        *x += gout[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (r, d) = (tx.shape[0], tx.shape[1]);
                for i in 0..r {
                    let (mu, rs) = (mean[i], rstd[i]);
                    // x_hat and the two row sums needed by the closed form.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let xh = (tx.data[i * d + j] - mu) * rs;
                        let dxh = gout[i * d + j] * tg.data[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    if let Some(gx) = self.grad_buf(g, *x) {
                        let invd = 1.0 / d as f64;
                        for j in 0..d {
                            let xh = (tx.data[i * d + j] - mu) * rs;
                            let dxh = gout[i * d + j] * tg.data[j];
                            gx[i * d + j] +=
                                rs * (dxh - invd * sum_dxh - xh * invd * sum_dxh_xh);
                        }
                    }
                    if let Some(gg) = self.grad_buf(g, *gamma) {
                        for j in 0..d {
                            let xh = (tx.data[i * d + j] - mu) * rs;
                            gg[j] += gout[i * d + j] * xh;
                        }
                    }
                    if let Some(gb) = self.grad_buf(g, *beta) {
                        for j in 0..d {
                            gb[j] += gout[i * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let w = self.nodes[idx].value.dtype.width();
                if self.nodes[idx].value.rank() == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.data.len();
                        if let Some(gp) = self.grad_buf(g, p) {
                            for (x, dd) in gp.iter_mut().zip(&gout[off..off + len]) {
                                *x += dd;
                            }
                        }
                        off += len;
                    }
                } else {
                    let rows = self.nodes[idx].value.shape[0];
                    let out_cols = self.nodes[idx].value.shape[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.shape[1];
                        if let Some(gp) = self.grad_buf(g, p) {
                            for i in 0..rows {
                                for j in 0..cols {
                                    for s in 0..w {
                                        gp[(i * cols + j) * w + s] +=
                                            gout[(i * out_cols + col_off + j) * w + s];
                                    }
                                }
                            }
                        }
                        col_off += cols;
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let ta = &self.nodes[*a].value;
                let (r, c) = (ta.shape[0], ta.shape[1]);
                let w = ta.dtype.width();
                if let Some(ga) = self.grad_buf(g, *a) {
                    for i in 0..r {
                        for j in 0..*len {
                            for s in 0..w {
                                ga[(i * c + start + j) * w + s] += gout[(i * len + j) * w + s];
                            }
                        }
                    }
                }
            }
            Op::SliceRows { a, start, len } => {
                let ta = &self.nodes[*a].value;
                let c = ta.shape[1];
                let w = ta.dtype.width();
                if let Some(ga) = self.grad_buf(g, *a) {
                    let off = start * c * w;
                    for i in 0..len * c * w {
                        ga[off + i] += gout[i];
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += d;
                    }
                }
            }
            Op::QuantizeSte { a } => {
                // Straight-through: pass the upstream gradient unchanged.
                if let Some(ga) = self.grad_buf(g, *a) {
                    for (x, d) in ga.iter_mut().zip(gout) {
                        *x += d;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let tx = &self.nodes[*x].value;
                let tw = &self.nodes[*w].value;
                let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (cout, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
                let out_shape = &self.nodes[idx].value.shape;
                let (oh, ow) = (out_shape[1], out_shape[2]);
                if let Some(gb) = self.grad_buf(g, *b) {
                    for oc in 0..cout {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc += gout[(oc * oh + oy) * ow + ox];
                            }
                        }
                        gb[oc] += acc;
                    }
                }
                if let Some(gw) = self.grad_buf(g, *w) {
                    for oc in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[(oc * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < *pad || iy - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < *pad || ix - pad >= wd {
                                                continue;
                                            }
                                            gw[((oc * cin + ic) * kh + ky) * kw + kx] +=
                                                go * tx.data[(ic * h + iy - pad) * wd + ix - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(g, *x) {
                    for oc in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[(oc * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < *pad || iy - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < *pad || ix - pad >= wd {
                                                continue;
                                            }
                                            gx[(ic * h + iy - pad) * wd + ix - pad] += go
                                                * tw.data[((oc * cin + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let tx = &self.nodes[*x].value;
                let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(gx) = self.grad_buf(g, *x) {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gx[(ch * h + oy / factor) * w + ox / factor] +=
                                    gout[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::LogDetHpd { a, inverse } => {
                // d(ln det A)/dA = A^{-1} in the packed pair convention.
                if let Some(ga) = self.grad_buf(g, *a) {
                    let u = gout[0];
                    for (x, v) in ga.iter_mut().zip(inverse.iter()) {
                        *x += u * v;
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                labels,
                probs,
            } => {
                let tl = &self.nodes[*logits].value;
                let (cls, n) = (tl.shape[0], tl.shape[1]);
                if let Some(gl) = self.grad_buf(g, *logits) {
                    let u = gout[0] / n as f64;
                    for p in 0..n {
                        for c in 0..cls {
                            let onehot = if labels[p] == c { 1.0 } else { 0.0 };
                            gl[c * n + p] += u * (probs[c * n + p] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// C += op(A)·op(B) for real row-major matrices with optional transposes;
/// op(A) is m×k, op(B) is k×n.
fn rmm_acc(
    out: &mut [f64],
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if b_t {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_real(shape, data.to_vec())
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.constant(real(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(real(&[2, 2], &[3.0, -1.5, 2.0, 0.25]));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data, vec![3.0, -1.5, 2.0, 0.25]);
    }

    #[test]
    fn matmul_permutation_swaps_rows() {
        let mut g = Graph::new();
        let p = g.constant(real(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let v = g.constant(real(&[2, 1], &[4.0, 9.0]));
        let out = g.matmul(p, v).unwrap();
        assert_eq!(g.value(out).data, vec![9.0, 4.0]);
    }

    #[test]
    fn complex_matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::RngStream::derive(42, "cm");
        let n = 3;
        let mut ad = vec![0.0; 2 * n * n];
        let mut bd = vec![0.0; 2 * n * n];
        for x in ad.iter_mut().chain(bd.iter_mut()) {
            *x = rng.normal();
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_complex(&[n, n], ad.clone()));
        let b = g.constant(Tensor::from_complex(&[n, n], bd.clone()));
        let c = g.matmul(a, b).unwrap();
        // Entry-wise triple loop on scalar complex arithmetic.
        for i in 0..n {
            for j in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for k in 0..n {
                    let (ar, ai) = (ad[2 * (i * n + k)], ad[2 * (i * n + k) + 1]);
                    let (br, bi) = (bd[2 * (k * n + j)], bd[2 * (k * n + j) + 1]);
                    re += ar * br - ai * bi;
                    im += ar * bi + ai * br;
                }
                let got = g.value(c).c_at(i * n + j);
                assert!((got.0 - re).abs() < 1e-12 && (got.1 - im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(real(&[2, 3], &[0.0; 6]));
        let b = g.constant(real(&[2, 2], &[0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn complex_exp_phase_units() {
        let mut g = Graph::new();
        let th = g.constant(real(&[2], &[0.0, std::f64::consts::FRAC_PI_2]));
        let out = g.complex_exp_phase(th).unwrap();
        let v = g.value(out);
        assert!((v.c_at(0).0 - 1.0).abs() < 1e-12 && v.c_at(0).1.abs() < 1e-12);
        assert!(v.c_at(1).0.abs() < 1e-12 && (v.c_at(1).1 - 1.0).abs() < 1e-12);
        // Unit modulus at machine precision.
        let mut rng = crate::rng::RngStream::derive(1, "phase");
        let mut g = Graph::new();
        let data: Vec<f64> = (0..64).map(|_| rng.range(-10.0, 10.0)).collect();
        let th = g.constant(real(&[64], &data));
        let out = g.complex_exp_phase(th).unwrap();
        for i in 0..64 {
            let (re, im) = g.value(out).c_at(i);
            assert!(((re * re + im * im).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_exp_phase_rejects_complex_input() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2], Dtype::Complex));
        assert!(matches!(g.complex_exp_phase(z), Err(Error::Dtype { .. })));
    }

    #[test]
    fn logdet_trivial_cases() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::eye_complex(2));
        let out = g.logdet_hpd(eye).unwrap();
        assert!(g.value(out).data[0].abs() < 1e-15);

        let mut d = Tensor::eye_complex(2);
        d.data[0] = 2.0;
        d.data[6] = 3.0;
        let dv = g.constant(d);
        let out = g.logdet_hpd(dv).unwrap();
        assert!((g.value(out).data[0] - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_2x2_determinant_formula() {
        let mut rng = crate::rng::RngStream::derive(9, "ld");
        for _ in 0..100 {
            // A = M M^H + I, 2x2.
            let mut md = vec![0.0; 8];
            for x in md.iter_mut() {
                *x = rng.normal();
            }
            let mut a = vec![0.0; 8];
            linalg::cmm_acc(&mut a, &md, false, &md, true, 2, 2, 2);
            a[0] += 1.0;
            a[6] += 1.0;
            let det = {
                let (a11, a12, a21, a22) = (
                    (a[0], a[1]),
                    (a[2], a[3]),
                    (a[4], a[5]),
                    (a[6], a[7]),
                );
                let p1 = (a11.0 * a22.0 - a11.1 * a22.1, a11.0 * a22.1 + a11.1 * a22.0);
                let p2 = (a12.0 * a21.0 - a12.1 * a21.1, a12.0 * a21.1 + a12.1 * a21.0);
                (p1.0 - p2.0, p1.1 - p2.1)
            };
            let mut g = Graph::new();
            let av = g.constant(Tensor::from_complex(&[2, 2], a));
            let out = g.logdet_hpd(av).unwrap();
            assert!(
                (g.value(out).data[0] - det.0.ln()).abs() < 1e-10,
                "{} vs {}",
                g.value(out).data[0],
                det.0.ln()
            );
        }
    }

    #[test]
    fn logdet_rejects_non_pd() {
        let mut g = Graph::new();
        let mut t = Tensor::eye_complex(2);
        t.data[6] = -1.0; // diag(1, -1)
        let v = g.constant(t);
        let err = g.logdet_hpd(v).unwrap_err();
        assert!(err.to_string().contains("diagonal entry 1"), "{err}");
    }

    #[test]
    fn relu_and_softmax_trivial() {
        let mut g = Graph::new();
        let x = g.constant(real(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 2.0]);

        let u = g.constant(real(&[1, 4], &[0.7, 0.7, 0.7, 0.7]));
        let s = g.softmax(u, 1).unwrap();
        for v in &g.value(s).data {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(real(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sq_norm_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(real(&[3], &[1.0, -2.0, 5.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum_all(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_accumulates_shared_leaf() {
        // loss = sum(x) + sum(2x): grad should be 3 everywhere.
        let mut g = Graph::new();
        let x = g.leaf(real(&[2], &[1.0, 2.0]));
        let a = g.sum_all(x).unwrap();
        let two_x = g.scale(x, 2.0).unwrap();
        let b = g.sum_all(two_x).unwrap();
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(real(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let z = g.leaf(Tensor::zeros(&[1], Dtype::Complex));
        assert!(matches!(g.backward(z), Err(Error::Usage(_))));
    }

    #[test]
    fn unreached_leaf_reads_back_zero() {
        let mut g = Graph::new();
        let x = g.leaf(real(&[2], &[1.0, 2.0]));
        let y = g.leaf(real(&[2], &[3.0, 4.0]));
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.tensor(&g, y).data, vec![0.0, 0.0]);
    }

    #[test]
    fn quantize_and_ste() {
        let mut g = Graph::new();
        let c = g.leaf(real(&[3], &[0.7, 0.3, 0.5]));
        let q = g.quantize_ste(c).unwrap();
        assert_eq!(g.value(q).data, vec![1.0, 0.0, 1.0]);
        // Dequantize {0,1} -> {-1,+1}.
        let d = g.affine(q, 2.0, -1.0).unwrap();
        assert_eq!(g.value(d).data, vec![1.0, -1.0, 1.0]);
        let s = g.sum_all(d).unwrap();
        let grads = g.backward(s).unwrap();
        // Straight-through: d(sum)/dc = 2 everywhere, as if q were identity.
        assert_eq!(grads.get(c).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_shape_and_zero_weights() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 32, 32], Dtype::Real));
        let w = g.constant(Tensor::zeros(&[8, 3, 3, 3], Dtype::Real));
        let b = g.constant(Tensor::zeros(&[8], Dtype::Real));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape, vec![8, 16, 16]);
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_check_rejects_overflow() {
        let mut g = Graph::new();
        let x = g.constant(real(&[1], &[0.0]));
        // 1/0 -> inf must be rejected by the post-op finite check.
        assert!(matches!(g.recip(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(real(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(real(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = crate::rng::RngStream::derive(77, "assoc");
        for _ in 0..20 {
            let mk = |rng: &mut crate::rng::RngStream, r: usize, c: usize| {
                Tensor::from_complex(&[r, c], (0..2 * r * c).map(|_| rng.normal()).collect())
            };
            let a = mk(&mut rng, 3, 4);
            let b = mk(&mut rng, 4, 2);
            let c = mk(&mut rng, 2, 5);
            let mut g = Graph::new();
            let (av, bv, cv) = (g.constant(a), g.constant(b), g.constant(c));
            let ab = g.matmul(av, bv).unwrap();
            let ab_c = g.matmul(ab, cv).unwrap();
            let bc = g.matmul(bv, cv).unwrap();
            let a_bc = g.matmul(av, bc).unwrap();
            for (x, y) in g.value(ab_c).data.iter().zip(&g.value(a_bc).data) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mean_axes_spatial_pooling() {
        let mut g = Graph::new();
        // [2, 2, 2]: channel 0 all 3.0, channel 1 all -1.0.
        let x = g.constant(real(&[2, 2, 2], &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]));
        let m = g.mean_axes(x, &[1, 2]).unwrap();
        assert_eq!(g.value(m).shape, vec![2]);
        assert_eq!(g.value(m).data, vec![3.0, -1.0]);
    }
}
