//! Differentiable tensor operations.
//!
//! Broadcasting is restricted to scalar-versus-tensor: binary elementwise
//! ops require identical shapes unless one operand has a single element.
//! Reductions use fixed left-to-right summation, so identical inputs give
//! bit-identical outputs across runs.

use super::{BackwardFn, Result, Tensor, TensorError};

fn same_or_scalar(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
    lhs_n: usize,
    rhs_n: usize,
) -> Result<()> {
    if lhs == rhs || lhs_n == 1 || rhs_n == 1 {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Reduces a full-size adjoint back to a broadcast operand: sums to one
/// element when the operand was scalar, passes through otherwise.
fn shrink_adjoint(adj: &[f64], operand_len: usize) -> Vec<f64> {
    if operand_len == 1 && adj.len() != 1 {
        vec![adj.iter().fold(0.0, |acc, v| acc + v)]
    } else {
        adj.to_vec()
    }
}

fn broadcast_get(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

impl Tensor {
    fn binary_elementwise(
        &self,
        rhs: &Tensor,
        op: &'static str,
        forward: impl Fn(f64, f64) -> f64,
        backward: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let (ln, rn) = (self.numel(), rhs.numel());
        same_or_scalar(op, &ls, &rs, ln, rn)?;
        let a = self.values();
        let b = rhs.values();
        let n = ln.max(rn);
        let out_shape = if ln >= rn { ls } else { rs };
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(forward(broadcast_get(&a, i), broadcast_get(&b, i)));
        }
        let bf: BackwardFn = Box::new(move |adj, _out| {
            let mut da = vec![0.0; n];
            let mut db = vec![0.0; n];
            for i in 0..n {
                let (ga, gb) = backward(broadcast_get(&a, i), broadcast_get(&b, i), adj[i]);
                da[i] = ga;
                db[i] = gb;
            }
            vec![shrink_adjoint(&da, a.len()), shrink_adjoint(&db, b.len())]
        });
        Tensor::from_op(op, out_shape, data, vec![self.clone(), rhs.clone()], bf)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        for (i, v) in rhs.values().iter().enumerate() {
            if *v == 0.0 {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: format!("division by zero at flat index {i}"),
                });
            }
        }
        self.binary_elementwise(
            rhs,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    fn unary_elementwise(
        &self,
        op: &'static str,
        forward: impl Fn(f64) -> f64,
        // (input, output, adjoint) -> input adjoint
        backward: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.values();
        let data: Vec<f64> = x.iter().map(|&v| forward(v)).collect();
        let bf: BackwardFn = Box::new(move |adj, out| {
            vec![x
                .iter()
                .zip(out)
                .zip(adj)
                .map(|((&xi, &yi), &gi)| backward(xi, yi, gi))
                .collect()]
        });
        Tensor::from_op(op, self.shape(), data, vec![self.clone()], bf)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary_elementwise("neg", |v| -v, |_, _, g| -g)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary_elementwise("exp", f64::exp, |_, y, g| g * y)
    }

    /// Natural log; arguments must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        for (i, v) in self.values().iter().enumerate() {
            if *v <= 0.0 {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("log of non-positive value {v} at flat index {i}"),
                });
            }
        }
        self.unary_elementwise("log", f64::ln, |x, _, g| g / x)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary_elementwise("scale", move |v| c * v, move |_, _, g| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary_elementwise("add_scalar", move |v| v + c, |_, _, g| g)
    }

    /// Elementwise real power; the base must be strictly positive.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        for (i, v) in self.values().iter().enumerate() {
            if *v <= 0.0 {
                return Err(TensorError::Domain {
                    op: "powf",
                    detail: format!("power of non-positive base {v} at flat index {i}"),
                });
            }
        }
        self.unary_elementwise(
            "powf",
            move |v| v.powf(p),
            move |x, y, g| g * p * y / x,
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary_elementwise(
            "relu",
            |v| v.max(0.0),
            |x, _, g| if x > 0.0 { g } else { 0.0 },
        )
    }

    /// Elementwise `max(x, c)`. Gradient passes where `x >= c`.
    pub fn clamp_min(&self, c: f64) -> Result<Tensor> {
        self.unary_elementwise(
            "clamp_min",
            move |v| v.max(c),
            move |x, _, g| if x >= c { g } else { 0.0 },
        )
    }

    /// Sum of all elements, produced as a rank-0 scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let x = self.values();
        let total = x.iter().fold(0.0, |acc, v| acc + v);
        let n = x.len();
        let bf: BackwardFn = Box::new(move |adj, _| vec![vec![adj[0]; n]]);
        Tensor::from_op("sum", vec![], vec![total], vec![self.clone()], bf)
    }

    /// Mean of all elements, produced as a rank-0 scalar.
    pub fn mean(&self) -> Result<Tensor> {
        let x = self.values();
        let n = x.len();
        if n == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let total = x.iter().fold(0.0, |acc, v| acc + v);
        let bf: BackwardFn = Box::new(move |adj, _| vec![vec![adj[0] / n as f64; n]]);
        Tensor::from_op("mean", vec![], vec![total / n as f64], vec![self.clone()], bf)
    }

    fn axis_reduce(&self, op: &'static str, axis: usize, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op, axis, shape });
        }
        let x = self.values();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                for i in 0..inner {
                    data[o * inner + i] += x[(o * axis_len + k) * inner + i];
                }
            }
        }
        let denom = if mean { axis_len as f64 } else { 1.0 };
        if mean {
            for v in data.iter_mut() {
                *v /= denom;
            }
        }
        let n = x.len();
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; n];
            for o in 0..outer {
                for k in 0..axis_len {
                    for i in 0..inner {
                        dx[(o * axis_len + k) * inner + i] = adj[o * inner + i] / denom;
                    }
                }
            }
            vec![dx]
        });
        Tensor::from_op(op, out_shape, data, vec![self.clone()], bf)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.axis_reduce("sum_axis", axis, false)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.axis_reduce("mean_axis", axis, true)
    }

    /// Standard 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.values();
        let b = rhs.values();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                for j in 0..n {
                    data[i * n + j] += aip * b[p * n + j];
                }
            }
        }
        let (ac, bc) = (a.clone(), b.clone());
        let bf: BackwardFn = Box::new(move |adj, _| {
            // dA = adj · Bᵀ, dB = Aᵀ · adj
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let g = adj[i * n + j];
                    for p in 0..k {
                        da[i * k + p] += g * bc[p * n + j];
                        db[p * n + j] += g * ac[i * k + p];
                    }
                }
            }
            vec![da, db]
        });
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            bf,
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.values();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = adj[j * r + i];
                }
            }
            vec![dx]
        });
        Tensor::from_op("transpose", vec![c, r], data, vec![self.clone()], bf)
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Contract(format!(
                "reshape: cannot view shape {:?} as {:?}",
                self.shape(),
                new_shape
            )));
        }
        let bf: BackwardFn = Box::new(move |adj, _| vec![adj.to_vec()]);
        Tensor::from_op(
            "reshape",
            new_shape.to_vec(),
            self.values(),
            vec![self.clone()],
            bf,
        )
    }

    /// Selects rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "slice_rows requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        if start > end || end > r {
            return Err(TensorError::Contract(format!(
                "slice_rows: range {start}..{end} out of bounds for {r} rows"
            )));
        }
        let x = self.values();
        let data = x[start * c..end * c].to_vec();
        let total = r * c;
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; total];
            dx[start * c..end * c].copy_from_slice(adj);
            vec![dx]
        });
        Tensor::from_op(
            "slice_rows",
            vec![end - start, c],
            data,
            vec![self.clone()],
            bf,
        )
    }

    /// Normalizes each row of a 2-D tensor to unit Euclidean norm. Rows
    /// with norm below `epsilon` pass through unchanged and are reported
    /// in the returned index list.
    pub fn l2_normalize_rows_flagged(&self, epsilon: f64) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "l2_normalize_rows requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.values();
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        let mut degenerate = Vec::new();
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let norm = row.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
            norms[i] = norm;
            if norm < epsilon {
                degenerate.push(i);
                data[i * c..(i + 1) * c].copy_from_slice(row);
            } else {
                for j in 0..c {
                    data[i * c + j] = row[j] / norm;
                }
            }
        }
        let degenerate_bf = degenerate.clone();
        let bf: BackwardFn = Box::new(move |adj, out| {
            // y = x/‖x‖ ⇒ dx = (v − y(y·v))/‖x‖ per row; passthrough rows
            // propagate the adjoint unchanged.
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let v = &adj[i * c..(i + 1) * c];
                if degenerate_bf.contains(&i) {
                    dx[i * c..(i + 1) * c].copy_from_slice(v);
                    continue;
                }
                let y = &out[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(v).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = (v[j] - y[j] * dot) / norms[i];
                }
            }
            vec![dx]
        });
        let out = Tensor::from_op("l2_normalize_rows", vec![r, c], data, vec![self.clone()], bf)?;
        Ok((out, degenerate))
    }

    /// Row normalization without the degenerate-row report.
    pub fn l2_normalize_rows(&self, epsilon: f64) -> Result<Tensor> {
        Ok(self.l2_normalize_rows_flagged(epsilon)?.0)
    }

    /// Row-wise softmax of a 2-D tensor, computed with max subtraction.
    pub fn row_softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "row_softmax requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.values();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        let bf: BackwardFn = Box::new(move |adj, out| {
            // dx = p ⊙ (v − Σ v·p) per row
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let p = &out[i * c..(i + 1) * c];
                let v = &adj[i * c..(i + 1) * c];
                let dot: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = p[j] * (v[j] - dot);
                }
            }
            vec![dx]
        });
        Tensor::from_op("row_softmax", vec![r, c], data, vec![self.clone()], bf)
    }

    /// Row-wise log-softmax of a 2-D tensor, computed with max subtraction.
    pub fn row_log_softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "row_log_softmax requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.values();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max
                + row
                    .iter()
                    .fold(0.0, |acc, &v| acc + (v - max).exp())
                    .ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let bf: BackwardFn = Box::new(move |adj, out| {
            // dx = v − softmax(x) · (Σ v) per row, with softmax = exp(out)
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let y = &out[i * c..(i + 1) * c];
                let v = &adj[i * c..(i + 1) * c];
                let vsum: f64 = v.iter().sum();
                for j in 0..c {
                    dx[i * c + j] = v[j] - y[j].exp() * vsum;
                }
            }
            vec![dx]
        });
        Tensor::from_op("row_log_softmax", vec![r, c], data, vec![self.clone()], bf)
    }

    /// Matrix of squared Euclidean distances between the rows of two 2-D
    /// tensors: `out[i,j] = ‖self[i] − other[j]‖²`.
    pub fn pairwise_sq_dists(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sq_dists",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, n, d) = (ls[0], rs[0], ls[1]);
        let a = self.values();
        let b = other.values();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = a[i * d + k] - b[j * d + k];
                    s += diff * diff;
                }
                data[i * n + j] = s;
            }
        }
        let (ac, bc) = (a.clone(), b.clone());
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut da = vec![0.0; m * d];
            let mut db = vec![0.0; n * d];
            for i in 0..m {
                for j in 0..n {
                    let g = 2.0 * adj[i * n + j];
                    for k in 0..d {
                        let diff = ac[i * d + k] - bc[j * d + k];
                        da[i * d + k] += g * diff;
                        db[j * d + k] -= g * diff;
                    }
                }
            }
            vec![da, db]
        });
        Tensor::from_op(
            "pairwise_sq_dists",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            bf,
        )
    }

    /// Returns a constant copy of this tensor: identical values, no graph
    /// history, zero adjoint flow to the source.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::leaf(self.shape(), self.values(), false)
    }

    /// Identity in the forward pass; multiplies the adjoint by `factor`
    /// in the reverse pass. Used as a gradient probe.
    pub fn scale_gradient(&self, factor: f64) -> Result<Tensor> {
        let bf: BackwardFn = Box::new(move |adj, _| {
            vec![adj.iter().map(|g| g * factor).collect()]
        });
        Tensor::from_op(
            "scale_gradient",
            self.shape(),
            self.values(),
            vec![self.clone()],
            bf,
        )
    }

    /// Per-row argmax of a 2-D tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "argmax_rows requires a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.values();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}
