//! Layer-level primitives: convolution, batch normalization, pooling.
//!
//! These are fused operations — each records a single graph node with a
//! hand-written adjoint instead of composing dozens of elementwise nodes,
//! which keeps desk-scale training affordable.

use super::{BackwardFn, Result, Tensor, TensorError};

impl Tensor {
    /// Adds a 1-D bias across the rows of a 2-D tensor: `out[i,j] = self[i,j] + bias[j]`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (ls, bs) = (self.shape(), bias.shape());
        if ls.len() != 2 || bs.len() != 1 || bs[0] != ls[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: ls,
                rhs: bs,
            });
        }
        let (r, c) = (ls[0], ls[1]);
        let x = self.values();
        let b = bias.values();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = x[i * c + j] + b[j];
            }
        }
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut db = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    db[j] += adj[i * c + j];
                }
            }
            vec![adj.to_vec(), db]
        });
        Tensor::from_op(
            "add_row_bias",
            vec![r, c],
            data,
            vec![self.clone(), bias.clone()],
            bf,
        )
    }

    /// 2-D convolution over NCHW input with zero padding.
    ///
    /// `self`: `[N, C_in, H, W]`, `weight`: `[C_out, C_in, KH, KW]`,
    /// optional `bias`: `[C_out]`. Output spatial extents follow the usual
    /// floor rule `(H + 2·padding − KH)/stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be positive".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Contract(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        if let Some(b) = bias {
            if b.shape() != vec![cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: b.shape(),
                });
            }
        }
        let x = self.values();
        let wt = weight.values();
        let bv = bias.map(|b| b.values());
        let mut data = vec![0.0; n * cout * ho * wo];
        for in_ in 0..n {
            for oc in 0..cout {
                let base = bv.as_ref().map_or(0.0, |b| b[oc]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = base;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((in_ * cin + ic) * h + iy as usize) * w
                                        + ix as usize]
                                        * wt[((oc * cin + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[((in_ * cout + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let has_bias = bias.is_some();
        let (xc, wc) = (x.clone(), wt.clone());
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; n * cin * h * w];
            let mut dw = vec![0.0; cout * cin * kh * kw];
            let mut db = vec![0.0; cout];
            for in_ in 0..n {
                for oc in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = adj[((in_ * cout + oc) * ho + oy) * wo + ox];
                            db[oc] += g;
                            for ic in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix =
                                            (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((in_ * cin + ic) * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                        dx[xi] += g * wc[wi];
                                        dw[wi] += g * xc[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(db);
            }
            grads
        });
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op("conv2d", vec![n, cout, ho, wo], data, parents, bf)
    }

    /// Averages each channel's spatial map: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(TensorError::Contract(format!(
                "global_avg_pool requires a 4-D tensor, got shape {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let area = h * w;
        let x = self.values();
        let mut data = vec![0.0; n * c];
        for i in 0..n * c {
            let mut acc = 0.0;
            for s in 0..area {
                acc += x[i * area + s];
            }
            data[i] = acc / area as f64;
        }
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; n * c * area];
            for i in 0..n * c {
                let g = adj[i] / area as f64;
                for s in 0..area {
                    dx[i * area + s] = g;
                }
            }
            vec![dx]
        });
        Tensor::from_op("global_avg_pool", vec![n, c], data, vec![self.clone()], bf)
    }
}

/// Per-channel layout of a batch-norm input: channel axis is axis 1; all
/// remaining axes are reduced. Supports `[N, C]` and `[N, C, H, W]`.
fn bn_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(TensorError::Contract(format!(
            "{op} requires a 2-D or 4-D tensor, got shape {shape:?}"
        )));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial))
}

fn bn_check_params(
    op: &'static str,
    c: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<()> {
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![c],
            rhs: if gamma.shape() != vec![c] {
                gamma.shape()
            } else {
                beta.shape()
            },
        });
    }
    Ok(())
}

impl Tensor {
    /// Batch normalization with batch statistics (training mode).
    ///
    /// Normalizes per channel over batch and spatial axes using the biased
    /// variance, then applies the affine `γ·x̂ + β`. Returns the output
    /// together with the per-channel batch mean and variance so the caller
    /// can fold them into running statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let shape = self.shape();
        let (n, c, spatial) = bn_layout("batch_norm_train", &shape)?;
        bn_check_params("batch_norm_train", c, gamma, beta)?;
        let m = n * spatial;
        if m < 2 {
            return Err(TensorError::Contract(format!(
                "batch_norm_train needs at least 2 elements per channel, got {m}"
            )));
        }
        let x = self.values();
        let g = gamma.values();
        let b = beta.values();
        let idx = move |in_: usize, ch: usize, s: usize| (in_ * c + ch) * spatial + s;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for in_ in 0..n {
                for s in 0..spatial {
                    acc += x[idx(in_, ch, s)];
                }
            }
            mean[ch] = acc / m as f64;
            let mut vacc = 0.0;
            for in_ in 0..n {
                for s in 0..spatial {
                    let d = x[idx(in_, ch, s)] - mean[ch];
                    vacc += d * d;
                }
            }
            var[ch] = vacc / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut data = vec![0.0; x.len()];
        for ch in 0..c {
            for in_ in 0..n {
                for s in 0..spatial {
                    let i = idx(in_, ch, s);
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    data[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let (mean_out, var_out) = (mean, var);
        let gc = g.clone();
        let bf: BackwardFn = Box::new(move |adj, _| {
            // With batch statistics, the mean and variance depend on x:
            // dx = γ/√(σ²+ε) · (v − mean(v) − x̂·mean(v⊙x̂)) per channel.
            let mut dx = vec![0.0; xhat.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_v = 0.0;
                let mut sum_vx = 0.0;
                for in_ in 0..n {
                    for s in 0..spatial {
                        let i = idx(in_, ch, s);
                        sum_v += adj[i];
                        sum_vx += adj[i] * xhat[i];
                    }
                }
                dgamma[ch] = sum_vx;
                dbeta[ch] = sum_v;
                let mv = sum_v / m as f64;
                let mvx = sum_vx / m as f64;
                let k = gc[ch] * inv_std[ch];
                for in_ in 0..n {
                    for s in 0..spatial {
                        let i = idx(in_, ch, s);
                        dx[i] = k * (adj[i] - mv - xhat[i] * mvx);
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        });
        let out = Tensor::from_op(
            "batch_norm_train",
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            bf,
        )?;
        Ok((out, mean_out, var_out))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    ///
    /// `running_mean`/`running_var` are treated as constants; gradients
    /// flow to the input and the affine parameters only.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let shape = self.shape();
        let (n, c, spatial) = bn_layout("batch_norm_eval", &shape)?;
        bn_check_params("batch_norm_eval", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Contract(format!(
                "batch_norm_eval statistics length {} does not match {c} channels",
                running_mean.len().min(running_var.len())
            )));
        }
        let x = self.values();
        let g = gamma.values();
        let b = beta.values();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let idx = move |in_: usize, ch: usize, s: usize| (in_ * c + ch) * spatial + s;
        let mut xhat = vec![0.0; x.len()];
        let mut data = vec![0.0; x.len()];
        for ch in 0..c {
            for in_ in 0..n {
                for s in 0..spatial {
                    let i = idx(in_, ch, s);
                    xhat[i] = (x[i] - running_mean[ch]) * inv_std[ch];
                    data[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let gc = g.clone();
        let bf: BackwardFn = Box::new(move |adj, _| {
            let mut dx = vec![0.0; xhat.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let k = gc[ch] * inv_std[ch];
                for in_ in 0..n {
                    for s in 0..spatial {
                        let i = idx(in_, ch, s);
                        dx[i] = adj[i] * k;
                        dgamma[ch] += adj[i] * xhat[i];
                        dbeta[ch] += adj[i];
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        });
        Tensor::from_op(
            "batch_norm_eval",
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            bf,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn add_row_bias_broadcasts_down_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let y = x.add_row_bias(&b).unwrap();
        assert_eq!(y.values(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        // 1×1 kernel of weight 1, stride 1, no padding.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn conv2d_box_filter_hand_case() {
        // 2×2 all-ones kernel over a 3×3 ramp: each output is the window sum.
        let x = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.values(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_padding_grows_output() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        // Centered delta kernel with padding 1 reproduces the input.
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let x = Tensor::from_vec(
            &[1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), vec![1, 2]);
        assert_eq!(y.values(), vec![2.5, 25.0]);
    }

    #[test]
    fn batch_norm_train_whitens_each_channel() {
        let x = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 50.0]]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let (y, mean, var) = x.batch_norm_train(&gamma, &beta, 1e-5).unwrap();
        assert_eq!(mean, vec![3.0, 30.0]);
        assert!((var[0] - 8.0 / 3.0).abs() < 1e-12);
        let v = y.values();
        for ch in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| v[i * 2 + ch]).collect();
            let m: f64 = col.iter().sum::<f64>() / 3.0;
            let s2: f64 = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-9, "channel {ch} mean {m}");
            assert!((s2 - 1.0).abs() < 1e-4, "channel {ch} var {s2}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_supplied_statistics() {
        let x = Tensor::from_rows(&[vec![4.0], vec![6.0]]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let y = x
            .batch_norm_eval(&gamma, &beta, &[4.0], &[1.0 - 1e-5], 1e-5)
            .unwrap();
        let v = y.values();
        assert!((v[0] - 1.0).abs() < 1e-9); // (4−4)/1·2+1
        assert!((v[1] - 5.0).abs() < 1e-9); // (6−4)/1·2+1
    }
}
