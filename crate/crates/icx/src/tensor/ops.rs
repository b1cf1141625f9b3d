//! Differentiable operations.
//!
//! Backward closures capture owned copies of whatever forward values the
//! gradient needs; they never re-borrow their inputs. Reductions that feed
//! attention (grouped softmax, grouped matmul) take an explicit list of
//! key ranges and always sum group subtotals in list order, which makes the
//! result independent of where those groups sit in the sequence. That is
//! what turns reference-panel permutation equivariance from "up to float
//! noise" into an exact, bitwise property.

use std::ops::Range;

use super::Tensor;

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a + b, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a - b, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a * b, BinaryKind::Mul)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let shape = self.shape();
        let data = self.with_data(|x| x.iter().map(|v| v + s).collect());
        let parent = self.clone();
        Tensor::from_op(&shape, data, vec![self.clone()], move |g| {
            parent.accumulate_grad(g);
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let shape = self.shape();
        let data = self.with_data(|x| x.iter().map(|v| v * s).collect());
        let parent = self.clone();
        Tensor::from_op(&shape, data, vec![self.clone()], move |g| {
            let dg: Vec<f64> = g.iter().map(|v| v * s).collect();
            parent.accumulate_grad(&dg);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        let shape = self.shape();
        let x = self.data();
        let data = x.iter().map(|v| v * v).collect();
        let parent = self.clone();
        Tensor::from_op(&shape, data, vec![self.clone()], move |g| {
            let dg: Vec<f64> = g.iter().zip(&x).map(|(gv, xv)| 2.0 * xv * gv).collect();
            parent.accumulate_grad(&dg);
        })
    }

    /// Matrix product of `[n, k] x [k, m]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner extents {k} vs {k2}");
        let a = self.data();
        let b = other.data();
        let out = mat_mul(&a, n, k, &b, m);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(&[n, m], out, vec![self.clone(), other.clone()], move |g| {
            // da = g . b^T, db = a^T . g
            let bt = transpose_buf(&b, k, m);
            let da = mat_mul(g, n, m, &bt, k);
            pa.accumulate_grad(&da);
            let at = transpose_buf(&a, n, k);
            let db = mat_mul(&at, k, n, g, m);
            pb.accumulate_grad(&db);
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let data = self.with_data(|x| transpose_buf(x, n, m));
        let parent = self.clone();
        Tensor::from_op(&[m, n], data, vec![self.clone()], move |g| {
            parent.accumulate_grad(&transpose_buf(g, m, n));
        })
    }

    /// Stack 2-D tensors with equal column counts, top to bottom.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut rows = 0usize;
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows column mismatch");
            offsets.push(rows);
            rows += p.rows();
            p.with_data(|x| data.extend_from_slice(x));
        }
        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let parents: Vec<Tensor> = handles.clone();
        Tensor::from_op(&[rows, cols], data, parents, move |g| {
            for ((h, &off), &r) in handles.iter().zip(&offsets).zip(&sizes) {
                h.accumulate_grad(&g[off * cols..(off + r) * cols]);
            }
        })
    }

    /// Rows `range` of a 2-D tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Tensor {
        let (n, cols) = (self.rows(), self.cols());
        assert!(range.start < range.end && range.end <= n, "slice_rows {range:?} of {n}");
        let out_rows = range.end - range.start;
        let data = self.with_data(|x| x[range.start * cols..range.end * cols].to_vec());
        let parent = self.clone();
        let start = range.start;
        Tensor::from_op(&[out_rows, cols], data, vec![self.clone()], move |g| {
            let mut dg = vec![0.0; n * cols];
            dg[start * cols..start * cols + g.len()].copy_from_slice(g);
            parent.accumulate_grad(&dg);
        })
    }

    /// Concatenate 2-D tensors with equal row counts, left to right.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut off = 0usize;
        for (p, &w) in parts.iter().zip(&widths) {
            assert_eq!(p.rows(), rows, "concat_cols row mismatch");
            p.with_data(|x| {
                for r in 0..rows {
                    data[r * cols + off..r * cols + off + w].copy_from_slice(&x[r * w..(r + 1) * w]);
                }
            });
            off += w;
        }
        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let parents: Vec<Tensor> = handles.clone();
        Tensor::from_op(&[rows, cols], data, parents, move |g| {
            let mut off = 0usize;
            for (h, &w) in handles.iter().zip(&widths) {
                let mut dg = vec![0.0; rows * w];
                for r in 0..rows {
                    dg[r * w..(r + 1) * w].copy_from_slice(&g[r * cols + off..r * cols + off + w]);
                }
                h.accumulate_grad(&dg);
                off += w;
            }
        })
    }

    /// Columns `range` of a 2-D tensor.
    pub fn slice_cols(&self, range: Range<usize>) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        assert!(range.start < range.end && range.end <= cols, "slice_cols {range:?} of {cols}");
        let w = range.end - range.start;
        let data = self.with_data(|x| {
            let mut out = vec![0.0; rows * w];
            for r in 0..rows {
                out[r * w..(r + 1) * w]
                    .copy_from_slice(&x[r * cols + range.start..r * cols + range.end]);
            }
            out
        });
        let parent = self.clone();
        let start = range.start;
        Tensor::from_op(&[rows, w], data, vec![self.clone()], move |g| {
            let mut dg = vec![0.0; rows * cols];
            for r in 0..rows {
                dg[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            parent.accumulate_grad(&dg);
        })
    }

    /// Gather rows by index; an index may repeat. The backward pass
    /// scatter-adds, which is exactly what embedding tables need.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let (n, cols) = (self.rows(), self.cols());
        assert!(!indices.is_empty(), "select_rows with no indices");
        for &i in indices {
            assert!(i < n, "row index {i} out of {n}");
        }
        let idx = indices.to_vec();
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in &idx {
                out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
            }
            out
        });
        let parent = self.clone();
        Tensor::from_op(&[indices.len(), cols], data, vec![self.clone()], move |g| {
            let mut dg = vec![0.0; n * cols];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    dg[i * cols + c] += g[r * cols + c];
                }
            }
            parent.accumulate_grad(&dg);
        })
    }

    /// Tile the columns of `[n, d]` into `[n, d * times]`.
    pub fn repeat_cols(&self, times: usize) -> Tensor {
        assert!(times > 0);
        let (rows, d) = (self.rows(), self.cols());
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(rows * d * times);
            for r in 0..rows {
                for _ in 0..times {
                    out.extend_from_slice(&x[r * d..(r + 1) * d]);
                }
            }
            out
        });
        let parent = self.clone();
        Tensor::from_op(&[rows, d * times], data, vec![self.clone()], move |g| {
            let mut dg = vec![0.0; rows * d];
            for r in 0..rows {
                for t in 0..times {
                    let src = &g[(r * times + t) * d..(r * times + t + 1) * d];
                    for c in 0..d {
                        dg[r * d + c] += src[c];
                    }
                }
            }
            parent.accumulate_grad(&dg);
        })
    }

    /// Add a `[1, d]` vector to every row of `[n, d]`.
    pub fn add_rowvec(&self, v: &Tensor) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(v.shape(), vec![1, cols], "add_rowvec wants [1, {cols}]");
        let vd = v.data();
        let data = self.with_data(|x| {
            let mut out = x.to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += vd[c];
                }
            }
            out
        });
        let (px, pv) = (self.clone(), v.clone());
        Tensor::from_op(&[rows, cols], data, vec![self.clone(), v.clone()], move |g| {
            px.accumulate_grad(g);
            let mut dv = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    dv[c] += g[r * cols + c];
                }
            }
            pv.accumulate_grad(&dv);
        })
    }

    /// Multiply every row of `[n, d]` by a `[1, d]` vector.
    pub fn mul_rowvec(&self, v: &Tensor) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(v.shape(), vec![1, cols], "mul_rowvec wants [1, {cols}]");
        let vd = v.data();
        let xd = self.data();
        let mut data = xd.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] *= vd[c];
            }
        }
        let (px, pv) = (self.clone(), v.clone());
        Tensor::from_op(&[rows, cols], data, vec![self.clone(), v.clone()], move |g| {
            let mut dx = vec![0.0; rows * cols];
            let mut dv = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] = g[r * cols + c] * vd[c];
                    dv[c] += g[r * cols + c] * xd[r * cols + c];
                }
            }
            px.accumulate_grad(&dx);
            pv.accumulate_grad(&dv);
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.with_data(|x| x.iter().sum::<f64>());
        let n = self.numel();
        let parent = self.clone();
        Tensor::from_op(&[1], vec![total], vec![self.clone()], move |g| {
            parent.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Row-wise softmax over all columns.
    pub fn softmax_rows(&self) -> Tensor {
        let cols = self.cols();
        self.softmax_rows_grouped(&[(0..cols).collect()])
    }

    /// Row-wise softmax where the normalizer is accumulated per group
    /// (columns listed per group, in order), then across groups in list
    /// order. The result is a joint softmax over all columns; only the
    /// floating-point summation tree is pinned. Groups must partition the
    /// columns but need not be contiguous.
    pub fn softmax_rows_grouped(&self, groups: &[Vec<usize>]) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        validate_partition(groups, cols);
        let groups_f: Vec<Vec<usize>> = groups.to_vec();
        let data = self.with_data(|x| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                // max is order-insensitive, so it may run over the raw row
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[r * cols..(r + 1) * cols];
                let mut denom = 0.0;
                for gr in &groups_f {
                    let mut sub = 0.0;
                    for &c in gr {
                        let e = (row[c] - m).exp();
                        o[c] = e;
                        sub += e;
                    }
                    denom += sub;
                }
                for v in o.iter_mut() {
                    *v /= denom;
                }
            }
            out
        });
        let y = data.clone();
        let groups_b: Vec<Vec<usize>> = groups.to_vec();
        let parent = self.clone();
        Tensor::from_op(&[rows, cols], data, vec![self.clone()], move |g| {
            // dx = y * (g - sum(g * y)), with the dot accumulated per group
            // in list order so backward reductions are order-pinned too.
            let mut dg = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr_ = &g[r * cols..(r + 1) * cols];
                let mut dot = 0.0;
                for grp in &groups_b {
                    let mut sub = 0.0;
                    for &c in grp {
                        sub += gr_[c] * yr[c];
                    }
                    dot += sub;
                }
                for c in 0..cols {
                    dg[r * cols + c] = yr[c] * (gr_[c] - dot);
                }
            }
            parent.accumulate_grad(&dg);
        })
    }

    /// `[n, k] x [k, m]` where the contraction over `k` is accumulated per
    /// group (rows of `other` listed per group, in order), then across
    /// groups in list order. Groups must partition the rows of `other` but
    /// need not be contiguous.
    pub fn matmul_grouped(&self, other: &Tensor, groups: &[Vec<usize>]) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_grouped inner extents {k} vs {k2}");
        validate_partition(groups, k);
        let a = self.data();
        let b = other.data();
        let groups_f: Vec<Vec<usize>> = groups.to_vec();
        let mut out = vec![0.0; n * m];
        let mut sub = vec![0.0; m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for gr in &groups_f {
                sub.iter_mut().for_each(|v| *v = 0.0);
                for &kk in gr {
                    let av = a[i * k + kk];
                    let brow = &b[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        sub[j] += av * brow[j];
                    }
                }
                for j in 0..m {
                    orow[j] += sub[j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(&[n, m], out, vec![self.clone(), other.clone()], move |g| {
            // da[i, kk] = g[i, :] . b[kk, :] contracts over the feature axis,
            // which no grouping touches; plain kernels are exact here.
            let bt = transpose_buf(&b, k, m);
            let da = mat_mul(g, n, m, &bt, k);
            pa.accumulate_grad(&da);
            let at = transpose_buf(&a, n, k);
            let db = mat_mul(&at, k, n, g, m);
            pb.accumulate_grad(&db);
        })
    }

    /// Row-wise normalization to zero mean and unit variance (population
    /// variance, epsilon inside the square root). No learned gain or bias;
    /// modulation layers apply those separately.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        let x = self.data();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * is;
            }
        }
        let xhat = out.clone();
        let parent = self.clone();
        Tensor::from_op(&[rows, cols], out, vec![self.clone()], move |g| {
            // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let mut dg = vec![0.0; rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let xr = &xhat[r * cols..(r + 1) * cols];
                let mg = gr.iter().sum::<f64>() / cols as f64;
                let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for c in 0..cols {
                    dg[r * cols + c] = inv_std[r] * (gr[c] - mg - xr[c] * mgx);
                }
            }
            parent.accumulate_grad(&dg);
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
        const A: f64 = 0.044715;
        let shape = self.shape();
        let x = self.data();
        let data: Vec<f64> = x
            .iter()
            .map(|&v| {
                let u = C * (v + A * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let parent = self.clone();
        Tensor::from_op(&shape, data, vec![self.clone()], move |g| {
            let dg: Vec<f64> = g
                .iter()
                .zip(&x)
                .map(|(gv, &v)| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            parent.accumulate_grad(&dg);
        })
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let shape = self.shape();
        let x = self.data();
        let data: Vec<f64> = x.iter().map(|&v| v * sigmoid(v)).collect();
        let parent = self.clone();
        Tensor::from_op(&shape, data, vec![self.clone()], move |g| {
            let dg: Vec<f64> = g
                .iter()
                .zip(&x)
                .map(|(gv, &v)| {
                    let s = sigmoid(v);
                    gv * (s * (1.0 + v * (1.0 - s)))
                })
                .collect();
            parent.accumulate_grad(&dg);
        })
    }

    /// Rotate adjacent column pairs of `[n, d]` by per-position angles given
    /// as flat `[n, d/2]` cosine and sine tables. Pair `(2i, 2i+1)` maps to
    /// `(c*x0 - s*x1, s*x0 + c*x1)`.
    pub fn rotate_pairs(&self, cos: &[f64], sin: &[f64]) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(cols % 2, 0, "rotate_pairs needs an even column count");
        let half = cols / 2;
        assert_eq!(cos.len(), rows * half, "cosine table length");
        assert_eq!(sin.len(), rows * half, "sine table length");
        let cos = cos.to_vec();
        let sin = sin.to_vec();
        let data = self.with_data(|x| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x0 = x[r * cols + 2 * i];
                    let x1 = x[r * cols + 2 * i + 1];
                    out[r * cols + 2 * i] = c * x0 - s * x1;
                    out[r * cols + 2 * i + 1] = s * x0 + c * x1;
                }
            }
            out
        });
        let parent = self.clone();
        Tensor::from_op(&[rows, cols], data, vec![self.clone()], move |g| {
            // The adjoint of a rotation is the inverse rotation.
            let half = cols / 2;
            let mut dg = vec![0.0; rows * cols];
            for r in 0..rows {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let g0 = g[r * cols + 2 * i];
                    let g1 = g[r * cols + 2 * i + 1];
                    dg[r * cols + 2 * i] = c * g0 + s * g1;
                    dg[r * cols + 2 * i + 1] = -s * g0 + c * g1;
                }
            }
            parent.accumulate_grad(&dg);
        })
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary_elementwise(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    kind: BinaryKind,
) -> Tensor {
    let shape = a.shape();
    assert_eq!(shape, b.shape(), "elementwise shape mismatch {:?} vs {:?}", shape, b.shape());
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = ad.iter().zip(&bd).map(|(&x, &y)| f(x, y)).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(&shape, data, vec![a.clone(), b.clone()], move |g| match kind {
        BinaryKind::Add => {
            pa.accumulate_grad(g);
            pb.accumulate_grad(g);
        }
        BinaryKind::Sub => {
            pa.accumulate_grad(g);
            let dg: Vec<f64> = g.iter().map(|v| -v).collect();
            pb.accumulate_grad(&dg);
        }
        BinaryKind::Mul => {
            let da: Vec<f64> = g.iter().zip(&bd).map(|(gv, bv)| gv * bv).collect();
            pa.accumulate_grad(&da);
            let db: Vec<f64> = g.iter().zip(&ad).map(|(gv, av)| gv * av).collect();
            pb.accumulate_grad(&db);
        }
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn validate_partition(groups: &[Vec<usize>], cols: usize) {
    let mut seen = vec![false; cols];
    let mut count = 0usize;
    for gr in groups {
        assert!(!gr.is_empty(), "empty reduction group");
        for &c in gr {
            assert!(c < cols, "group index {c} out of {cols}");
            assert!(!seen[c], "groups must partition the columns, {c} repeats");
            seen[c] = true;
            count += 1;
        }
    }
    assert_eq!(count, cols, "groups must cover all {cols} columns");
}

/// Row-major `[n, k] x [k, m]` with an i-k-j loop: the inner j loop is a
/// pure per-lane update, which the compiler vectorizes.
pub(crate) fn mat_mul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_buf(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
