//! Differentiable elementwise, reduction, shape and linear-algebra ops.

use super::{numel, strides_of, Real, Tensor, Var};

/// NumPy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `src` (broadcastable to `out`) while iterating `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every element of `out_shape` with the matching offsets into two
/// broadcast operands: `f(out_index, offset_a, offset_b)`.
fn broadcast_for_each(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    if numel(out_shape) == 0 {
        return;
    }
    let inner = out_shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(&out_shape[..nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob, mut i) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(i, oa + j * ia, ob + j * ib);
            i += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let strides = broadcast_strides(shape, grad.shape());
    let zeros = vec![0; grad.ndim()];
    let g = grad.data();
    broadcast_for_each(grad.shape(), &strides, &zeros, |i, o, _| out[o] += g[i]);
    Tensor::from_vec(shape, out)
}

fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape())
    });
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![T::zero(); numel(&shape)];
    broadcast_for_each(&shape, &sa, &sb, |i, oa, ob| out[i] = f(da[oa], db[ob]));
    Tensor::from_vec(&shape, out)
}

/// Permutes the axes of a tensor.
pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, dims: &[usize]) -> Tensor<T> {
    assert_eq!(dims.len(), x.ndim(), "permute rank mismatch");
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = dims.iter().map(|&d| x.shape()[d]).collect();
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let zeros = vec![0; dims.len()];
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    broadcast_for_each(&out_shape, &src_strides, &zeros, |i, o, _| out[i] = src[o]);
    Tensor::from_vec(&out_shape, out)
}

fn inverse_permutation(dims: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; dims.len()];
    for (i, &d) in dims.iter().enumerate() {
        inv[d] = i;
    }
    inv
}

/// (outer, axis, inner) decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn unary<T: Real>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    // derivative from (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let xv = x.value().clone();
    let y = xv.map(f);
    let yv = y.clone();
    Var::from_op(y, vec![x.clone()], move |g, _| {
        let d = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data().iter()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), d))]
    })
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let y = broadcast_binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(y, vec![self.clone(), other.clone()], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let y = broadcast_binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(y, vec![self.clone(), other.clone()], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| sum_to_shape(g, &sb).map(|v| -v)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let y = broadcast_binary(&a, &b, |a, b| a * b);
        Var::from_op(y, vec![self.clone(), other.clone()], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(&broadcast_binary(g, &b, |g, b| g * b), a.shape())),
                need[1].then(|| sum_to_shape(&broadcast_binary(g, &a, |g, a| g * a), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let y = broadcast_binary(&a, &b, |a, b| a / b);
        let yv = y.clone();
        Var::from_op(y, vec![self.clone(), other.clone()], move |g, need| {
            let ga = need[0].then(|| sum_to_shape(&broadcast_binary(g, &b, |g, b| g / b), a.shape()));
            let gb = need[1].then(|| {
                // d(a/b)/db = -y / b
                let gy = g.zip_map(&yv, |g, y| -g * y);
                sum_to_shape(&broadcast_binary(&gy, &b, |v, b| v / b), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, s: T) -> Var<T> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        unary(self, move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Var<T> {
        unary(
            self,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Var<T> {
        unary(self, |x| x.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn square(&self) -> Var<T> {
        let two = T::one() + T::one();
        unary(self, |x| x * x, move |x, _| two * x)
    }

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let y = Tensor::scalar(self.value().sum());
        Var::from_op(y, vec![self.clone()], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().len()).expect("element count fits");
        self.sum().scale(T::one() / n)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let old = self.shape().to_vec();
        Var::from_op(self.value().reshape(shape), vec![self.clone()], move |g, _| {
            vec![Some(g.reshape(&old))]
        })
    }

    pub fn permute(&self, dims: &[usize]) -> Var<T> {
        let inv = inverse_permutation(dims);
        Var::from_op(permute_tensor(self.value(), dims), vec![self.clone()], move |g, _| {
            vec![Some(permute_tensor(g, &inv))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        let old = self.shape().to_vec();
        let target = broadcast_shape(&old, shape)
            .filter(|s| s.as_slice() == shape)
            .unwrap_or_else(|| panic!("cannot broadcast {old:?} to {shape:?}"));
        let zeros = Tensor::zeros(&target);
        let y = broadcast_binary(self.value(), &zeros, |a, _| a);
        Var::from_op(y, vec![self.clone()], move |g, _| vec![Some(sum_to_shape(g, &old))])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); numel(&shape)];
            let gd = g.data();
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn cat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.shape().len(), first.len(), "cat rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "cat shape mismatch on axis {i}");
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op(Tensor::from_vec(&out_shape, out), parts.to_vec(), move |g, need| {
            let gd = g.data();
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            for o in 0..outer {
                let mut base = o * total * inner;
                for (k, &l) in lens.iter().enumerate() {
                    if need[k] {
                        grads[k].extend_from_slice(&gd[base..base + l * inner]);
                    }
                    base += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((d, s), &n)| n.then(|| Tensor::from_vec(s, d)))
                .collect()
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        let mut maxes = vec![T::zero(); inner];
        let mut sums = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * len * inner;
            maxes.fill(T::neg_infinity());
            sums.fill(T::zero());
            for a in 0..len {
                for (m, &v) in maxes.iter_mut().zip(&x[base + a * inner..base + (a + 1) * inner]) {
                    *m = m.max(v);
                }
            }
            for a in 0..len {
                let off = base + a * inner;
                for i in 0..inner {
                    let e = (x[off + i] - maxes[i]).exp();
                    y[off + i] = e;
                    sums[i] += e;
                }
            }
            for a in 0..len {
                let off = base + a * inner;
                for i in 0..inner {
                    y[off + i] /= sums[i];
                }
            }
        }
        let y = Tensor::from_vec(&shape, y);
        let yv = y.clone();
        Var::from_op(y, vec![self.clone()], move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut gx = vec![T::zero(); gd.len()];
            let mut dots = vec![T::zero(); inner];
            for o in 0..outer {
                let base = o * len * inner;
                dots.fill(T::zero());
                for a in 0..len {
                    let off = base + a * inner;
                    for i in 0..inner {
                        dots[i] += gd[off + i] * yd[off + i];
                    }
                }
                for a in 0..len {
                    let off = base + a * inner;
                    for i in 0..inner {
                        gx[off + i] = yd[off + i] * (gd[off + i] - dots[i]);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    /// 2-D matrix product `(m, k) x (k, n)`.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2-D");
        let a3 = self.reshape(&[1, self.shape()[0], self.shape()[1]]);
        let b3 = other.reshape(&[1, other.shape()[0], other.shape()[1]]);
        let c = a3.bmm(&b3);
        let (m, n) = (c.shape()[1], c.shape()[2]);
        c.reshape(&[m, n])
    }

    /// Batched matrix product `(b, m, k) x (b, k, n)`.
    pub fn bmm(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm needs 3-D operands");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner dimension mismatch");
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (self.value().clone(), other.value().clone());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                false,
                false,
                m,
                n,
                k,
                T::one(),
                &a.data()[i * m * k..],
                &b.data()[i * k * n..],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Var::from_op(
            Tensor::from_vec(&[batch, m, n], out),
            vec![self.clone(), other.clone()],
            move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            false,
                            true,
                            m,
                            k,
                            n,
                            T::one(),
                            &gd[i * m * n..],
                            &b.data()[i * k * n..],
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::from_vec(&[batch, m, k], ga)
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            true,
                            false,
                            k,
                            n,
                            m,
                            T::one(),
                            &a.data()[i * m * k..],
                            &gd[i * m * n..],
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::from_vec(&[batch, k, n], gb)
                });
                vec![ga, gb]
            },
        )
    }

    /// 2x2 average pooling with stride 2 on `(n, c, h, w)`; odd edges are dropped.
    pub fn avg_pool2x2(&self) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "avg_pool2x2 expects (n, c, h, w)");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value().data();
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    out[(p * oh + i) * ow + j] =
                        (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]) * quarter;
                }
            }
        }
        Var::from_op(
            Tensor::from_vec(&[s[0], s[1], oh, ow], out),
            vec![self.clone()],
            move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = gd[(p * oh + i) * ow + j] * quarter;
                            let r0 = p * h * w + 2 * i * w + 2 * j;
                            gx[r0] += v;
                            gx[r0 + 1] += v;
                            gx[r0 + w] += v;
                            gx[r0 + w + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&s, gx))]
            },
        )
    }

    /// Nearest-neighbour x2 upsampling on `(n, c, h, w)`.
    pub fn upsample_nearest2x(&self) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample_nearest2x expects (n, c, h, w)");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.value().data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = x[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        Var::from_op(
            Tensor::from_vec(&[s[0], s[1], oh, ow], out),
            vec![self.clone()],
            move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(p * h + i / 2) * w + j / 2] += gd[(p * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&s, gx))]
            },
        )
    }

    /// Bilinear resize of `(n, c, h, w)` with aligned corners.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample_bilinear expects (n, c, h, w)");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let taps_h = bilinear_taps::<T>(h, out_h);
        let taps_w = bilinear_taps::<T>(w, out_w);
        let x = self.value().data();
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (i, &(y0, y1, fy)) in taps_h.iter().enumerate() {
                for (j, &(x0, x1, fx)) in taps_w.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(p * out_h + i) * out_w + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Var::from_op(
            Tensor::from_vec(&[s[0], s[1], out_h, out_w], out),
            vec![self.clone()],
            move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1, fy)) in taps_h.iter().enumerate() {
                        for (j, &(x0, x1, fx)) in taps_w.iter().enumerate() {
                            let v = gd[(p * out_h + i) * out_w + j];
                            dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                            dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                            dst[y1 * w + x0] += v * fy * (T::one() - fx);
                            dst[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&s, gx))]
            },
        )
    }
}

/// Source taps `(lo, hi, frac)` for an aligned-corner linear resize.
fn bilinear_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out > 1 && n_in > 1 {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, T::from_f64_lossy(pos - lo as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data)
    }

    #[test]
    fn broadcast_add_and_reduce_back() {
        let a = Var::leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = Var::leaf(t(&[3], &[10., 20., 30.]));
        let y = a.add(&b);
        assert_eq!(y.value().to_f64_vec(), vec![11., 22., 33., 14., 25., 36.]);
        let g = y.sum().backward();
        assert_eq!(g.get(&b).unwrap().to_f64_vec(), vec![2., 2., 2.]);
        assert_eq!(g.get(&a).unwrap().to_f64_vec(), vec![1.; 6]);
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute_tensor(&p, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::constant(t(&[2, 3, 2], &[1., -2., 0.5, 3., 7., 0., 1., 1., 1., 1., 1., 1.]));
        let y = x.softmax(1);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|a| y.value().at(&[o, a, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_matches_naive() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 0., 1., 0., 1., 0., 1.]);
        let b = t(&[2, 3, 1], &[1., 1., 1., 2., 3., 4.]);
        let c = Var::constant(a).bmm(&Var::constant(b));
        assert_eq!(c.value().to_f64_vec(), vec![6., 15., 3., 6.]);
    }

    #[test]
    fn cat_and_narrow_are_inverse() {
        let a = Var::leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = Var::leaf(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = Var::cat(&[a.clone(), b.clone()], 1);
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.narrow(1, 0, 1).value(), a.value());
        assert_eq!(c.narrow(1, 1, 2).value(), b.value());
        let g = c.narrow(1, 1, 2).sum().backward();
        assert_eq!(g.get_or_zeros(&a).sum(), 0.0);
        assert_eq!(g.get(&b).unwrap().sum(), 8.0);
    }

    #[test]
    fn bilinear_upsample_keeps_corners() {
        let x = Var::constant(t(&[1, 1, 2, 2], &[0., 1., 2., 3.]));
        let y = x.upsample_bilinear(3, 3);
        assert_eq!(
            y.value().to_f64_vec(),
            vec![0., 0.5, 1., 1., 1.5, 2., 2., 2.5, 3.]
        );
    }
}
