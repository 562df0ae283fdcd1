//! 2-D and 3-D convolution through im2col and a single GEMM per batch item.
//! A 2-D convolution is a 3-D one with unit depth.

use super::{Real, Tensor, Var};

/// Stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new3(stride: usize, pad: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn new2(stride: usize, pad: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// 1x1x1 kernels with unit stride and no padding read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.pad == [0, 0, 0]
    }

    /// For kernel tap `k` on axis `axis`, the output range whose input index
    /// is in bounds, and the input index of the first such output.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n_in, n_out) = (self.input[axis] as isize, self.output[axis] as isize);
        let (s, p) = (self.spec.stride[axis] as isize, self.spec.pad[axis] as isize);
        let k = k as isize;
        // o*s - p + k in [0, n_in)
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = ((n_in - 1 + p - k).div_euclid(s) + 1).clamp(0, n_out);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let l = g.out_len();
    col.fill(T::zero());
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (d_lo, d_hi) = g.valid_range(0, a);
            for b in 0..kh {
                let (h_lo, h_hi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (w_lo, w_hi) = g.valid_range(2, e);
                    let dst = &mut col[row * l..(row + 1) * l];
                    for z in d_lo..d_hi {
                        let zi = z * sd + a - pd;
                        for y in h_lo..h_hi {
                            let yi = y * sh + b - ph;
                            let src = &plane[(zi * ih + yi) * iw..];
                            let out_row = &mut dst[(z * oh + y) * ow..];
                            if sw == 1 {
                                let xi0 = w_lo + e - pw;
                                out_row[w_lo..w_hi]
                                    .copy_from_slice(&src[xi0..xi0 + (w_hi - w_lo)]);
                            } else {
                                for xo in w_lo..w_hi {
                                    out_row[xo] = src[xo * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let l = g.out_len();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (d_lo, d_hi) = g.valid_range(0, a);
            for b in 0..kh {
                let (h_lo, h_hi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (w_lo, w_hi) = g.valid_range(2, e);
                    let src = &col[row * l..(row + 1) * l];
                    for z in d_lo..d_hi {
                        let zi = z * sd + a - pd;
                        for y in h_lo..h_hi {
                            let yi = y * sh + b - ph;
                            let base = (zi * ih + yi) * iw;
                            let in_row = &src[(z * oh + y) * ow..];
                            for xo in w_lo..w_hi {
                                plane[base + xo * sw + e - pw] += in_row[xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "kernel {k} larger than padded input {n}+2*{p}");
    (n + 2 * p - k) / s + 1
}

impl<T: Real> Var<T> {
    /// 3-D convolution of `(n, cin, d, h, w)` with weights `(cout, cin, kd, kh, kw)`
    /// and an optional bias `(cout)`.
    pub fn conv3d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: ConvSpec) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be (n, c, d, h, w), got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?}, weight {ws:?}");
        let (n, cout) = (xs[0], ws[0]);
        let input = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let output = [0, 1, 2].map(|i| out_size(input[i], kernel[i], spec.stride[i], spec.pad[i]));
        let g = Geometry {
            cin: xs[1],
            input,
            kernel,
            output,
            spec,
        };
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv3d bias shape");
        }
        let (rows, l, in_len) = (g.col_rows(), g.out_len(), g.in_len());

        let x = self.value().clone();
        let w = weight.value().clone();
        let mut out = vec![T::zero(); n * cout * l];
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
        for i in 0..n {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut col);
                &col
            };
            let dst = &mut out[i * cout * l..(i + 1) * cout * l];
            if let Some(b) = bias {
                for (c, &bv) in b.value().data().iter().enumerate() {
                    dst[c * l..(c + 1) * l].fill(bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(false, false, cout, l, rows, T::one(), w.data(), cols, beta, dst);
        }
        let out_shape = [n, cout, output[0], output[1], output[2]];

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(Tensor::from_vec(&out_shape, out), parents, move |gout, need| {
            let gd = gout.data();
            let mut gx = need[0].then(|| vec![T::zero(); n * in_len]);
            let mut gw = need[1].then(|| vec![T::zero(); cout * rows]);
            let gb = need.get(2).copied().unwrap_or(false).then(|| {
                let mut gb = vec![T::zero(); cout];
                for i in 0..n {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[(i * cout + c) * l..(i * cout + c + 1) * l].iter().copied().sum();
                    }
                }
                Tensor::from_vec(&[cout], gb)
            });
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
            let mut dcol = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * l }];
            for i in 0..n {
                let go = &gd[i * cout * l..(i + 1) * cout * l];
                if let Some(gw) = gw.as_mut() {
                    let xi = &x.data()[i * in_len..(i + 1) * in_len];
                    let cols: &[T] = if g.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &g, &mut col);
                        &col
                    };
                    T::gemm(false, true, cout, rows, l, T::one(), go, cols, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * in_len..(i + 1) * in_len];
                    if g.is_pointwise() {
                        T::gemm(true, false, rows, l, cout, T::one(), w.data(), go, T::zero(), dst);
                    } else {
                        T::gemm(true, false, rows, l, cout, T::one(), w.data(), go, T::zero(), &mut dcol);
                        col2im(&dcol, &g, dst);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::from_vec(&xs, v)),
                gw.map(|v| Tensor::from_vec(&ws, v)),
            ];
            if need.len() > 2 {
                grads.push(gb);
            }
            grads
        })
    }

    /// 2-D convolution of `(n, cin, h, w)` with weights `(cout, cin, kh, kw)`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (n, c, h, w), got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D, got {ws:?}");
        let x5 = self.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]]);
        let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = x5.conv3d(&w5, bias, ConvSpec::new2(stride, pad));
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution loop, independent of im2col.
    fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let out: Vec<usize> = (0..3)
            .map(|i| (xs[2 + i] + 2 * spec.pad[i] - ws[2 + i]) / spec.stride[i] + 1)
            .collect();
        let shape = [xs[0], ws[0], out[0], out[1], out[2]];
        let mut y = Tensor::<f64>::zeros(&shape);
        let yd = y.data_mut();
        let mut idx = 0;
        for n in 0..xs[0] {
            for co in 0..ws[0] {
                for z in 0..out[0] {
                    for r in 0..out[1] {
                        for c in 0..out[2] {
                            let mut acc = b[co];
                            for ci in 0..xs[1] {
                                for a in 0..ws[2] {
                                    for bb in 0..ws[3] {
                                        for e in 0..ws[4] {
                                            let zi = (z * spec.stride[0] + a) as isize - spec.pad[0] as isize;
                                            let yi = (r * spec.stride[1] + bb) as isize - spec.pad[1] as isize;
                                            let xi = (c * spec.stride[2] + e) as isize - spec.pad[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 {
                                                continue;
                                            }
                                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                            if zi >= xs[2] || yi >= xs[3] || xi >= xs[4] {
                                                continue;
                                            }
                                            acc += x.at(&[n, ci, zi, yi, xi]) * w.at(&[co, ci, a, bb, e]);
                                        }
                                    }
                                }
                            }
                            yd[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        for (spec, k) in [
            (ConvSpec::new3(1, 1), 3),
            (ConvSpec::new3(2, 1), 3),
            (ConvSpec::new3(1, 0), 1),
            (ConvSpec::new2(2, 1), 3),
        ] {
            let kd = if spec.pad[0] == 0 && spec.stride[0] == 1 && k == 3 { 1 } else { k };
            let x = pseudo(&[2, 3, 5, 6, 7], 1);
            let w = pseudo(&[4, 3, kd, k, k], 2);
            let b = [0.1, -0.2, 0.3, 0.0];
            let got = Var::constant(x.clone()).conv3d(
                &Var::constant(w.clone()),
                Some(&Var::constant(Tensor::from_f64(&[4], &b))),
                spec,
            );
            let want = naive_conv3d(&x, &w, &b, spec);
            assert_eq!(got.shape(), want.shape());
            assert!(got.value().max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_backward_matches_adjoint_identity() {
        // <conv(x), g> must equal <x, dx> + <w, dw> contributions separately.
        let x = pseudo(&[1, 2, 4, 5, 5], 3);
        let w = pseudo(&[3, 2, 3, 3, 3], 4);
        let g = pseudo(&[1, 3, 2, 3, 3], 5);
        let xv = Var::leaf(x.clone());
        let wv = Var::leaf(w.clone());
        let y = xv.conv3d(&wv, None, ConvSpec::new3(2, 1));
        assert_eq!(y.shape(), g.shape());
        let grads = y.backward_with(g.clone());
        let inner: f64 = y.value().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = grads.get(&xv).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = grads.get(&wv).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        // Convolution is bilinear, so both pairings recover the same scalar.
        assert!((inner - via_x).abs() < 1e-10);
        assert!((inner - via_w).abs() < 1e-10);
    }
}
