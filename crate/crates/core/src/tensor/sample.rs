//! Differentiable trilinear sampling of a feature volume at arbitrary points.
//!
//! Coordinates are normalized: `x` spans the width axis, `y` the height axis,
//! `z` the depth axis, and `-1` / `+1` are the centers of the first / last
//! voxel. Points outside the volume are clamped onto its border; the
//! gradient with respect to a clamped coordinate is zero.

use super::{Real, Tensor, Var};

/// Interpolation stencil along one axis.
#[derive(Clone, Copy)]
struct Axis<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// d(continuous index)/d(normalized coordinate); zero when clamped.
    dpos: T,
}

fn axis_stencil<T: Real>(coord: T, n: usize) -> Axis<T> {
    if n == 1 {
        return Axis {
            lo: 0,
            hi: 0,
            frac: T::zero(),
            dpos: T::zero(),
        };
    }
    let half_span = T::from_usize(n - 1).expect("size fits") / (T::one() + T::one());
    let pos = (coord + T::one()) * half_span;
    let max = T::from_usize(n - 1).expect("size fits");
    let (pos, dpos) = if pos <= T::zero() {
        (T::zero(), T::zero())
    } else if pos >= max {
        (max, T::zero())
    } else {
        (pos, half_span)
    };
    let lo = pos.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    Axis {
        lo,
        hi,
        frac: pos - T::from_usize(lo).expect("index fits"),
        dpos,
    }
}

impl<T: Real> Var<T> {
    /// Samples `self = (n, c, d, h, w)` at `points = (n, q, 3)`, giving `(n, c, q)`.
    pub fn trilinear_sample(&self, points: &Var<T>) -> Var<T> {
        let vs = self.shape().to_vec();
        let ps = points.shape().to_vec();
        assert_eq!(vs.len(), 5, "volume must be (n, c, d, h, w), got {vs:?}");
        assert!(ps.len() == 3 && ps[2] == 3, "points must be (n, q, 3), got {ps:?}");
        assert_eq!(vs[0], ps[0], "batch mismatch between volume and points");
        let (n, c, d, h, w, q) = (vs[0], vs[1], vs[2], vs[3], vs[4], ps[1]);
        let plane = d * h * w;

        let stencils: Vec<[Axis<T>; 3]> = points
            .value()
            .data()
            .chunks_exact(3)
            .map(|p| [axis_stencil(p[0], w), axis_stencil(p[1], h), axis_stencil(p[2], d)])
            .collect();

        // Corner offsets and weights, shared by forward and backward passes.
        let corners = move |s: &[Axis<T>; 3]| {
            let [ax, ay, az] = *s;
            let one = T::one();
            let mut out = [(0usize, T::zero()); 8];
            let mut k = 0;
            for (zi, wz) in [(az.lo, one - az.frac), (az.hi, az.frac)] {
                for (yi, wy) in [(ay.lo, one - ay.frac), (ay.hi, ay.frac)] {
                    for (xi, wx) in [(ax.lo, one - ax.frac), (ax.hi, ax.frac)] {
                        out[k] = ((zi * h + yi) * w + xi, wz * wy * wx);
                        k += 1;
                    }
                }
            }
            out
        };

        let vol = self.value().clone();
        let vd = vol.data();
        let mut out = vec![T::zero(); n * c * q];
        for b in 0..n {
            for (j, s) in stencils[b * q..(b + 1) * q].iter().enumerate() {
                let cs = corners(s);
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let mut acc = T::zero();
                    for &(off, wgt) in &cs {
                        acc += vd[base + off] * wgt;
                    }
                    out[(b * c + ch) * q + j] = acc;
                }
            }
        }

        Var::from_op(
            Tensor::from_vec(&[n, c, q], out),
            vec![self.clone(), points.clone()],
            move |g, need| {
                let gd = g.data();
                let vd = vol.data();
                let mut gvol = need[0].then(|| vec![T::zero(); n * c * plane]);
                let mut gpts = need[1].then(|| vec![T::zero(); n * q * 3]);
                for b in 0..n {
                    for (j, s) in stencils[b * q..(b + 1) * q].iter().enumerate() {
                        if let Some(gv) = gvol.as_mut() {
                            let cs = corners(s);
                            for ch in 0..c {
                                let gval = gd[(b * c + ch) * q + j];
                                let base = (b * c + ch) * plane;
                                for &(off, wgt) in &cs {
                                    gv[base + off] += gval * wgt;
                                }
                            }
                        }
                        if let Some(gp) = gpts.as_mut() {
                            let [ax, ay, az] = *s;
                            if ax.dpos == T::zero() && ay.dpos == T::zero() && az.dpos == T::zero() {
                                continue;
                            }
                            let one = T::one();
                            let (fx, fy, fz) = (ax.frac, ay.frac, az.frac);
                            let idx = |zi: usize, yi: usize, xi: usize| (zi * h + yi) * w + xi;
                            let (mut dx, mut dy, mut dz) = (T::zero(), T::zero(), T::zero());
                            for ch in 0..c {
                                let gval = gd[(b * c + ch) * q + j];
                                if gval == T::zero() {
                                    continue;
                                }
                                let v = &vd[(b * c + ch) * plane..];
                                let c000 = v[idx(az.lo, ay.lo, ax.lo)];
                                let c001 = v[idx(az.lo, ay.lo, ax.hi)];
                                let c010 = v[idx(az.lo, ay.hi, ax.lo)];
                                let c011 = v[idx(az.lo, ay.hi, ax.hi)];
                                let c100 = v[idx(az.hi, ay.lo, ax.lo)];
                                let c101 = v[idx(az.hi, ay.lo, ax.hi)];
                                let c110 = v[idx(az.hi, ay.hi, ax.lo)];
                                let c111 = v[idx(az.hi, ay.hi, ax.hi)];
                                let ddx = (one - fz) * ((one - fy) * (c001 - c000) + fy * (c011 - c010))
                                    + fz * ((one - fy) * (c101 - c100) + fy * (c111 - c110));
                                let ddy = (one - fz) * ((one - fx) * (c010 - c000) + fx * (c011 - c001))
                                    + fz * ((one - fx) * (c110 - c100) + fx * (c111 - c101));
                                let ddz = (one - fy) * ((one - fx) * (c100 - c000) + fx * (c101 - c001))
                                    + fy * ((one - fx) * (c110 - c010) + fx * (c111 - c011));
                                dx += gval * ddx;
                                dy += gval * ddy;
                                dz += gval * ddz;
                            }
                            let o = (b * q + j) * 3;
                            gp[o] += dx * ax.dpos;
                            gp[o + 1] += dy * ay.dpos;
                            gp[o + 2] += dz * az.dpos;
                        }
                    }
                }
                vec![
                    gvol.map(|v| Tensor::from_vec(&vs, v)),
                    gpts.map(|v| Tensor::from_vec(&ps, v)),
                ]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord(i: usize, n: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }

    #[test]
    fn samples_voxel_centers_exactly() {
        let (d, h, w) = (3, 4, 5);
        let vol = Tensor::<f64>::from_fn(&[1, 2, d, h, w], |i| (i as f64 * 0.37).sin());
        let mut pts = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    pts.extend([coord(x, w), coord(y, h), coord(z, d)]);
                }
            }
        }
        let p = Tensor::from_vec(&[1, d * h * w, 3], pts);
        let out = Var::constant(vol.clone()).trilinear_sample(&Var::constant(p));
        assert!(out.value().reshape(&[1, 2, d, h, w]).max_abs_diff(&vol) < 1e-12);
    }

    #[test]
    fn clamps_outside_points_to_border() {
        let vol = Tensor::<f64>::from_f64(&[1, 1, 1, 1, 2], &[3.0, 7.0]);
        let p = Tensor::from_f64(&[1, 2, 3], &[-5.0, 0.0, 0.0, 9.0, 2.0, -3.0]);
        let out = Var::constant(vol).trilinear_sample(&Var::constant(p));
        assert_eq!(out.value().to_f64_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn midpoint_is_the_average_of_neighbours() {
        let vol = Tensor::<f64>::from_f64(&[1, 1, 2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let p = Tensor::from_f64(&[1, 1, 3], &[0.0, 0.0, 0.0]);
        let out = Var::constant(vol).trilinear_sample(&Var::constant(p));
        assert!((out.value().item() - 3.5).abs() < 1e-12);
    }
}
