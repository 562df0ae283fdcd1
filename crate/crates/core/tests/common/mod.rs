//! Brute-force reference implementations for the integration tests. Nothing
//! here calls into the library's numeric code.

#![allow(dead_code)]

use std::io::Write;
use std::time::Instant;

pub type M3 = [[f64; 3]; 3];

pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

pub fn mse(a: &[u8], b: &[u8]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        sum += d * d;
    }
    sum / a.len() as f64
}

/// `None` for identical inputs.
pub fn psnr(a: &[u8], b: &[u8]) -> Option<f64> {
    let m = mse(a, b);
    if m == 0.0 {
        None
    } else {
        Some(10.0 * (255.0 * 255.0 / m).log10())
    }
}

pub fn luma(rgb: &[u8]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rgb.len() {
        out.push(0.299 * rgb[i] as f64 + 0.587 * rgb[i + 1] as f64 + 0.114 * rgb[i + 2] as f64);
        i += 3;
    }
    out
}

/// Row-major 11×11 Gaussian weights (σ = 1.5), evaluated and normalized directly.
pub fn gaussian_window() -> Vec<f64> {
    let raw: Vec<f64> = (0..121)
        .map(|i| {
            let (y, x) = ((i / 11) as f64 - 5.0, (i % 11) as f64 - 5.0);
            (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Mean SSIM over every fully contained 11×11 window.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let window = gaussian_window();
    let mut sum = 0.0;
    let mut count = 0;
    for top in 0..=(h - 11) {
        for left in 0..=(w - 11) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let i = (top + dy) * w + left + dx;
                    let k = window[dy * 11 + dx];
                    ma += k * a[i];
                    mb += k * b[i];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let i = (top + dy) * w + left + dx;
                    let k = window[dy * 11 + dx];
                    va += k * (a[i] - ma) * (a[i] - ma);
                    vb += k * (b[i] - mb) * (b[i] - mb);
                    cov += k * (a[i] - ma) * (b[i] - mb);
                }
            }
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn matmul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn matvec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += a[i][k] * v[k];
        }
    }
    out
}

pub fn transpose(a: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// `R_z(roll) · R_x(pitch) · R_y(yaw)`.
pub fn euler(yaw: f64, pitch: f64, roll: f64) -> M3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    matmul(&matmul(&rz, &rx), &ry)
}

pub fn compose(canonical: &[[f64; 3]], r: &M3, t: [f64; 3], expression: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for i in 0..canonical.len() {
        let p = matvec(r, canonical[i]);
        out.push([
            p[0] + t[0] + expression[i][0],
            p[1] + t[1] + expression[i][1],
            p[2] + t[2] + expression[i][2],
        ]);
    }
    out
}

pub fn lin(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `k_s + J (p − k_d)` at every voxel center, indexed `[d][h][w]`.
pub fn flow(k_s: [f64; 3], k_d: [f64; 3], j: &M3, dims: [usize; 3]) -> Vec<Vec<Vec<[f64; 3]>>> {
    let [dd, hh, ww] = dims;
    let mut out = vec![vec![vec![[0.0; 3]; ww]; hh]; dd];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let p = [lin(w, ww), lin(h, hh), lin(d, dd)];
                let rel = [p[0] - k_d[0], p[1] - k_d[1], p[2] - k_d[2]];
                let moved = matvec(j, rel);
                out[d][h][w] = [k_s[0] + moved[0], k_s[1] + moved[1], k_s[2] + moved[2]];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        worst = worst.max((a[i] - b[i]).abs());
    }
    worst
}

/// One summary line per criterion, written past the test harness's output
/// capture so it always shows up in the log.
pub fn report(id: u8, name: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "[{}] criterion {id}: {name}: {detail} ({:.1} s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}
