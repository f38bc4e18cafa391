//! Raw f32 kernels behind the tape ops. Layouts are row-major NCHW.

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a strided window, or `None` if the window does not fit.
pub fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let max_a = (m as isize - 1) * rsa + (k as isize - 1).max(0) * csa;
    let max_b = (k as isize - 1).max(0) * rsb + (n as isize - 1) * csb;
    assert!(k == 0 || ((max_a as usize) < a.len() && (max_b as usize) < b.len()));
    // SAFETY: strides and extents were bounds-checked above; `c` is a
    // distinct exclusive borrow of at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im_add(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &col[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], n: usize, weight: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;
    let mut out = vec![0.0f32; n * out_sz];
    let mut col = vec![0.0f32; k * p];
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut col);
        let o = &mut out[s * out_sz..(s + 1) * out_sz];
        for (co, row) in o.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.cout, k, p, weight, k as isize, 1, &col, p as isize, 1, 1.0, o);
    }
    out
}

/// Returns `(dx, dw, db)`, each computed only when requested.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    weight: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;
    let mut dx = want_dx.then(|| vec![0.0f32; n * in_sz]);
    let mut dw = want_dw.then(|| vec![0.0f32; g.cout * k]);
    let db = want_db.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for s in 0..n {
            for (co, row) in dout[s * out_sz..(s + 1) * out_sz].chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f32>();
            }
        }
        db
    });
    let mut col = vec![0.0f32; k * p];
    for s in 0..n {
        let d = &dout[s * out_sz..(s + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut col);
            // dw[cout,k] += d[cout,p] * col^T[p,k]
            gemm(g.cout, p, k, d, p as isize, 1, &col, 1, p as isize, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[k,p] = w^T[k,cout] * d[cout,p]
            gemm(k, g.cout, p, weight, 1, k as isize, d, p as isize, 1, 0.0, &mut col);
            col2im_add(&col, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Returns the pooled values and the flat input index chosen for each output.
pub fn max_pool_forward(x: &[f32], n: usize, g: &PoolGeom) -> (Vec<f32>, Vec<u32>) {
    let planes = n * g.c;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let i = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        // first maximum wins
                        if x[i] > best || x[i].is_nan() {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(x: &[f32], n: usize, g: &PoolGeom) -> Vec<f32> {
    let planes = n * g.c;
    let inv = 1.0 / (g.k * g.k) as f32;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = 0.0f32;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    acc += x[row..row + g.k].iter().sum::<f32>();
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(dout: &[f32], n: usize, g: &PoolGeom) -> Vec<f32> {
    let planes = n * g.c;
    let inv = 1.0 / (g.k * g.k) as f32;
    let mut dx = vec![0.0f32; planes * g.h * g.w];
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = dout[(pl * g.ho + oy) * g.wo + ox] * inv;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut dx[row..row + g.k] {
                        *v += d;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over (N, H, W), accumulated in f64.
pub fn channel_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s += x[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut sq = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            sq += x[off..off + hw]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    (mean, var)
}

/// Numerically stable softmax of each row, in f64.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&z| (z as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// Row-wise log-softmax, in f64.
pub fn log_softmax_rows(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|&z| z as f64 - lse));
    }
    out
}
