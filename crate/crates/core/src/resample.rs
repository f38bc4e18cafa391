//! Bilinear resampling with half-pixel centers and edge clamping.
//!
//! Output pixel `(oy, ox)` samples the source at
//! `y' = (oy + 0.5) * H / H' - 0.5` (likewise for x), clamped to the image,
//! and mixes the four neighbours with weights
//! `(1-a)(1-b), a(1-b), (1-a)b, ab` where `a`, `b` are the fractional parts.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f32,
}

fn axis_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            AxisTap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

/// Precomputed taps for a (H, W) -> (H', W') resample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<AxisTap>,
    cols: Vec<AxisTap>,
}

impl ResamplePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if dst.0 == 0 || dst.1 == 0 {
            return Err(Error::contract(format!("resample target {}x{} has zero extent", dst.0, dst.1)));
        }
        if src.0 == 0 || src.1 == 0 {
            return Err(Error::contract(format!("resample source {}x{} has zero extent", src.0, src.1)));
        }
        Ok(ResamplePlan {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        })
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.src
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.dst
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// The four `((row, col), weight)` taps of output pixel `(oy, ox)`, in
    /// the order `(i,j), (i+1,j), (i,j+1), (i+1,j+1)`.
    pub fn taps(&self, oy: usize, ox: usize) -> [((usize, usize), f32); 4] {
        let r = self.rows[oy];
        let c = self.cols[ox];
        let (a, b) = (r.frac, c.frac);
        [
            ((r.lo, c.lo), (1.0 - a) * (1.0 - b)),
            ((r.hi, c.lo), a * (1.0 - b)),
            ((r.lo, c.hi), (1.0 - a) * b),
            ((r.hi, c.hi), a * b),
        ]
    }

    pub(crate) fn apply_plane(&self, src: &[f32], dst: &mut [f32]) {
        let w = self.src.1;
        for (oy, r) in self.rows.iter().enumerate() {
            let top = &src[r.lo * w..(r.lo + 1) * w];
            let bot = &src[r.hi * w..(r.hi + 1) * w];
            let out = &mut dst[oy * self.dst.1..(oy + 1) * self.dst.1];
            for (o, c) in out.iter_mut().zip(&self.cols) {
                let t = lerp(top[c.lo], top[c.hi], c.frac);
                let b = lerp(bot[c.lo], bot[c.hi], c.frac);
                *o = lerp(t, b, r.frac);
            }
        }
    }

    pub(crate) fn transpose_plane(&self, grad_out: &[f32], grad_in: &mut [f32]) {
        let w = self.src.1;
        for oy in 0..self.dst.0 {
            for ox in 0..self.dst.1 {
                let g = grad_out[oy * self.dst.1 + ox];
                for ((y, x), wt) in self.taps(oy, ox) {
                    grad_in[y * w + x] += wt * g;
                }
            }
        }
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn image_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref d => Err(Error::Dimension {
            op,
            axis: "rank",
            expected: 4,
            actual: d.len(),
        }),
    }
}

/// Resamples an `[N, C, H, W]` batch to `[N, C, H', W']`.
pub fn resample(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(image, "resample")?;
    let plan = ResamplePlan::new((h, w), target)?;
    resample_with(image, &plan, n * c)
}

fn resample_with(image: &Tensor, plan: &ResamplePlan, planes: usize) -> Result<Tensor> {
    let dims = image.dims();
    if plan.is_identity() {
        return Ok(image.clone());
    }
    let (h, w) = plan.src;
    let (th, tw) = plan.dst;
    let src = image.values();
    let mut out = vec![0.0f32; planes * th * tw];
    for p in 0..planes {
        plan.apply_plane(&src[p * h * w..(p + 1) * h * w], &mut out[p * th * tw..(p + 1) * th * tw]);
    }
    Tensor::new(vec![dims[0], dims[1], th, tw], out)
}

/// Transpose of the bilinear map: scatters `grad_out` back onto the source grid.
pub fn resample_backward(grad_out: &Tensor, plan: &ResamplePlan) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(grad_out, "resample_backward")?;
    if (h, w) != plan.dst {
        return Err(Error::contract(format!(
            "gradient is {h}x{w} but the plan targets {}x{}",
            plan.dst.0, plan.dst.1
        )));
    }
    if plan.is_identity() {
        return Ok(grad_out.clone());
    }
    let (sh, sw) = plan.src;
    let g = grad_out.values();
    let mut out = vec![0.0f32; n * c * sh * sw];
    for p in 0..n * c {
        plan.transpose_plane(&g[p * h * w..(p + 1) * h * w], &mut out[p * sh * sw..(p + 1) * sh * sw]);
    }
    Tensor::new(vec![n, c, sh, sw], out)
}
