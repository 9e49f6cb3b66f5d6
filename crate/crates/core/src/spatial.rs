//! Fixed sparse spatial operators (convolutions with replicate padding,
//! average pooling) acting channel-wise on `(pixels × channels)` grids.
//!
//! These back both the frozen filter-bank backbone and the multi-scale
//! perceptual extractor; because they are linear, their backward pass is the
//! transposed operator.

use std::sync::Arc;

use crate::autograd::Mat;

/// Sparse `out_pixels × in_pixels` kernel in CSR form.
#[derive(Clone, Debug)]
pub struct SparseKernel {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseKernel {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, w) in row {
                match merged.last_mut() {
                    Some((lc, lw)) if *lc == c => *lw += w,
                    _ => merged.push((c, w)),
                }
            }
            for (c, w) in merged {
                if w != 0.0 {
                    cols.push(c);
                    weights.push(w);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols, weights }
    }

    /// 2-D correlation with a dense `(2r+1)²` stencil and replicate padding.
    pub fn stencil(h: usize, w: usize, radius: usize, taps: &[f64]) -> Self {
        let side = 2 * radius + 1;
        assert_eq!(taps.len(), side * side);
        let r = radius as isize;
        let rows = (0..h * w)
            .map(|pix| {
                let (y, x) = ((pix / w) as isize, (pix % w) as isize);
                let mut row = Vec::with_capacity(side * side);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let t = taps[((dy + r) as usize) * side + (dx + r) as usize];
                        if t == 0.0 {
                            continue;
                        }
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        row.push((yy * w + xx, t));
                    }
                }
                row
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Horizontal (`vertical = false`) or vertical 1-D correlation with
    /// replicate padding; two of these make a separable 2-D stencil.
    pub fn line(h: usize, w: usize, radius: usize, taps: &[f64], vertical: bool) -> Self {
        assert_eq!(taps.len(), 2 * radius + 1);
        let r = radius as isize;
        let rows = (0..h * w)
            .map(|pix| {
                let (y, x) = ((pix / w) as isize, (pix % w) as isize);
                (-r..=r)
                    .map(|d| {
                        let t = taps[(d + r) as usize];
                        let idx = if vertical {
                            (y + d).clamp(0, h as isize - 1) as usize * w + x as usize
                        } else {
                            y as usize * w + (x + d).clamp(0, w as isize - 1) as usize
                        };
                        (idx, t)
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Mean over non-overlapping `factor × factor` blocks.
    pub fn average_pool(h: usize, w: usize, factor: usize) -> Self {
        assert!(h % factor == 0 && w % factor == 0, "pool factor must divide dims");
        let (oh, ow) = (h / factor, w / factor);
        let weight = 1.0 / (factor * factor) as f64;
        let rows = (0..oh * ow)
            .map(|o| {
                let (oy, ox) = (o / ow, o % ow);
                let mut row = Vec::with_capacity(factor * factor);
                for dy in 0..factor {
                    for dx in 0..factor {
                        row.push(((oy * factor + dy) * w + ox * factor + dx, weight));
                    }
                }
                row
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn out_len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Applies the kernel to `n` interleaved channels.
    fn forward(&self, src: &[f64], n: usize) -> Vec<f64> {
        let mut dst = vec![0.0; self.out_len() * n];
        for (p, out) in dst.chunks_exact_mut(n).enumerate() {
            for e in self.row_ptr[p]..self.row_ptr[p + 1] {
                let (w, c) = (self.weights[e], self.cols[e]);
                for (o, &x) in out.iter_mut().zip(&src[c * n..(c + 1) * n]) {
                    *o += w * x;
                }
            }
        }
        dst
    }

    /// Transposed application onto `in_len` pixels.
    fn backward(&self, grad: &[f64], n: usize, in_len: usize) -> Vec<f64> {
        let mut dst = vec![0.0; in_len * n];
        for (p, g) in grad.chunks_exact(n).enumerate() {
            for e in self.row_ptr[p]..self.row_ptr[p + 1] {
                let (w, c) = (self.weights[e], self.cols[e]);
                for (o, &x) in dst[c * n..(c + 1) * n].iter_mut().zip(g) {
                    *o += w * x;
                }
            }
        }
        dst
    }
}

/// Routes each output channel through one kernel applied to one input channel.
#[derive(Clone, Debug)]
pub struct SpatialMap {
    pub in_pixels: usize,
    pub out_pixels: usize,
    pub in_channels: usize,
    /// Each entry is a chain of kernels applied in order.
    kernels: Vec<Vec<Arc<SparseKernel>>>,
    /// `(input channel, kernel index)` per output channel.
    routes: Vec<(usize, usize)>,
}

impl SpatialMap {
    pub fn new(
        in_pixels: usize,
        in_channels: usize,
        kernels: Vec<Arc<SparseKernel>>,
        routes: Vec<(usize, usize)>,
    ) -> Self {
        Self::chained(in_pixels, in_channels, kernels.into_iter().map(|k| vec![k]).collect(), routes)
    }

    /// Like [`new`](Self::new) with each kernel given as a chain.
    pub fn chained(
        in_pixels: usize,
        in_channels: usize,
        kernels: Vec<Vec<Arc<SparseKernel>>>,
        routes: Vec<(usize, usize)>,
    ) -> Self {
        let out_pixels = kernels.first().and_then(|c| c.last()).map_or(0, |k| k.out_len());
        for chain in &kernels {
            assert!(!chain.is_empty(), "empty kernel chain");
            let mut pixels = in_pixels;
            for k in chain {
                assert!(k.cols.iter().all(|&c| c < pixels));
                pixels = k.out_len();
            }
            assert_eq!(pixels, out_pixels, "kernels disagree on output size");
        }
        for &(ch, k) in &routes {
            assert!(ch < in_channels && k < kernels.len());
        }
        Self { in_pixels, out_pixels, in_channels, kernels, routes }
    }

    /// Same kernel applied to every input channel.
    pub fn per_channel(in_pixels: usize, channels: usize, kernel: SparseKernel) -> Self {
        Self::new(in_pixels, channels, vec![Arc::new(kernel)], (0..channels).map(|c| (c, 0)).collect())
    }

    pub fn out_channels(&self) -> usize {
        self.routes.len()
    }

    /// Output channels grouped by kernel, so each stencil entry is read once.
    fn groups(&self) -> Vec<(usize, Vec<(usize, usize)>)> {
        let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
        for (o, &(ch, k)) in self.routes.iter().enumerate() {
            match groups.iter_mut().find(|(gk, _)| *gk == k) {
                Some((_, g)) => g.push((o, ch)),
                None => groups.push((k, vec![(o, ch)])),
            }
        }
        groups
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        assert_eq!(input.shape(), (self.in_pixels, self.in_channels), "spatial map input shape");
        let (oc, ic) = (self.routes.len(), self.in_channels);
        let mut out = Mat::zeros(self.out_pixels, oc);
        for (k, group) in self.groups() {
            // gather the routed channels, run the chain, scatter
            let n = group.len();
            let mut buf = vec![0.0; self.in_pixels * n];
            for p in 0..self.in_pixels {
                for (j, &(_, ch)) in group.iter().enumerate() {
                    buf[p * n + j] = input.data[p * ic + ch];
                }
            }
            for kern in &self.kernels[k] {
                buf = kern.forward(&buf, n);
            }
            for p in 0..self.out_pixels {
                for (j, &(o, _)) in group.iter().enumerate() {
                    out.data[p * oc + o] = buf[p * n + j];
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, grad: &Mat) -> Mat {
        let oc = self.routes.len();
        assert_eq!(grad.shape(), (self.out_pixels, oc), "spatial map gradient shape");
        let ic = self.in_channels;
        let mut out = Mat::zeros(self.in_pixels, ic);
        for (k, group) in self.groups() {
            let n = group.len();
            let mut buf = vec![0.0; self.out_pixels * n];
            for p in 0..self.out_pixels {
                for (j, &(o, _)) in group.iter().enumerate() {
                    buf[p * n + j] = grad.data[p * oc + o];
                }
            }
            let chain = &self.kernels[k];
            for (i, kern) in chain.iter().enumerate().rev() {
                let in_len = if i == 0 { self.in_pixels } else { chain[i - 1].out_len() };
                buf = kern.backward(&buf, n, in_len);
            }
            for p in 0..self.in_pixels {
                for (j, &(_, ch)) in group.iter().enumerate() {
                    out.data[p * ic + ch] += buf[p * n + j];
                }
            }
        }
        out
    }
}
