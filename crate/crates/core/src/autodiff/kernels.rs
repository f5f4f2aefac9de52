//! Forward and adjoint kernels for the built-in tensor operations.
//!
//! Layouts are channel-last: images are `[H, W, C]`, convolution kernels
//! `[kh, kw, Cin, Cout]`.

use crate::tensor::Real;

/// Lays out every `k x k` zero-padded window of `input` as one row.
///
/// The result is `[H*W, k*k*C]` with the column order matching a
/// `[k, k, C, _]` kernel flattened to `[k*k*C, _]`.
pub(crate) fn im2col<F: Real>(input: &[F], h: usize, w: usize, c: usize, k: usize) -> Vec<F> {
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let mut cols = vec![F::zero(); h * w * row_len];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters window rows back onto the image.
pub(crate) fn col2im<F: Real>(cols: &[F], h: usize, w: usize, c: usize, k: usize) -> Vec<F> {
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let mut out = vec![F::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (o, &g) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += g;
                    }
                }
            }
        }
    }
    out
}

/// Forward 2x2 max pooling. Returns values and, per output, the flat input
/// index of the winner. Ties go to the first element in row-major order.
pub(crate) fn maxpool2<F: Real>(input: &[F], h: usize, w: usize, c: usize) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = ((2 * y) * w + 2 * x) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps for one axis of half-pixel bilinear upsampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn upsample_taps(n: usize, factor: usize) -> Vec<Tap> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn upsample<F: Real>(input: &[F], h: usize, w: usize, c: usize, factor: usize) -> Vec<F> {
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = Vec::with_capacity(ty.len() * tx.len() * c);
    for y in &ty {
        let (wy0, wy1) = (F::from_f64(1.0 - y.frac), F::from_f64(y.frac));
        for x in &tx {
            let (wx0, wx1) = (F::from_f64(1.0 - x.frac), F::from_f64(x.frac));
            let p00 = (y.lo * w + x.lo) * c;
            let p01 = (y.lo * w + x.hi) * c;
            let p10 = (y.hi * w + x.lo) * c;
            let p11 = (y.hi * w + x.hi) * c;
            for ch in 0..c {
                out.push(
                    wy0 * (wx0 * input[p00 + ch] + wx1 * input[p01 + ch])
                        + wy1 * (wx0 * input[p10 + ch] + wx1 * input[p11 + ch]),
                );
            }
        }
    }
    out
}

pub(crate) fn upsample_adjoint<F: Real>(
    grad: &[F],
    h: usize,
    w: usize,
    c: usize,
    factor: usize,
) -> Vec<F> {
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![F::zero(); h * w * c];
    let mut g = grad.chunks_exact(c);
    for y in &ty {
        let (wy0, wy1) = (F::from_f64(1.0 - y.frac), F::from_f64(y.frac));
        for x in &tx {
            let (wx0, wx1) = (F::from_f64(1.0 - x.frac), F::from_f64(x.frac));
            let row = g.next().expect("gradient length matches output");
            for (corner, wgt) in [
                ((y.lo * w + x.lo) * c, wy0 * wx0),
                ((y.lo * w + x.hi) * c, wy0 * wx1),
                ((y.hi * w + x.lo) * c, wy1 * wx0),
                ((y.hi * w + x.hi) * c, wy1 * wx1),
            ] {
                for (o, &gv) in out[corner..corner + c].iter_mut().zip(row) {
                    *o += wgt * gv;
                }
            }
        }
    }
    out
}
