//! Filtering-based message passing.
//!
//! The smoothness kernel is a separable Gaussian truncated at three standard
//! deviations. The appearance kernel goes through a bilateral grid over
//! `(x, y, r, g, b)` with spatial cells of `theta1 / 2` pixels and colour
//! cells of `theta2 / 2` intensity units: every pixel is splatted to the 32
//! corners of its cell with multilinear weights, the grid is blurred along
//! each axis with the kernel sampled at cell spacing, and messages are read
//! back with the same weights. Only vertices touched by some pixel are
//! stored; the blur neither reads nor creates any other vertex.

use std::collections::HashMap;

use image::RgbImage;

use super::{check_image, initial_q, unary_from_probs, update, CrfParams, ProbMap, PROB_FLOOR};
use crate::error::Result;

const DIMS: usize = 5;
/// Blur radius in cells: three standard deviations of two cells each.
const GRID_RADIUS: i32 = 6;
const CELLS_PER_SIGMA: f64 = 2.0;

fn grid_tap(t: i32) -> f64 {
    let s = t as f64 / CELLS_PER_SIGMA;
    (-0.5 * s * s).exp()
}

/// Gaussian weights `exp(-t^2 / (2 sigma^2))` for `|t| <= ceil(3 sigma)`.
fn line_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    (0..=r).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// `sum_{j != i} k2(i, j) q_j`, per class.
fn smoothness_messages(q: &[f64], h: usize, w: usize, k: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() - 1;
    let mut rows = vec![0.0; q.len()];
    for y in 0..h {
        for x in 0..w {
            let out = &mut rows[(y * w + x) * k..(y * w + x + 1) * k];
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let t = taps[x.abs_diff(xx)];
                let src = &q[(y * w + xx) * k..(y * w + xx + 1) * k];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += t * s;
                }
            }
        }
    }
    let mut out = vec![0.0; q.len()];
    for y in 0..h {
        for x in 0..w {
            let dst = &mut out[(y * w + x) * k..(y * w + x + 1) * k];
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                let t = taps[y.abs_diff(yy)];
                let src = &rows[(yy * w + x) * k..(yy * w + x + 1) * k];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += t * s;
                }
            }
        }
    }
    for (o, s) in out.iter_mut().zip(q) {
        *o -= s;
    }
    out
}

struct BilateralGrid {
    vertices: usize,
    /// Per pixel: (vertex, weight) for each live cell corner.
    splat: Vec<Vec<(u32, f64)>>,
    /// Per axis: for each vertex, the stored vertices along that axis within
    /// the blur radius, with their tap weight.
    blur: Vec<Vec<Vec<(u32, f64)>>>,
    /// Contribution of each pixel to its own sliced message.
    self_weight: Vec<f64>,
}

impl BilateralGrid {
    fn new(image: &RgbImage, theta1: f64, theta2: f64) -> Self {
        let (w, h) = image.dimensions();
        let (w, h) = (w as usize, h as usize);
        let spatial_cell = theta1 / CELLS_PER_SIGMA;
        let range_cell = theta2 / CELLS_PER_SIGMA;
        let raw = image.as_raw();
        let mut index: HashMap<[i32; DIMS], u32> = HashMap::new();
        let mut keys: Vec<[i32; DIMS]> = Vec::new();
        let mut splat = Vec::with_capacity(h * w);
        let mut self_weight = Vec::with_capacity(h * w);
        let g1 = grid_tap(1);
        for i in 0..h * w {
            let coords = [
                (i % w) as f64 / spatial_cell,
                (i / w) as f64 / spatial_cell,
                raw[3 * i] as f64 / range_cell,
                raw[3 * i + 1] as f64 / range_cell,
                raw[3 * i + 2] as f64 / range_cell,
            ];
            let base = coords.map(|c| c.floor() as i32);
            let frac: [f64; DIMS] = std::array::from_fn(|d| coords[d] - base[d] as f64);
            let mut corners = Vec::with_capacity(1 << DIMS);
            for mask in 0..1u32 << DIMS {
                let mut weight = 1.0;
                let mut key = base;
                for d in 0..DIMS {
                    if mask >> d & 1 == 1 {
                        weight *= frac[d];
                        key[d] += 1;
                    } else {
                        weight *= 1.0 - frac[d];
                    }
                }
                if weight == 0.0 {
                    continue;
                }
                let next = keys.len() as u32;
                let v = *index.entry(key).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                corners.push((v, weight));
            }
            splat.push(corners);
            // Paths between corners of one cell stay inside that cell, so the
            // self term factorizes over axes.
            self_weight.push(
                frac.iter()
                    .map(|&f| (1.0 - f) * (1.0 - f) + f * f + 2.0 * f * (1.0 - f) * g1)
                    .product(),
            );
        }
        let mut blur = Vec::with_capacity(DIMS);
        for d in 0..DIMS {
            let mut lists = Vec::with_capacity(keys.len());
            for key in &keys {
                let mut list = Vec::new();
                for t in -GRID_RADIUS..=GRID_RADIUS {
                    let mut other = *key;
                    other[d] += t;
                    if let Some(&u) = index.get(&other) {
                        list.push((u, grid_tap(t)));
                    }
                }
                lists.push(list);
            }
            blur.push(lists);
        }
        Self {
            vertices: keys.len(),
            splat,
            blur,
            self_weight,
        }
    }

    /// `sum_{j != i} k1(i, j) q_j`, approximately, per class.
    fn messages(&self, q: &[f64], k: usize) -> Vec<f64> {
        let mut grid = vec![0.0; self.vertices * k];
        for (i, corners) in self.splat.iter().enumerate() {
            let qi = &q[i * k..(i + 1) * k];
            for &(v, wgt) in corners {
                let cell = &mut grid[v as usize * k..(v as usize + 1) * k];
                for (c, s) in cell.iter_mut().zip(qi) {
                    *c += wgt * s;
                }
            }
        }
        let mut next = vec![0.0; grid.len()];
        for axis in &self.blur {
            next.iter_mut().for_each(|v| *v = 0.0);
            for (v, list) in axis.iter().enumerate() {
                let dst = &mut next[v * k..(v + 1) * k];
                for &(u, tap) in list {
                    let src = &grid[u as usize * k..(u as usize + 1) * k];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += tap * s;
                    }
                }
            }
            std::mem::swap(&mut grid, &mut next);
        }
        let mut out = vec![0.0; q.len()];
        for (i, corners) in self.splat.iter().enumerate() {
            let dst = &mut out[i * k..(i + 1) * k];
            for &(v, wgt) in corners {
                let cell = &grid[v as usize * k..(v as usize + 1) * k];
                for (o, c) in dst.iter_mut().zip(cell) {
                    *o += wgt * c;
                }
            }
            let sw = self.self_weight[i];
            for (o, s) in dst.iter_mut().zip(&q[i * k..(i + 1) * k]) {
                *o -= sw * s;
            }
        }
        out
    }
}

/// Mean field with filtered messages. Runs on images of any size.
pub fn mean_field_fast(probs: &ProbMap, image: &RgbImage, params: &CrfParams) -> Result<ProbMap> {
    params.validate()?;
    check_image(probs, image)?;
    let (h, w, k) = (probs.height, probs.width, probs.classes);
    let unary = unary_from_probs(probs, PROB_FLOOR);
    let mut q = initial_q(&unary, k);
    let taps = line_taps(params.theta3);
    let grid = (params.w1 > 0.0).then(|| BilateralGrid::new(image, params.theta1, params.theta2));
    let mut messages = vec![0.0; q.len()];
    for _ in 0..params.iterations {
        messages.iter_mut().for_each(|m| *m = 0.0);
        if params.w2 > 0.0 {
            for (m, s) in messages.iter_mut().zip(smoothness_messages(&q, h, w, k, &taps)) {
                *m += params.w2 * s;
            }
        }
        if let Some(grid) = &grid {
            for (m, a) in messages.iter_mut().zip(grid.messages(&q, k)) {
                *m += params.w1 * a;
            }
        }
        update(&unary, &messages, k, &mut q);
    }
    Ok(ProbMap::from_f64(h, w, k, &q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::mean_field_exact;

    #[test]
    fn smoothness_messages_match_direct_sum_within_radius() {
        let (h, w, k) = (7, 9, 2);
        let q: Vec<f64> = (0..h * w * k).map(|i| ((i * 31 % 17) as f64) / 17.0).collect();
        let sigma = 1.5;
        let got = smoothness_messages(&q, h, w, k, &line_taps(sigma));
        let r = (3.0 * sigma).ceil() as i64;
        for i in 0..h * w {
            for l in 0..k {
                let mut want = 0.0;
                for j in 0..h * w {
                    let (dx, dy) = ((i % w) as i64 - (j % w) as i64, (i / w) as i64 - (j / w) as i64);
                    if j == i || dx.abs() > r || dy.abs() > r {
                        continue;
                    }
                    want += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() * q[j * k + l];
                }
                assert!((got[i * k + l] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_is_exact_for_aligned_constant_colour() {
        // Pixels on grid vertices with one colour: the sliced message is the
        // kernel sampled at cell spacing.
        let img = RgbImage::from_pixel(31, 1, image::Rgb([50, 50, 50]));
        let grid = BilateralGrid::new(&img, 30.0, 10.0);
        let mut q = vec![0.0; 31];
        q[0] = 1.0;
        let m = grid.messages(&q, 1);
        let want = (-(30.0f64 * 30.0) / 1800.0).exp();
        assert!((m[30] - want).abs() < 1e-12);
        assert!(m[0].abs() < 1e-12);
    }

    #[test]
    fn no_weights_means_no_messages() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        let data: Vec<f32> = (0..64).flat_map(|i| {
            let a = (i % 5) as f32 / 10.0 + 0.3;
            [a, 1.0 - a]
        }).collect();
        let p = ProbMap::new(8, 8, 2, data).unwrap();
        let params = CrfParams {
            w1: 0.0,
            w2: 0.0,
            iterations: 7,
            ..Default::default()
        };
        let q = mean_field_fast(&p, &img, &params).unwrap();
        for (a, b) in q.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_is_a_fixed_point_on_constant_colour() {
        let img = RgbImage::from_pixel(16, 16, image::Rgb([90, 90, 90]));
        let p = ProbMap::new(16, 16, 3, vec![1.0 / 3.0; 16 * 16 * 3]).unwrap();
        for params in [
            CrfParams { w1: 0.0, ..Default::default() },
            CrfParams::default(),
        ] {
            let q = mean_field_fast(&p, &img, &params).unwrap();
            assert!(q.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        }
    }

    #[test]
    fn fast_tracks_exact_on_a_smooth_instance() {
        let img = RgbImage::from_fn(12, 10, |x, _| if x < 6 { image::Rgb([40, 40, 40]) } else { image::Rgb([200, 200, 200]) });
        let data: Vec<f32> = (0..120)
            .flat_map(|i| if i % 12 < 6 { [0.7, 0.3] } else { [0.35, 0.65] })
            .collect();
        let p = ProbMap::new(10, 12, 2, data).unwrap();
        let params = CrfParams::default();
        let a = mean_field_exact(&p, &img, &params).unwrap();
        let b = mean_field_fast(&p, &img, &params).unwrap();
        assert_eq!(a.argmax(), b.argmax());
    }
}
