//! Raster geometry used by the annotation simulator.

use std::collections::{HashSet, VecDeque};

use crate::annotations::LabelMap;

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// An 8-connected set of same-class pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub class: u8,
    /// Linear pixel indices in row-major order.
    pub pixels: Vec<usize>,
    pub centroid: (f64, f64),
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// 8-connected components of equal-valued pixels, ordered by their first
/// pixel in row-major order.
pub fn components(labels: &LabelMap) -> Vec<Component> {
    let (h, w) = (labels.height(), labels.width());
    let vals = labels.values();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let class = vals[start];
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && vals[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &p| {
            (sx + (p % w) as f64, sy + (p / w) as f64)
        });
        out.push(Component {
            class,
            pixels,
            centroid: (sx / n, sy / n),
        });
    }
    out
}

/// Exact squared Euclidean distance from each pixel of `inside` to the
/// nearest pixel not in it, with everything beyond the raster counted as
/// outside. Pixels not in the set get 0.
pub fn squared_distance_transform(inside: &[bool], height: usize, width: usize) -> Vec<u64> {
    // Pad by one ring of background so the border acts as outside.
    let (ph, pw) = (height + 2, width + 2);
    let inf = ((ph * ph + pw * pw) as f64) * 4.0;
    let mut grid = vec![0.0f64; ph * pw];
    for y in 0..height {
        for x in 0..width {
            if inside[y * width + x] {
                grid[(y + 1) * pw + x + 1] = inf;
            }
        }
    }
    let mut col = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        let d = edt_1d(&col);
        for y in 0..ph {
            grid[y * pw + x] = d[y];
        }
    }
    for y in 0..ph {
        let d = edt_1d(&grid[y * pw..(y + 1) * pw]);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&d);
    }
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(grid[(y + 1) * pw + x + 1] as u64);
        }
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
    d
}

/// Moore-neighbour boundary trace of the 8-connected region containing the
/// row-major first pixel of `inside`. Returns `[x, y]` boundary pixels in
/// clockwise order (screen coordinates), starting at that first pixel.
pub fn trace_contour(inside: &[bool], height: usize, width: usize) -> Vec<[i64; 2]> {
    // Clockwise on screen starting from west.
    const RING: [(i64, i64); 8] = [
        (-1, 0),
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
    ];
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && inside[y as usize * width + x as usize]
    };
    let Some(first) = inside.iter().position(|&b| b) else {
        return Vec::new();
    };
    let start = [(first % width) as i64, (first / width) as i64];
    let mut contour = vec![start];
    // The west neighbour of the first pixel is outside by construction.
    let mut cur = start;
    let mut back = 0usize;
    let mut seen = HashSet::new();
    seen.insert((cur, back));
    loop {
        let mut next = None;
        for k in 1..=8 {
            let idx = (back + k) % 8;
            let (dx, dy) = RING[idx];
            if at(cur[0] + dx, cur[1] + dy) {
                let prev = RING[(back + k - 1) % 8];
                let cand = [cur[0] + dx, cur[1] + dy];
                let rel = (cur[0] + prev.0 - cand[0], cur[1] + prev.1 - cand[1]);
                let new_back = RING.iter().position(|&o| o == rel).expect("adjacent cells");
                next = Some((cand, new_back));
                break;
            }
        }
        let Some((cand, new_back)) = next else {
            break; // isolated pixel
        };
        if !seen.insert((cand, new_back)) {
            break;
        }
        if cand == start && contour.len() > 1 {
            // Closing the loop; keep tracing only if the state is new, which
            // the set above handles, but do not repeat the start vertex.
            cur = cand;
            back = new_back;
            continue;
        }
        contour.push(cand);
        cur = cand;
        back = new_back;
    }
    contour
}

/// Douglas-Peucker simplification of a closed ring, loosening the tolerance
/// until at most `max_vertices` remain.
pub(crate) fn simplify_ring(ring: &[[i64; 2]], max_vertices: usize) -> Vec<[i64; 2]> {
    if ring.len() <= max_vertices {
        return ring.to_vec();
    }
    // Split at the point farthest from the start so both halves are open chains.
    let far = (0..ring.len())
        .max_by_key(|&i| {
            let dx = ring[i][0] - ring[0][0];
            let dy = ring[i][1] - ring[0][1];
            (dx * dx + dy * dy, std::cmp::Reverse(i))
        })
        .unwrap_or(0);
    let mut eps = 0.5;
    loop {
        let mut keep = vec![false; ring.len()];
        keep[0] = true;
        keep[far] = true;
        mark(ring, 0, far, eps, &mut keep);
        let tail: Vec<[i64; 2]> = ring[far..].iter().chain(std::iter::once(&ring[0])).copied().collect();
        let mut keep_tail = vec![false; tail.len()];
        mark(&tail, 0, tail.len() - 1, eps, &mut keep_tail);
        for (i, k) in keep_tail.iter().enumerate().take(tail.len() - 1) {
            if *k {
                keep[far + i] = true;
            }
        }
        let out: Vec<[i64; 2]> = ring.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        if out.len() <= max_vertices {
            return out;
        }
        eps *= 1.5;
    }
}

fn mark(pts: &[[i64; 2]], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let [ax, ay] = pts[lo];
    let [bx, by] = pts[hi];
    let len = (((bx - ax).pow(2) + (by - ay).pow(2)) as f64).sqrt();
    let mut best = (0.0, lo);
    for (i, p) in pts.iter().enumerate().take(hi).skip(lo + 1) {
        let d = if len == 0.0 {
            (((p[0] - ax).pow(2) + (p[1] - ay).pow(2)) as f64).sqrt()
        } else {
            ((bx - ax) * (ay - p[1]) - (ax - p[0]) * (by - ay)).abs() as f64 / len
        };
        if d > best.0 {
            best = (d, i);
        }
    }
    if best.0 > eps {
        keep[best.1] = true;
        mark(pts, lo, best.1, eps, keep);
        mark(pts, best.1, hi, eps, keep);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_sq_dt(inside: &[bool], h: usize, w: usize) -> Vec<u64> {
        let mut out = vec![0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !inside[(y as usize) * w + x as usize] {
                    continue;
                }
                let mut best = u64::MAX;
                for qy in -1..=h as i64 {
                    for qx in -1..=w as i64 {
                        let outside = qx < 0
                            || qy < 0
                            || qx >= w as i64
                            || qy >= h as i64
                            || !inside[qy as usize * w + qx as usize];
                        if outside {
                            best = best.min(((qx - x).pow(2) + (qy - y).pow(2)) as u64);
                        }
                    }
                }
                out[y as usize * w + x as usize] = best;
            }
        }
        out
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (h, w) = (13, 17);
        let inside: Vec<bool> = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                (x - 8).pow(2) + (y - 6).pow(2) < 40 || (x > 12 && y > 9) || (i * 7919) % 13 == 0
            })
            .collect();
        assert_eq!(squared_distance_transform(&inside, h, w), brute_sq_dt(&inside, h, w));
    }

    #[test]
    fn components_use_8_connectivity() {
        // Diagonal touches join.
        let labels = LabelMap::from_values(3, 3, vec![0, 1, 2, 1, 0, 2, 2, 2, 0]).unwrap();
        let comps = components(&labels);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].class, 0);
        assert_eq!(comps[0].pixels, vec![0, 4, 8]);
        assert_eq!(comps[0].centroid, (1.0, 1.0));
        assert_eq!(comps[1].pixels, vec![1, 3]);
        assert_eq!(comps[2].pixels, vec![2, 5, 6, 7]);
        // A full column of another class splits.
        let split = LabelMap::from_values(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(components(&split).len(), 3);
    }

    #[test]
    fn contour_of_rectangle_is_its_border() {
        let (h, w) = (6, 7);
        let mut inside = vec![false; h * w];
        for y in 1..5 {
            for x in 2..6 {
                inside[y * w + x] = true;
            }
        }
        let c = trace_contour(&inside, h, w);
        assert_eq!(c[0], [2, 1]);
        assert_eq!(c.len(), 12);
        let unique: HashSet<_> = c.iter().collect();
        assert_eq!(unique.len(), 12);
        assert_eq!(c[1], [3, 1]); // clockwise on screen: heads east first
        let s = simplify_ring(&c, 4);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn contour_of_single_pixel() {
        let mut inside = vec![false; 9];
        inside[4] = true;
        assert_eq!(trace_contour(&inside, 3, 3), vec![[1, 1]]);
    }
}
