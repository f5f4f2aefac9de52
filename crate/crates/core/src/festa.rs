//! Feature-space relational loss and the masked cross-entropy it is
//! combined with.
//!
//! For every anchor `x_i` of a feature grid, three partners are picked: the
//! most cosine-similar anchor `nf`, the least similar anchor `ff`, and the
//! most similar of the eight spatial neighbours `ns`. The loss pulls `x_i`
//! towards `nf` and `ns` in Euclidean distance and pushes it away from `ff`
//! in cosine similarity:
//!
//! ```text
//! L = alpha * sum D(x_i, x_nf) + beta * sum D(x_i, x_ns) + gamma * sum S(x_i, x_ff)
//! ```
//!
//! Partner indices are constants of the backward pass; gradients flow into
//! both ends of every selected pair.
//!
//! ```
//! use sparseseg::autodiff::Graph;
//! use sparseseg::festa::{festa_loss, FestaConfig};
//! use sparseseg::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let f = g.param(Tensor::from_f64(vec![1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
//! let loss = festa_loss(&mut g, f, &FestaConfig::default()).unwrap();
//! let expected = 2.0 * 2f64.sqrt();
//! assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
//! ```

use serde::{Deserialize, Serialize};

use crate::annotations::{LabelMap, UNLABELED};
use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide the summed terms by the number of anchors.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FestaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the relational term against cross-entropy.
    pub lambda: f64,
    /// Most anchors searched; larger grids are subsampled on a regular stride.
    pub n_max: usize,
    pub normalization: Normalization,
    pub epsilon: f64,
}

impl Default for FestaConfig {
    fn default() -> Self {
        Self::coarse()
    }
}

impl FestaConfig {
    /// Preset for scenes dominated by large, coarsely textured regions.
    pub fn coarse() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.5,
            gamma: 1.0,
            lambda: 0.1,
            n_max: 4096,
            normalization: Normalization::Mean,
            epsilon: 1e-8,
        }
    }

    /// Preset for finely textured scenes.
    pub fn fine() -> Self {
        Self {
            lambda: 0.01,
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.n_max < 2 {
            return Err(Error::Param(format!("n_max must be at least 2, got {}", self.n_max)));
        }
        Ok(())
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn guarded_norm<F: Real>(a: &[F], eps: F) -> F {
    dot(a, a).sqrt().max(eps)
}

fn distance<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// `dot(a, b) / (max(|a|, eps) * max(|b|, eps))`.
pub fn cosine_similarity<F: Real>(a: &[F], b: &[F], epsilon: F) -> Result<F> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine_similarity of lengths {} and {}", a.len(), b.len()));
    }
    Ok(dot(a, b) / (guarded_norm(a, epsilon) * guarded_norm(b, epsilon)))
}

pub fn euclidean_distance<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(shape_err!("euclidean_distance of lengths {} and {}", a.len(), b.len()));
    }
    Ok(distance(a, b))
}

/// Partners chosen for each anchor. All indices are linear positions
/// `y * width + x` in the feature grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSelection {
    pub height: usize,
    pub width: usize,
    pub anchors: Vec<usize>,
    pub nf: Vec<usize>,
    pub ff: Vec<usize>,
    pub ns: Vec<usize>,
}

impl NeighborSelection {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchor positions: every cell, or a regular stride grid of at most
/// `n_max` cells.
pub fn anchor_positions(height: usize, width: usize, n_max: usize) -> Vec<usize> {
    let n = height * width;
    if n <= n_max {
        return (0..n).collect();
    }
    let mut stride = ((n as f64 / n_max as f64).sqrt().ceil() as usize).max(1);
    while height.div_ceil(stride) * width.div_ceil(stride) > n_max {
        stride += 1;
    }
    let mut out = Vec::new();
    for y in (0..height).step_by(stride) {
        for x in (0..width).step_by(stride) {
            out.push(y * width + x);
        }
    }
    out
}

pub fn select_neighbors<F: Real>(features: &Tensor<F>, n_max: usize, epsilon: F) -> Result<NeighborSelection> {
    let (h, w, c) = features.hwc()?;
    if h * w < 2 {
        return Err(Error::Selection(format!("a {h}x{w} grid has no candidate partners")));
    }
    let anchors = anchor_positions(h, w, n_max);
    if anchors.len() < 2 {
        return Err(Error::Selection(format!(
            "n_max = {n_max} leaves fewer than two anchors"
        )));
    }
    let data = features.data();
    let vec = |i: usize| &data[i * c..(i + 1) * c];
    let norms: Vec<F> = (0..h * w).map(|i| guarded_norm(vec(i), epsilon)).collect();
    let sim = |i: usize, j: usize| dot(vec(i), vec(j)) / (norms[i] * norms[j]);

    let mut nf = Vec::with_capacity(anchors.len());
    let mut ff = Vec::with_capacity(anchors.len());
    let mut ns = Vec::with_capacity(anchors.len());
    for &i in &anchors {
        let mut best: Option<(F, usize)> = None;
        let mut worst: Option<(F, usize)> = None;
        for &j in &anchors {
            if j == i {
                continue;
            }
            let s = sim(i, j);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
            if worst.is_none_or(|(b, _)| s < b) {
                worst = Some((s, j));
            }
        }
        nf.push(best.expect("two or more anchors").1);
        ff.push(worst.expect("two or more anchors").1);

        let (x, y) = ((i % w) as isize, (i / w) as isize);
        let mut near: Option<(F, usize)> = None;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                let s = sim(i, j);
                if near.is_none_or(|(b, _)| s > b) {
                    near = Some((s, j));
                }
            }
        }
        ns.push(near.expect("grid of two or more cells").1);
    }
    Ok(NeighborSelection {
        height: h,
        width: w,
        anchors,
        nf,
        ff,
        ns,
    })
}

struct FestaOp {
    features: Var,
    selection: NeighborSelection,
    weights: [f64; 3],
    epsilon: f64,
    scale: f64,
}

impl FestaOp {
    fn value<F: Real>(&self, feats: &Tensor<F>) -> F {
        let c = feats.dims()[2];
        let d = feats.data();
        let v = |i: usize| &d[i * c..(i + 1) * c];
        let eps = F::from_f64(self.epsilon);
        let (mut s_nf, mut s_ns, mut s_ff) = (F::zero(), F::zero(), F::zero());
        let sel = &self.selection;
        for k in 0..sel.len() {
            let i = sel.anchors[k];
            s_nf += distance(v(i), v(sel.nf[k]));
            s_ns += distance(v(i), v(sel.ns[k]));
            s_ff += dot(v(i), v(sel.ff[k])) / (guarded_norm(v(i), eps) * guarded_norm(v(sel.ff[k]), eps));
        }
        let [a, b, g] = self.weights.map(F::from_f64);
        (a * s_nf + b * s_ns + g * s_ff) * F::from_f64(self.scale)
    }
}

/// Adds `coef * d|a - b| / d(a, b)` into the gradient rows of `i` and `j`.
fn distance_grad<F: Real>(grad: &mut [F], data: &[F], c: usize, i: usize, j: usize, coef: F) {
    let d = distance(&data[i * c..(i + 1) * c], &data[j * c..(j + 1) * c]);
    if d == F::zero() {
        return;
    }
    for k in 0..c {
        let g = coef * (data[i * c + k] - data[j * c + k]) / d;
        grad[i * c + k] += g;
        grad[j * c + k] -= g;
    }
}

fn cosine_grad<F: Real>(grad: &mut [F], data: &[F], c: usize, i: usize, j: usize, coef: F, eps: F) {
    let (a, b) = (&data[i * c..(i + 1) * c], &data[j * c..(j + 1) * c]);
    let (ra, rb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let (na, nb) = (ra.max(eps), rb.max(eps));
    let s = dot(a, b) / (na * nb);
    // A clamped norm is a constant, so its own term drops out.
    let ka = if ra > eps { s / (na * na) } else { F::zero() };
    let kb = if rb > eps { s / (nb * nb) } else { F::zero() };
    for k in 0..c {
        grad[i * c + k] += coef * (b[k] / (na * nb) - ka * a[k]);
        grad[j * c + k] += coef * (a[k] / (na * nb) - kb * b[k]);
    }
}

impl<F: Real> CustomOp<F> for FestaOp {
    fn name(&self) -> &'static str {
        "festa"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.features]
    }

    fn backward(&self, output_grad: &Tensor<F>, inputs: &[&Tensor<F>]) -> Vec<Tensor<F>> {
        let feats = inputs[0];
        let c = feats.dims()[2];
        let data = feats.data();
        let g = output_grad.data()[0] * F::from_f64(self.scale);
        let [a, b, gm] = self.weights.map(F::from_f64);
        let eps = F::from_f64(self.epsilon);
        let mut grad = vec![F::zero(); data.len()];
        let sel = &self.selection;
        for k in 0..sel.len() {
            let i = sel.anchors[k];
            distance_grad(&mut grad, data, c, i, sel.nf[k], g * a);
            distance_grad(&mut grad, data, c, i, sel.ns[k], g * b);
            cosine_grad(&mut grad, data, c, i, sel.ff[k], g * gm, eps);
        }
        vec![Tensor::new(feats.dims().to_vec(), grad).expect("same dims as features")]
    }
}

/// Relational loss of a `[h, w, C]` feature node, selecting partners from
/// its current value.
pub fn festa_loss<F: Real>(graph: &mut Graph<F>, features: Var, config: &FestaConfig) -> Result<Var> {
    config.validate()?;
    let selection = select_neighbors(graph.value(features), config.n_max, F::from_f64(config.epsilon))?;
    festa_loss_with_selection(graph, features, selection, config)
}

/// Relational loss with partners fixed in advance.
pub fn festa_loss_with_selection<F: Real>(
    graph: &mut Graph<F>,
    features: Var,
    selection: NeighborSelection,
    config: &FestaConfig,
) -> Result<Var> {
    config.validate()?;
    let (h, w, _) = graph.value(features).hwc()?;
    if (h, w) != (selection.height, selection.width) {
        return Err(shape_err!(
            "selection made for a {}x{} grid, features are {h}x{w}",
            selection.height,
            selection.width
        ));
    }
    if selection.is_empty() {
        return Err(Error::Selection("empty selection".into()));
    }
    let scale = match config.normalization {
        Normalization::Mean => 1.0 / selection.len() as f64,
        Normalization::Sum => 1.0,
    };
    let op = FestaOp {
        features,
        selection,
        weights: [config.alpha, config.beta, config.gamma],
        epsilon: config.epsilon,
        scale,
    };
    let value = op.value(graph.value(features));
    Ok(graph.custom(Tensor::scalar(value), Box::new(op)))
}

struct CrossEntropyOp {
    logits: Var,
    labels: Vec<u8>,
    weights: Option<Vec<f64>>,
    labeled: usize,
}

impl CrossEntropyOp {
    fn weight(&self, class: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[class])
    }
}

/// Numerically stable softmax of one row, in `f64`.
fn softmax_row<F: Real>(row: &[F], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v.to_f64() - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<F: Real> CustomOp<F> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "masked_cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, output_grad: &Tensor<F>, inputs: &[&Tensor<F>]) -> Vec<Tensor<F>> {
        let logits = inputs[0];
        let k = logits.dims()[2];
        let g = output_grad.data()[0].to_f64() / self.labeled as f64;
        let mut grad = vec![F::zero(); logits.len()];
        let mut p = vec![0.0; k];
        for (i, &label) in self.labels.iter().enumerate() {
            if label == UNLABELED {
                continue;
            }
            let row = &logits.data()[i * k..(i + 1) * k];
            softmax_row(row, &mut p);
            let scale = g * self.weight(label as usize);
            for c in 0..k {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                grad[i * k + c] = F::from_f64(scale * (p[c] - target));
            }
        }
        vec![Tensor::new(logits.dims().to_vec(), grad).expect("same dims as logits")]
    }
}

/// Mean over labeled pixels of `w_c * -log softmax(logits)_c`.
///
/// `class_weights` defaults to 1 for every class. Pixels with the value 255
/// are ignored.
pub fn masked_cross_entropy<F: Real>(
    graph: &mut Graph<F>,
    logits: Var,
    labels: &LabelMap,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (h, w, k) = graph.value(logits).hwc()?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(shape_err!(
            "labels are {}x{}, logits are {w}x{h}",
            labels.width(),
            labels.height()
        ));
    }
    labels.validate(k)?;
    if let Some(cw) = class_weights {
        if cw.len() != k {
            return Err(shape_err!("{} class weights for {k} classes", cw.len()));
        }
    }
    let labeled = labels.labeled_count();
    if labeled == 0 {
        return Err(Error::Loss("no labeled pixels in this sample".into()));
    }
    let op = CrossEntropyOp {
        logits,
        labels: labels.values().to_vec(),
        weights: class_weights.map(<[f64]>::to_vec),
        labeled,
    };
    let data = graph.value(logits).data();
    let mut total = 0.0;
    for (i, &label) in op.labels.iter().enumerate() {
        if label == UNLABELED {
            continue;
        }
        let row = &data[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let lse = m + row.iter().map(|&v| (v.to_f64() - m).exp()).sum::<f64>().ln();
        total += op.weight(label as usize) * (lse - row[label as usize].to_f64());
    }
    let value = F::from_f64(total / labeled as f64);
    Ok(graph.custom(Tensor::scalar(value), Box::new(op)))
}

/// `ce + lambda * festa`. With `lambda == 0` the cross-entropy node itself
/// is returned.
pub fn combine<F: Real>(graph: &mut Graph<F>, ce: Var, festa: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(ce);
    }
    let scaled = graph.scale(festa, F::from_f64(lambda));
    graph.add(ce, scaled)
}

/// Training objective: masked cross-entropy on `logits` plus the weighted
/// relational loss on `features`.
pub fn combined_loss<F: Real>(
    graph: &mut Graph<F>,
    logits: Var,
    labels: &LabelMap,
    features: Var,
    config: &FestaConfig,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    config.validate()?;
    let ce = masked_cross_entropy(graph, logits, labels, class_weights)?;
    if config.lambda == 0.0 {
        return Ok(ce);
    }
    let festa = festa_loss(graph, features, config)?;
    combine(graph, ce, festa, config.lambda)
}

/// Inverse-frequency class weights, rescaled to average 1 over the classes
/// that occur. Absent classes get 0; a map with no labels gives all zeros.
pub fn class_weights_from_labels(labels: &LabelMap, num_classes: usize, smoothing: f64) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &v in labels.values() {
        if (v as usize) < num_classes {
            counts[v as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return vec![0.0; num_classes];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total as f64 / (present as f64 * (c as f64 + smoothing))
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / present as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, gradcheck_with, GradcheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-8;

    fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    /// Exhaustive search through the public similarity function.
    fn brute_force(f: &Tensor<f64>) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let (h, w, c) = f.hwc().unwrap();
        let v = |i: usize| &f.data()[i * c..(i + 1) * c];
        let n = h * w;
        let (mut nf, mut ff, mut ns) = (vec![], vec![], vec![]);
        for i in 0..n {
            let sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cosine_similarity(v(i), v(j), EPS).unwrap(), j))
                .collect();
            let max = sims.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            let min = sims.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
            nf.push(sims.iter().filter(|s| s.0 == max).map(|s| s.1).min().unwrap());
            ff.push(sims.iter().filter(|s| s.0 == min).map(|s| s.1).min().unwrap());
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let neigh: Vec<(f64, usize)> = (0..n)
                .filter(|&j| {
                    let (jx, jy) = ((j % w) as i64, (j / w) as i64);
                    j != i && (jx - x).abs() <= 1 && (jy - y).abs() <= 1
                })
                .map(|j| (cosine_similarity(v(i), v(j), EPS).unwrap(), j))
                .collect();
            let top = neigh.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            ns.push(neigh.iter().filter(|s| s.0 == top).map(|s| s.1).min().unwrap());
        }
        (nf, ff, ns)
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0], EPS).unwrap() - 0.96).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], EPS).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0], EPS).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0], EPS).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 2.0], EPS), Err(Error::Shape(_))));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, 1.5], &[1.5, 1.5]).unwrap(), 0.0);
        assert!((euclidean_distance(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(euclidean_distance(&[1.0], &[]).is_err());
    }

    #[test]
    fn two_cell_grid_forces_choice() {
        let f = Tensor::from_f64(vec![1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = select_neighbors(&f, 4096, EPS).unwrap();
        assert_eq!((s.nf[0], s.ff[0], s.ns[0]), (1, 1, 1));
        assert_eq!((s.nf[1], s.ff[1], s.ns[1]), (0, 0, 0));
    }

    #[test]
    fn identical_features_pick_smallest_index() {
        let f = Tensor::full(&[3, 3, 2], 0.7);
        let s = select_neighbors(&f, 4096, EPS).unwrap();
        for (k, &i) in s.anchors.iter().enumerate() {
            let first = if i == 0 { 1 } else { 0 };
            assert_eq!(s.nf[k], first);
            assert_eq!(s.ff[k], first);
            let (x, y) = (i % 3, i / 3);
            let first_neighbor = (y.saturating_sub(1)) * 3 + x.saturating_sub(1);
            let expected = if first_neighbor == i { i + 1 } else { first_neighbor };
            assert_eq!(s.ns[k], expected, "anchor {i}");
        }
    }

    #[test]
    fn single_cell_has_no_partners() {
        let f = Tensor::full(&[1, 1, 3], 1.0f64);
        assert!(matches!(select_neighbors(&f, 4096, EPS), Err(Error::Selection(_))));
    }

    #[test]
    fn random_grid_matches_exhaustive_search() {
        let f = random_grid(4, 4, 8, 17);
        let s = select_neighbors(&f, 4096, EPS).unwrap();
        assert_eq!((s.nf, s.ff, s.ns), brute_force(&f));
    }

    #[test]
    fn large_grids_are_subsampled() {
        let a = anchor_positions(100, 100, 4096);
        assert!(a.len() <= 4096 && a.len() > 1000);
        assert_eq!(anchor_positions(8, 8, 4096).len(), 64);
        let f = random_grid(9, 9, 3, 2);
        let s = select_neighbors(&f, 30, EPS).unwrap();
        assert!(s.len() <= 30);
        for k in 0..s.len() {
            assert!(s.anchors.contains(&s.nf[k]) && s.anchors.contains(&s.ff[k]));
            let (i, j) = (s.anchors[k], s.ns[k]);
            assert!((i % 9).abs_diff(j % 9) <= 1 && (i / 9).abs_diff(j / 9) <= 1 && i != j);
        }
    }

    fn loss_value(f: &Tensor<f64>, cfg: &FestaConfig) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(f.clone());
        let l = festa_loss(&mut g, v, cfg).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn two_cell_loss_is_two_root_two() {
        let f = Tensor::from_f64(vec![1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((loss_value(&f, &FestaConfig::default()) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let sum = FestaConfig {
            normalization: Normalization::Sum,
            ..Default::default()
        };
        assert!((loss_value(&f, &sum) - 4.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_features_leave_only_the_push_term() {
        let f = Tensor::full(&[3, 3, 4], 0.25);
        assert!((loss_value(&f, &FestaConfig::default()) - 1.0).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.param(f);
        let cfg = FestaConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let l = festa_loss(&mut g, v, &cfg).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_selection() {
        let f = random_grid(5, 5, 4, 3);
        let cfg = FestaConfig::default();
        let sel = select_neighbors(&f, cfg.n_max, EPS).unwrap();
        let report = gradcheck(
            |g, v| festa_loss_with_selection(g, v[0], sel.clone(), &cfg),
            &[f],
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let f = random_grid(4, 5, 3, 9);
        let cfg = FestaConfig::default();
        let sel = select_neighbors(&f, cfg.n_max, EPS).unwrap();
        let mut g = Graph::new();
        let v = g.param(f.clone());
        let l = festa_loss_with_selection(&mut g, v, sel.clone(), &cfg).unwrap();
        let before = g.value(l).item().unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap().clone();
        let stepped: Vec<f64> = f.data().iter().zip(grad.data()).map(|(x, d)| x - 1e-3 * d).collect();
        let mut g2 = Graph::new();
        let v2 = g2.constant(Tensor::new(f.dims().to_vec(), stepped).unwrap());
        let l2 = festa_loss_with_selection(&mut g2, v2, sel, &cfg).unwrap();
        assert!(g2.value(l2).item().unwrap() < before);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::full(&[2, 2, 5], 0.3));
        let labels = LabelMap::from_values(2, 2, vec![0, 4, 255, 2]).unwrap();
        let l = masked_cross_entropy(&mut g, logits, &labels, None).unwrap();
        assert!((g.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_f64(vec![1, 2, 2], &[2.0, 0.0, 0.0, 2.0]).unwrap());
        let labels = LabelMap::from_values(1, 2, vec![0, 1]).unwrap();
        let l = masked_cross_entropy(&mut g, logits, &labels, None).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 1e-4);

        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_f64(vec![1, 1, 2], &[500.0, -500.0]).unwrap());
        let labels = LabelMap::from_values(1, 1, vec![0]).unwrap();
        let l = masked_cross_entropy(&mut g, logits, &labels, None).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_needs_labels() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[2, 2, 3]));
        let r = masked_cross_entropy(&mut g, logits, &LabelMap::unlabeled(2, 2), None);
        assert!(matches!(r, Err(Error::Loss(_))));
    }

    #[test]
    fn cross_entropy_gradients() {
        let logits = random_grid(3, 4, 3, 5);
        let labels = LabelMap::from_values(3, 4, vec![0, 255, 2, 1, 1, 255, 255, 0, 2, 2, 255, 1]).unwrap();
        let w = [0.5, 1.2, 1.3];
        let report = gradcheck(
            |g, v| masked_cross_entropy(g, v[0], &labels, Some(&w)),
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn combine_is_linear_and_exact_at_zero() {
        let mut g = Graph::<f64>::new();
        let ce = g.param(Tensor::scalar(0.5));
        let fe = g.param(Tensor::scalar(2.0));
        let t = combine(&mut g, ce, fe, 1.0).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 2.5);
        assert_eq!(combine(&mut g, ce, fe, 0.0).unwrap(), ce);

        let logits = random_grid(4, 4, 3, 1);
        let feats = random_grid(2, 2, 5, 2);
        let labels = LabelMap::from_values(4, 4, [0, 1, 2, 255].repeat(4)).unwrap();
        let mut g = Graph::<f64>::new();
        let (lv, fv) = (g.param(logits.clone()), g.param(feats.clone()));
        let cfg = FestaConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let total = combined_loss(&mut g, lv, &labels, fv, &cfg, None).unwrap();
        let mut g2 = Graph::<f64>::new();
        let lv2 = g2.param(logits);
        let ce = masked_cross_entropy(&mut g2, lv2, &labels, None).unwrap();
        assert_eq!(g.value(total).item().unwrap().to_bits(), g2.value(ce).item().unwrap().to_bits());
    }

    #[test]
    fn class_weight_examples() {
        let mut v = vec![0u8; 90];
        v.extend([1u8; 10]);
        let w = class_weights_from_labels(&LabelMap::from_values(10, 10, v).unwrap(), 2, 0.0);
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);

        let balanced = LabelMap::from_values(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(class_weights_from_labels(&balanced, 3, 1.0), vec![1.0; 3]);

        let single = LabelMap::from_values(1, 3, vec![2, 2, 255]).unwrap();
        assert_eq!(class_weights_from_labels(&single, 4, 0.0), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn combined_gradcheck_reaches_both_inputs() {
        let logits = random_grid(4, 4, 3, 11);
        let feats = random_grid(2, 2, 3, 12);
        let labels = LabelMap::from_values(4, 4, [0, 1, 2, 255].repeat(4)).unwrap();
        let cfg = FestaConfig::default();
        let sel = select_neighbors(&feats, cfg.n_max, EPS).unwrap();
        let report = gradcheck_with(
            |g, v| {
                let ce = masked_cross_entropy(g, v[0], &labels, None)?;
                let fe = festa_loss_with_selection(g, v[1], sel.clone(), &cfg)?;
                combine(g, ce, fe, cfg.lambda)
            },
            &[logits, feats],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn selection_equals_exhaustive_search(h in 1usize..=8, w in 1usize..=8, c in 1usize..=4, seed in any::<u64>()) {
            prop_assume!(h * w >= 2);
            let f = random_grid(h, w, c, seed);
            let s = select_neighbors(&f, 4096, EPS).unwrap();
            prop_assert_eq!((s.nf, s.ff, s.ns), brute_force(&f));
        }

        #[test]
        fn selection_ignores_power_of_two_scaling(seed in any::<u64>(), k in -4i32..=4) {
            let f = random_grid(5, 6, 3, seed);
            let scaled = f.map(|x| x * 2f64.powi(k));
            prop_assert_eq!(
                select_neighbors(&f, 4096, EPS).unwrap(),
                select_neighbors(&scaled, 4096, EPS).unwrap()
            );
        }

        #[test]
        fn selection_after_any_scaling_stays_optimal(seed in any::<u64>(), a in 0.01f64..100.0) {
            let f = random_grid(4, 6, 3, seed);
            let s = select_neighbors(&f.map(|x| x * a), 4096, EPS).unwrap();
            let v = |i: usize| &f.data()[i * 3..(i + 1) * 3];
            for (k, &i) in s.anchors.iter().enumerate() {
                let sim = |j: usize| cosine_similarity(v(i), v(j), EPS).unwrap();
                for j in (0..24).filter(|&j| j != i) {
                    prop_assert!(sim(s.nf[k]) >= sim(j) - 1e-12);
                    prop_assert!(sim(s.ff[k]) <= sim(j) + 1e-12);
                }
            }
        }

        #[test]
        fn cross_entropy_ignores_unlabeled_logits(seed in any::<u64>(), junk in -50.0f64..50.0) {
            let logits = random_grid(3, 3, 4, seed);
            let labels = LabelMap::from_values(3, 3, vec![0, 255, 3, 255, 1, 2, 255, 255, 0]).unwrap();
            let mut changed = logits.clone();
            for (i, &l) in labels.values().iter().enumerate() {
                if l == 255 {
                    for c in 0..4 {
                        changed.data_mut()[i * 4 + c] = junk + c as f64;
                    }
                }
            }
            let eval = |t: Tensor<f64>| {
                let mut g = Graph::new();
                let v = g.constant(t);
                let l = masked_cross_entropy(&mut g, v, &labels, None).unwrap();
                g.value(l).item().unwrap()
            };
            prop_assert_eq!(eval(logits).to_bits(), eval(changed).to_bits());
        }
    }
}
