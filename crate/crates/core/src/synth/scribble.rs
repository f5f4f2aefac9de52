//! Simulated annotator: turns a dense label map into sparse annotations.
//!
//! Per class, up to `objects_per_class` connected components are chosen by
//! farthest-point sampling of their centroids, starting from the largest.
//! Each chosen component then gets one annotation:
//!
//! * point: the pixel deepest inside the component (distance-transform
//!   maximum, first in row-major order on ties);
//! * line: a straight segment between two random pixels of the component's
//!   interior, resampled until every pixel of it is interior;
//! * polygon: the traced contour of the eroded component, simplified to at
//!   most 16 vertices.
//!
//! Annotations that cannot be placed degrade polygon -> line -> point, and
//! components too small to hold the erosion margin go straight to point.
//! "Interior" for points and lines means the disk used when rasterizing
//! fits inside the component, so drawn annotations never leak across its
//! boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{components, simplify_ring, squared_distance_transform, trace_contour, Component};
use crate::annotations::{
    bresenham, fill_polygon, AnnotationKind, LabelMap, SparseAnnotation, DEFAULT_DILATION_RADIUS,
};
use crate::error::{Error, Result};

const LINE_TRIES: usize = 50;
const MAX_POLYGON_VERTICES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribblePolicy {
    pub level: AnnotationKind,
    pub objects_per_class: usize,
    pub boundary_margin: u32,
    /// Radius the annotations will be dilated with when rasterized.
    pub dilation_radius: u32,
    pub seed: u64,
}

impl ScribblePolicy {
    /// Default objects per class for each level: 7 points, 5 lines, 3 polygons.
    pub fn default_objects(level: AnnotationKind) -> usize {
        match level {
            AnnotationKind::Point => 7,
            AnnotationKind::Line => 5,
            AnnotationKind::Polygon => 3,
        }
    }

    pub fn new(level: AnnotationKind, seed: u64) -> Self {
        Self {
            level,
            objects_per_class: Self::default_objects(level),
            boundary_margin: 2,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScribbleOutput {
    pub annotations: Vec<SparseAnnotation>,
    pub warnings: Vec<String>,
}

pub fn simulate_scribbles(
    dense: &LabelMap,
    num_classes: usize,
    policy: &ScribblePolicy,
) -> Result<ScribbleOutput> {
    dense.validate(num_classes)?;
    if !dense.is_fully_labeled() {
        return Err(Error::Validation(
            "annotation simulation needs a fully labeled map".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let all = components(dense);
    let mut annotations = Vec::new();
    let mut warnings = Vec::new();
    for class in 0..num_classes as u8 {
        let comps: Vec<&Component> = all.iter().filter(|c| c.class == class).collect();
        if comps.is_empty() {
            warnings.push(format!("class {class} is absent; no annotations"));
            continue;
        }
        for idx in farthest_point_order(&comps, policy.objects_per_class) {
            annotations.push(annotate(comps[idx], dense, policy, &mut rng));
        }
    }
    Ok(ScribbleOutput {
        annotations,
        warnings,
    })
}

/// Indices of up to `n` components spread out by farthest-point sampling of
/// centroids, seeded with the largest component. Ties go to the lower index.
fn farthest_point_order(comps: &[&Component], n: usize) -> Vec<usize> {
    let n = n.min(comps.len());
    if n == 0 {
        return Vec::new();
    }
    let first = (0..comps.len())
        .max_by_key(|&i| (comps[i].len(), std::cmp::Reverse(i)))
        .expect("nonempty");
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = comps.iter().map(|c| dist2(c.centroid, comps[first].centroid)).collect();
    while chosen.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..comps.len() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("fewer chosen than components");
        chosen.push(b);
        for (i, c) in comps.iter().enumerate() {
            min_d[i] = min_d[i].min(dist2(c.centroid, comps[b].centroid));
        }
    }
    chosen
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Component rasterized over its bounding box, with the box origin.
struct Patch {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    inside: Vec<bool>,
    sq_dt: Vec<u64>,
}

impl Patch {
    fn new(comp: &Component, image_width: usize) -> Self {
        let xs = comp.pixels.iter().map(|p| p % image_width);
        let ys = comp.pixels.iter().map(|p| p / image_width);
        let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
        let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut inside = vec![false; w * h];
        for p in &comp.pixels {
            inside[(p / image_width - y0) * w + (p % image_width - x0)] = true;
        }
        // Everything outside the box is outside the component, so the
        // box-local transform is exact.
        let sq_dt = squared_distance_transform(&inside, h, w);
        Self {
            x0,
            y0,
            w,
            h,
            inside,
            sq_dt,
        }
    }

    fn to_image(&self, local: usize) -> [i64; 2] {
        [(self.x0 + local % self.w) as i64, (self.y0 + local / self.w) as i64]
    }

    /// Pixels whose disk of `radius` lies inside the component.
    fn interior(&self, radius: u32) -> Vec<bool> {
        let r2 = (radius as u64).pow(2);
        self.sq_dt.iter().map(|&d| d > r2).collect()
    }
}

fn annotate(comp: &Component, dense: &LabelMap, policy: &ScribblePolicy, rng: &mut ChaCha8Rng) -> SparseAnnotation {
    let patch = Patch::new(comp, dense.width());
    let side = 2 * policy.boundary_margin as usize + 1;
    let mut level = policy.level;
    if comp.len() < side * side {
        level = AnnotationKind::Point;
    }
    if level == AnnotationKind::Polygon {
        if let Some(coords) = place_polygon(&patch, policy) {
            return SparseAnnotation {
                kind: AnnotationKind::Polygon,
                class_id: comp.class as u32,
                coords,
            };
        }
        level = AnnotationKind::Line;
    }
    if level == AnnotationKind::Line {
        if let Some(coords) = place_line(&patch, policy, rng) {
            return SparseAnnotation {
                kind: AnnotationKind::Line,
                class_id: comp.class as u32,
                coords,
            };
        }
    }
    let deepest = (0..patch.sq_dt.len())
        .max_by_key(|&i| (patch.sq_dt[i], std::cmp::Reverse(i)))
        .expect("nonempty component");
    let [x, y] = patch.to_image(deepest);
    SparseAnnotation::point(comp.class as u32, x, y)
}

fn place_line(patch: &Patch, policy: &ScribblePolicy, rng: &mut ChaCha8Rng) -> Option<Vec<[i64; 2]>> {
    let interior = patch.interior(policy.boundary_margin.max(policy.dilation_radius));
    let candidates: Vec<usize> = (0..interior.len()).filter(|&i| interior[i]).collect();
    if candidates.len() < 2 {
        return None;
    }
    for _ in 0..LINE_TRIES {
        let a = candidates[rng.random_range(0..candidates.len())];
        let b = candidates[rng.random_range(0..candidates.len())];
        if a == b {
            continue;
        }
        let (pa, pb) = (patch.to_image(a), patch.to_image(b));
        let fits = bresenham(pa, pb).into_iter().all(|[x, y]| {
            let lx = (x - patch.x0 as i64) as usize;
            let ly = (y - patch.y0 as i64) as usize;
            interior[ly * patch.w + lx]
        });
        if fits {
            return Some(vec![pa, pb]);
        }
    }
    None
}

fn place_polygon(patch: &Patch, policy: &ScribblePolicy) -> Option<Vec<[i64; 2]>> {
    let eroded = patch.interior(policy.boundary_margin);
    // Keep only the largest 8-connected piece of the eroded set.
    let piece_map = LabelMap::from_values(
        patch.h,
        patch.w,
        eroded.iter().map(|&b| b as u8).collect(),
    )
    .ok()?;
    let biggest = components(&piece_map)
        .into_iter()
        .filter(|c| c.class == 1)
        .max_by_key(|c| (c.len(), std::cmp::Reverse(c.pixels[0])))?;
    let mut piece = vec![false; eroded.len()];
    for &p in &biggest.pixels {
        piece[p] = true;
    }
    let ring = trace_contour(&piece, patch.h, patch.w);
    let mut verts = simplify_ring(&ring, MAX_POLYGON_VERTICES);
    verts.dedup();
    if verts.len() < 3 {
        return None;
    }
    let fill = fill_polygon(&verts, patch.h, patch.w);
    if fill.bits.iter().zip(&patch.inside).any(|(&f, &i)| f && !i) {
        return None;
    }
    Some(
        verts
            .into_iter()
            .map(|[x, y]| [x + patch.x0 as i64, y + patch.y0 as i64])
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{annotation_mask, rasterize};
    use crate::synth::{generate_scene, SceneSpec};

    fn square_scene() -> LabelMap {
        // 20x20 class-1 square at x, y in 10..30 on a 40x40 class-0 field.
        let mut m = LabelMap::from_values(40, 40, vec![0; 1600]).unwrap();
        for y in 10..30 {
            for x in 10..30 {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn point_on_square_is_distance_transform_argmax() {
        let dense = square_scene();
        let out = simulate_scribbles(&dense, 2, &ScribblePolicy::new(AnnotationKind::Point, 0)).unwrap();
        let pts: Vec<_> = out.annotations.iter().filter(|a| a.class_id == 1).collect();
        assert_eq!(pts.len(), 1);
        // Brute-force distance to the nearest class-0 pixel or the image edge.
        let mut best = (0i64, [0i64; 2]);
        for y in 10..30i64 {
            for x in 10..30i64 {
                let mut d = i64::MAX;
                for qy in -1..=40i64 {
                    for qx in -1..=40i64 {
                        let outside = !(10..30).contains(&qx) || !(10..30).contains(&qy);
                        if outside {
                            d = d.min((qx - x).pow(2) + (qy - y).pow(2));
                        }
                    }
                }
                if d > best.0 {
                    best = (d, [x, y]);
                }
            }
        }
        assert_eq!(best.1, [19, 19]);
        assert_eq!(pts[0].coords, vec![best.1]);
    }

    #[test]
    fn capped_by_available_components() {
        let mut m = LabelMap::from_values(20, 40, vec![0; 800]).unwrap();
        for y in 5..15 {
            for x in 5..15 {
                m.set(x, y, 1);
                m.set(x + 20, y, 1);
            }
        }
        let mut policy = ScribblePolicy::new(AnnotationKind::Point, 1);
        policy.objects_per_class = 7;
        let out = simulate_scribbles(&m, 2, &policy).unwrap();
        assert_eq!(out.annotations.iter().filter(|a| a.class_id == 1).count(), 2);
    }

    #[test]
    fn absent_class_warns() {
        let m = LabelMap::from_values(8, 8, vec![0; 64]).unwrap();
        let out = simulate_scribbles(&m, 3, &ScribblePolicy::new(AnnotationKind::Line, 0)).unwrap();
        assert_eq!(out.warnings.len(), 2);
        assert!(out.annotations.iter().all(|a| a.class_id == 0));
    }

    #[test]
    fn rejects_sparse_input() {
        let m = LabelMap::unlabeled(8, 8);
        assert!(simulate_scribbles(&m, 2, &ScribblePolicy::new(AnnotationKind::Point, 0)).is_err());
    }

    #[test]
    fn annotations_stay_inside_their_component() {
        for seed in 0..4 {
            let spec = SceneSpec {
                seed,
                ..Default::default()
            };
            let scene = generate_scene(&spec).unwrap();
            let comps = components(&scene.labels);
            let mut owner = vec![0usize; scene.labels.values().len()];
            for (ci, c) in comps.iter().enumerate() {
                for &p in &c.pixels {
                    owner[p] = ci;
                }
            }
            for level in [AnnotationKind::Point, AnnotationKind::Line, AnnotationKind::Polygon] {
                let out = simulate_scribbles(&scene.labels, 5, &ScribblePolicy::new(level, seed)).unwrap();
                for a in &out.annotations {
                    let [x, y] = a.coords[0];
                    let src = owner[y as usize * 128 + x as usize];
                    let mask = annotation_mask(a, 128, 128, DEFAULT_DILATION_RADIUS);
                    let deep = patch_depth(&comps[src], 128);
                    if a.kind == AnnotationKind::Point && deep <= 9 {
                        continue; // component too thin to hold a radius-3 disk
                    }
                    for (p, &b) in mask.bits.iter().enumerate() {
                        if b {
                            assert_eq!(owner[p], src, "seed {seed} {level}: {a:?} leaks");
                        }
                    }
                }
                rasterize(&out.annotations, 128, 128, 5, DEFAULT_DILATION_RADIUS).unwrap();
            }
        }
    }

    fn patch_depth(c: &Component, w: usize) -> u64 {
        *Patch::new(c, w).sq_dt.iter().max().unwrap()
    }

    #[test]
    fn deterministic() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let p = ScribblePolicy::new(AnnotationKind::Line, 9);
        assert_eq!(
            simulate_scribbles(&scene.labels, 5, &p).unwrap(),
            simulate_scribbles(&scene.labels, 5, &p).unwrap()
        );
    }
}
