//! Sparse point, line and polygon annotations and their rasterization into
//! label maps.
//!
//! Coordinates are integer pixel positions `[x, y]` with `x` the column and
//! `y` the row. Points and lines are dilated with a discrete disk after
//! drawing; polygons are filled and never dilated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value of pixels that carry no annotation.
pub const UNLABELED: u8 = 255;
/// Largest number of classes a [`LabelMap`] can hold.
pub const MAX_CLASSES: usize = 254;
/// Dilation radius applied to point and line annotations by default.
pub const DEFAULT_DILATION_RADIUS: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Point,
    Line,
    Polygon,
}

impl AnnotationKind {
    fn min_coords(self) -> usize {
        match self {
            AnnotationKind::Point => 1,
            AnnotationKind::Line => 2,
            AnnotationKind::Polygon => 3,
        }
    }
}

impl std::str::FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Self::Point),
            "line" => Ok(Self::Line),
            "polygon" => Ok(Self::Polygon),
            other => Err(Error::Validation(format!("unknown annotation kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnnotationKind::Point => "point",
            AnnotationKind::Line => "line",
            AnnotationKind::Polygon => "polygon",
        })
    }
}

/// One annotator interaction: a point, a polyline or a polygon, tagged
/// with a class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseAnnotation {
    pub kind: AnnotationKind,
    pub class_id: u32,
    pub coords: Vec<[i64; 2]>,
}

impl SparseAnnotation {
    pub fn point(class_id: u32, x: i64, y: i64) -> Self {
        Self {
            kind: AnnotationKind::Point,
            class_id,
            coords: vec![[x, y]],
        }
    }

    pub fn validate(&self, height: usize, width: usize, num_classes: usize) -> Result<()> {
        let n = self.coords.len();
        let ok = match self.kind {
            AnnotationKind::Point => n == 1,
            kind => n >= kind.min_coords(),
        };
        if !ok {
            return Err(Error::Validation(format!(
                "{} annotation has {n} coordinates",
                self.kind
            )));
        }
        if self.class_id as usize >= num_classes {
            return Err(Error::Validation(format!(
                "class_id {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        for &[x, y] in &self.coords {
            if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                return Err(Error::Validation(format!(
                    "coordinate ({x}, {y}) outside {width}x{height} image"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class ids, row-major, with [`UNLABELED`] for missing labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![UNLABELED; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {width}x{height} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Checks every value is a class id below `num_classes` or [`UNLABELED`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::Validation(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        if let Some(v) = self
            .values
            .iter()
            .find(|&&v| v != UNLABELED && v as usize >= num_classes)
        {
            return Err(Error::Validation(format!(
                "label {v} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.values[y * self.width + x] = value;
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.values.iter().all(|&v| v != UNLABELED)
    }

    pub fn labeled_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Sub-window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> LabelMap {
        let mut values = Vec::with_capacity(width * height);
        for row in y..y + height {
            values.extend_from_slice(&self.values[row * self.width + x..row * self.width + x + width]);
        }
        LabelMap {
            height,
            width,
            values,
        }
    }
}

/// A binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.bits[y * self.width + x] = true;
    }

    /// Sets `(x, y)` if it lies inside the raster.
    pub fn set_checked(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize);
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Offsets `(dx, dy)` of the discrete disk `dx^2 + dy^2 <= r^2`.
pub fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Morphological dilation with the discrete disk of `radius`, clipped at
/// the raster borders.
pub fn dilate_disk(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let disk = disk_offsets(radius);
    let mut out = BinaryMask::new(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                for &(dx, dy) in &disk {
                    out.set_checked(x as i64 + dx, y as i64 + dy);
                }
            }
        }
    }
    out
}

/// 8-connected Bresenham segment from `a` to `b`, endpoints included.
pub fn bresenham(a: [i64; 2], b: [i64; 2]) -> Vec<[i64; 2]> {
    let [mut x, mut y] = a;
    let dx = (b[0] - x).abs();
    let dy = -(b[1] - y).abs();
    let sx = if x < b[0] { 1 } else { -1 };
    let sy = if y < b[1] { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push([x, y]);
        if x == b[0] && y == b[1] {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Pixels of a closed polygon under the even-odd rule, with every grid
/// point lying exactly on an edge included.
pub fn fill_polygon(coords: &[[i64; 2]], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let n = coords.len();
    if n == 0 {
        return mask;
    }
    let ymin = coords.iter().map(|c| c[1]).min().unwrap().max(0);
    let ymax = coords.iter().map(|c| c[1]).max().unwrap().min(height as i64 - 1);

    // Crossing x positions as exact fractions num/den with den > 0.
    let mut crossings: Vec<(i128, i128)> = Vec::new();
    for y in ymin..=ymax {
        crossings.clear();
        for i in 0..n {
            let [ax, ay] = coords[i];
            let [bx, by] = coords[(i + 1) % n];
            if (ay <= y && y < by) || (by <= y && y < ay) {
                let (mut num, mut den) = (
                    ax as i128 * (by - ay) as i128 + (y - ay) as i128 * (bx - ax) as i128,
                    (by - ay) as i128,
                );
                if den < 0 {
                    num = -num;
                    den = -den;
                }
                crossings.push((num, den));
            }
        }
        crossings.sort_by(|p, q| (p.0 * q.1).cmp(&(q.0 * p.1)));
        for pair in crossings.chunks_exact(2) {
            let (ln, ld) = pair[0];
            let (rn, rd) = pair[1];
            // Strictly between the two crossings.
            let first = ln.div_euclid(ld) + 1;
            let last = (rn + rd - 1).div_euclid(rd) - 1;
            for x in first.max(0)..=last.min(width as i128 - 1) {
                mask.set(x as usize, y as usize);
            }
        }
    }
    for i in 0..n {
        let [ax, ay] = coords[i];
        let [bx, by] = coords[(i + 1) % n];
        let (dx, dy) = (bx - ax, by - ay);
        let g = gcd(dx.abs(), dy.abs()).max(1);
        for t in 0..=g {
            mask.set_checked(ax + t * dx / g, ay + t * dy / g);
        }
    }
    mask
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Footprint of a single annotation before it is written into a label map.
pub fn annotation_mask(
    annotation: &SparseAnnotation,
    height: usize,
    width: usize,
    dilation_radius: u32,
) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    match annotation.kind {
        AnnotationKind::Point => {
            let [x, y] = annotation.coords[0];
            mask.set_checked(x, y);
            dilate_disk(&mask, dilation_radius)
        }
        AnnotationKind::Line => {
            for seg in annotation.coords.windows(2) {
                for [x, y] in bresenham(seg[0], seg[1]) {
                    mask.set_checked(x, y);
                }
            }
            dilate_disk(&mask, dilation_radius)
        }
        AnnotationKind::Polygon => fill_polygon(&annotation.coords, height, width),
    }
}

/// A rasterized annotation set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rasterization {
    pub labels: LabelMap,
    /// Pixels relabeled to a different class by a later annotation.
    pub conflicts: usize,
}

/// Draws annotations in order into a fresh label map. Later annotations
/// overwrite earlier ones; each overwrite that changes a class counts as a
/// conflict.
pub fn rasterize(
    annotations: &[SparseAnnotation],
    height: usize,
    width: usize,
    num_classes: usize,
    dilation_radius: u32,
) -> Result<Rasterization> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::Validation(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    for a in annotations {
        a.validate(height, width, num_classes)?;
    }
    let mut labels = LabelMap::unlabeled(height, width);
    let mut conflicts = 0;
    for a in annotations {
        let mask = annotation_mask(a, height, width, dilation_radius);
        let class = a.class_id as u8;
        for (value, _) in labels.values.iter_mut().zip(&mask.bits).filter(|(_, &b)| b) {
            if *value != UNLABELED && *value != class {
                conflicts += 1;
            }
            *value = class;
        }
    }
    Ok(Rasterization { labels, conflicts })
}

/// Labeled-pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub per_class: Vec<u64>,
    pub total: u64,
}

/// Counts labeled pixels; `per_class` runs up to the largest class present.
pub fn count_labeled(map: &LabelMap) -> LabelCounts {
    let mut per_class = Vec::new();
    for &v in map.values().iter().filter(|&&v| v != UNLABELED) {
        let v = v as usize;
        if v >= per_class.len() {
            per_class.resize(v + 1, 0);
        }
        per_class[v] += 1;
    }
    let total = per_class.iter().sum();
    LabelCounts { per_class, total }
}

pub fn annotations_from_json(text: &str) -> Result<Vec<SparseAnnotation>> {
    Ok(serde_json::from_str(text)?)
}

pub fn annotations_to_json(annotations: &[SparseAnnotation]) -> Result<String> {
    Ok(serde_json::to_string_pretty(annotations)?)
}
