//! Deterministic synthetic scenes and simulated annotators.
//!
//! Scenes are Voronoi partitions whose cells carry class ids, rendered with
//! a per-class mean colour plus Gaussian pixel noise. When there are at
//! least three classes the last one is reserved for small objects, stamped
//! as scattered rectangles in the way cars dot an aerial image.

mod geometry;
mod scribble;

pub use geometry::{components, squared_distance_transform, trace_contour, Component};
pub use scribble::{simulate_scribbles, ScribbleOutput, ScribblePolicy};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{LabelMap, MAX_CLASSES};
use crate::error::{Error, Result};

/// Largest class count the generator supports.
pub const MAX_SCENE_CLASSES: usize = 12;

const PALETTE: [[u8; 3]; MAX_SCENE_CLASSES] = [
    [160, 160, 160],
    [110, 90, 140],
    [120, 170, 90],
    [60, 120, 60],
    [210, 200, 70],
    [90, 130, 190],
    [200, 120, 80],
    [140, 100, 60],
    [70, 70, 70],
    [220, 180, 200],
    [100, 200, 200],
    [180, 60, 60],
];

const MAX_ATTEMPTS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Standard deviation of the per-pixel, per-channel noise in 0-255 units.
    pub noise_sigma: f64,
    /// Every class must cover at least this many pixels.
    pub min_region: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            num_classes: 5,
            noise_sigma: 30.0,
            min_region: 100,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_SCENE_CLASSES.min(MAX_CLASSES) {
            return Err(Error::Validation(format!(
                "num_classes must be in 2..={MAX_SCENE_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Validation(format!(
                "scene must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Class stamped as small rectangles, if any.
    pub fn small_object_class(&self) -> Option<usize> {
        (self.num_classes >= 3).then_some(self.num_classes - 1)
    }
}

/// Mean colour of class `class` in generated scenes.
pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class]
}

/// A rendered image with its dense ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    pub labels: LabelMap,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let labels = layout(spec, &mut rng);
        let mut counts = vec![0usize; spec.num_classes];
        for &v in labels.values() {
            counts[v as usize] += 1;
        }
        if counts.iter().all(|&c| c >= spec.min_region) {
            let image = render(&labels, spec.noise_sigma, &mut rng);
            return Ok(Scene { image, labels });
        }
    }
    Err(Error::Generation(format!(
        "no layout gave every class {} pixels in {MAX_ATTEMPTS} attempts",
        spec.min_region
    )))
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let small = spec.small_object_class();
    let region_classes = small.unwrap_or(spec.num_classes);
    let n_sites = (2 * region_classes).max(h * w / 1024);
    let sites: Vec<(f64, f64, u8)> = (0..n_sites)
        .map(|i| {
            let x = rng.random_range(0.0..w as f64);
            let y = rng.random_range(0.0..h as f64);
            let class = if i < region_classes {
                i
            } else {
                rng.random_range(0..region_classes)
            };
            (x, y, class as u8)
        })
        .collect();
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sx, sy, c) in &sites {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            values.push(best.1);
        }
    }
    let mut labels = LabelMap::from_values(h, w, values).expect("sized to scene");
    if let Some(class) = small {
        let n_rects = 6.max(h * w / 1500);
        for _ in 0..n_rects {
            let (mut rh, mut rw) = (rng.random_range(4..=7), rng.random_range(8..=13));
            if rng.random_bool(0.5) {
                std::mem::swap(&mut rh, &mut rw);
            }
            let rh = rh.min(h);
            let rw = rw.min(w);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    labels.set(x, y, class as u8);
                }
            }
        }
    }
    labels
}

fn render(labels: &LabelMap, sigma: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mut image = RgbImage::new(labels.width() as u32, labels.height() as u32);
    for (px, &class) in image.pixels_mut().zip(labels.values()) {
        let mean = PALETTE[class as usize];
        for ch in 0..3 {
            let v = match &noise {
                Some(n) => (mean[ch] as f64 + n.sample(rng)).round().clamp(0.0, 255.0) as u8,
                None => mean[ch],
            };
            px.0[ch] = v;
        }
    }
    image
}
