//! Fully connected CRF refinement of class probability maps.
//!
//! The energy of a labeling `x` is
//!
//! ```text
//! E(x) = sum_i u_i(x_i) + sum_{i != j} [x_i != x_j] (w1 k1(i, j) + w2 k2(i, j))
//! k1 = exp(-|p_i - p_j|^2 / (2 theta1^2) - |I_i - I_j|^2 / (2 theta2^2))
//! k2 = exp(-|p_i - p_j|^2 / (2 theta3^2))
//! ```
//!
//! with unary costs `u_i(l) = -log P_i(l)`, positions `p` in pixels and
//! colours `I` in raw 0-255 units. The pairwise sum runs over ordered pairs.
//! Inference is synchronous mean field, `Q_i(l) ~ exp(-u_i(l) + m_i(l))`
//! where `m_i(l) = sum_{j != i} (w1 k1 + w2 k2) Q_j(l)`; under the Potts
//! model this is the usual update with the label-independent part dropped.
//!
//! [`mean_field_exact`] sums over all pairs and serves as the reference on
//! small images. [`mean_field_fast`] filters instead: a separable Gaussian
//! for `k2` and a sparse bilateral grid for `k1`.

mod fast;

use std::io::{Read, Write};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::annotations::LabelMap;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use fast::mean_field_fast;

/// Largest image, in pixels, the exact reference accepts.
pub const EXACT_MAX_PIXELS: usize = 4096;
/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    /// Spatial scale of the appearance kernel, in pixels.
    pub theta1: f64,
    /// Colour scale of the appearance kernel, in intensity units.
    pub theta2: f64,
    /// Spatial scale of the smoothness kernel, in pixels.
    pub theta3: f64,
    pub w1: f64,
    pub w2: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            theta1: 30.0,
            theta2: 10.0,
            theta3: 10.0,
            w1: 1.0,
            w2: 1.0,
            iterations: 5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2), ("theta3", self.theta3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("w1", self.w1), ("w2", self.w2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Param("iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn pair_kernel(&self, dist2: f64, color2: f64) -> f64 {
        self.w1 * (-dist2 / (2.0 * self.theta1 * self.theta1) - color2 / (2.0 * self.theta2 * self.theta2)).exp()
            + self.w2 * (-dist2 / (2.0 * self.theta3 * self.theta3)).exp()
    }
}

/// Per-pixel class probabilities, stored row-major with the class index
/// fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u32 = 1;
const SUM_TOLERANCE: f64 = 1e-5;

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(shape_err!("empty probability map {width}x{height}x{classes}"));
        }
        if data.len() != height * width * classes {
            return Err(shape_err!(
                "{} values for a {width}x{height}x{classes} probability map",
                data.len()
            ));
        }
        for (i, px) in data.chunks(classes).enumerate() {
            let sum: f64 = px.iter().map(|&p| p as f64).sum();
            if px.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "pixel {i} is not a distribution: {px:?}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    /// Wraps an `[H, W, K]` tensor of probabilities.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w, k) = t.hwc()?;
        Self::new(h, w, k, t.data().to_vec())
    }

    /// Normalizes `f64` rows into a map.
    fn from_f64(height: usize, width: usize, classes: usize, q: &[f64]) -> Self {
        let mut data = Vec::with_capacity(q.len());
        for px in q.chunks(classes) {
            let z: f64 = px.iter().sum();
            data.extend(px.iter().map(|&v| (v / z) as f32));
        }
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Most probable class per pixel, lowest class id on ties.
    pub fn argmax(&self) -> LabelMap {
        let values = self
            .data
            .chunks(self.classes)
            .map(|px| {
                let mut best = 0;
                for (c, &p) in px.iter().enumerate() {
                    if p > px[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::from_values(self.height, self.width, values).expect("sized to map")
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PMAP_MAGIC)?;
        for v in [PMAP_VERSION, self.height as u32, self.width as u32, self.classes as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..4] != PMAP_MAGIC {
            return Err(Error::Format("not a probability map (bad magic)".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
        if word(0) != PMAP_VERSION as usize {
            return Err(Error::Format(format!("unsupported probability map version {}", word(0))));
        }
        let (h, w, k) = (word(1), word(2), word(3));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(|| Error::Format("probability map dimensions overflow".into()))?;
        if bytes.len() != 20 + 4 * n {
            return Err(Error::Format(format!(
                "probability map payload is {} bytes, header implies {}",
                bytes.len() - 20,
                4 * n
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, k, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `-log max(P, floor)` for every pixel and class.
pub fn unary_from_probs(probs: &ProbMap, floor: f64) -> Vec<f64> {
    probs.data.iter().map(|&p| -(p as f64).max(floor).ln()).collect()
}

fn check_image(probs: &ProbMap, image: &RgbImage) -> Result<()> {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (probs.height, probs.width) {
        return Err(shape_err!(
            "image is {w}x{h}, probabilities are {}x{}",
            probs.width,
            probs.height
        ));
    }
    Ok(())
}

fn color_dist2(image: &RgbImage, i: usize, j: usize) -> f64 {
    let raw = image.as_raw();
    (0..3)
        .map(|c| {
            let d = raw[3 * i + c] as f64 - raw[3 * j + c] as f64;
            d * d
        })
        .sum()
}

/// Energy of a complete labeling, by direct summation over ordered pairs.
pub fn energy(labels: &LabelMap, probs: &ProbMap, image: &RgbImage, params: &CrfParams) -> Result<f64> {
    params.validate()?;
    check_image(probs, image)?;
    if (labels.height(), labels.width()) != (probs.height, probs.width) {
        return Err(shape_err!("labeling and probabilities differ in size"));
    }
    labels.validate(probs.classes)?;
    if !labels.is_fully_labeled() {
        return Err(Error::Validation("energy needs a complete labeling".into()));
    }
    let unary = unary_from_probs(probs, PROB_FLOOR);
    let lv = labels.values();
    let w = probs.width;
    let n = lv.len();
    let mut e: f64 = (0..n).map(|i| unary[i * probs.classes + lv[i] as usize]).sum();
    for i in 0..n {
        for j in 0..n {
            if i == j || lv[i] == lv[j] {
                continue;
            }
            let (dx, dy) = ((i % w) as f64 - (j % w) as f64, (i / w) as f64 - (j / w) as f64);
            e += params.pair_kernel(dx * dx + dy * dy, color_dist2(image, i, j));
        }
    }
    Ok(e)
}

/// One mean-field normalization: `Q_i ~ exp(-u_i + m_i)`.
pub(crate) fn update(unary: &[f64], messages: &[f64], classes: usize, q: &mut [f64]) {
    for ((qi, ui), mi) in q
        .chunks_mut(classes)
        .zip(unary.chunks(classes))
        .zip(messages.chunks(classes))
    {
        let top = ui
            .iter()
            .zip(mi)
            .map(|(u, m)| m - u)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for ((q, u), m) in qi.iter_mut().zip(ui).zip(mi) {
            *q = (m - u - top).exp();
            z += *q;
        }
        for q in qi.iter_mut() {
            *q /= z;
        }
    }
}

/// Initial marginals: normalized `exp(-u)`.
pub(crate) fn initial_q(unary: &[f64], classes: usize) -> Vec<f64> {
    let mut q = vec![0.0; unary.len()];
    update(unary, &vec![0.0; unary.len()], classes, &mut q);
    q
}

/// Mean field with messages summed over every pair of pixels.
///
/// Limited to [`EXACT_MAX_PIXELS`] pixels; use [`mean_field_fast`] beyond.
pub fn mean_field_exact(probs: &ProbMap, image: &RgbImage, params: &CrfParams) -> Result<ProbMap> {
    params.validate()?;
    check_image(probs, image)?;
    let (h, w, k) = (probs.height, probs.width, probs.classes);
    let n = h * w;
    if n > EXACT_MAX_PIXELS {
        return Err(Error::Usage(format!(
            "exact mean field is limited to {EXACT_MAX_PIXELS} pixels, got {n}; use the fast path"
        )));
    }
    let unary = unary_from_probs(probs, PROB_FLOOR);
    let mut q = initial_q(&unary, k);
    // Packed upper triangle of the pairwise kernel.
    let mut kernel = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = ((i % w) as f64 - (j % w) as f64, (i / w) as f64 - (j / w) as f64);
            kernel.push(params.pair_kernel(dx * dx + dy * dy, color_dist2(image, i, j)));
        }
    }
    let mut messages = vec![0.0; n * k];
    for _ in 0..params.iterations {
        messages.iter_mut().for_each(|m| *m = 0.0);
        let mut idx = 0;
        for i in 0..n {
            for j in i + 1..n {
                let kij = kernel[idx];
                idx += 1;
                for l in 0..k {
                    messages[i * k + l] += kij * q[j * k + l];
                    messages[j * k + l] += kij * q[i * k + l];
                }
            }
        }
        update(&unary, &messages, k, &mut q);
    }
    Ok(ProbMap::from_f64(h, w, k, &q))
}

/// Fast mean field followed by a per-pixel argmax.
pub fn refine(probs: &ProbMap, image: &RgbImage, params: &CrfParams) -> Result<LabelMap> {
    Ok(mean_field_fast(probs, image, params)?.argmax())
}
