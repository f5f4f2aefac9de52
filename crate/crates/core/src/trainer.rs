//! Mini-batch training with Nadam, sliding-window crops and a plateau
//! learning-rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::LabelMap;
use crate::autodiff::Graph;
use crate::error::{shape_err, Error, Result};
use crate::festa::{class_weights_from_labels, combined_loss, masked_cross_entropy, FestaConfig};
use crate::model::{forward, init_weights, ModelConfig, Weights};
use crate::tensor::{Real, Tensor};

/// The learning rate is divided at most this many times.
pub const MAX_DECAYS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub stride: usize,
    pub max_steps: usize,
    /// Validation loss is computed every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_delta: f64,
    pub lr_decay_factor: f64,
    /// Weight the cross-entropy by inverse class frequency of the training
    /// labels.
    pub class_weighted: bool,
    pub weight_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 5,
            crop: 64,
            stride: 16,
            max_steps: 200,
            eval_every: 10,
            plateau_patience: 10,
            plateau_delta: 1e-4,
            lr_decay_factor: 10.0,
            class_weighted: false,
            weight_smoothing: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(Error::Param(format!("crop must be a positive multiple of 8, got {}", self.crop)));
        }
        if self.stride == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Param("stride, batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::Param(format!(
                "lr_decay_factor must be >= 1, got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.weight_smoothing >= 0.0) {
            return Err(Error::Param("weight_smoothing must be >= 0".into()));
        }
        Ok(())
    }
}

/// Nadam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptState {
    pub fn new<F: Real>(params: &[Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One Nadam update (Dozat's formulation) at learning rate `lr`.
pub fn nadam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || state.m[i].len() != p.len() {
            return Err(shape_err!("parameter {i} is {:?}, gradient is {:?}", p.dims(), g.dims()));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in parameter tensor {i}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = Real::to_f64(*gv);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let delta = lr * (b1 * m_hat + (1.0 - b1) * g / c1) / (v_hat.sqrt() + config.eps);
            *pv = F::from_f64(Real::to_f64(*pv) - delta);
        }
    }
    Ok(())
}

/// An image tensor `[H, W, C]` with its sparse labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let (h, w, _) = image.hwc()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(shape_err!(
                "image is {w}x{h}, labels are {}x{}",
                labels.width(),
                labels.height()
            ));
        }
        Ok(Self { image, labels })
    }
}

fn axis_starts(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - crop).step_by(stride).collect();
    if *starts.last().expect("len >= crop") != len - crop {
        starts.push(len - crop);
    }
    starts
}

/// Top-left corners `(row, col)` of the sliding window, row-major, with an
/// extra window flush against the bottom and right edges when the stride
/// does not land there.
pub fn crop_corners(height: usize, width: usize, crop: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 || crop == 0 {
        return Err(Error::Param("crop and stride must be at least 1".into()));
    }
    if height < crop || width < crop {
        return Err(Error::Usage(format!("{width}x{height} image is smaller than crop {crop}")));
    }
    let cols = axis_starts(width, crop, stride);
    Ok(axis_starts(height, crop, stride)
        .into_iter()
        .flat_map(|y| cols.iter().map(move |&x| (y, x)))
        .collect())
}

fn crop_tensor(t: &Tensor<f32>, y: usize, x: usize, size: usize) -> Tensor<f32> {
    let (_, w, c) = t.hwc().expect("rank 3");
    let mut data = Vec::with_capacity(size * size * c);
    for row in y..y + size {
        let start = (row * w + x) * c;
        data.extend_from_slice(&t.data()[start..start + size * c]);
    }
    Tensor::new(vec![size, size, c], data).expect("crop dims")
}

/// Every sliding-window crop of `sample`, including unlabeled ones.
pub fn make_crops(sample: &Sample, crop: usize, stride: usize) -> Result<Vec<Sample>> {
    let (h, w, _) = sample.image.hwc()?;
    Ok(crop_corners(h, w, crop, stride)?
        .into_iter()
        .map(|(y, x)| Sample {
            image: crop_tensor(&sample.image, y, x, crop),
            labels: sample.labels.crop(x, y, crop, crop),
        })
        .collect())
}

fn labeled_crops(set: &[Sample], config: &TrainConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in set {
        out.extend(
            make_crops(s, config.crop, config.stride)?
                .into_iter()
                .filter(|c| c.labels.labeled_count() > 0),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    /// Present on evaluation steps when a validation set was given.
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// CSV with header `step,train_loss,val_loss,lr`; missing validation
/// losses are left empty.
pub fn write_history<W: Write>(mut out: W, history: &[HistoryRow]) -> Result<()> {
    writeln!(out, "step,train_loss,val_loss,lr")?;
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.step, r.train_loss, val, r.lr)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub weights: Weights<f32>,
    pub history: Vec<HistoryRow>,
    /// Class weights used in the cross-entropy, if any.
    pub class_weights: Option<Vec<f64>>,
}

/// Class weights from every training label, or `None` when unweighted.
fn training_class_weights(set: &[Sample], k: usize, config: &TrainConfig) -> Option<Vec<f64>> {
    if !config.class_weighted {
        return None;
    }
    let mut counts = Vec::new();
    for s in set {
        counts.extend_from_slice(s.labels.values());
    }
    let all = LabelMap::from_values(1, counts.len(), counts).expect("flat map");
    Some(class_weights_from_labels(&all, k, config.weight_smoothing))
}

/// Mean masked cross-entropy of `weights` over the labeled crops of `set`.
pub fn mean_cross_entropy(
    weights: &Weights<f32>,
    set: &[Sample],
    config: &TrainConfig,
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    let crops = labeled_crops(set, config)?;
    if crops.is_empty() {
        return Err(Error::Data("no crop contains a labeled pixel".into()));
    }
    let mut total = 0.0;
    for c in &crops {
        let mut g = Graph::<f32>::new();
        let x = g.constant(c.image.clone());
        let p = weights.register(&mut g, false);
        let out = forward(&mut g, x, &weights.config, &p)?;
        let ce = masked_cross_entropy(&mut g, out.logits, &c.labels, class_weights)?;
        total += g.value(ce).item()? as f64;
    }
    Ok(total / crops.len() as f64)
}

/// Trains a freshly initialized model.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    model: &ModelConfig,
    festa: &FestaConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let init = init_weights(model, config.seed)?;
    train_from(init, train_set, val_set, festa, config)
}

/// Trains starting from `weights`.
pub fn train_from(
    mut weights: Weights<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    festa: &FestaConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    festa.validate()?;
    weights.config.validate()?;
    let k = weights.config.num_classes;
    for s in train_set.iter().chain(val_set) {
        s.labels.validate(k)?;
    }
    let crops = labeled_crops(train_set, config)?;
    if crops.is_empty() {
        return Err(Error::Data("no training crop contains a labeled pixel".into()));
    }
    let val_crops = labeled_crops(val_set, config)?;
    let class_weights = training_class_weights(train_set, k, config);
    let cw = class_weights.as_deref();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    let mut cursor = order.len();
    let mut state = OptState::new(&weights.tensors);
    let mut lr = config.lr;
    let mut decays = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::with_capacity(config.max_steps);

    for step in 1..=config.max_steps {
        let mut grads: Vec<Tensor<f32>> = weights.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let c = &crops[order[cursor]];
            cursor += 1;
            let mut g = Graph::<f32>::new();
            let x = g.constant(c.image.clone());
            let p = weights.register(&mut g, true);
            let out = forward(&mut g, x, &weights.config, &p)?;
            let loss = combined_loss(&mut g, out.logits, &c.labels, out.features, festa, cw)?;
            let value = g.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!("loss became {value} at step {step}")));
            }
            batch_loss += value;
            g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&p) {
                let gv = g.grad(v).expect("trainable parameter");
                for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += b;
                }
            }
        }
        let scale = 1.0 / config.batch_size as f32;
        for acc in &mut grads {
            acc.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        nadam_step(&mut weights.tensors, &grads, &mut state, config, lr)?;

        let mut val_loss = None;
        if step % config.eval_every == 0 && !val_crops.is_empty() {
            let v = mean_cross_entropy(&weights, val_set, config, cw)?;
            if !v.is_finite() {
                return Err(Error::Training(format!("validation loss became {v} at step {step}")));
            }
            if v < best - config.plateau_delta {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.plateau_patience && decays < MAX_DECAYS {
                    lr /= config.lr_decay_factor;
                    decays += 1;
                    stale = 0;
                }
            }
            val_loss = Some(v);
        }
        history.push(HistoryRow {
            step,
            train_loss: batch_loss / config.batch_size as f64,
            val_loss,
            lr,
        });
    }
    Ok(TrainOutput {
        weights,
        history,
        class_weights,
    })
}
