//! Seeded comparison of the weighted cross-entropy baseline against the
//! relational loss, with and without CRF refinement, on synthetic scenes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotations::{rasterize, AnnotationKind, LabelMap};
use crate::crf::{refine, CrfParams, ProbMap};
use crate::error::{Error, Result};
use crate::festa::FestaConfig;
use crate::metrics::{confusion, Scores};
use crate::model::{image_to_tensor, predict_logits, softmax, ModelConfig, Weights};
use crate::synth::{generate_scene, simulate_scribbles, Scene, SceneSpec, ScribblePolicy};
use crate::trainer::{train, Sample, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Class-weighted cross-entropy alone.
    #[serde(rename = "CE-WL")]
    CeWl,
    #[serde(rename = "CE+FESTA")]
    CeFesta,
    #[serde(rename = "CE+FESTA+CRF")]
    CeFestaCrf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CeWl, Method::CeFesta, Method::CeFestaCrf];

    pub fn name(self) -> &'static str {
        match self {
            Method::CeWl => "CE-WL",
            Method::CeFesta => "CE+FESTA",
            Method::CeFestaCrf => "CE+FESTA+CRF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Scene template; its seed is replaced per run.
    pub scene: SceneSpec,
    pub level: AnnotationKind,
    pub widths: [usize; 3],
    pub fuse_channels: usize,
    pub festa: FestaConfig,
    /// CRF settings; with `tune_crf` the kernel weights are replaced by the
    /// best pair from [`CRF_WEIGHT_GRID`].
    pub crf: CrfParams,
    /// Pick `w1` and `w2` by accuracy on the validation scene's sparse
    /// labels.
    pub tune_crf: bool,
    /// Training settings; `seed` and `class_weighted` are set per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Classes left out of scoring.
    pub exclude: Vec<u8>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::new(SceneSpec::default().num_classes);
        Self {
            scene: SceneSpec::default(),
            level: AnnotationKind::Line,
            widths: model.widths,
            fuse_channels: model.fuse_channels,
            festa: FestaConfig::default(),
            crf: CrfParams::default(),
            tune_crf: true,
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            exclude: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(level: AnnotationKind) -> Self {
        Self {
            level,
            ..Self::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            widths: self.widths,
            num_classes: self.scene.num_classes,
            fuse_channels: self.fuse_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 2 {
            return Err(Error::Param(format!("an experiment needs at least 2 seeds, got {}", self.seeds.len())));
        }
        self.scene.validate()?;
        self.model().validate()?;
        self.festa.validate()?;
        self.crf.validate()?;
        self.train.validate()
    }
}

/// Scene seeds for training, validation and testing under run seed `seed`.
pub fn scene_seeds(seed: u64) -> [u64; 3] {
    let base = seed.wrapping_mul(3);
    [base, base.wrapping_add(1), base.wrapping_add(2)]
}

/// Candidate CRF kernel weights, searched for both `w1` and `w2` in this
/// order; earlier pairs win ties.
pub const CRF_WEIGHT_GRID: [f64; 4] = [1.0, 0.5, 0.25, 0.0];

/// Kernel weights from [`CRF_WEIGHT_GRID`] with the highest accuracy on the
/// labeled pixels of `labels`.
pub fn tune_crf_weights(
    probs: &ProbMap,
    image: &image::RgbImage,
    labels: &LabelMap,
    base: &CrfParams,
) -> Result<CrfParams> {
    let mut best: Option<(f64, CrfParams)> = None;
    for w1 in CRF_WEIGHT_GRID {
        for w2 in CRF_WEIGHT_GRID {
            let params = CrfParams { w1, w2, ..base.clone() };
            let refined = refine(probs, image, &params)?;
            let oa = confusion(labels, &refined, probs.classes(), &[])?.scores()?.oa;
            if best.as_ref().is_none_or(|(b, _)| oa > *b) {
                best = Some((oa, params));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Scribbles rasterized into a sparse label map.
pub fn scribble_labels(scene: &Scene, num_classes: usize, policy: &ScribblePolicy) -> Result<LabelMap> {
    let out = simulate_scribbles(&scene.labels, num_classes, policy)?;
    let (h, w) = (scene.labels.height(), scene.labels.width());
    Ok(rasterize(&out.annotations, h, w, num_classes, policy.dilation_radius)?.labels)
}

/// Softmax probabilities of `weights` on an RGB image.
pub fn predict_probs(weights: &Weights<f32>, image: &image::RgbImage) -> Result<ProbMap> {
    let logits = predict_logits(weights, &image_to_tensor(image))?;
    ProbMap::from_tensor(&softmax(&logits)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub mean_f1: f64,
    pub oa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_f1: Stat,
    pub oa: Stat,
    pub runs: Vec<SeedScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub level: AnnotationKind,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
}

impl Report {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Markdown table of mean ± std in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | mean F1 (%) | OA (%) |\n|---|---|---|\n");
        for m in &self.methods {
            let _ = writeln!(
                s,
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                m.method.name(),
                100.0 * m.mean_f1.mean,
                100.0 * m.mean_f1.std,
                100.0 * m.oa.mean,
                100.0 * m.oa.std
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores for every method under one run seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<[Scores; 3]> {
    let k = config.scene.num_classes;
    let [train_seed, val_seed, test_seed] = scene_seeds(seed);
    let scene = |s| generate_scene(&SceneSpec { seed: s, ..config.scene.clone() });
    let sample = |s: u64| -> Result<(Scene, Sample)> {
        let sc = scene(s)?;
        let labels = scribble_labels(&sc, k, &ScribblePolicy::new(config.level, s))?;
        let sample = Sample::new(image_to_tensor(&sc.image), labels)?;
        Ok((sc, sample))
    };
    let train_set = [sample(train_seed)?.1];
    let (val_scene, val_sample) = sample(val_seed)?;
    let val_set = [val_sample];
    let test = scene(test_seed)?;
    let model = config.model();
    let score = |pred: &LabelMap| confusion(&test.labels, pred, k, &config.exclude)?.scores();

    let baseline_cfg = TrainConfig {
        seed,
        class_weighted: true,
        ..config.train.clone()
    };
    let no_festa = FestaConfig {
        lambda: 0.0,
        ..config.festa.clone()
    };
    let baseline = train(&train_set, &val_set, &model, &no_festa, &baseline_cfg)?;
    let baseline_pred = predict_probs(&baseline.weights, &test.image)?.argmax();

    let festa_cfg = TrainConfig {
        seed,
        class_weighted: false,
        ..config.train.clone()
    };
    let festa = train(&train_set, &val_set, &model, &config.festa, &festa_cfg)?;
    let crf = if config.tune_crf {
        let val_probs = predict_probs(&festa.weights, &val_scene.image)?;
        tune_crf_weights(&val_probs, &val_scene.image, &val_set[0].labels, &config.crf)?
    } else {
        config.crf.clone()
    };
    let probs = predict_probs(&festa.weights, &test.image)?;
    let refined = refine(&probs, &test.image, &crf)?;
    Ok([score(&baseline_pred)?, score(&probs.argmax())?, score(&refined)?])
}

/// Runs every seed and summarizes each method.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let mut runs: [Vec<SeedScore>; 3] = Default::default();
    for &seed in &config.seeds {
        for (slot, s) in runs.iter_mut().zip(run_seed(config, seed)?) {
            slot.push(SeedScore {
                seed,
                mean_f1: s.mean_f1,
                oa: s.oa,
            });
        }
    }
    let methods = Method::ALL
        .into_iter()
        .zip(runs)
        .map(|(method, runs)| MethodSummary {
            method,
            mean_f1: Stat::of(&runs.iter().map(|r| r.mean_f1).collect::<Vec<_>>()),
            oa: Stat::of(&runs.iter().map(|r| r.oa).collect::<Vec<_>>()),
            runs,
        })
        .collect();
    Ok(Report {
        level: config.level,
        seeds: config.seeds.clone(),
        methods,
    })
}
