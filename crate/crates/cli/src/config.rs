use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sparseseg::annotations::{AnnotationKind, DEFAULT_DILATION_RADIUS};
use sparseseg::crf::CrfParams;
use sparseseg::experiment::ExperimentConfig;
use sparseseg::festa::FestaConfig;
use sparseseg::model::ModelConfig;
use sparseseg::synth::{SceneSpec, ScribblePolicy};
use sparseseg::trainer::TrainConfig;
use sparseseg::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScribbleSection {
    pub level: AnnotationKind,
    /// Defaults to 7, 5 or 3 for points, lines or polygons.
    pub objects_per_class: Option<usize>,
    pub boundary_margin: u32,
    pub dilation_radius: u32,
    pub seed: u64,
}

impl Default for ScribbleSection {
    fn default() -> Self {
        Self {
            level: AnnotationKind::Line,
            objects_per_class: None,
            boundary_margin: 2,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; 3],
    pub fuse_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            widths: m.widths,
            fuse_channels: m.fuse_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Choose CRF kernel weights on the validation scene.
    pub tune_crf: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            seeds: d.seeds,
            tune_crf: d.tune_crf,
        }
    }
}

/// Everything a run depends on. The scene's class count also sizes the
/// model, the scribble simulator and the metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub scribble: ScribbleSection,
    pub model: ModelSection,
    pub festa: FestaConfig,
    pub crf: CrfParams,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    /// Classes left out of scoring.
    pub exclude: Vec<u8>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        }
    }

    /// Applies `section.key=value` overrides; values parse as JSON and fall
    /// back to strings.
    pub fn apply_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{s}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Usage(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        Ok(serde_json::from_value(doc)?)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scene.seed = s;
            self.scribble.seed = s;
            self.train.seed = s;
        }
        self
    }

    /// Fills in level-dependent defaults so the echoed config is complete.
    pub fn materialize(mut self) -> Self {
        self.scribble
            .objects_per_class
            .get_or_insert(ScribblePolicy::default_objects(self.scribble.level));
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model_config().validate()?;
        self.festa.validate()?;
        self.crf.validate()?;
        self.train.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            widths: self.model.widths,
            num_classes: self.scene.num_classes,
            fuse_channels: self.model.fuse_channels,
        }
    }

    pub fn policy(&self) -> ScribblePolicy {
        let s = &self.scribble;
        ScribblePolicy {
            level: s.level,
            objects_per_class: s.objects_per_class.unwrap_or(ScribblePolicy::default_objects(s.level)),
            boundary_margin: s.boundary_margin,
            dilation_radius: s.dilation_radius,
            seed: s.seed,
        }
    }

    pub fn experiment_config(&self, level: AnnotationKind) -> ExperimentConfig {
        ExperimentConfig {
            scene: self.scene.clone(),
            level,
            widths: self.model.widths,
            fuse_channels: self.model.fuse_channels,
            festa: self.festa.clone(),
            crf: self.crf.clone(),
            tune_crf: self.experiment.tune_crf,
            train: self.train.clone(),
            seeds: self.experiment.seeds.clone(),
            exclude: self.exclude.clone(),
        }
    }
}
