//! JSON-facing configuration: the scene description consumed by the
//! generator, plus helpers adapting runtime parameters to a scene.
//!
//! Scene configs describe *what to simulate* (image geometry, background
//! model, moving objects); [`PipelineConfig`] describes *how to run* the
//! separation. The two travel in separate files so one scene can be processed
//! under many runtime settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ImageShape;
use crate::pipeline::{EpsilonConfig, PipelineConfig};
use crate::synthdata::{
    self, BackgroundModel, BoundsPolicy, FrameSequence, ObjectSpec, Scene, ScheduleEvent,
};

/// Count-based schedule entry: how many new background directions switch on
/// and how many existing ones begin decaying at `time` (a 0-based frame index
/// of the generated span).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleEntry {
    pub time: usize,
    /// Number of fresh directions activated at `time`.
    pub add: usize,
    /// Number of active directions that begin decaying at `time`; the oldest
    /// still-steady directions retire first.
    pub decay: usize,
}

/// Ceiling on a scene's pixel count (a 4096×4096 image): the pipeline's
/// dense factorizations are hopeless long before this, and the bound keeps
/// config validation's memory proportional to sane inputs.
pub const MAX_SCENE_PIXELS: usize = 1 << 24;

fn default_ar() -> f64 {
    0.95
}
fn default_stddev() -> f64 {
    1.0
}
fn default_growth() -> f64 {
    0.045
}
fn default_decay() -> f64 {
    0.9
}

/// Background model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    /// Count-based activation/decay schedule. Entries may appear in any
    /// order; they are resolved in time order.
    pub schedule: Vec<ScheduleEntry>,
    /// AR(1) coefficient in [0, 1).
    #[serde(default = "default_ar")]
    pub ar_coefficient: f64,
    /// Stationary standard deviation shared by every direction's coefficient.
    #[serde(default = "default_stddev")]
    pub stationary_stddev: f64,
    /// Per-frame additive increment of a new direction's amplitude scale.
    #[serde(default = "default_growth")]
    pub transient_growth_rate: f64,
    /// Per-frame multiplicative factor applied to decaying coefficients.
    #[serde(default = "default_decay")]
    pub decay_rate: f64,
}

impl BackgroundConfig {
    /// Total number of candidate directions implied by the schedule
    /// (saturating, so a nonsensical document cannot overflow the count).
    pub fn num_directions(&self) -> usize {
        self.schedule
            .iter()
            .fold(0usize, |acc, e| acc.saturating_add(e.add))
    }

    /// Number of directions active from frame 0 (these also drive training).
    pub fn num_initial_directions(&self) -> usize {
        self.schedule
            .iter()
            .filter(|e| e.time == 0)
            .fold(0usize, |acc, e| acc.saturating_add(e.add))
    }

    /// Expands counts into explicit direction indices: additions take fresh
    /// indices in activation order, decays retire the oldest still-steady
    /// direction first.
    pub fn resolved_schedule(&self) -> Result<Vec<ScheduleEvent>> {
        let mut entries = self.schedule.clone();
        entries.sort_by_key(|e| e.time);
        let mut next_index = 0usize;
        let mut steady: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
        let mut events = Vec::new();
        for entry in entries {
            let end = next_index.checked_add(entry.add).ok_or_else(|| {
                Error::invalid("schedule activates more directions than are addressable")
            })?;
            let add: Vec<usize> = (next_index..end).collect();
            next_index = end;
            steady.extend(add.iter().copied());
            let mut begin_decay = Vec::with_capacity(entry.decay);
            for _ in 0..entry.decay {
                let index = steady.pop_front().ok_or_else(|| {
                    Error::invalid(format!(
                        "schedule at time {} decays more directions than are active",
                        entry.time
                    ))
                })?;
                begin_decay.push(index);
            }
            if !add.is_empty() || !begin_decay.is_empty() {
                events.push(ScheduleEvent {
                    time: entry.time,
                    add,
                    begin_decay,
                });
            }
        }
        Ok(events)
    }
}

/// Scene description: image geometry, horizon, training span, background
/// model, and moving objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Image extents per axis (e.g. `[28, 28]`).
    pub dims: Vec<usize>,
    /// Number of observable frames to generate.
    pub horizon: usize,
    /// Number of pure-background training frames.
    pub training_length: usize,
    /// What to do when an object's square would cross the image border.
    #[serde(default)]
    pub bounds_policy: BoundsPolicy,
    pub background: BackgroundConfig,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

impl SceneConfig {
    /// Parses and validates a JSON scene description.
    pub fn parse(text: &str) -> Result<SceneConfig> {
        let config: SceneConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Pretty-printed JSON rendering (stable field order, trailing newline).
    pub fn to_json_pretty(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Image shape implied by `dims`.
    pub fn shape(&self) -> Result<ImageShape> {
        ImageShape::new(self.dims.clone())
    }

    /// Semantic validation beyond what the JSON schema enforces.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape()?;
        let n = shape.num_pixels();
        if n > MAX_SCENE_PIXELS {
            return Err(Error::invalid(format!(
                "image has {n} pixels; scenes are capped at {MAX_SCENE_PIXELS} \
                 (dense factorizations are far out of reach beyond that)"
            )));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        let directions = self.background.num_directions();
        if directions > n {
            return Err(Error::invalid(format!(
                "schedule activates {directions} directions but the image has only {n} pixels"
            )));
        }
        let initial = self.background.num_initial_directions();
        if self.training_length < initial.max(2) {
            return Err(Error::invalid(format!(
                "training_length {} is below the required minimum {} \
                 (at least two frames and one per initial direction)",
                self.training_length,
                initial.max(2)
            )));
        }
        self.background.resolved_schedule()?;
        synthdata::validate_objects(&self.objects, &shape)?;
        Ok(())
    }

    fn model(&self, seed: u64) -> Result<BackgroundModel> {
        let n = self.shape()?.num_pixels();
        let m = self.background.num_directions();
        BackgroundModel::from_random_directions(
            n,
            m,
            self.background.resolved_schedule()?,
            self.background.ar_coefficient,
            vec![self.background.stationary_stddev; m],
            self.background.transient_growth_rate,
            self.background.decay_rate,
            seed,
        )
    }

    /// Deterministically generates the observable scene and the training span.
    pub fn build(&self, seed: u64) -> Result<(Scene, FrameSequence)> {
        self.validate()?;
        let shape = self.shape()?;
        let model = self.model(seed)?;
        let background = synthdata::gen_background(&model, self.horizon, seed)?;
        let foreground = synthdata::gen_foreground(
            &self.objects,
            &shape,
            self.horizon,
            self.bounds_policy,
            seed,
        )?;
        let scene = synthdata::compose(&background, &foreground)?;
        let training = synthdata::gen_training(&model, self.training_length, seed)?;
        Ok((scene, training))
    }
}

/// The bundled benchmark scene: 28×28 pixels over 100 frames, 350 steady
/// background directions with one addition (frame 5) and one decay onset
/// (frame 30), and two 11×11 blocks of distinct intensity on parallel tracks.
pub const BUNDLED_SCENE_JSON: &str = include_str!("../resources/two_blocks_28x28.json");

/// Name under which the bundled scene is addressable from the command line.
pub const BUNDLED_SCENE_NAME: &str = "two-blocks-28x28";

/// Parses the bundled benchmark scene.
pub fn bundled_scene() -> SceneConfig {
    SceneConfig::parse(BUNDLED_SCENE_JSON).expect("bundled scene config is valid")
}

/// Runtime parameters adapted to a scene: the AR coefficient is copied from
/// the generating model and the first-frame data-fit radius is opened up to a
/// scale that tolerates transient background energy.
pub fn pipeline_defaults_for(scene: &SceneConfig) -> PipelineConfig {
    PipelineConfig {
        ar_coefficient: scene.background.ar_coefficient,
        epsilon: EpsilonConfig {
            init: 1.0,
            ..EpsilonConfig::default()
        },
        ..PipelineConfig::default()
    }
}

/// Parses and validates a JSON runtime configuration.
pub fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SceneConfig {
        SceneConfig {
            dims: vec![8, 8],
            horizon: 6,
            training_length: 40,
            bounds_policy: BoundsPolicy::Clamp,
            background: BackgroundConfig {
                schedule: vec![ScheduleEntry {
                    time: 0,
                    add: 5,
                    decay: 0,
                }],
                ar_coefficient: 0.9,
                stationary_stddev: 1.0,
                transient_growth_rate: 0.045,
                decay_rate: 0.9,
            },
            objects: vec![ObjectSpec {
                half_width: 1,
                intensity: 25.0,
                initial_position: vec![3.1, 3.9],
                initial_velocity: vec![0.1, -0.1],
                accel_variance: 0.0,
            }],
        }
    }

    #[test]
    fn bundled_scene_matches_the_benchmark_shape() {
        let scene = bundled_scene();
        assert_eq!(scene.dims, vec![28, 28]);
        assert_eq!(scene.shape().unwrap().num_pixels(), 784);
        assert_eq!(scene.horizon, 100);
        assert_eq!(scene.training_length, 1000);
        assert_eq!(scene.background.num_directions(), 351);
        assert_eq!(scene.background.num_initial_directions(), 350);
        assert_eq!(scene.objects.len(), 2);
        for object in &scene.objects {
            assert_eq!(object.half_width, 5);
        }
        assert_eq!(scene.objects[0].intensity, 80.0);
        assert_eq!(scene.objects[1].intensity, 50.0);
    }

    #[test]
    fn count_schedule_resolves_to_explicit_indices() {
        let background = BackgroundConfig {
            schedule: vec![
                ScheduleEntry {
                    time: 30,
                    add: 0,
                    decay: 1,
                },
                ScheduleEntry {
                    time: 0,
                    add: 3,
                    decay: 0,
                },
                ScheduleEntry {
                    time: 5,
                    add: 1,
                    decay: 0,
                },
            ],
            ar_coefficient: 0.95,
            stationary_stddev: 1.0,
            transient_growth_rate: 0.045,
            decay_rate: 0.9,
        };
        let events = background.resolved_schedule().unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].time, 0);
        assert_eq!(events[0].add, vec![0, 1, 2]);
        assert!(events[0].begin_decay.is_empty());
        assert_eq!(events[1].time, 5);
        assert_eq!(events[1].add, vec![3]);
        assert_eq!(events[2].time, 30);
        assert!(events[2].add.is_empty());
        assert_eq!(events[2].begin_decay, vec![0]);
    }

    #[test]
    fn schedule_rejects_overdrawn_decay() {
        let background = BackgroundConfig {
            schedule: vec![ScheduleEntry {
                time: 0,
                add: 0,
                decay: 1,
            }],
            ar_coefficient: 0.95,
            stationary_stddev: 1.0,
            transient_growth_rate: 0.045,
            decay_rate: 0.9,
        };
        assert!(background.resolved_schedule().is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let config = tiny_config();
        let (scene_a, training_a) = config.build(9).unwrap();
        let (scene_b, training_b) = config.build(9).unwrap();
        assert_eq!(scene_a.frames.len(), 6);
        for t in 0..scene_a.frames.len() {
            assert_eq!(scene_a.frames.frames[t], scene_b.frames.frames[t]);
            assert_eq!(scene_a.truth.supports[t], scene_b.truth.supports[t]);
        }
        for t in 0..training_a.len() {
            assert_eq!(training_a.frames[t], training_b.frames[t]);
        }
        let (scene_c, _) = config.build(10).unwrap();
        assert_ne!(scene_a.frames.frames[0], scene_c.frames.frames[0]);
    }

    #[test]
    fn built_frames_conserve_and_carry_the_object() {
        let config = tiny_config();
        let (scene, _) = config.build(4).unwrap();
        for t in 0..scene.frames.len() {
            assert_eq!(scene.truth.supports[t].len(), 9, "3×3 block at frame {t}");
            let m = &scene.frames.frames[t];
            let l = &scene.truth.background[t];
            let s = &scene.truth.sparse[t];
            for i in 0..m.len() {
                assert_eq!(m[i], l[i] + s[i]);
            }
        }
    }

    #[test]
    fn parse_rejects_malformed_and_invalid_documents() {
        assert!(SceneConfig::parse("{").is_err());
        assert!(SceneConfig::parse("{\"unknown\": 1}").is_err());

        let mut no_frames = tiny_config();
        no_frames.horizon = 0;
        let text = no_frames.to_json_pretty().unwrap();
        assert!(SceneConfig::parse(&text).is_err());

        let mut short_training = tiny_config();
        short_training.training_length = 3;
        let text = short_training.to_json_pretty().unwrap();
        assert!(SceneConfig::parse(&text).is_err());

        let mut clashing = tiny_config();
        clashing.objects.push(clashing.objects[0].clone());
        let text = clashing.to_json_pretty().unwrap();
        assert!(SceneConfig::parse(&text).is_err(), "duplicate intensities");
    }

    #[test]
    fn scene_config_json_round_trips() {
        let config = tiny_config();
        let text = config.to_json_pretty().unwrap();
        let back = SceneConfig::parse(&text).unwrap();
        assert_eq!(back.dims, config.dims);
        assert_eq!(back.horizon, config.horizon);
        assert_eq!(back.background.schedule, config.background.schedule);
        assert_eq!(back.objects.len(), config.objects.len());
    }

    #[test]
    fn pipeline_defaults_inherit_the_scene_ar_coefficient() {
        let mut scene = tiny_config();
        scene.background.ar_coefficient = 0.8;
        let cfg = pipeline_defaults_for(&scene);
        assert_eq!(cfg.ar_coefficient, 0.8);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.epsilon.init, 1.0);
    }

    #[test]
    fn pipeline_config_parser_validates() {
        assert!(parse_pipeline_config("{}").is_ok());
        assert!(parse_pipeline_config("{\"solver_tol\": 0}").is_err());
        assert!(parse_pipeline_config("not json").is_err());
    }
}
