//! On-disk formats: raw frame dumps and generated-scene directories.
//!
//! A *raw dump* stores one frame sequence: a single ASCII header line
//! `"{num_pixels} {num_frames}\n"` followed by the frames in order, each
//! pixel as a little-endian 64-bit float. The format is lossless (bit
//! patterns survive a round trip) and deterministic (equal sequences encode
//! to equal bytes).
//!
//! A *scene directory* is what the generator writes and the runner reads:
//!
//! | file            | contents                                   |
//! |-----------------|--------------------------------------------|
//! | `scene.json`    | the [`SceneConfig`] that produced the scene |
//! | `M.f64`         | observed frames (raw dump)                 |
//! | `L.f64`         | true background (raw dump)                 |
//! | `S.f64`         | true additive sparse part (raw dump)       |
//! | `O.f64`         | true foreground overlay (raw dump)         |
//! | `training.f64`  | background-only training span (raw dump)   |
//! | `truth.json`    | seed, per-frame supports and object states |

use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::geom::ImageShape;
use crate::synthdata::{FrameSequence, GroundTruth, ObjectState, Scene};

/// Scene-config file inside a scene directory.
pub const SCENE_CONFIG_FILE: &str = "scene.json";
/// Observed frames M.
pub const OBSERVED_FILE: &str = "M.f64";
/// True background L.
pub const BACKGROUND_FILE: &str = "L.f64";
/// True additive sparse part S.
pub const SPARSE_FILE: &str = "S.f64";
/// True foreground overlay O.
pub const OVERLAY_FILE: &str = "O.f64";
/// Background-only training frames.
pub const TRAINING_FILE: &str = "training.f64";
/// Seed, supports, and object states.
pub const TRUTH_FILE: &str = "truth.json";

const MAX_HEADER_LEN: usize = 64;

/// Serializes a frame sequence into the raw-dump byte format.
pub fn encode_frames(frames: &FrameSequence) -> Result<Vec<u8>> {
    let n = frames.shape.num_pixels();
    let horizon = frames.len();
    let payload = n
        .checked_mul(horizon)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("frame dump too large to address".into()))?;
    let mut bytes = Vec::with_capacity(MAX_HEADER_LEN + payload);
    bytes.extend_from_slice(format!("{n} {horizon}\n").as_bytes());
    for frame in &frames.frames {
        if frame.len() != n {
            return Err(Error::dim("frame dump pixel count", n, frame.len()));
        }
        for &v in frame.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Parses the raw-dump byte format. The stored dump carries only the pixel
/// count, so the result has a one-axis shape; use [`decode_frames_shaped`]
/// when the image geometry is known.
pub fn decode_frames(bytes: &[u8]) -> Result<FrameSequence> {
    let header_end = bytes
        .iter()
        .take(MAX_HEADER_LEN)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing raw-dump header line".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("raw-dump header is not ASCII".into()))?;
    let mut tokens = header.split(' ');
    let (n, horizon) = match (tokens.next(), tokens.next(), tokens.next()) {
        (Some(a), Some(b), None) => {
            let n: usize = a
                .parse()
                .map_err(|_| Error::Format(format!("bad pixel count {a:?} in header")))?;
            let horizon: usize = b
                .parse()
                .map_err(|_| Error::Format(format!("bad frame count {b:?} in header")))?;
            (n, horizon)
        }
        _ => {
            return Err(Error::Format(
                "raw-dump header must be \"num_pixels num_frames\"".into(),
            ))
        }
    };
    if n == 0 {
        return Err(Error::Format("raw dump needs at least one pixel".into()));
    }
    let expected = n
        .checked_mul(horizon)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("raw-dump header overflows the address space".into()))?;
    let payload = &bytes[header_end + 1..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "raw dump holds {} payload bytes but the header promises {expected}",
            payload.len()
        )));
    }
    let shape = ImageShape::new(vec![n])?;
    if horizon == 0 {
        // Skip the chunking below: with zero frames its chunk size `8 * n`
        // is unconstrained by the (empty) payload and could overflow.
        return Ok(FrameSequence {
            shape,
            frames: Vec::new(),
        });
    }
    let mut frames = Vec::with_capacity(horizon);
    for chunk in payload.chunks_exact(8 * n) {
        let frame: Array1<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunks_exact yields 8 bytes")))
            .collect();
        frames.push(frame);
    }
    Ok(FrameSequence { shape, frames })
}

/// Like [`decode_frames`], then reinterprets the flat pixels under `shape`.
pub fn decode_frames_shaped(bytes: &[u8], shape: &ImageShape) -> Result<FrameSequence> {
    let mut sequence = decode_frames(bytes)?;
    if sequence.shape.num_pixels() != shape.num_pixels() {
        return Err(Error::dim(
            "raw dump pixel count",
            shape.num_pixels(),
            sequence.shape.num_pixels(),
        ));
    }
    sequence.shape = shape.clone();
    Ok(sequence)
}

/// Writes a frame sequence as a raw dump.
pub fn write_frames(path: impl AsRef<Path>, frames: &FrameSequence) -> Result<()> {
    fs::write(path, encode_frames(frames)?)?;
    Ok(())
}

/// Reads a raw dump (one-axis shape; see [`decode_frames`]).
pub fn read_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    decode_frames(&fs::read(path)?)
}

/// Reads a raw dump and applies the known image geometry.
pub fn read_frames_shaped(path: impl AsRef<Path>, shape: &ImageShape) -> Result<FrameSequence> {
    decode_frames_shaped(&fs::read(path)?, shape)
}

/// Sidecar document pairing the generated ground truth that is not
/// frame-vector shaped (supports, kinematic states) with the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthDoc {
    seed: u64,
    supports: Vec<Vec<usize>>,
    states: Vec<Vec<ObjectState>>,
}

/// A scene directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct StoredScene {
    pub config: SceneConfig,
    pub seed: u64,
    pub scene: Scene,
    pub training: FrameSequence,
}

/// Writes a generated scene (plus its config, seed, and training span) into
/// `dir`, creating the directory if needed. Output bytes depend only on the
/// arguments, so regenerating with the same seed reproduces identical files.
pub fn save_scene_dir(
    dir: impl AsRef<Path>,
    config: &SceneConfig,
    seed: u64,
    scene: &Scene,
    training: &FrameSequence,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SCENE_CONFIG_FILE), config.to_json_pretty()?)?;

    let shape = &scene.frames.shape;
    let as_sequence = |frames: &[Array1<f64>]| FrameSequence {
        shape: shape.clone(),
        frames: frames.to_vec(),
    };
    write_frames(dir.join(OBSERVED_FILE), &scene.frames)?;
    write_frames(dir.join(BACKGROUND_FILE), &as_sequence(&scene.truth.background))?;
    write_frames(dir.join(SPARSE_FILE), &as_sequence(&scene.truth.sparse))?;
    write_frames(dir.join(OVERLAY_FILE), &as_sequence(&scene.truth.overlay))?;
    write_frames(dir.join(TRAINING_FILE), training)?;

    let truth = TruthDoc {
        seed,
        supports: scene.truth.supports.clone(),
        states: scene.truth.states.clone(),
    };
    let mut text = serde_json::to_string_pretty(&truth)?;
    text.push('\n');
    fs::write(dir.join(TRUTH_FILE), text)?;
    Ok(())
}

/// Loads a scene directory, validating cross-file consistency.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<StoredScene> {
    let dir = dir.as_ref();
    let config = SceneConfig::parse(&fs::read_to_string(dir.join(SCENE_CONFIG_FILE))?)?;
    let shape = config.shape()?;

    let observed = read_frames_shaped(dir.join(OBSERVED_FILE), &shape)?;
    let background = read_frames_shaped(dir.join(BACKGROUND_FILE), &shape)?;
    let sparse = read_frames_shaped(dir.join(SPARSE_FILE), &shape)?;
    let overlay = read_frames_shaped(dir.join(OVERLAY_FILE), &shape)?;
    let training = read_frames_shaped(dir.join(TRAINING_FILE), &shape)?;

    let truth: TruthDoc = serde_json::from_str(&fs::read_to_string(dir.join(TRUTH_FILE))?)?;

    let horizon = config.horizon;
    for (name, len) in [
        ("observed frames", observed.len()),
        ("background frames", background.len()),
        ("sparse frames", sparse.len()),
        ("overlay frames", overlay.len()),
        ("support lists", truth.supports.len()),
        ("state lists", truth.states.len()),
    ] {
        if len != horizon {
            return Err(Error::Format(format!(
                "scene directory holds {len} {name} but the config promises {horizon}"
            )));
        }
    }
    if training.len() != config.training_length {
        return Err(Error::dim(
            "training frames",
            config.training_length,
            training.len(),
        ));
    }
    if truth
        .states
        .iter()
        .any(|frame| frame.len() != config.objects.len())
    {
        return Err(Error::Format(format!(
            "state lists must describe all {} objects",
            config.objects.len()
        )));
    }

    Ok(StoredScene {
        seed: truth.seed,
        scene: Scene {
            frames: observed,
            truth: GroundTruth {
                background: background.frames,
                overlay: overlay.frames,
                sparse: sparse.frames,
                supports: truth.supports,
                states: truth.states,
            },
        },
        config,
        training,
    })
}
