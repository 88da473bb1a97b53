//! Sequence data: animation matrices, audio clips, template meshes, region
//! masks, dataset splits and the on-disk formats that carry them.

pub mod audio;
pub mod container;
pub mod manifest;
pub mod mask;
pub mod split;
pub mod synthetic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audio::{AudioClip, TARGET_SAMPLE_RATE};
pub use manifest::{load_rig_dataset, load_vertex_dataset, MotionEncoding, RigSample, VertexSample};
pub use mask::RegionMask;
pub use split::{make_split, DatasetSplit, SplitEntry, SplitPolicy};
pub use synthetic::{generate_synthetic_dataset, SyntheticSample};

/// What the columns of an [`AnimationSequence`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    /// Per-vertex xyz offsets from a neutral template, `D = 3V`.
    VertexDisplacement,
    /// Rig control or blendshape weights, `D = C`.
    RigControl,
}

impl MotionKind {
    /// Number of columns that make up one vertex (3) or one control (1).
    pub fn group_size(self) -> usize {
        match self {
            MotionKind::VertexDisplacement => 3,
            MotionKind::RigControl => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::VertexDisplacement => "vertex-displacement",
            MotionKind::RigControl => "rig-control",
        }
    }
}

/// An `N x D` motion matrix plus the metadata needed to pair it with audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AnimationSequence {
    frames: Array2<f64>,
    kind: MotionKind,
    fps: f64,
    subject: String,
    sentence: String,
}

impl AnimationSequence {
    pub fn new(
        frames: Array2<f64>,
        kind: MotionKind,
        fps: f64,
        subject: impl Into<String>,
        sentence: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = frames.dim();
        if n == 0 {
            return Err(Error::Validation("animation sequence has no frames".into()));
        }
        if d == 0 {
            return Err(Error::Validation("animation sequence has zero width".into()));
        }
        if kind == MotionKind::VertexDisplacement && d % 3 != 0 {
            return Err(Error::Validation(format!(
                "vertex-displacement width {d} is not a multiple of 3"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {fps}")));
        }
        if let Some(((r, c), v)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {v} at frame {r}, column {c}"
            )));
        }
        Ok(Self {
            frames,
            kind,
            fps,
            subject: subject.into(),
            sentence: sentence.into(),
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Number of vertices (vertex kind) or controls (rig kind).
    pub fn n_groups(&self) -> usize {
        self.dim() / self.kind.group_size()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_frames() as f64 / self.fps
    }
}

/// Neutral-pose mesh of one subject, `V x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMesh {
    pub vertices: Array2<f64>,
    pub topology: String,
}

impl TemplateMesh {
    pub fn new(vertices: Array2<f64>, topology: impl Into<String>) -> Result<Self> {
        if vertices.ncols() != 3 || vertices.nrows() == 0 {
            return Err(Error::Validation(format!(
                "template must be V x 3 with V >= 1, got {:?}",
                vertices.dim()
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("template has non-finite vertices".into()));
        }
        Ok(Self {
            vertices,
            topology: topology.into(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.nrows()
    }

    /// The template flattened into one row of length `3V` (x0 y0 z0 x1 ...).
    pub fn flat_row(&self) -> ndarray::Array1<f64> {
        self.vertices.iter().copied().collect()
    }
}
