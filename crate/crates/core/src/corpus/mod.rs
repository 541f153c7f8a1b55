//! Synthetic multi-style corpus generation, manifest ingestion, and
//! annotation-style statistics.
//!
//! All corpora share one scene geometry per scene id; each style renders
//! that geometry under its own [`StyleSpec`]. Styles may additionally stamp
//! a faint luminance grating into the image (their "source marker"); with
//! the default amplitude 0 the styles share byte-identical images and only
//! the masks differ.

mod kde;
mod manifest;
pub mod morph;
mod stats;
mod synth;

pub use kde::{kde_density, scott_bandwidth, GridSpec, KdeGrid};
pub use manifest::{load_manifest, save_corpus, ManifestDoc, ManifestEntry};
pub use stats::{image_sq, style_stats, StyleStats};
pub use synth::{generate_corpus, generate_scene, render_style, style_image, LesionBlob, Scene, SceneGeometry};

use ndarray::{Array2, Array3};

/// Lesion classes by mask id; 0 is background.
pub const LESION_CLASSES: [(u8, &str); 4] = [(1, "CWS"), (2, "EX"), (3, "HEM"), (4, "MA")];

#[derive(thiserror::Error, Debug)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("{path}: mask value {value} not in manifest palette")]
    MaskValue { path: String, value: u8 },
    #[error("{path}: image is {iw}x{ih} but mask is {mw}x{mh}")]
    ShapeMismatch {
        path: String,
        iw: u32,
        ih: u32,
        mw: u32,
        mh: u32,
    },
    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("corpus is empty")]
    Empty,
    #[error("KDE bandwidth must be > 0 (got {0})")]
    BadBandwidth(f64),
    #[error("KDE needs at least one point")]
    NoPoints,
    #[error("KDE grid captured no mass (all points outside the grid support)")]
    NoMass,
}

/// One image with its mask and labels.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `(3, h, w)`, values in `[0,1]`, quantized to the 8-bit grid.
    pub image: Array3<f32>,
    /// `(h, w)` class ids in `0..=4`.
    pub mask: Array2<u8>,
    /// Style id of the owning corpus.
    pub origin: u16,
    /// Synthetic disease-severity score in `[0,4]`, when known.
    pub severity: Option<f32>,
    pub sample_id: String,
}

impl Sample {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (_, h, w) = self.image.dim();
        if self.mask.dim() != (h, w) {
            return Err(CorpusError::InvalidSpec(format!(
                "sample {}: image {h}x{w} vs mask {:?}",
                self.sample_id,
                self.mask.dim()
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CorpusError::InvalidSpec(format!(
                "sample {}: image values outside [0,1]",
                self.sample_id
            )));
        }
        if self.mask.iter().any(|&m| m as usize >= crate::segcore::N_CLASSES) {
            return Err(CorpusError::InvalidSpec(format!(
                "sample {}: undeclared class id",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Mask rendering mode of a style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rendering {
    /// Exact lesion geometry.
    Fine,
    /// Disk dilation of the geometry (plus merging if merge_distance > 0).
    Coarse,
    /// Dilation followed by proximity merging; requires merge_distance > 0.
    DilatedMerge,
}

/// How one synthetic "dataset" annotates and watermarks its samples.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub rendering: Rendering,
    #[serde(default)]
    pub dilation_radius: u32,
    #[serde(default)]
    pub merge_distance: f64,
    /// Enable flags for (CWS, EX, HEM, MA); a disabled class is absent from
    /// this style's masks.
    #[serde(default = "all_classes")]
    pub class_enabled: [bool; 4],
    /// Amplitude of the style's luminance grating in [0,1] pixel units.
    /// 0 disables the marker entirely.
    #[serde(default)]
    pub marker_amplitude: f32,
    /// Grating orientation in degrees (0 = vertical stripes).
    #[serde(default)]
    pub marker_angle_deg: f32,
}

fn all_classes() -> [bool; 4] {
    [true; 4]
}

impl StyleSpec {
    pub fn fine(name: &str) -> Self {
        StyleSpec {
            name: name.into(),
            rendering: Rendering::Fine,
            dilation_radius: 0,
            merge_distance: 0.0,
            class_enabled: all_classes(),
            marker_amplitude: 0.0,
            marker_angle_deg: 0.0,
        }
    }

    pub fn coarse(name: &str, dilation_radius: u32, merge_distance: f64) -> Self {
        StyleSpec {
            name: name.into(),
            rendering: Rendering::Coarse,
            dilation_radius,
            merge_distance,
            class_enabled: all_classes(),
            marker_amplitude: 0.0,
            marker_angle_deg: 0.0,
        }
    }

    pub fn with_marker(mut self, amplitude: f32, angle_deg: f32) -> Self {
        self.marker_amplitude = amplitude;
        self.marker_angle_deg = angle_deg;
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.name.is_empty() {
            return Err(CorpusError::InvalidSpec("style name empty".into()));
        }
        if self.rendering == Rendering::Fine && self.dilation_radius != 0 {
            return Err(CorpusError::InvalidSpec(format!(
                "style '{}': fine rendering requires dilation_radius = 0",
                self.name
            )));
        }
        if self.rendering == Rendering::DilatedMerge && self.merge_distance <= 0.0 {
            return Err(CorpusError::InvalidSpec(format!(
                "style '{}': dilated-merge requires merge_distance > 0",
                self.name
            )));
        }
        if self.merge_distance < 0.0 {
            return Err(CorpusError::InvalidSpec(format!(
                "style '{}': negative merge_distance",
                self.name
            )));
        }
        if !(0.0..=0.1).contains(&self.marker_amplitude) {
            return Err(CorpusError::InvalidSpec(format!(
                "style '{}': marker amplitude {} outside [0, 0.1]",
                self.name, self.marker_amplitude
            )));
        }
        Ok(())
    }
}

/// Specification for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    /// Number of scenes; every style renders all of them.
    pub n_images: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub styles: Vec<StyleSpec>,
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_train_frac() -> f64 {
    0.7
}
fn default_val_frac() -> f64 {
    0.15
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_images == 0 {
            return Err(CorpusError::InvalidSpec("n_images must be > 0".into()));
        }
        if self.image_size < 16 {
            return Err(CorpusError::InvalidSpec(format!(
                "image_size {} too small",
                self.image_size
            )));
        }
        if self.styles.len() < 2 {
            return Err(CorpusError::InvalidSpec(
                "need at least 2 styles".into(),
            ));
        }
        for s in &self.styles {
            s.validate()?;
        }
        let mut names: Vec<&str> = self.styles.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.styles.len() {
            return Err(CorpusError::InvalidSpec("duplicate style names".into()));
        }
        let mut specs = self.styles.clone();
        specs.dedup_by(|a, b| {
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            a2.name = String::new();
            b2.name = String::new();
            a2 == b2
        });
        if self.train_frac <= 0.0 || self.val_frac <= 0.0 || self.train_frac + self.val_frac >= 1.0
        {
            return Err(CorpusError::InvalidSpec(
                "split fractions must be positive and leave room for test".into(),
            ));
        }
        Ok(())
    }

    /// Scene-index ranges for (train, val, test); identical across styles so
    /// no geometry leaks between splits.
    pub fn split_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.n_images;
        let n_train = ((n as f64) * self.train_frac).floor() as usize;
        let n_val = (((n as f64) * self.val_frac).floor() as usize).max(1);
        let n_train = n_train.min(n.saturating_sub(2)).max(1);
        let val_end = (n_train + n_val).min(n.saturating_sub(1));
        (0..n_train, n_train..val_end, val_end..n)
    }
}

/// All samples of one style, split into train/val/test.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub style_id: u16,
    pub spec: StyleSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
