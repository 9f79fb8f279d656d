//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<index>.vgf     clean image (float container)
//! <dir>/landmarks/<index>.vgf  landmark map
//! <dir>/masks/<index>.vgf      facial mask
//! ```
//!
//! The manifest stores the generator spec, so the samples can also be
//! regenerated bit-exactly without reading the image files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{generate_dataset, generate_speaker_sequence, FaceSample, Keypoint, SynthFaceSpec};
use super::{save_raw, split::split_sizes, Splits};
use crate::error::{config, Result};
use crate::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: String,
    pub bits: Vec<u8>,
    pub curvature: f64,
    pub keypoints: Vec<Keypoint>,
    pub image: String,
    pub landmark: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub spec: SynthFaceSpec,
    pub count: usize,
    pub fractions: (f64, f64, f64),
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Samples for a task: i.i.d. faces for editing, one speaker for reenactment.
pub fn generate_for_task(task: Task, spec: &SynthFaceSpec, count: usize) -> Result<Vec<FaceSample>> {
    match task {
        Task::AttributeEditing => generate_dataset(spec, count),
        Task::Reenactment => generate_speaker_sequence(spec, count),
    }
}

impl DatasetManifest {
    /// Generate, split and write a dataset under `dir`.
    pub fn write_dataset(
        dir: &Path,
        task: Task,
        spec: &SynthFaceSpec,
        count: usize,
        fractions: (f64, f64, f64),
    ) -> Result<Self> {
        let samples = generate_for_task(task, spec, count)?;
        let (a, b, _) = split_sizes(count, fractions)?;
        for sub in ["images", "landmarks", "masks"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut entries = Vec::with_capacity(count);
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{:05}.vgf", s.index);
            let image = format!("images/{name}");
            let landmark = format!("landmarks/{name}");
            let mask = format!("masks/{name}");
            save_raw(&s.image, &dir.join(&image))?;
            save_raw(&s.landmark_map, &dir.join(&landmark))?;
            save_raw(&s.mask, &dir.join(&mask))?;
            let split = if i < a {
                "defense_train"
            } else if i < a + b {
                "target_train"
            } else {
                "eval"
            };
            entries.push(ManifestEntry {
                index: s.index,
                split: split.into(),
                bits: s.label.bits.clone(),
                curvature: s.curvature,
                keypoints: s.keypoints.clone(),
                image,
                landmark,
                mask,
            });
        }
        let manifest = Self {
            task,
            spec: spec.clone(),
            count,
            fractions,
            entries,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.entries.len() != manifest.count {
            return Err(config(format!(
                "manifest lists {} entries but declares {}",
                manifest.entries.len(),
                manifest.count
            )));
        }
        Ok(manifest)
    }

    /// Regenerate the samples and split them as recorded.
    pub fn samples(&self) -> Result<Splits<FaceSample>> {
        let samples = generate_for_task(self.task, &self.spec, self.count)?;
        for (s, e) in samples.iter().zip(&self.entries) {
            if s.label.bits != e.bits || s.index != e.index {
                return Err(config(format!(
                    "sample {} does not match its manifest entry",
                    e.index
                )));
            }
        }
        super::split_dataset(&samples, self.fractions)
    }
}
