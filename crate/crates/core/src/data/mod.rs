//! Dataset schema, the line-oriented manifest format, synthetic data and
//! split construction.

mod manifest;
pub mod raster;
mod split;
pub mod synthetic;

use std::path::Path;

use crate::backbone::{load_precomputed_features, write_precomputed_features};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{load_manifest, parse_manifest, write_manifest};
pub use split::{split_dataset, SplitReport};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const IMAGE_DIR: &str = "images";
pub const FEATURE_IDS_FILE: &str = "features.txt";
pub const FEATURE_FILE: &str = "features.att";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeVocabulary {
    attributes: Vec<Attribute>,
}

impl AttributeVocabulary {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Spec("vocabulary has no attributes".into()));
        }
        for a in &attributes {
            if a.values.len() < 2 {
                return Err(Error::Spec(format!(
                    "attribute {} has {} value(s); at least 2 are required",
                    a.name,
                    a.values.len()
                )));
            }
            if attributes.iter().filter(|b| b.name == a.name).count() > 1 {
                return Err(Error::Spec(format!("duplicate attribute name {}", a.name)));
            }
        }
        Ok(Self { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn name(&self, attr: usize) -> &str {
        &self.attributes[attr].name
    }

    pub fn value_count(&self, attr: usize) -> usize {
        self.attributes[attr].values.len()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Resolves a name or a numeric index.
    pub fn resolve(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.find(key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.len() => Ok(i),
            Ok(i) => Err(Error::Vocabulary {
                index: i,
                n: self.len(),
            }),
            Err(_) => Err(Error::Spec(format!("unknown attribute {key:?}"))),
        }
    }
}

/// Labels of one image: at most one value per attribute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub labels: Vec<(usize, usize)>,
}

impl AnnotationRecord {
    pub fn value(&self, attr: usize) -> Option<usize> {
        self.labels
            .iter()
            .find(|(a, _)| *a == attr)
            .map(|&(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Candidate,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Candidate => "candidate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub split: Split,
    /// Set for validation and test images only.
    pub role: Option<Role>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSource {
    /// `images/<image_id>.ppm` next to the manifest.
    Raster,
    /// `features.txt` + `features.att` next to the manifest.
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub vocabulary: AttributeVocabulary,
    pub records: Vec<AnnotationRecord>,
    pub source: ImageSource,
    /// Parallel to `records` once the dataset has been split.
    pub assignments: Option<Vec<Assignment>>,
    pub ratios: Option<[f64; 3]>,
    pub query_fraction: Option<f64>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }

    pub fn value(&self, image: usize, attr: usize) -> Option<usize> {
        self.records[image].value(attr)
    }

    pub fn assignment(&self, image: usize) -> Option<Assignment> {
        self.assignments.as_ref().map(|a| a[image])
    }

    /// Indices of images in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Result<Vec<usize>> {
        let assignments = self
            .assignments
            .as_ref()
            .ok_or_else(|| Error::Contract("manifest has no split assignment".into()))?;
        Ok(assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.split == split)
            .map(|(i, _)| i)
            .collect())
    }

    /// Indices of images in `split` with the given role.
    pub fn role_indices(&self, split: Split, role: Role) -> Result<Vec<usize>> {
        Ok(self
            .indices(split)?
            .into_iter()
            .filter(|&i| self.assignments.as_ref().unwrap()[i].role == Some(role))
            .collect())
    }
}

/// A manifest together with the decoded input of every record: a raster
/// image for the trainable backbone or a precomputed feature map.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub inputs: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, inputs: Vec<Tensor<f32>>) -> Result<Self> {
        if manifest.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "{} records but {} inputs",
                manifest.len(),
                inputs.len()
            )));
        }
        Ok(Self { manifest, inputs })
    }

    /// Reads `manifest.txt` and its images or features from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        let inputs = match manifest.source {
            ImageSource::Raster => manifest
                .records
                .iter()
                .map(|r| raster::read_ppm(&dir.join(IMAGE_DIR).join(format!("{}.ppm", r.image_id))))
                .collect::<Result<Vec<_>>>()?,
            ImageSource::Features => {
                let pairs = load_precomputed_features::<f32>(
                    &dir.join(FEATURE_IDS_FILE),
                    &dir.join(FEATURE_FILE),
                    None,
                )?
                .collect::<Result<Vec<_>>>()?;
                if pairs.len() != manifest.len()
                    || pairs
                        .iter()
                        .zip(&manifest.records)
                        .any(|((id, _), r)| *id != r.image_id)
                {
                    return Err(Error::Spec(
                        "feature ids do not match the manifest records".into(),
                    ));
                }
                pairs.into_iter().map(|(_, t)| t).collect()
            }
        };
        Self::new(manifest, inputs)
    }

    /// Writes the manifest and inputs under `dir` with deterministic names.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&self.manifest, &dir.join(MANIFEST_FILE))?;
        match self.manifest.source {
            ImageSource::Raster => {
                let images = dir.join(IMAGE_DIR);
                std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
                for (r, img) in self.manifest.records.iter().zip(&self.inputs) {
                    raster::write_ppm(&images.join(format!("{}.ppm", r.image_id)), img)?;
                }
            }
            ImageSource::Features => write_precomputed_features(
                &dir.join(FEATURE_IDS_FILE),
                &dir.join(FEATURE_FILE),
                self.manifest
                    .records
                    .iter()
                    .map(|r| r.image_id.as_str())
                    .zip(self.inputs.iter()),
            )?,
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
