//! Feature extractors producing the `c x h x w` map consumed by attention.
//!
//! Two sources are supported: a small trainable stack of stride-2 3x3
//! convolutions over raw images, and feature maps computed elsewhere and
//! stored with the tensor serialization format.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TinyConv,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels `c` of the produced map.
    pub out_channels: usize,
    /// Side `h = w` of the produced map.
    pub out_spatial: usize,
    /// Widths of the hidden stages; the last stage outputs `out_channels`.
    pub widths: Vec<usize>,
    pub image_channels: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::TinyConv,
            out_channels: 32,
            out_spatial: 4,
            widths: vec![16, 32],
            image_channels: 3,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    /// The size floors apply to the trainable backbone only; precomputed maps
    /// may be as small as `1 x 1 x 1`.
    pub fn validate(&self) -> Result<()> {
        if self.kind == BackboneKind::Precomputed {
            if self.out_channels == 0 || self.out_spatial == 0 {
                return Err(Error::Spec(
                    "precomputed feature maps must be non-empty".into(),
                ));
            }
            return Ok(());
        }
        if self.out_channels < 4 {
            return Err(Error::Spec(format!(
                "backbone out_channels {} < 4",
                self.out_channels
            )));
        }
        if self.out_spatial < 2 {
            return Err(Error::Spec(format!(
                "backbone out_spatial {} < 2",
                self.out_spatial
            )));
        }
        let mut side = self.image_size;
        for _ in 0..=self.widths.len() {
            side = side.div_ceil(2);
        }
        if side != self.out_spatial {
            return Err(Error::Spec(format!(
                "{} stride-2 stages map {}x{} images to {side}x{side}, not {}x{}",
                self.widths.len() + 1,
                self.image_size,
                self.image_size,
                self.out_spatial,
                self.out_spatial
            )));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_spatial, self.out_spatial]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }
}

/// Stride-2, padding-1 3x3 convolutions, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyBackbone {
    config: BackboneConfig,
    stages: Vec<(ParamId, ParamId)>,
}

impl TinyBackbone {
    pub fn register<T: Scalar>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.image_channels];
        widths.extend(&config.widths);
        widths.push(config.out_channels);
        let mut stages = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let w = store.add(
                format!("backbone.conv{}.weight", i + 1),
                glorot_uniform(&[cout, cin, 3, 3], cin * 9, cout * 9, rng),
            )?;
            let b = store.add(
                format!("backbone.conv{}.bias", i + 1),
                Tensor::zeros(&[cout]),
            )?;
            stages.push((w, b));
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// Rebinds to parameters already present in `store` under the standard names.
    pub fn attach<T: Scalar>(config: &BackboneConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let stages = (1..=config.widths.len() + 1)
            .map(|i| {
                let find = |suffix: &str| {
                    let name = format!("backbone.conv{i}.{suffix}");
                    store
                        .find(&name)
                        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
                };
                Ok((find("weight")?, find("bias")?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stages(&self) -> &[(ParamId, ParamId)] {
        &self.stages
    }

    /// Maps an image to its feature map; differentiable in the stage weights.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound, image: Var) -> Result<Var> {
        let expected = self.config.image_shape();
        if g.shape(image) != expected {
            return Err(Error::dim(
                "tiny_backbone_forward",
                g.shape(image),
                &expected,
            ));
        }
        let mut x = image;
        for &(w, b) in &self.stages {
            x = g.conv2d(x, params[w], Some(params[b]), 2, 1)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

/// Reads `(image_id, feature map)` pairs: ids from a UTF-8 manifest with one
/// id per line, maps from a concatenation of serialized rank-3 tensors.
pub struct FeatureReader<T: Scalar> {
    ids: std::vec::IntoIter<String>,
    reader: BufReader<File>,
    offset: u64,
    expected: Option<[usize; 3]>,
    finished: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for FeatureReader<T> {
    type Item = Result<(String, Tensor<T>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let Some(id) = self.ids.next() else {
            self.finished = true;
            // the tensor file must end exactly where the manifest does
            return match self.reader.fill_buf() {
                Ok([]) => None,
                Ok(_) => Some(Err(Error::Format {
                    offset: self.offset,
                    msg: "more feature maps than manifest ids".into(),
                })),
                Err(e) => Some(Err(Error::Format {
                    offset: self.offset,
                    msg: e.to_string(),
                })),
            };
        };
        let start = self.offset;
        let item = Tensor::<T>::read_from(&mut self.reader, &mut self.offset).and_then(|t| {
            if t.rank() != 3 {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("feature map for {id} has rank {}", t.rank()),
                });
            }
            if let Some(exp) = self.expected {
                if t.shape() != exp {
                    return Err(Error::Format {
                        offset: start,
                        msg: format!(
                            "extent mismatch for {id}: expected {exp:?}, found {:?}",
                            t.shape()
                        ),
                    });
                }
            }
            Ok((id, t))
        });
        if item.is_err() {
            self.finished = true;
        }
        Some(item)
    }
}

pub fn load_precomputed_features<T: Scalar>(
    ids_path: &Path,
    tensors_path: &Path,
    expected: Option<[usize; 3]>,
) -> Result<FeatureReader<T>> {
    let text = std::fs::read_to_string(ids_path).map_err(|e| Error::io(ids_path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let file = File::open(tensors_path).map_err(|e| Error::io(tensors_path, e))?;
    Ok(FeatureReader {
        ids: ids.into_iter(),
        reader: BufReader::new(file),
        offset: 0,
        expected,
        finished: false,
        _marker: std::marker::PhantomData,
    })
}

pub fn write_precomputed_features<'a, T: Scalar>(
    ids_path: &Path,
    tensors_path: &Path,
    items: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let mut ids = String::new();
    let mut bytes = Vec::new();
    for (id, t) in items {
        if id.trim().is_empty() || id.contains('\n') {
            return Err(Error::Contract(format!("invalid image id {id:?}")));
        }
        ids.push_str(id);
        ids.push('\n');
        bytes.extend(t.to_bytes());
    }
    std::fs::write(ids_path, ids).map_err(|e| Error::io(ids_path, e))?;
    std::fs::write(tensors_path, bytes).map_err(|e| Error::io(tensors_path, e))?;
    Ok(())
}
