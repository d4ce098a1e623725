//! Deterministic images whose attribute values are drawn inside one
//! quadrant each.
//!
//! Attribute `a` owns a quadrant; its value selects a striped pattern
//! (palette colour plus stripe orientation) painted only there. Values are
//! drawn independently per attribute, so a quadrant carries no information
//! about any attribute but its owner. Uniform pixel noise is added on top and
//! every pixel is quantized to 1/255 so images survive a PPM round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AnnotationRecord, Attribute, AttributeVocabulary, Dataset, DatasetManifest, ImageSource,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top_left",
            Quadrant::TopRight => "top_right",
            Quadrant::BottomLeft => "bottom_left",
            Quadrant::BottomRight => "bottom_right",
        }
    }

    /// Row and column ranges of the quadrant on an `h x w` grid.
    pub fn bounds(self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (hh, hw) = (h / 2, w / 2);
        match self {
            Quadrant::TopLeft => (0..hh, 0..hw),
            Quadrant::TopRight => (0..hh, hw..w),
            Quadrant::BottomLeft => (hh..h, 0..hw),
            Quadrant::BottomRight => (hh..h, hw..w),
        }
    }

    /// Total weight of an `h x w` map (row-major) falling inside the quadrant.
    pub fn mass(self, weights: &[f64], h: usize, w: usize) -> f64 {
        let (rows, cols) = self.bounds(h, w);
        rows.flat_map(|r| cols.clone().map(move |c| r * w + c))
            .map(|j| weights[j])
            .sum()
    }
}

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.1]),
    ("blue", [0.1, 0.1, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.9, 0.9]),
    ("orange", [0.9, 0.5, 0.1]),
    ("white", [0.9, 0.9, 0.9]),
];
const STRIPE_DARK: f32 = 0.15;
const BACKGROUND: f32 = 0.5;
const STRIPE_PERIOD: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    pub images: usize,
    pub image_size: usize,
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// Quadrant owned by each attribute; defaults to reading order.
    pub regions: Option<Vec<Quadrant>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_attributes: 4,
            values_per_attribute: 4,
            images: 2000,
            image_size: 32,
            noise: 0.1,
            seed: 0,
            regions: None,
        }
    }
}

impl SyntheticSpec {
    pub fn region_map(&self) -> Result<Vec<Quadrant>> {
        let regions = match &self.regions {
            Some(r) => r.clone(),
            None => Quadrant::ALL
                .iter()
                .copied()
                .take(self.n_attributes)
                .collect(),
        };
        if regions.len() != self.n_attributes {
            return Err(Error::Spec(format!(
                "{} attributes but {} regions (at most 4 quadrants exist)",
                self.n_attributes,
                regions.len()
            )));
        }
        for (i, q) in regions.iter().enumerate() {
            if regions[..i].contains(q) {
                return Err(Error::Spec(format!(
                    "region overlap: quadrant {} assigned twice",
                    q.name()
                )));
            }
        }
        Ok(regions)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 {
            return Err(Error::Spec("at least one attribute is required".into()));
        }
        if !(2..=PALETTE.len()).contains(&self.values_per_attribute) {
            return Err(Error::Spec(format!(
                "values_per_attribute must be in 2..={}",
                PALETTE.len()
            )));
        }
        if self.image_size < 2 * STRIPE_PERIOD || !self.image_size.is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "image_size {} must be even and at least {}",
                self.image_size,
                2 * STRIPE_PERIOD
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Spec(format!("noise {} outside [0, 1]", self.noise)));
        }
        self.region_map().map(|_| ())
    }

    pub fn vocabulary(&self) -> Result<AttributeVocabulary> {
        let regions = self.region_map()?;
        AttributeVocabulary::new(
            regions
                .iter()
                .map(|q| Attribute {
                    name: q.name().to_string(),
                    values: (0..self.values_per_attribute).map(value_name).collect(),
                })
                .collect(),
        )
    }
}

fn value_name(v: usize) -> String {
    let orientation = if v.is_multiple_of(2) { "h" } else { "v" };
    format!("{}_{orientation}", PALETTE[v].0)
}

fn quantize(x: f32) -> f32 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-image generator seed.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Draws the label vector of image `index`.
fn draw_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..spec.n_attributes)
        .map(|a| (a, rng.gen_range(0..spec.values_per_attribute)))
        .collect()
}

/// Paints the raster for a label vector and adds noise from `rng`.
pub fn render(
    spec: &SyntheticSpec,
    regions: &[Quadrant],
    labels: &[(usize, usize)],
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let s = spec.image_size;
    let mut data = vec![BACKGROUND; 3 * s * s];
    for &(attr, value) in labels {
        let (rows, cols) = regions[attr].bounds(s, s);
        let color = PALETTE[value].1;
        let horizontal = value % 2 == 0;
        for y in rows {
            for x in cols.clone() {
                let phase = if horizontal { y } else { x };
                let on = phase % STRIPE_PERIOD < STRIPE_PERIOD / 2;
                for ch in 0..3 {
                    data[ch * s * s + y * s + x] = if on { color[ch] } else { STRIPE_DARK };
                }
            }
        }
    }
    let amp = spec.noise as f32;
    for v in &mut data {
        let n = if amp > 0.0 {
            rng.gen_range(-amp..=amp)
        } else {
            0.0
        };
        *v = quantize(*v + n);
    }
    Tensor::new(vec![3, s, s], data).expect("shape matches data")
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let regions = spec.region_map()?;
    let vocabulary = spec.vocabulary()?;
    let width = spec.images.max(1).to_string().len();
    let mut records = Vec::with_capacity(spec.images);
    let mut inputs = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, i));
        let labels = draw_labels(spec, &mut rng);
        inputs.push(render(spec, &regions, &labels, &mut rng));
        records.push(AnnotationRecord {
            image_id: format!("img_{i:0width$}"),
            labels,
        });
    }
    let manifest = DatasetManifest {
        vocabulary,
        records,
        source: ImageSource::Raster,
        assignments: None,
        ratios: None,
        query_fraction: None,
    };
    Dataset::new(manifest, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            images: 400,
            noise,
            seed: 12,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_dataset(&small(0.1)).unwrap();
        let b = generate_synthetic_dataset(&small(0.1)).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn identical_labels_give_identical_noiseless_rasters() {
        let d = generate_synthetic_dataset(&small(0.0)).unwrap();
        let mut found = false;
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                if d.manifest.records[i].labels == d.manifest.records[j].labels {
                    assert_eq!(d.inputs[i], d.inputs[j]);
                    found = true;
                }
            }
        }
        assert!(found, "400 images over 256 label vectors must repeat one");
    }

    #[test]
    fn pixels_are_quantized_and_in_range() {
        let d = generate_synthetic_dataset(&small(0.3)).unwrap();
        for img in &d.inputs[..10] {
            for &v in img.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(quantize(v), v);
            }
        }
    }

    #[test]
    fn overlapping_regions_are_rejected() {
        let spec = SyntheticSpec {
            n_attributes: 2,
            regions: Some(vec![Quadrant::TopLeft, Quadrant::TopLeft]),
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic_dataset(&spec),
            Err(Error::Spec(_))
        ));
        let spec = SyntheticSpec {
            n_attributes: 5,
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn quadrant_mass_on_a_4x4_map() {
        let mut w = vec![0.0; 16];
        w[0] = 0.5;
        w[5] = 0.25;
        w[15] = 0.25;
        assert_eq!(Quadrant::TopLeft.mass(&w, 4, 4), 0.75);
        assert_eq!(Quadrant::BottomRight.mass(&w, 4, 4), 0.25);
        assert_eq!(Quadrant::TopRight.mass(&w, 4, 4), 0.0);
    }
}
