//! The attribute-specific embedding network and its comparison variants.
//!
//! For an image feature map `I` (`c x h x w`) and attribute `a`:
//!
//! * spatial attention: `p(I) = tanh(conv(I))`, `p(a) = tanh(W_a[:, a])`
//!   repeated over the grid, `s = tanh(conv_s(p(a) * p(I)))`,
//!   `alpha_s = softmax(s)`, `I_s = sum_j alpha_s[j] I[:, j]`;
//! * channel attention: `q(a) = relu(W_c[:, a])`,
//!   `alpha_c = sigmoid(W_2 relu(W_1 [q(a), I_s]))`, `I_c = I_s * alpha_c`;
//! * projection: `f(I, a) = W I_c + b`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, kernels, Bound, Graph, ParamId, ParamStore, Var};
use crate::backbone::{BackboneConfig, BackboneKind, TinyBackbone};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Spatial attention, then channel attention, then projection.
    Full,
    /// Mean pooling in place of spatial attention.
    NoAsa,
    /// Spatially attended vector projected directly.
    NoAca,
    /// One general embedding masked per attribute.
    Csn,
    /// One general embedding; the attribute is ignored.
    TripletPlain,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TripletPlain,
        Variant::Csn,
        Variant::NoAsa,
        Variant::NoAca,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAsa => "no_asa",
            Variant::NoAca => "no_aca",
            Variant::Csn => "csn",
            Variant::TripletPlain => "triplet_plain",
        }
    }

    pub fn uses_spatial_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAca)
    }

    pub fn uses_channel_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAsa)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Spec(format!("unknown variant {s:?}")))
    }
}

/// Resolved model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsenConfig {
    /// Feature map channels.
    pub c: usize,
    /// Spatial attention mapping dimension.
    pub c_prime: usize,
    /// Reduction rate of the first gate layer.
    pub r: usize,
    pub d_embed: usize,
    /// Number of attributes.
    pub n: usize,
    pub variant: Variant,
    /// Whether the two 1x1 convolutions of the spatial attention carry biases.
    pub attention_bias: bool,
}

impl AsenConfig {
    /// Defaults: `c' = c/2`, `r = 16`, `d_embed = c`.
    pub fn with_defaults(c: usize, n: usize, variant: Variant) -> Self {
        Self {
            c,
            c_prime: (c / 2).max(1),
            r: 16.min(c),
            d_embed: c,
            n,
            variant,
            attention_bias: false,
        }
    }

    pub fn hidden(&self) -> usize {
        self.c / self.r
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Spec("model needs at least one attribute".into()));
        }
        if self.r == 0 || self.c / self.r < 1 {
            return Err(Error::Spec(format!(
                "reduction rate {} leaves no hidden units for c = {}",
                self.r, self.c
            )));
        }
        if self.d_embed < 2 {
            return Err(Error::Spec(format!("d_embed {} < 2", self.d_embed)));
        }
        if self.c_prime < 1 || self.c < 1 {
            return Err(Error::Spec("c and c' must be positive".into()));
        }
        Ok(())
    }
}

/// Where feature maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Backbone(TinyBackbone),
    /// Maps are supplied directly with the given `[c, h, w]` shape.
    Precomputed([usize; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsenParamIds {
    pub conv_p: ParamId,
    pub conv_p_bias: Option<ParamId>,
    pub attr_embed_asa: ParamId,
    pub conv_s: ParamId,
    pub conv_s_bias: Option<ParamId>,
    pub attr_embed_aca: ParamId,
    pub fc_reduce: ParamId,
    pub fc_expand: ParamId,
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub csn_mask: Option<ParamId>,
}

/// Spatial attention weights of one image under one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub image_id: String,
    pub attribute: usize,
    /// `h x w`.
    pub weights: Tensor<f64>,
}

impl AttentionMap {
    /// Header `image_id attribute_name h w`, then one row per grid line.
    pub fn render(&self, attribute_name: &str) -> String {
        let (h, w) = (self.weights.shape()[0], self.weights.shape()[1]);
        let mut out = format!("{} {} {} {}\n", self.image_id, attribute_name, h, w);
        for row in self.weights.data().chunks(w) {
            let cells: Vec<String> = row.iter().map(|&v| format_significant(v, 9)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Formats `x` with `digits` significant digits in positional notation.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn one_hot<T: Scalar>(index: usize, n: usize) -> Result<Tensor<T>> {
    if index >= n {
        return Err(Error::Vocabulary { index, n });
    }
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[index] = T::one();
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsenModel<T: Scalar> {
    config: AsenConfig,
    source: FeatureSource,
    store: ParamStore<T>,
    ids: AsenParamIds,
}

impl<T: Scalar> AsenModel<T> {
    /// Creates a freshly initialized model. `backbone` decides the feature
    /// source; its `out_channels` must equal `config.c`.
    pub fn new(config: AsenConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        check_channels(&config, backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let source = match backbone.kind {
            BackboneKind::TinyConv => {
                FeatureSource::Backbone(TinyBackbone::register(backbone, &mut store, &mut rng)?)
            }
            BackboneKind::Precomputed => {
                backbone.validate()?;
                FeatureSource::Precomputed(backbone.feature_shape())
            }
        };
        let AsenConfig {
            c,
            c_prime,
            d_embed,
            n,
            ..
        } = config;
        let hidden = config.hidden();
        let conv_p = store.add(
            "asa.conv_p.weight",
            glorot_uniform(&[c_prime, c], c, c_prime, &mut rng),
        )?;
        let conv_p_bias = config
            .attention_bias
            .then(|| store.add("asa.conv_p.bias", Tensor::zeros(&[c_prime])))
            .transpose()?;
        let attr_embed_asa = store.add(
            "asa.attr_embed",
            glorot_uniform(&[c_prime, n], n, c_prime, &mut rng),
        )?;
        let conv_s = store.add(
            "asa.conv_s.weight",
            glorot_uniform(&[1, c_prime], c_prime, 1, &mut rng),
        )?;
        let conv_s_bias = config
            .attention_bias
            .then(|| store.add("asa.conv_s.bias", Tensor::zeros(&[1])))
            .transpose()?;
        let attr_embed_aca =
            store.add("aca.attr_embed", glorot_uniform(&[c, n], n, c, &mut rng))?;
        let fc_reduce = store.add(
            "aca.fc_reduce",
            glorot_uniform(&[hidden, 2 * c], 2 * c, hidden, &mut rng),
        )?;
        let fc_expand = store.add(
            "aca.fc_expand",
            glorot_uniform(&[c, hidden], hidden, c, &mut rng),
        )?;
        let proj = store.add(
            "proj.weight",
            glorot_uniform(&[d_embed, c], c, d_embed, &mut rng),
        )?;
        let proj_bias = store.add("proj.bias", Tensor::zeros(&[d_embed]))?;
        let csn_mask = (config.variant == Variant::Csn)
            .then(|| store.add("csn.mask", Tensor::filled(&[n, d_embed], T::one())))
            .transpose()?;
        let ids = AsenParamIds {
            conv_p,
            conv_p_bias,
            attr_embed_asa,
            conv_s,
            conv_s_bias,
            attr_embed_aca,
            fc_reduce,
            fc_expand,
            proj,
            proj_bias,
            csn_mask,
        };
        let model = Self {
            config,
            source,
            store,
            ids,
        };
        model.warn_degenerate();
        Ok(model)
    }

    /// Rebuilds a model around an existing parameter store, checking every
    /// expected name and shape.
    pub fn from_store(
        config: AsenConfig,
        backbone: &BackboneConfig,
        store: ParamStore<T>,
    ) -> Result<Self> {
        AsenModel::<T>::new(config, backbone, 0)?.with_params(store)
    }

    /// The same architecture around another parameter store.
    pub fn with_params(&self, store: ParamStore<T>) -> Result<Self> {
        if self.store.len() != store.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in self.store.iter().zip(store.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.tensor.shape(),
                    got.name,
                    got.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config: self.config.clone(),
            source: self.source.clone(),
            store,
            ids: self.ids.clone(),
        })
    }

    fn warn_degenerate(&self) {
        let [_, h, w] = self.feature_shape();
        if h * w == 1 {
            log::warn!("1x1 feature maps: spatial attention reduces to identity pooling");
        }
    }

    pub fn config(&self) -> &AsenConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn ids(&self) -> &AsenParamIds {
        &self.ids
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        match &self.source {
            FeatureSource::Backbone(b) => b.config().feature_shape(),
            FeatureSource::Precomputed(s) => *s,
        }
    }

    /// Shape expected by [`AsenModel::feature_map`].
    pub fn input_shape(&self) -> [usize; 3] {
        match &self.source {
            FeatureSource::Backbone(b) => b.config().image_shape(),
            FeatureSource::Precomputed(s) => *s,
        }
    }

    fn check_attr(&self, attr: usize) -> Result<()> {
        if attr >= self.config.n {
            return Err(Error::Vocabulary {
                index: attr,
                n: self.config.n,
            });
        }
        Ok(())
    }

    /// Records the feature map for `input`: an image when a backbone is
    /// configured, otherwise the map itself.
    pub fn feature_map(&self, g: &mut Graph<T>, p: &Bound, input: &Tensor<T>) -> Result<Var> {
        let expected = self.input_shape();
        if input.shape() != expected {
            return Err(Error::dim("model input", input.shape(), &expected));
        }
        let x = g.constant(input.clone());
        match &self.source {
            FeatureSource::Backbone(b) => b.forward(g, p, x),
            FeatureSource::Precomputed(_) => Ok(x),
        }
    }

    /// Spatial attention. Returns `(I_s, alpha_s)`.
    pub fn asa(&self, g: &mut Graph<T>, p: &Bound, fmap: Var, attr: usize) -> Result<(Var, Var)> {
        self.check_attr(attr)?;
        let (h, w) = match g.shape(fmap) {
            [_, h, w] => (*h, *w),
            other => return Err(Error::dim("asa", other, &self.feature_shape())),
        };
        let ids = &self.ids;
        let mapped = g.conv_1x1(fmap, p[ids.conv_p], ids.conv_p_bias.map(|b| p[b]))?;
        let p_img = g.tanh(mapped)?;
        let embed = g.column(p[ids.attr_embed_asa], attr)?;
        let p_attr = g.tanh(embed)?;
        let p_attr = g.broadcast_spatial(p_attr, h, w)?;
        let joint = g.mul(p_attr, p_img)?;
        let scores = g.conv_1x1(joint, p[ids.conv_s], ids.conv_s_bias.map(|b| p[b]))?;
        let scores = g.tanh(scores)?;
        let alpha = g.softmax_flat(scores)?;
        let attended = g.weighted_spatial_sum(fmap, alpha)?;
        Ok((attended, alpha))
    }

    /// Channel attention. Returns `(I_c, alpha_c)`.
    pub fn aca(&self, g: &mut Graph<T>, p: &Bound, pooled: Var, attr: usize) -> Result<(Var, Var)> {
        self.check_attr(attr)?;
        let ids = &self.ids;
        let q = g.column(p[ids.attr_embed_aca], attr)?;
        let q = g.relu(q)?;
        let fused = g.concat(q, pooled)?;
        let hidden = g.fully_connected(fused, p[ids.fc_reduce], None)?;
        let hidden = g.relu(hidden)?;
        let gate = g.fully_connected(hidden, p[ids.fc_expand], None)?;
        let gate = g.sigmoid(gate)?;
        let gated = g.mul(pooled, gate)?;
        Ok((gated, gate))
    }

    fn project(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        g.fully_connected(v, p[self.ids.proj], Some(p[self.ids.proj_bias]))
    }

    /// Attribute-specific embedding of a feature map.
    pub fn embed(&self, g: &mut Graph<T>, p: &Bound, fmap: Var, attr: usize) -> Result<Var> {
        self.check_attr(attr)?;
        match self.config.variant {
            Variant::Full => {
                let (i_s, _) = self.asa(g, p, fmap, attr)?;
                let (i_c, _) = self.aca(g, p, i_s, attr)?;
                self.project(g, p, i_c)
            }
            Variant::NoAsa => {
                let pooled = g.mean_pool_spatial(fmap)?;
                let (i_c, _) = self.aca(g, p, pooled, attr)?;
                self.project(g, p, i_c)
            }
            Variant::NoAca => {
                let (i_s, _) = self.asa(g, p, fmap, attr)?;
                self.project(g, p, i_s)
            }
            Variant::TripletPlain => {
                let pooled = g.mean_pool_spatial(fmap)?;
                self.project(g, p, pooled)
            }
            Variant::Csn => {
                let pooled = g.mean_pool_spatial(fmap)?;
                let general = self.project(g, p, pooled)?;
                let mask_id = self
                    .ids
                    .csn_mask
                    .ok_or_else(|| Error::Contract("csn variant without mask".into()))?;
                let mask = g.row(p[mask_id], attr)?;
                g.mul(general, mask)
            }
        }
    }

    /// Sum over `attrs` of cosine similarities in each attribute's space.
    pub fn similarity(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        a: Var,
        b: Var,
        attrs: &[usize],
    ) -> Result<Var> {
        if attrs.is_empty() {
            return Err(Error::Contract(
                "similarity needs at least one attribute".into(),
            ));
        }
        let mut total: Option<Var> = None;
        for &attr in attrs {
            let ea = self.embed(g, p, a, attr)?;
            let eb = self.embed(g, p, b, attr)?;
            let s = g.cosine(ea, eb)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("attrs is non-empty"))
    }

    fn graph(&self) -> Result<(Graph<T>, Bound)> {
        let mut g = Graph::new();
        let bound = g.bind(&self.store)?;
        Ok((g, bound))
    }

    /// Feature map of an input without recording gradients.
    pub fn feature_map_of(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut g, p) = self.graph()?;
        let f = self.feature_map(&mut g, &p, input)?;
        Ok(g.value(f).clone())
    }

    /// Embeddings of one input under each attribute of `attrs`.
    pub fn embeddings(&self, input: &Tensor<T>, attrs: &[usize]) -> Result<Vec<Tensor<T>>> {
        let (mut g, p) = self.graph()?;
        let f = self.feature_map(&mut g, &p, input)?;
        attrs
            .iter()
            .map(|&a| {
                let e = self.embed(&mut g, &p, f, a)?;
                Ok(g.value(e).clone())
            })
            .collect()
    }

    pub fn embed_input(&self, input: &Tensor<T>, attr: usize) -> Result<Tensor<T>> {
        Ok(self.embeddings(input, &[attr])?.remove(0))
    }

    /// Fine-grained similarity of two inputs over `attrs`.
    pub fn finegrained_similarity(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        attrs: &[usize],
    ) -> Result<T> {
        if attrs.is_empty() {
            return Err(Error::Contract(
                "similarity needs at least one attribute".into(),
            ));
        }
        let ea = self.embeddings(a, attrs)?;
        let eb = self.embeddings(b, attrs)?;
        let mut total = T::zero();
        for (x, y) in ea.iter().zip(&eb) {
            total = total + kernels::cosine_similarity(x.data(), y.data())?;
        }
        Ok(total)
    }

    /// Spatial attention maps of one input under each attribute. Variants
    /// without spatial attention pool uniformly, so their maps are uniform.
    pub fn attention_maps(
        &self,
        image_id: &str,
        input: &Tensor<T>,
        attrs: &[usize],
    ) -> Result<Vec<AttentionMap>> {
        let (mut g, p) = self.graph()?;
        let f = self.feature_map(&mut g, &p, input)?;
        let [_, h, w] = self.feature_shape();
        attrs
            .iter()
            .map(|&attr| {
                self.check_attr(attr)?;
                let weights = if self.config.variant.uses_spatial_attention() {
                    let (_, alpha) = self.asa(&mut g, &p, f, attr)?;
                    g.value(alpha).cast()
                } else {
                    Tensor::filled(&[h, w], 1.0 / (h * w) as f64)
                };
                Ok(AttentionMap {
                    image_id: image_id.to_string(),
                    attribute: attr,
                    weights,
                })
            })
            .collect()
    }

    /// Channel gate `alpha_c` for a pooled vector, without the tape.
    pub fn channel_gate(&self, pooled: &Tensor<T>, attr: usize) -> Result<Tensor<T>> {
        let (mut g, p) = self.graph()?;
        let v = g.constant(pooled.clone());
        let (_, gate) = self.aca(&mut g, &p, v, attr)?;
        Ok(g.value(gate).clone())
    }

    pub fn cast<U: Scalar>(&self) -> AsenModel<U> {
        AsenModel {
            config: self.config.clone(),
            source: self.source.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }
}

fn check_channels(config: &AsenConfig, backbone: &BackboneConfig) -> Result<()> {
    if backbone.out_channels != config.c {
        return Err(Error::Spec(format!(
            "backbone produces {} channels but the model expects {}",
            backbone.out_channels, config.c
        )));
    }
    Ok(())
}
