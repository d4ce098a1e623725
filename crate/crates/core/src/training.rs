//! Triplet sampling, the margin ranking loss, Adam and the training loop with
//! best-validation snapshot selection.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::{Bound, Gradients, Graph, ParamStore, Var};
use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::{Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_map, evaluate_triplet_accuracy, ModelScorer, RetrievalSplit};
use crate::model::{AsenConfig, AsenModel, Variant};
use crate::tensor::{lit, Scalar, Tensor};

/// Anchor and positive share `anchor_value` for `attribute`; the negative
/// holds `negative_value`. Images are dataset indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub attribute: usize,
    pub anchor_value: usize,
    pub negative_value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    Map,
    TripletAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub val_metric: ValidationMetric,
    /// Validate every `val_stride` epochs and after the last one.
    pub val_stride: usize,
    /// Triplets drawn from the validation split when `val_metric` is
    /// `triplet_accuracy`.
    pub val_triplets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            learning_rate: 1e-4,
            lr_decay: 0.985,
            epochs: 200,
            triplets_per_epoch: 100_000,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            val_metric: ValidationMetric::Map,
            val_stride: 1,
            val_triplets: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::Spec(format!(
                "margin {} must be positive",
                self.margin
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Spec(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.val_stride == 0 {
            return Err(Error::Spec(
                "batch_size and val_stride must be at least 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Spec("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `count` triplets from the images in `pool`: an attribute uniformly,
/// then a value class with at least two images uniformly, anchor and
/// positive uniformly inside it and the negative uniformly outside it.
pub fn sample_triplets(
    manifest: &DatasetManifest,
    pool: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let vocab = &manifest.vocabulary;
    // per attribute: images of each value, and the values usable as anchors
    let mut classes: Vec<Vec<Vec<usize>>> = Vec::with_capacity(vocab.len());
    let mut anchor_values: Vec<Vec<usize>> = Vec::with_capacity(vocab.len());
    for a in 0..vocab.len() {
        let mut by_value = vec![Vec::new(); vocab.value_count(a)];
        for &i in pool {
            if let Some(v) = manifest.value(i, a) {
                by_value[v].push(i);
            }
        }
        let populated = by_value.iter().filter(|c| !c.is_empty()).count();
        let usable: Vec<usize> = (0..by_value.len())
            .filter(|&v| by_value[v].len() >= 2)
            .collect();
        let fail = |reason: String| Error::Sampling {
            attribute: vocab.name(a).to_string(),
            reason,
        };
        if populated < 2 {
            return Err(fail(format!(
                "{populated} value(s) present; a negative needs at least two"
            )));
        }
        if usable.is_empty() {
            return Err(fail(
                "no value has two images to form a positive pair".into(),
            ));
        }
        classes.push(by_value);
        anchor_values.push(usable);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let attribute = rng.gen_range(0..vocab.len());
        let by_value = &classes[attribute];
        let value = *anchor_values[attribute]
            .choose(&mut rng)
            .expect("non-empty");
        let members = &by_value[value];
        let ai = rng.gen_range(0..members.len());
        let mut pi = rng.gen_range(0..members.len() - 1);
        if pi >= ai {
            pi += 1;
        }
        let outside: usize = by_value
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != value)
            .map(|(_, c)| c.len())
            .sum();
        let mut k = rng.gen_range(0..outside);
        let mut negative = None;
        for (v, c) in by_value.iter().enumerate() {
            if v == value {
                continue;
            }
            if k < c.len() {
                negative = Some((c[k], v));
                break;
            }
            k -= c.len();
        }
        let (negative, negative_value) = negative.expect("index lies inside the negatives");
        out.push(Triplet {
            anchor: members[ai],
            positive: members[pi],
            negative,
            attribute,
            anchor_value: value,
            negative_value,
        });
    }
    Ok(out)
}

/// `max(0, margin - s_pos + s_neg)`.
pub fn triplet_margin_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

/// `base_lr * decay^epoch` for a zero-based epoch.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay: f64) -> f64 {
    base_lr * decay.powi(epoch as i32)
}

/// First and second moment estimates of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if state.first.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, gradients {}, store {}",
            state.first.len(),
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let k = id.index();
        if !params.get(id).trainable {
            continue;
        }
        let Some(g) = grads.get(id) else { continue };
        let p = params.tensor_mut(id);
        if g.shape() != p.shape() || state.first[k].shape() != p.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi.to_f64().unwrap_or(f64::NAN);
            let m_new = b1 * mi.to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
            let v_new = b2 * vi.to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
            *mi = lit(m_new);
            *vi = lit(v_new);
            let m_hat = mi.to_f64().unwrap_or(0.0) / correct1;
            let v_hat = vi.to_f64().unwrap_or(0.0) / correct2;
            let update = lr * m_hat / (v_hat.sqrt() + config.epsilon);
            *w = lit(w.to_f64().unwrap_or(f64::NAN) - update);
        }
    }
    Ok(())
}

/// Loss of one triplet recorded on `g`.
pub fn triplet_loss_on_graph<T: Scalar>(
    model: &AsenModel<T>,
    g: &mut Graph<T>,
    params: &Bound,
    inputs: [&Tensor<T>; 3],
    attribute: usize,
    margin: f64,
) -> Result<Var> {
    let [anchor, positive, negative] = inputs;
    let fa = model.feature_map(g, params, anchor)?;
    let fp = model.feature_map(g, params, positive)?;
    let fn_ = model.feature_map(g, params, negative)?;
    let ea = model.embed(g, params, fa, attribute)?;
    let ep = model.embed(g, params, fp, attribute)?;
    let en = model.embed(g, params, fn_, attribute)?;
    let s_pos = g.cosine(ea, ep)?;
    let s_neg = g.cosine(ea, en)?;
    let gap = g.sub(s_neg, s_pos)?;
    let shifted = g.add_scalar(gap, lit(margin))?;
    g.relu(shifted)
}

/// Runs minibatch Adam over `triplets` in order and returns the mean loss.
/// Each batch averages its per-triplet losses before the update.
pub fn train_epoch<T: Scalar>(
    model: &mut AsenModel<T>,
    inputs: &[Tensor<T>],
    image_ids: &[String],
    triplets: &[Triplet],
    config: &TrainConfig,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Contract("no triplets to train on".into()));
    }
    let mut total = 0.0;
    for (batch_index, batch) in triplets.chunks(config.batch_size).enumerate() {
        let mut grads = Gradients::zeros_like(model.params());
        let mut batch_loss = 0.0;
        for t in batch {
            let mut g = Graph::new();
            let p = g.bind(model.params())?;
            let loss = triplet_loss_on_graph(
                model,
                &mut g,
                &p,
                [&inputs[t.anchor], &inputs[t.positive], &inputs[t.negative]],
                t.attribute,
                config.margin,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => non_finite(batch_index, batch, image_ids),
                other => other,
            })?;
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(non_finite(batch_index, batch, image_ids));
            }
            batch_loss += value;
            if value > 0.0 {
                grads.add_assign(&g.backward(loss)?)?;
            }
        }
        grads.scale(lit(1.0 / batch.len() as f64));
        adam_step(model.params_mut(), &grads, state, lr, config)?;
        total += batch_loss;
    }
    Ok(total / triplets.len() as f64)
}

fn non_finite(batch: usize, triplets: &[Triplet], ids: &[String]) -> Error {
    Error::NonFiniteLoss {
        batch,
        triplets: triplets
            .iter()
            .map(|t| {
                format!(
                    "({}, {}, {} | {})",
                    ids[t.anchor], ids[t.positive], ids[t.negative], t.attribute
                )
            })
            .collect(),
    }
}

/// A parameter snapshot with the epoch and validation metric it scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config_hash: String,
    /// One-based epoch after which the snapshot was taken.
    pub epoch: usize,
    pub metric: f64,
    pub params: ParamStore<T>,
}

const CHECKPOINT_MAGIC: &str = "asen-checkpoint 1";

impl<T: Scalar> Checkpoint<T> {
    /// Text header (hash, epoch, metric, parameter names) ending in `end`,
    /// followed by the tensors in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\nconfig_hash {}\nepoch {}\nmetric {:?}\n",
            self.config_hash, self.epoch, self.metric
        );
        for (_, p) in self.params.iter() {
            out.push_str(&format!("param {}\n", p.name));
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        for (_, p) in self.params.iter() {
            bytes.extend(p.tensor.to_bytes());
        }
        bytes
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut offset = 0u64;
        let mut line_no = 0usize;
        let mut next_line = |reader: &mut BufReader<_>| -> Result<String> {
            let mut line = String::new();
            let n = reader.read_line(&mut line).map_err(|e| Error::Format {
                offset,
                msg: e.to_string(),
            })?;
            line_no += 1;
            if n == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "checkpoint header ends early".into(),
                });
            }
            offset += n as u64;
            Ok(line.trim_end_matches('\n').to_string())
        };
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        if next_line(&mut reader)? != CHECKPOINT_MAGIC {
            return Err(bad(1, "not a checkpoint"));
        }
        let field = |line: String, key: &str, n: usize| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(n, &format!("expected `{key}`")))
        };
        let config_hash = field(next_line(&mut reader)?, "config_hash", 2)?;
        let epoch = field(next_line(&mut reader)?, "epoch", 3)?
            .parse()
            .map_err(|_| bad(3, "bad epoch"))?;
        let metric = field(next_line(&mut reader)?, "metric", 4)?
            .parse()
            .map_err(|_| bad(4, "bad metric"))?;
        let mut names = Vec::new();
        loop {
            let line = next_line(&mut reader)?;
            if line == "end" {
                break;
            }
            names.push(field(line, "param", 5 + names.len())?);
        }
        let mut params = ParamStore::new();
        for name in names {
            let t = Tensor::read_from(&mut reader, &mut offset)?;
            params.add(name, t)?;
        }
        let mut rest = [0u8; 1];
        if reader.read(&mut rest).map_err(|e| Error::Format {
            offset,
            msg: e.to_string(),
        })? != 0
        {
            return Err(Error::Format {
                offset,
                msg: "trailing bytes after the last tensor".into(),
            });
        }
        Ok(Self {
            config_hash,
            epoch,
            metric,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_metric: Option<f64>,
}

impl fmt::Display for EpochLog {
    /// `epoch<TAB>mean_loss<TAB>lr<TAB>val_metric`, with `-` for epochs
    /// that were not validated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6e}\t",
            self.epoch, self.mean_loss, self.lr
        )?;
        match self.val_metric {
            Some(m) => write!(f, "{m:.6}"),
            None => f.write_str("-"),
        }
    }
}

/// Keeps the first epoch reaching the highest metric.
#[derive(Clone, Debug, Default)]
pub struct BestTracker {
    best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `metric` improves strictly on everything seen.
    pub fn offer(&mut self, epoch: usize, metric: f64) -> bool {
        match self.best {
            Some((_, m)) if metric <= m => false,
            _ => {
                self.best = Some((epoch, metric));
                true
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Scalar> {
    pub best: Checkpoint<T>,
    pub log: Vec<EpochLog>,
}

/// Trains for `config.epochs` epochs on the `pool` images, scoring the model
/// with `validate` every `val_stride` epochs and after the last, and returns
/// the best snapshot. The model is left at its final-epoch parameters.
pub fn fit_with<T: Scalar>(
    model: &mut AsenModel<T>,
    dataset: &Dataset,
    pool: &[usize],
    config: &TrainConfig,
    config_hash: &str,
    mut validate: impl FnMut(&AsenModel<T>, usize) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    config.validate()?;
    if config.epochs == 0 {
        return Err(Error::Spec("epochs must be at least 1".into()));
    }
    let inputs: Vec<Tensor<T>> = dataset.inputs.iter().map(Tensor::cast).collect();
    let ids = dataset.manifest.image_ids();
    let mut state = AdamState::new(model.params());
    let mut tracker = BestTracker::default();
    let mut best: Option<Checkpoint<T>> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let triplets = sample_triplets(
            &dataset.manifest,
            pool,
            config.triplets_per_epoch,
            config.seed ^ epoch as u64,
        )?;
        let lr = lr_schedule(epoch - 1, config.learning_rate, config.lr_decay);
        let mean_loss = train_epoch(model, &inputs, &ids, &triplets, config, &mut state, lr)?;
        let due = epoch % config.val_stride == 0 || epoch == config.epochs;
        let val_metric = if due {
            let m = validate(model, epoch)?;
            if tracker.offer(epoch, m) {
                best = Some(Checkpoint {
                    config_hash: config_hash.to_string(),
                    epoch,
                    metric: m,
                    params: model.params().clone(),
                });
            }
            Some(m)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            lr,
            val_metric,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let best = match best {
        Some(b) => b,
        // every validation produced NaN; fall back to the final parameters
        None => Checkpoint {
            config_hash: config_hash.to_string(),
            epoch: config.epochs,
            metric: f64::NAN,
            params: model.params().clone(),
        },
    };
    Ok(FitOutcome { best, log })
}

/// Trains on the train split and selects by the validation split.
pub fn fit<T: Scalar>(
    model: &mut AsenModel<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    config_hash: &str,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    let manifest = &dataset.manifest;
    let train = manifest.indices(Split::Train)?;
    let val = manifest.indices(Split::Val)?;
    if val.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    match config.val_metric {
        ValidationMetric::Map => {
            let split = RetrievalSplit::from_manifest(manifest, Split::Val)?;
            fit_with(
                model,
                dataset,
                &train,
                config,
                config_hash,
                |m, _| Ok(evaluate_map(&mut ModelScorer::new(m, &dataset.inputs), &split)?.overall),
                on_epoch,
            )
        }
        ValidationMetric::TripletAccuracy => {
            let triplets = sample_triplets(manifest, &val, config.val_triplets, config.seed)?;
            fit_with(
                model,
                dataset,
                &train,
                config,
                config_hash,
                |m, _| {
                    evaluate_triplet_accuracy(&mut ModelScorer::new(m, &dataset.inputs), &triplets)
                },
                on_epoch,
            )
        }
    }
}

/// Checks every parameter gradient of the full model's triplet loss on a
/// tiny configuration (`c = 8`, `4 x 4` maps, `c' = 4`, `r = 2`,
/// `d_embed = 8`, three attributes) against central differences.
///
/// The margin is large enough that the hinge stays active.
pub fn check_loss_gradients(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let backbone = BackboneConfig {
        kind: BackboneKind::Precomputed,
        out_channels: 8,
        out_spatial: 4,
        ..BackboneConfig::default()
    };
    let config = AsenConfig {
        c: 8,
        c_prime: 4,
        r: 2,
        d_embed: 8,
        n: 3,
        variant: Variant::Full,
        attention_bias: false,
    };
    let model = AsenModel::<f64>::new(config, &backbone, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let maps: Vec<Tensor<f64>> = (0..3)
        .map(|_| {
            let data = (0..8 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![8, 4, 4], data)
        })
        .collect::<Result<_>>()?;
    let attribute = rng.gen_range(0..3);
    grad_check(
        |g, p| triplet_loss_on_graph(&model, g, p, [&maps[0], &maps[1], &maps[2]], attribute, 2.5),
        model.params(),
        tolerance,
    )
}
