//! Attribute-specific retrieval (MAP), triplet relation prediction and
//! top-k reranking.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::autodiff::kernels;
use crate::data::{DatasetManifest, Role, Split};
use crate::error::{Error, Result};
use crate::model::AsenModel;
use crate::tensor::{Scalar, Tensor};
use crate::training::Triplet;

/// Similarity between two images (dataset indices) over a set of attributes.
pub trait PairScorer {
    fn score(&mut self, query: usize, candidate: usize, attrs: &[usize]) -> Result<f64>;
}

impl<F> PairScorer for F
where
    F: FnMut(usize, usize, &[usize]) -> Result<f64>,
{
    fn score(&mut self, query: usize, candidate: usize, attrs: &[usize]) -> Result<f64> {
        self(query, candidate, attrs)
    }
}

/// Scores with a model, caching every image's embeddings for all attributes.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a AsenModel<T>,
    inputs: &'a [Tensor<f32>],
    cache: HashMap<usize, Vec<Tensor<T>>>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a AsenModel<T>, inputs: &'a [Tensor<f32>]) -> Self {
        Self {
            model,
            inputs,
            cache: HashMap::new(),
        }
    }

    pub fn embeddings(&mut self, image: usize) -> Result<&[Tensor<T>]> {
        if !self.cache.contains_key(&image) {
            let input = self
                .inputs
                .get(image)
                .ok_or_else(|| Error::Contract(format!("image index {image} out of range")))?;
            let attrs: Vec<usize> = (0..self.model.config().n).collect();
            let e = self.model.embeddings(&input.cast(), &attrs)?;
            self.cache.insert(image, e);
        }
        Ok(&self.cache[&image])
    }
}

impl<T: Scalar> PairScorer for ModelScorer<'_, T> {
    fn score(&mut self, query: usize, candidate: usize, attrs: &[usize]) -> Result<f64> {
        if attrs.is_empty() {
            return Err(Error::Contract(
                "similarity needs at least one attribute".into(),
            ));
        }
        let n = self.model.config().n;
        if let Some(&bad) = attrs.iter().find(|&&a| a >= n) {
            return Err(Error::Vocabulary { index: bad, n });
        }
        self.embeddings(query)?;
        self.embeddings(candidate)?;
        let (q, c) = (&self.cache[&query], &self.cache[&candidate]);
        let mut total = 0.0;
        for &a in attrs {
            let s = kernels::cosine_similarity(q[a].data(), c[a].data())?;
            total += s.to_f64().unwrap_or(f64::NAN);
        }
        Ok(total)
    }
}

/// Uniform scores in `[0, 1)` drawn from a hash of the pair, so repeated
/// calls agree.
#[derive(Clone, Copy, Debug)]
pub struct RandomScorer {
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl PairScorer for RandomScorer {
    fn score(&mut self, query: usize, candidate: usize, attrs: &[usize]) -> Result<f64> {
        let mut h = splitmix(self.seed);
        for x in [query, candidate].into_iter().chain(attrs.iter().copied()) {
            h = splitmix(h ^ x as u64);
        }
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Reverses another scorer's order.
pub struct Negated<S>(pub S);

impl<S: PairScorer> PairScorer for Negated<S> {
    fn score(&mut self, query: usize, candidate: usize, attrs: &[usize]) -> Result<f64> {
        Ok(-self.0.score(query, candidate, attrs)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalQuery {
    pub image: usize,
    pub attribute: usize,
    pub value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalCandidate {
    pub image: usize,
    pub value: usize,
}

/// Queries plus, per attribute, the candidates annotated for it.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSplit {
    pub queries: Vec<RetrievalQuery>,
    pub candidates: Vec<Vec<RetrievalCandidate>>,
    /// Ids indexed by image; used to break score ties.
    pub image_ids: Vec<String>,
}

impl RetrievalSplit {
    /// Every (query image, annotated attribute) pair of `split` becomes a
    /// query; candidates are the split's candidate images.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let n_attr = manifest.vocabulary.len();
        let mut queries = Vec::new();
        for i in manifest.role_indices(split, Role::Query)? {
            for &(attribute, value) in &manifest.records[i].labels {
                queries.push(RetrievalQuery {
                    image: i,
                    attribute,
                    value,
                });
            }
        }
        let mut candidates = vec![Vec::new(); n_attr];
        for i in manifest.role_indices(split, Role::Candidate)? {
            for &(attribute, value) in &manifest.records[i].labels {
                candidates[attribute].push(RetrievalCandidate { image: i, value });
            }
        }
        if queries.is_empty() {
            return Err(Error::Contract(format!(
                "{} split has no queries",
                split.as_str()
            )));
        }
        Ok(Self {
            queries,
            candidates,
            image_ids: manifest.image_ids(),
        })
    }
}

/// Candidates of one query in ranked order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: RetrievalQuery,
    pub images: Vec<usize>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

/// Sorts by descending score, then ascending image id.
pub fn rank_candidates(
    scorer: &mut impl PairScorer,
    split: &RetrievalSplit,
    query: RetrievalQuery,
) -> Result<RankingResult> {
    let cands = split
        .candidates
        .get(query.attribute)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| {
            Error::Contract(format!("no candidates for attribute {}", query.attribute))
        })?;
    let mut scored = Vec::with_capacity(cands.len());
    for c in cands {
        let s = scorer.score(query.image, c.image, &[query.attribute])?;
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "score" });
        }
        scored.push((s, *c));
    }
    let ids = &split.image_ids;
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then_with(|| ids[a.image].cmp(&ids[b.image]))
    });
    Ok(RankingResult {
        query,
        images: scored.iter().map(|(_, c)| c.image).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
        relevant: scored.iter().map(|(_, c)| c.value == query.value).collect(),
    })
}

/// Mean of precision@k over the ranks `k` of relevant items. `None` when
/// nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Expected average precision of a uniformly random ranking of `n` items of
/// which `r` are relevant.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 <= r <= n");
    let harmonic: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let n_f = n as f64;
    if n == 1 {
        return 1.0;
    }
    harmonic / n_f + (r - 1) as f64 * (n_f - harmonic) / (n_f * (n_f - 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// Mean AP over each attribute's queries; `None` if it had none.
    pub per_attribute: Vec<Option<f64>>,
    /// Mean AP over all scored queries.
    pub overall: f64,
    /// AP of each query in split order; `None` for excluded queries.
    pub per_query: Vec<Option<f64>>,
    pub scored: usize,
    /// Queries without any relevant candidate.
    pub excluded: usize,
}

pub fn evaluate_map(scorer: &mut impl PairScorer, split: &RetrievalSplit) -> Result<MapReport> {
    if split.queries.is_empty() {
        return Err(Error::Contract("retrieval split has no queries".into()));
    }
    let n_attr = split.candidates.len();
    let mut sums = vec![(0.0, 0usize); n_attr];
    let mut per_query = Vec::with_capacity(split.queries.len());
    for &q in &split.queries {
        let ranking = rank_candidates(scorer, split, q)?;
        let ap = average_precision(&ranking.relevant);
        if let Some(ap) = ap {
            sums[q.attribute].0 += ap;
            sums[q.attribute].1 += 1;
        }
        per_query.push(ap);
    }
    let scored: usize = sums.iter().map(|s| s.1).sum();
    if scored == 0 {
        return Err(Error::Contract("no query has a relevant candidate".into()));
    }
    let overall = per_query.iter().flatten().sum::<f64>() / scored as f64;
    Ok(MapReport {
        per_attribute: sums
            .iter()
            .map(|&(s, n)| (n > 0).then(|| s / n as f64))
            .collect(),
        overall,
        excluded: per_query.len() - scored,
        per_query,
        scored,
    })
}

/// Mean over queries with a relevant candidate of the random-ranking
/// expected AP.
pub fn random_baseline_map(split: &RetrievalSplit) -> f64 {
    let aps: Vec<f64> = split
        .queries
        .iter()
        .filter_map(|q| {
            let cands = &split.candidates[q.attribute];
            let r = cands.iter().filter(|c| c.value == q.value).count();
            (r > 0).then(|| expected_random_ap(cands.len(), r))
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Share of triplets whose positive scores strictly above the negative.
pub fn evaluate_triplet_accuracy(
    scorer: &mut impl PairScorer,
    triplets: &[Triplet],
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Contract("no triplets to evaluate".into()));
    }
    let mut correct = 0usize;
    for t in triplets {
        let pos = scorer.score(t.anchor, t.positive, &[t.attribute])?;
        let neg = scorer.score(t.anchor, t.negative, &[t.attribute])?;
        if pos > neg {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Reorders the first `k` entries of `ranking` by descending fine-grained
/// similarity to `query` over `attrs`; equal scores keep their order and
/// the tail is untouched.
pub fn rerank_topk(
    scorer: &mut impl PairScorer,
    query: usize,
    ranking: &[usize],
    attrs: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if k > ranking.len() {
        return Err(Error::Contract(format!(
            "cannot rerank top {k} of {} candidates",
            ranking.len()
        )));
    }
    let mut head = Vec::with_capacity(k);
    for &c in &ranking[..k] {
        head.push((scorer.score(query, c, attrs)?, c));
    }
    head.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut out: Vec<usize> = head.into_iter().map(|(_, c)| c).collect();
    out.extend_from_slice(&ranking[k..]);
    Ok(out)
}

/// Tab-separated table: a header of attribute names plus `overall`, then one
/// row per model with MAP values as percentages.
pub fn render_map_table(attribute_names: &[&str], rows: &[(String, &MapReport)]) -> String {
    let mut out = String::from("model");
    for name in attribute_names {
        write!(out, "\t{name}").unwrap();
    }
    out.push_str("\toverall\n");
    for (label, report) in rows {
        out.push_str(label);
        for v in &report.per_attribute {
            match v {
                Some(v) => write!(out, "\t{:.2}", 100.0 * v).unwrap(),
                None => out.push_str("\t-"),
            }
        }
        writeln!(out, "\t{:.2}", 100.0 * report.overall).unwrap();
    }
    out
}
