//! Cross-modality retrieval evaluation: Euclidean ranking, CMC and mAP, the
//! repeated-trial search protocols, and intra/inter-class distance histograms.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::graph::Graph;
use crate::nets::{split_attribute, GeneratorParams};
use crate::params::bind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("feature length mismatch: queries have {q}, gallery has {g}")]
    LengthMismatch { q: usize, g: usize },
    #[error("query identity {0} never appears in the gallery")]
    QueryIdentityMissing(usize),
    #[error("identity {0} has no gallery-modality image")]
    NoGalleryImage(usize),
    #[error("no cross-modality pairs (needs both modalities)")]
    NoCrossPairs,
    #[error("evaluation needs at least one query and one gallery image")]
    Empty,
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Ranking outcome of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Per-query gallery indices, best match first.
    pub ranked: Vec<Vec<usize>>,
    /// `cmc[k]`: fraction of queries answered correctly within rank `k+1`.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    pub trial: usize,
}

/// Averaged outcome of a repeated-trial protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedResult {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_trial_map: Vec<f64>,
}

/// Euclidean distance matrix, flat `[n_q * n_g]` in query-major order.
pub fn pairwise_distances<S: Scalar>(
    queries: &Tensor<S>,
    gallery: &Tensor<S>,
) -> Result<Vec<f64>, EvalError> {
    let (nq, dq) = (queries.shape()[0], queries.shape()[1]);
    let (ng, dg) = (gallery.shape()[0], gallery.shape()[1]);
    if dq != dg {
        return Err(EvalError::LengthMismatch { q: dq, g: dg });
    }
    let (q, g) = (queries.data(), gallery.data());
    let mut out = vec![0.0; nq * ng];
    for i in 0..nq {
        for j in 0..ng {
            let mut acc = 0.0;
            for c in 0..dq {
                let diff = q[i * dq + c].as_f64() - g[j * dg + c].as_f64();
                acc += diff * diff;
            }
            out[i * ng + j] = acc.sqrt();
        }
    }
    Ok(out)
}

/// Ranks every query against the gallery (ascending distance, ties broken by
/// gallery index) and scores CMC plus average precision per query.
pub fn cmc_map(
    dists: &[f64],
    query_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
    trial: usize,
) -> Result<RetrievalResult, EvalError> {
    let (nq, ng) = (query_labels.len(), gallery_labels.len());
    if nq == 0 || ng == 0 {
        return Err(EvalError::Empty);
    }
    assert_eq!(dists.len(), nq * ng, "distance matrix shape mismatch");
    for &q in query_labels {
        if !gallery_labels.contains(&q) {
            return Err(EvalError::QueryIdentityMissing(q));
        }
    }

    let depth = max_rank.min(ng).max(1);
    let mut first_hit_counts = vec![0usize; depth];
    let mut ranked = Vec::with_capacity(nq);
    let mut per_query_ap = Vec::with_capacity(nq);
    for qi in 0..nq {
        let row = &dists[qi * ng..(qi + 1) * ng];
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));

        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = None;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(pos);
                }
            }
        }
        per_query_ap.push(ap / hits as f64);
        let first = first_hit.expect("guarded: query identity present");
        if first < depth {
            first_hit_counts[first] += 1;
        }
        ranked.push(order);
    }

    let mut cmc = Vec::with_capacity(depth);
    let mut cum = 0usize;
    for k in 0..depth {
        cum += first_hit_counts[k];
        cmc.push(cum as f64 / nq as f64);
    }
    let map = per_query_ap.iter().sum::<f64>() / nq as f64;
    Ok(RetrievalResult { ranked, cmc, per_query_ap, map, trial })
}

fn average_trials(mut trials: Vec<RetrievalResult>) -> AggregatedResult {
    assert!(!trials.is_empty());
    let depth = trials.iter().map(|t| t.cmc.len()).min().unwrap();
    let mut cmc = vec![0.0; depth];
    for t in &trials {
        for k in 0..depth {
            cmc[k] += t.cmc[k];
        }
    }
    for v in cmc.iter_mut() {
        *v /= trials.len() as f64;
    }
    let per_trial_map: Vec<f64> = trials.iter().map(|t| t.map).collect();
    let map = per_trial_map.iter().sum::<f64>() / trials.len() as f64;
    trials.clear();
    AggregatedResult { cmc, map, per_trial_map }
}

/// Single-shot all-search: every infrared image queries a gallery holding one
/// randomly drawn visible image per identity; repeated over `trials` and
/// averaged.
pub fn single_shot_all_search<S: Scalar>(
    features: &Tensor<S>,
    identities: &[usize],
    modalities: &[Modality],
    trials: usize,
    max_rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AggregatedResult, EvalError> {
    let n = identities.len();
    assert_eq!(features.shape()[0], n);
    assert_eq!(modalities.len(), n);
    let queries: Vec<usize> =
        (0..n).filter(|&i| modalities[i] == Modality::Infrared).collect();
    if queries.is_empty() {
        return Err(EvalError::Empty);
    }
    // Visible pool per query identity; every query identity needs at least one.
    let mut ids: Vec<usize> = queries.iter().map(|&i| identities[i]).collect();
    ids.sort();
    ids.dedup();
    let pool: Vec<(usize, Vec<usize>)> = ids
        .iter()
        .map(|&id| {
            (
                id,
                (0..n)
                    .filter(|&i| identities[i] == id && modalities[i] == Modality::Visible)
                    .collect::<Vec<usize>>(),
            )
        })
        .collect();
    for (id, v) in &pool {
        if v.is_empty() {
            return Err(EvalError::NoGalleryImage(*id));
        }
    }

    let q_feat = select_feature_rows(features, &queries);
    let q_labels: Vec<usize> = queries.iter().map(|&i| identities[i]).collect();
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials.max(1) {
        let gallery: Vec<usize> =
            pool.iter().map(|(_, v)| *v.choose(rng).unwrap()).collect();
        let g_feat = select_feature_rows(features, &gallery);
        let g_labels: Vec<usize> = gallery.iter().map(|&i| identities[i]).collect();
        let d = pairwise_distances(&q_feat, &g_feat)?;
        results.push(cmc_map(&d, &q_labels, &g_labels, max_rank, trial)?);
    }
    Ok(average_trials(results))
}

/// Visible-queries-against-infrared protocol over repeated random identity
/// subsets: each trial keeps a random half of the identities and evaluates
/// all their visible images against all their infrared images.
pub fn visible_to_infrared_protocol<S: Scalar>(
    features: &Tensor<S>,
    identities: &[usize],
    modalities: &[Modality],
    trials: usize,
    max_rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AggregatedResult, EvalError> {
    let n = identities.len();
    assert_eq!(features.shape()[0], n);
    assert_eq!(modalities.len(), n);
    let mut ids: Vec<usize> = identities.to_vec();
    ids.sort();
    ids.dedup();
    // Keep only identities that have both modalities.
    let usable: Vec<usize> = ids
        .into_iter()
        .filter(|&id| {
            Modality::BOTH.iter().all(|&m| {
                (0..n).any(|i| identities[i] == id && modalities[i] == m)
            })
        })
        .collect();
    if usable.is_empty() {
        return Err(EvalError::NoCrossPairs);
    }
    let half = (usable.len() + 1) / 2;
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials.max(1) {
        let subset: Vec<usize> = usable.choose_multiple(rng, half).copied().collect();
        let q_idx: Vec<usize> = (0..n)
            .filter(|&i| modalities[i] == Modality::Visible && subset.contains(&identities[i]))
            .collect();
        let g_idx: Vec<usize> = (0..n)
            .filter(|&i| modalities[i] == Modality::Infrared && subset.contains(&identities[i]))
            .collect();
        let d = pairwise_distances(
            &select_feature_rows(features, &q_idx),
            &select_feature_rows(features, &g_idx),
        )?;
        let q_labels: Vec<usize> = q_idx.iter().map(|&i| identities[i]).collect();
        let g_labels: Vec<usize> = g_idx.iter().map(|&i| identities[i]).collect();
        results.push(cmc_map(&d, &q_labels, &g_labels, max_rank, trial)?);
    }
    Ok(average_trials(results))
}

fn select_feature_rows<S: Scalar>(features: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Binned intra-class vs inter-class cross-modality distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    /// `bins + 1` strictly increasing edges covering `[0, max]`.
    pub edges: Vec<f64>,
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
    pub intra_mean: f64,
    pub inter_mean: f64,
}

/// Histograms every (visible, infrared) feature distance, split by whether
/// the two images share an identity.
pub fn distance_histogram<S: Scalar>(
    features: &Tensor<S>,
    identities: &[usize],
    modalities: &[Modality],
    bins: usize,
) -> Result<DistanceHistogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::NoBins);
    }
    let n = identities.len();
    let vis: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Visible).collect();
    let ir: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Infrared).collect();
    if vis.is_empty() || ir.is_empty() {
        return Err(EvalError::NoCrossPairs);
    }
    let d = pairwise_distances(
        &select_feature_rows(features, &vis),
        &select_feature_rows(features, &ir),
    )?;
    let mut intra_d = Vec::new();
    let mut inter_d = Vec::new();
    for (a, &vi) in vis.iter().enumerate() {
        for (b, &xi) in ir.iter().enumerate() {
            let dist = d[a * ir.len() + b];
            if identities[vi] == identities[xi] {
                intra_d.push(dist);
            } else {
                inter_d.push(dist);
            }
        }
    }
    if intra_d.is_empty() && inter_d.is_empty() {
        return Err(EvalError::NoCrossPairs);
    }
    let max = intra_d
        .iter()
        .chain(&inter_d)
        .fold(0.0f64, |m, &v| m.max(v))
        .max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let bucket = |v: f64| ((v / max * bins as f64) as usize).min(bins - 1);
    let mut intra = vec![0usize; bins];
    let mut inter = vec![0usize; bins];
    for &v in &intra_d {
        intra[bucket(v)] += 1;
    }
    for &v in &inter_d {
        inter[bucket(v)] += 1;
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(DistanceHistogram {
        edges,
        intra,
        inter,
        intra_mean: mean(&intra_d),
        inter_mean: mean(&inter_d),
    })
}

/// `rank,cmc` rows with an `mAP` footer.
pub fn cmc_csv(result: &AggregatedResult) -> String {
    let mut out = String::from("rank,cmc\n");
    for (k, v) in result.cmc.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", k + 1));
    }
    out.push_str(&format!("mAP,{}\n", result.map));
    out
}

/// `bin_low,bin_high,intra,inter` rows.
pub fn histogram_csv(h: &DistanceHistogram) -> String {
    let mut out = String::from("bin_low,bin_high,intra,inter\n");
    for i in 0..h.intra.len() {
        out.push_str(&format!("{},{},{},{}\n", h.edges[i], h.edges[i + 1], h.intra[i], h.inter[i]));
    }
    out
}

/// Runs the retrieval feature pathway over a set of images (no gradients),
/// in fixed-size chunks, returning `[N, dim_feature]` rows in input order.
pub fn extract_features<S: Scalar>(
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    images: &[Tensor<S>],
    modalities: &[Modality],
) -> Tensor<S> {
    assert_eq!(images.len(), modalities.len());
    let n = images.len();
    let d = cfg.dim_feature;
    let mut out = vec![S::zero(); n * d];
    const CHUNK: usize = 32;
    for m in Modality::BOTH {
        let idx: Vec<usize> = (0..n).filter(|&i| modalities[i] == m).collect();
        for chunk in idx.chunks(CHUNK) {
            let mut g = Graph::new();
            let binding = bind(&mut g, &gen.set, false);
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(images[chunk[0]].shape());
            let mut data = Vec::with_capacity(chunk.len() * images[chunk[0]].numel());
            for &i in chunk {
                data.extend_from_slice(images[i].data());
            }
            let x = g.constant(Tensor::new(shape, data));
            let proto = gen.proto_enc[m.index()].forward(&mut g, &binding, x);
            let attr = gen.attr_enc[m.index()].forward(&mut g, &binding, x);
            let (style, _, _) = split_attribute(&mut g, cfg, attr);
            let embedded = gen.feat.embed_prototype(&mut g, &binding, proto);
            let f = gen.feat.feature(&mut g, &binding, cfg.feature_mode, embedded, style);
            let fv = g.value(f);
            for (r, &i) in chunk.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&fv.data()[r * d..(r + 1) * d]);
            }
        }
    }
    Tensor::new(vec![n, d], out)
}
