//! Hierarchical feature learning: assembles retrieval features from real and
//! generated sources on an alternating schedule, and scores them with an
//! identity classifier plus a batch-hard triplet objective.

use crate::config::{RunConfig, SamplingMode};
use crate::graph::{Graph, Var};
use crate::nets::{GenNodes, GeneratorParams};
use crate::params::Binding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a feature row's codes come from: the two real sources and the two
/// cross-modality translations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSource {
    Visible,
    VisToIr,
    Infrared,
    IrToVis,
}

/// Cycle order used by the cross-source rotation.
pub const SOURCE_ORDER: [FeatureSource; 4] = [
    FeatureSource::Visible,
    FeatureSource::VisToIr,
    FeatureSource::Infrared,
    FeatureSource::IrToVis,
];

/// One feature row: which pair it describes and where its two code halves
/// are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePick {
    pub pair: usize,
    pub proto_src: FeatureSource,
    pub style_src: FeatureSource,
}

/// Per-iteration sampling plan. In the alternating mode, even iterations use
/// matched prototype/style sources while odd iterations pair each source with
/// a rotating partner (the rotation advances every other iteration and cycles
/// with period three). The plain mode uses only the two real sources.
pub fn sample_plan(n_pairs: usize, iteration: u64, mode: SamplingMode) -> Vec<FeaturePick> {
    let mut plan = Vec::new();
    match mode {
        SamplingMode::Original => {
            for pair in 0..n_pairs {
                for src in [FeatureSource::Visible, FeatureSource::Infrared] {
                    plan.push(FeaturePick { pair, proto_src: src, style_src: src });
                }
            }
        }
        SamplingMode::Alternate => {
            if iteration % 2 == 0 {
                for pair in 0..n_pairs {
                    for src in SOURCE_ORDER {
                        plan.push(FeaturePick { pair, proto_src: src, style_src: src });
                    }
                }
            } else {
                let r = ((iteration - 1) / 2 % 3 + 1) as usize;
                for pair in 0..n_pairs {
                    for k in 0..4 {
                        plan.push(FeaturePick {
                            pair,
                            proto_src: SOURCE_ORDER[k],
                            style_src: SOURCE_ORDER[(k + r) % 4],
                        });
                    }
                }
            }
        }
    }
    plan
}

fn source_nodes(nodes: &GenNodes, src: FeatureSource) -> (Var, Var) {
    // (prototype map, style code) for each source. Translated sources use the
    // codes re-encoded from the generated image, so gradients reach the
    // generator through the feature path.
    match src {
        FeatureSource::Visible => (nodes.proto[0], nodes.style[0]),
        FeatureSource::Infrared => (nodes.proto[1], nodes.style[1]),
        FeatureSource::VisToIr => (nodes.hat_proto[0], nodes.hat_style[0]),
        FeatureSource::IrToVis => (nodes.hat_proto[1], nodes.hat_style[1]),
    }
}

/// Graph handles for one feature-learning pass.
pub struct HflNodes {
    /// Retrieval features `[K, dim_feature]`, rows in plan order.
    pub features: Var,
    /// Identity class per feature row.
    pub labels: Vec<usize>,
    pub ce: Var,
    pub trip: Var,
}

/// Builds retrieval features for a sampling plan over one generation pass,
/// then the classifier and triplet losses. `labels[i]` is the class of pair
/// `i`; every involved prototype is embedded in a single stacked pass.
pub fn hfl_nodes<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &RunConfig,
    gen: &GeneratorParams<S>,
    binding: &Binding,
    nodes: &GenNodes,
    labels: &[usize],
    iteration: u64,
) -> HflNodes {
    let n_pairs = labels.len();
    let plan = sample_plan(n_pairs, iteration, cfg.sampling);
    assert!(!plan.is_empty());

    // Stack each used source once: prototypes through the embedder, styles raw.
    let mut used: Vec<FeatureSource> = Vec::new();
    for p in &plan {
        for s in [p.proto_src, p.style_src] {
            if !used.contains(&s) {
                used.push(s);
            }
        }
    }
    let pos = |s: FeatureSource| used.iter().position(|&u| u == s).unwrap();

    let protos: Vec<Var> = used.iter().map(|&s| source_nodes(nodes, s).0).collect();
    let styles: Vec<Var> = used.iter().map(|&s| source_nodes(nodes, s).1).collect();
    let proto_stack = g.concat_rows(&protos);
    let style_stack = g.concat_rows(&styles);
    let embedded = gen.feat.embed_prototype(g, binding, proto_stack);

    let proto_rows: Vec<usize> = plan.iter().map(|p| pos(p.proto_src) * n_pairs + p.pair).collect();
    let style_rows: Vec<usize> = plan.iter().map(|p| pos(p.style_src) * n_pairs + p.pair).collect();
    let p_sel = g.select_rows(embedded, &proto_rows);
    let s_sel = g.select_rows(style_stack, &style_rows);
    let features = gen.feat.feature(g, binding, cfg.feature_mode, p_sel, s_sel);

    let row_labels: Vec<usize> = plan.iter().map(|p| labels[p.pair]).collect();
    let logits = gen.feat.classify(g, binding, features);
    let ce = g.cross_entropy_mean(logits, &row_labels);
    let trip = triplet_node(g, features, &row_labels, S::of(cfg.triplet_margin));
    HflNodes { features, labels: row_labels, ce, trip }
}

/// Euclidean distance matrix (flat `K x K`, f64) over feature rows.
fn distance_matrix<S: Scalar>(f: &Tensor<S>) -> Vec<f64> {
    let k = f.shape()[0];
    let d = f.shape()[1];
    let rows = f.data();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let mut acc = 0.0;
            for c in 0..d {
                let diff = rows[i * d + c].as_f64() - rows[j * d + c].as_f64();
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            out[i * k + j] = dist;
            out[j * k + i] = dist;
        }
    }
    out
}

/// Batch-hard mining: per anchor, the farthest same-identity row and the
/// nearest different-identity row. Ties break toward the lowest index; the
/// anchor itself counts as a (zero-distance) positive.
pub fn mine_batch_hard(dists: &[f64], labels: &[usize]) -> Vec<(usize, usize)> {
    let k = labels.len();
    assert_eq!(dists.len(), k * k);
    (0..k)
        .map(|a| {
            let mut hp = None;
            let mut hn = None;
            for j in 0..k {
                let d = dists[a * k + j];
                if labels[j] == labels[a] {
                    if hp.map_or(true, |(_, best)| d > best) {
                        hp = Some((j, d));
                    }
                } else if hn.map_or(true, |(_, best)| d < best) {
                    hn = Some((j, d));
                }
            }
            let (hp, _) = hp.expect("anchor has at least itself as positive");
            let (hn, _) = hn.expect("batch must contain a second identity");
            (hp, hn)
        })
        .collect()
}

/// Batch-hard triplet loss as a plain value (oracle for the graph builder).
pub fn triplet_batch_hard<S: Scalar>(f: &Tensor<S>, labels: &[usize], margin: f64) -> f64 {
    let k = labels.len();
    let dists = distance_matrix(f);
    let mined = mine_batch_hard(&dists, labels);
    let mut total = 0.0;
    for (a, &(hp, hn)) in mined.iter().enumerate() {
        total += (dists[a * k + hp] - dists[a * k + hn] + margin).max(0.0);
    }
    total / k as f64
}

/// Graph version of the batch-hard triplet loss: mining happens on values,
/// the selected distances stay differentiable.
pub fn triplet_node<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    labels: &[usize],
    margin: S,
) -> Var {
    let dists = distance_matrix(g.value(features));
    let mined = mine_batch_hard(&dists, labels);
    let terms: Vec<Var> = mined
        .iter()
        .enumerate()
        .map(|(a, &(hp, hn))| {
            let dp = g.row_distance(features, a, hp);
            let dn = g.row_distance(features, a, hn);
            let diff = g.sub(dp, dn);
            let shifted = g.add_const(diff, margin);
            g.relu(shifted)
        })
        .collect();
    let stacked = g.stack_scalars(&terms);
    g.mean_all(stacked)
}

/// Identity cross-entropy as a plain value (oracle for the graph op).
pub fn cross_entropy_value<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let b = logits.shape()[0];
    let c = logits.shape()[1];
    assert_eq!(labels.len(), b);
    let mut total = 0.0;
    for i in 0..b {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]].as_f64();
    }
    total / b as f64
}

/// Clamps the learned mixing weight back into `[0, 1]` (called after every
/// optimizer step).
pub fn clamp_alpha<S: Scalar>(gen: &mut GeneratorParams<S>) {
    let id = gen.feat.alpha;
    let v = &mut gen.set.value_mut(id).data_mut()[0];
    *v = (*v).max(S::zero()).min(S::one());
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_iterations_use_matched_sources() {
        let plan = sample_plan(3, 0, SamplingMode::Alternate);
        assert_eq!(plan.len(), 12);
        assert!(plan.iter().all(|p| p.proto_src == p.style_src));
        let plan2 = sample_plan(2, 8, SamplingMode::Alternate);
        assert!(plan2.iter().all(|p| p.proto_src == p.style_src));
    }

    #[test]
    fn first_odd_iteration_pairs_each_source_with_its_successor() {
        let plan = sample_plan(2, 1, SamplingMode::Alternate);
        assert_eq!(plan.len(), 8);
        let first_pair: Vec<_> = plan.iter().filter(|p| p.pair == 0).collect();
        use FeatureSource::*;
        let expect = [(Visible, VisToIr), (VisToIr, Infrared), (Infrared, IrToVis), (IrToVis, Visible)];
        for (pick, &(ps, ss)) in first_pair.iter().zip(&expect) {
            assert_eq!(pick.proto_src, ps);
            assert_eq!(pick.style_src, ss);
        }
    }

    #[test]
    fn rotation_cycles_with_period_six() {
        let a = sample_plan(2, 1, SamplingMode::Alternate);
        let b = sample_plan(2, 3, SamplingMode::Alternate);
        let c = sample_plan(2, 5, SamplingMode::Alternate);
        let d = sample_plan(2, 7, SamplingMode::Alternate);
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert_ne!(a, c);
        assert_eq!(a, d, "rotation must cycle after three odd iterations");
    }

    #[test]
    fn original_mode_uses_only_real_sources() {
        let plan = sample_plan(3, 5, SamplingMode::Original);
        assert_eq!(plan.len(), 6);
        for p in &plan {
            assert_eq!(p.proto_src, p.style_src);
            assert!(matches!(p.proto_src, FeatureSource::Visible | FeatureSource::Infrared));
        }
    }

    #[test]
    fn triplet_matches_hand_computation() {
        let f = Tensor::new(vec![4, 2], vec![0.0f64, 0.0, 0.0, 1.0, 1.0, 0.0, 3.0, 0.0]);
        let labels = [0, 0, 1, 1];
        let loss = triplet_batch_hard(&f, &labels, 0.3);
        // Anchor terms: 0.3, 0 (clamped), 1.3, 0 (clamped) -> mean 0.4.
        assert!((loss - 0.4).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn identical_features_give_margin_loss_and_lowest_index_ties() {
        let f = Tensor::new(vec![4, 3], vec![0.5f64; 12]);
        let labels = [0, 0, 1, 1];
        assert!((triplet_batch_hard(&f, &labels, 0.3) - 0.3).abs() < 1e-12);
        let mined = mine_batch_hard(&distance_matrix(&f), &labels);
        // All distances tie at zero: both picks fall to the lowest valid index.
        assert_eq!(mined, vec![(0, 2), (0, 2), (2, 0), (2, 0)]);
    }

    #[test]
    fn graph_triplet_matches_value_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![6, 4], data);
        let labels = [0, 1, 2, 0, 1, 2];
        let oracle = triplet_batch_hard(&f, &labels, 0.3);
        let mut g = Graph::new();
        let fv = g.constant(f);
        let node = triplet_node(&mut g, fv, &labels, 0.3);
        assert!((g.value(node).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_value_matches_uniform_closed_form() {
        let logits = Tensor::new(vec![2, 20], vec![0.7f64; 40]);
        let ce = cross_entropy_value(&logits, &[3, 11]);
        assert!((ce - (20.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn graph_ce_matches_value_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let data: Vec<f64> = (0..5 * 7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::new(vec![5, 7], data);
        let labels = [6, 0, 3, 3, 1];
        let oracle = cross_entropy_value(&logits, &labels);
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let node = g.cross_entropy_mean(lv, &labels);
        assert!((g.value(node).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn alpha_clamp_pulls_value_back_into_range() {
        let cfg = crate::config::RunConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = GeneratorParams::<f64>::new(&cfg, 4, &mut rng);
        gen.set.value_mut(gen.feat.alpha).data_mut()[0] = 1.7;
        clamp_alpha(&mut gen);
        assert_eq!(gen.set.value(gen.feat.alpha).data()[0], 1.0);
        gen.set.value_mut(gen.feat.alpha).data_mut()[0] = -0.2;
        clamp_alpha(&mut gen);
        assert_eq!(gen.set.value(gen.feat.alpha).data()[0], 0.0);
    }
}
