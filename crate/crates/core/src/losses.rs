//! Generation-side losses: the four reconstruction terms, the code-compactness
//! penalty, and the adversarial objectives, each as a plain value function
//! over a generation record and as a graph builder for training.

use crate::config::{AdvMode, RunConfig};
use crate::graph::{Graph, Var, PROB_EPS};
use crate::nets::{DiscriminatorParams, GenNodes, GenerationRecord};
use crate::params::{bind, Binding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::PairBatch;

/// Mean absolute deviation between two equally shaped tensors, accumulated in
/// f64 so the value side can serve as an oracle for the graph side.
pub fn mean_abs_dev<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mean_abs_dev shape mismatch");
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    sum / a.numel() as f64
}

fn mean_over_pairs<S: Scalar, F: Fn(usize) -> (Tensor<S>, Tensor<S>)>(n: usize, f: F) -> f64 {
    (0..n).map(|i| {
        let (a, b) = f(i);
        mean_abs_dev(&a, &b)
    }).sum::<f64>() / n as f64
}

/// Cross reconstruction: each source compared against the image generated
/// from its own identity codes and the other modality's excluded codes.
pub fn recon_cross<S: Scalar>(batch: &PairBatch<S>, rec: &GenerationRecord<S>) -> f64 {
    let n = batch.len();
    // cross_from[1] carries the infrared identity into the visible domain.
    mean_over_pairs(n, |i| (batch.pairs()[i].visible.clone(), rec.cross_from[1][i].clone()))
        + mean_over_pairs(n, |i| (batch.pairs()[i].infrared.clone(), rec.cross_from[0][i].clone()))
}

/// Same-modality reconstruction of each source from its own codes.
pub fn recon_same<S: Scalar>(batch: &PairBatch<S>, rec: &GenerationRecord<S>) -> f64 {
    let n = batch.len();
    mean_over_pairs(n, |i| (batch.pairs()[i].visible.clone(), rec.self_recon[0][i].clone()))
        + mean_over_pairs(n, |i| (batch.pairs()[i].infrared.clone(), rec.self_recon[1][i].clone()))
}

/// Cycle reconstruction: each source rebuilt purely from codes re-encoded out
/// of the cross translations.
pub fn recon_cycle<S: Scalar>(batch: &PairBatch<S>, rec: &GenerationRecord<S>) -> f64 {
    let n = batch.len();
    mean_over_pairs(n, |i| (batch.pairs()[i].visible.clone(), rec.cycle[0][i].clone()))
        + mean_over_pairs(n, |i| (batch.pairs()[i].infrared.clone(), rec.cycle[1][i].clone()))
}

/// Latent code reconstruction: style and excluded codes must survive the
/// round trip through the generated images, for both modalities.
pub fn recon_code<S: Scalar>(rec: &GenerationRecord<S>) -> f64 {
    let mut total = 0.0;
    for m in 0..2 {
        let n = rec.bundles[m].len();
        total += mean_over_pairs(n, |i| {
            (rec.bundles[m][i].style.clone(), rec.hat_bundles[m][i].style.clone())
        });
        total += mean_over_pairs(n, |i| {
            (rec.bundles[m][i].id_excluded(), rec.hat_bundles[m][i].id_excluded())
        });
    }
    total
}

/// Compactness penalty on the identity-excluded codes of both modalities:
/// half the squared norm per sample, averaged over all samples.
pub fn kl_excluded<S: Scalar>(rec: &GenerationRecord<S>) -> f64 {
    let mut sum = 0.0;
    let mut rows = 0usize;
    for m in 0..2 {
        for b in &rec.bundles[m] {
            sum += b.id_excluded().data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            rows += 1;
        }
    }
    0.5 * sum / rows as f64
}

/// Discriminator probabilities for the adversarial terms, grouped by the
/// domain `m` the discriminator lives in.
pub struct AdvProbs {
    pub real: [Vec<f64>; 2],
    /// `D_m` on the cross translation that landed in domain `m`.
    pub fake_cross: [Vec<f64>; 2],
    /// `D_m` on the illumination-only fake in domain `m`.
    pub fake_illum: [Vec<f64>; 2],
}

fn ln_clamped(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

fn mean_ln(ps: &[f64]) -> f64 {
    ps.iter().map(|&p| ln_clamped(p)).sum::<f64>() / ps.len() as f64
}

fn mean_ln1m(ps: &[f64]) -> f64 {
    ps.iter().map(|&p| ln_clamped(1.0 - p)).sum::<f64>() / ps.len() as f64
}

/// Discriminator objective (minimized by the discriminators): real images
/// scored real, both fake families scored fake, summed over domains.
pub fn adversarial_dis(p: &AdvProbs) -> f64 {
    let mut total = 0.0;
    for m in 0..2 {
        total -= mean_ln(&p.real[m]);
        total -= mean_ln1m(&p.fake_cross[m]);
        total -= mean_ln1m(&p.fake_illum[m]);
    }
    total
}

/// Generator objective over the same probabilities. Minimax keeps the raw
/// `log(1 - D)` terms; the non-saturating form maximizes `log D` instead.
pub fn adversarial_gen(p: &AdvProbs, mode: AdvMode) -> f64 {
    let mut total = 0.0;
    for m in 0..2 {
        match mode {
            AdvMode::Minimax => {
                total += mean_ln1m(&p.fake_cross[m]);
                total += mean_ln1m(&p.fake_illum[m]);
            }
            AdvMode::NonSaturating => {
                total -= mean_ln(&p.fake_cross[m]);
                total -= mean_ln(&p.fake_illum[m]);
            }
        }
    }
    total
}

fn stack_images<S: Scalar>(imgs: &[Tensor<S>]) -> Tensor<S> {
    let inner = imgs[0].shape().to_vec();
    let mut shape = vec![imgs.len()];
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(imgs.len() * imgs[0].numel());
    for im in imgs {
        assert_eq!(im.shape(), &inner[..], "stack_images shape mismatch");
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}

/// Runs both discriminators over a batch and its generation record,
/// collecting the probability groups the adversarial losses consume.
pub fn discriminator_probs<S: Scalar>(
    dis: &DiscriminatorParams<S>,
    batch: &PairBatch<S>,
    rec: &GenerationRecord<S>,
) -> AdvProbs {
    let mut g = Graph::new();
    let binding = bind(&mut g, &dis.set, false);
    let run = |g: &mut Graph<S>, m: usize, imgs: Tensor<S>| -> Vec<f64> {
        let x = g.constant(imgs);
        let p = dis.dis[m].forward(g, &binding, x);
        g.value(p).data().iter().map(|v| v.as_f64()).collect()
    };
    let mk = |m: usize| -> Tensor<S> {
        stack_images(&match m {
            0 => batch.pairs().iter().map(|p| p.visible.clone()).collect::<Vec<_>>(),
            _ => batch.pairs().iter().map(|p| p.infrared.clone()).collect::<Vec<_>>(),
        })
    };
    let real = [run(&mut g, 0, mk(0)), run(&mut g, 1, mk(1))];
    let fake_cross = [
        run(&mut g, 0, stack_images(&rec.cross_from[1])),
        run(&mut g, 1, stack_images(&rec.cross_from[0])),
    ];
    let fake_illum = [
        run(&mut g, 0, stack_images(&rec.illum_fake_in[0])),
        run(&mut g, 1, stack_images(&rec.illum_fake_in[1])),
    ];
    AdvProbs { real, fake_cross, fake_illum }
}

/// Weighted sum of the four reconstruction terms.
pub fn recon_total(cfg: &RunConfig, cross: f64, same: f64, cycle: f64, code: f64) -> f64 {
    cfg.lambda_cross * cross + cfg.lambda_same * same + cfg.lambda_cycle * cycle
        + cfg.lambda_code * code
}

/// Full generator-side objective.
pub fn total_objective(
    cfg: &RunConfig,
    recon_total: f64,
    kl: f64,
    adv_gen: f64,
    ce: f64,
    trip: f64,
) -> f64 {
    recon_total + cfg.lambda_kl * kl + cfg.lambda_adv * adv_gen + cfg.lambda_ce * ce
        + cfg.lambda_trip * trip
}

/// Graph nodes for the reconstruction family plus the compactness penalty.
pub struct ReconNodes {
    pub cross: Var,
    pub same: Var,
    pub cycle: Var,
    pub code: Var,
    pub kl: Var,
    pub recon_total: Var,
}

/// Builds the reconstruction and compactness losses over a generation pass.
pub fn recon_kl_nodes<S: Scalar>(g: &mut Graph<S>, cfg: &RunConfig, n: &GenNodes) -> ReconNodes {
    let c1 = g.mean_abs_diff(n.x[0], n.cross_from[1]);
    let c2 = g.mean_abs_diff(n.x[1], n.cross_from[0]);
    let cross = g.add(c1, c2);

    let s1 = g.mean_abs_diff(n.x[0], n.self_recon[0]);
    let s2 = g.mean_abs_diff(n.x[1], n.self_recon[1]);
    let same = g.add(s1, s2);

    let y1 = g.mean_abs_diff(n.x[0], n.cycle[0]);
    let y2 = g.mean_abs_diff(n.x[1], n.cycle[1]);
    let cycle = g.add(y1, y2);

    let mut code_terms = Vec::new();
    for m in 0..2 {
        code_terms.push(g.mean_abs_diff(n.style[m], n.hat_style[m]));
        code_terms.push(g.mean_abs_diff(n.excluded[m], n.hat_ex[m]));
    }
    let code = {
        let ab = g.add(code_terms[0], code_terms[1]);
        let abc = g.add(ab, code_terms[2]);
        g.add(abc, code_terms[3])
    };

    let ex_all = g.concat_rows(&[n.excluded[0], n.excluded[1]]);
    let kl = g.half_mean_row_sq(ex_all);

    let recon_total = g.weighted_sum(&[
        (cross, S::of(cfg.lambda_cross)),
        (same, S::of(cfg.lambda_same)),
        (cycle, S::of(cfg.lambda_cycle)),
        (code, S::of(cfg.lambda_code)),
    ]);
    ReconNodes { cross, same, cycle, code, kl, recon_total }
}

/// Generator adversarial node: scores the live fakes with both
/// discriminators (bound without gradients) and combines per the mode.
pub fn adversarial_gen_node<S: Scalar>(
    g: &mut Graph<S>,
    dis: &DiscriminatorParams<S>,
    binding: &Binding,
    n: &GenNodes,
    mode: AdvMode,
) -> Var {
    let mut terms = Vec::new();
    for m in 0..2 {
        // Fakes that landed in domain m.
        let fc = dis.dis[m].forward(g, binding, n.cross_from[1 - m]);
        let fi = dis.dis[m].forward(g, binding, n.illum_fake_in[m]);
        for p in [fc, fi] {
            let t = match mode {
                AdvMode::Minimax => {
                    let l = g.log1m_clamped(p);
                    (g.mean_all(l), S::one())
                }
                AdvMode::NonSaturating => {
                    let l = g.log_clamped(p);
                    (g.mean_all(l), -S::one())
                }
            };
            terms.push(t);
        }
    }
    let parts: Vec<(Var, S)> = terms;
    g.weighted_sum(&parts)
}

/// Discriminator loss node over already materialized images (real leaves and
/// detached fakes, each array indexed by the domain it belongs to).
pub fn adversarial_dis_node<S: Scalar>(
    g: &mut Graph<S>,
    dis: &DiscriminatorParams<S>,
    binding: &Binding,
    real: [Var; 2],
    fake_cross: [Var; 2],
    fake_illum: [Var; 2],
) -> Var {
    let mut parts: Vec<(Var, S)> = Vec::new();
    for m in 0..2 {
        let pr = dis.dis[m].forward(g, binding, real[m]);
        let lr = g.log_clamped(pr);
        parts.push((g.mean_all(lr), -S::one()));
        for fake in [fake_cross[m], fake_illum[m]] {
            let pf = dis.dis[m].forward(g, binding, fake);
            let lf = g.log1m_clamped(pf);
            parts.push((g.mean_all(lf), -S::one()));
        }
    }
    g.weighted_sum(&parts)
}

/// One row of the training log; every component is recorded unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub recon_cross: f64,
    pub recon_same: f64,
    pub recon_cycle: f64,
    pub recon_code: f64,
    pub kl: f64,
    pub adv_gen: f64,
    pub adv_dis: f64,
    pub ce: f64,
    pub trip: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "iteration,recon_cross,recon_same,recon_cycle,recon_code,kl,adv_gen,adv_dis,ce,trip,total"
    }

    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{},{},{},{}",
            self.recon_cross,
            self.recon_same,
            self.recon_cycle,
            self.recon_code,
            self.kl,
            self.adv_gen,
            self.adv_dis,
            self.ce,
            self.trip,
            self.total
        )
    }

    /// Recomputes the stored total from the components under `cfg` weights.
    pub fn recomputed_total(&self, cfg: &RunConfig) -> f64 {
        let rt = recon_total(cfg, self.recon_cross, self.recon_same, self.recon_cycle, self.recon_code);
        total_objective(cfg, rt, self.kl, self.adv_gen, self.ce, self.trip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{forward_generation, forward_generation_nodes, GeneratorParams};
    use crate::types::{IdentityPair, Modality};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
    }

    #[test]
    fn uniform_discriminator_closed_forms() {
        let half = vec![0.5; 3];
        let p = AdvProbs {
            real: [half.clone(), half.clone()],
            fake_cross: [half.clone(), half.clone()],
            fake_illum: [half.clone(), half.clone()],
        };
        let ln2 = std::f64::consts::LN_2;
        assert!((adversarial_dis(&p) - 6.0 * ln2).abs() < 1e-9);
        assert!((adversarial_gen(&p, AdvMode::Minimax) + 4.0 * ln2).abs() < 1e-9);
        assert!((adversarial_gen(&p, AdvMode::NonSaturating) - 4.0 * ln2).abs() < 1e-9);
    }

    #[test]
    fn perfect_discriminator_saturates_at_clamp() {
        let p = AdvProbs {
            real: [vec![1.0], vec![1.0]],
            fake_cross: [vec![0.0], vec![0.0]],
            fake_illum: [vec![0.0], vec![0.0]],
        };
        // All six terms clamp to ln(1 - eps) ~ -eps: the loss is tiny but finite.
        let d = adversarial_dis(&p);
        assert!(d.is_finite() && d.abs() < 1e-4);
        let g = adversarial_gen(&p, AdvMode::NonSaturating);
        // Generator term hits the clamp floor: -4 ln(eps).
        assert!((g - 4.0 * (-PROB_EPS.ln())).abs() < 1e-6);
    }

    #[test]
    fn mean_abs_dev_matches_hand_value() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![0.0f64, 2.0, 5.0, 3.0]);
        assert_eq!(mean_abs_dev(&a, &b), (1.0 + 0.0 + 2.0 + 1.0) / 4.0);
    }

    #[test]
    fn kl_of_unit_vector_row_is_half() {
        // One row with a single unit entry per modality.
        let mk = |v: f64| crate::types::CodeBundle {
            prototype: Tensor::zeros(vec![1, 1, 1]),
            style: Tensor::zeros(vec![1]),
            illum: Tensor::new(vec![1], vec![v]),
            pose: Tensor::zeros(vec![1]),
        };
        let rec = GenerationRecord::<f64> {
            labels: vec![0],
            bundles: [vec![mk(1.0)], vec![mk(1.0)]],
            self_recon: [vec![], vec![]],
            cross_from: [vec![], vec![]],
            illum_fake_in: [vec![], vec![]],
            hat_bundles: [vec![mk(0.0)], vec![mk(0.0)]],
            cycle: [vec![], vec![]],
        };
        assert!((kl_excluded(&rec) - 0.5).abs() < 1e-12);
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.image_height = 16;
        cfg.image_width = 8;
        cfg.dim_style = 3;
        cfg.dim_illum = 2;
        cfg.dim_pose = 2;
        cfg.proto_channels = 6;
        cfg.stem_width = 4;
        cfg.attr_width = 3;
        cfg.dis_width = 3;
        cfg.res_mid = 4;
        cfg.dec_width = 4;
        cfg.embed_width = 4;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_batch(cfg: &RunConfig) -> PairBatch<f64> {
        let img = |s: f64| {
            let n = cfg.image_height * cfg.image_width * 3;
            Tensor::new(
                vec![cfg.image_height, cfg.image_width, 3],
                (0..n).map(|i| ((i % 13) as f64 / 6.5 - 1.0) * s).collect(),
            )
        };
        PairBatch::new(vec![
            IdentityPair { label: 3, visible: img(0.9), infrared: img(0.4) },
            IdentityPair { label: 7, visible: img(-0.6), infrared: img(0.2) },
        ])
        .unwrap()
    }

    /// Seeds the zero-initialized heads so the graph/value consistency check
    /// exercises non-degenerate adversarial and adaptive paths.
    fn seeded_nets(cfg: &RunConfig) -> (GeneratorParams<f64>, DiscriminatorParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gen = GeneratorParams::<f64>::new(cfg, 8, &mut rng);
        let mut dis = DiscriminatorParams::<f64>::new(cfg, &mut rng);
        for set in [&mut gen.set, &mut dis.set] {
            let ids: Vec<_> = set.ids().collect();
            for id in ids {
                if set.value(id).data().iter().all(|v| *v == 0.0) {
                    for (i, v) in set.value_mut(id).data_mut().iter_mut().enumerate() {
                        *v = 0.05 * ((i % 9) as f64 - 4.0);
                    }
                }
            }
        }
        (gen, dis)
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let cfg = tiny_cfg();
        let (gen, dis) = seeded_nets(&cfg);
        let batch = tiny_batch(&cfg);

        // Value side.
        let rec = forward_generation(&cfg, &gen, &batch);
        let v_cross = recon_cross(&batch, &rec);
        let v_same = recon_same(&batch, &rec);
        let v_cycle = recon_cycle(&batch, &rec);
        let v_code = recon_code(&rec);
        let v_kl = kl_excluded(&rec);
        let probs = discriminator_probs(&dis, &batch, &rec);
        let v_adv_g = adversarial_gen(&probs, AdvMode::NonSaturating);
        let v_adv_mm = adversarial_gen(&probs, AdvMode::Minimax);
        let v_adv_d = adversarial_dis(&probs);

        // Graph side.
        let mut g = Graph::new();
        let bg = bind(&mut g, &gen.set, false);
        let bd = bind(&mut g, &dis.set, false);
        let xv = g.constant(batch.stacked(Modality::Visible));
        let xi = g.constant(batch.stacked(Modality::Infrared));
        let nodes = forward_generation_nodes(&mut g, &cfg, &gen, &bg, xv, xi);
        let rn = recon_kl_nodes(&mut g, &cfg, &nodes);
        let ag = adversarial_gen_node(&mut g, &dis, &bd, &nodes, AdvMode::NonSaturating);
        let amm = adversarial_gen_node(&mut g, &dis, &bd, &nodes, AdvMode::Minimax);
        let ad = adversarial_dis_node(
            &mut g,
            &dis,
            &bd,
            [xv, xi],
            [nodes.cross_from[1], nodes.cross_from[0]],
            [nodes.illum_fake_in[0], nodes.illum_fake_in[1]],
        );

        close(g.value(rn.cross).item().as_f64(), v_cross, 1e-10);
        close(g.value(rn.same).item().as_f64(), v_same, 1e-10);
        close(g.value(rn.cycle).item().as_f64(), v_cycle, 1e-10);
        close(g.value(rn.code).item().as_f64(), v_code, 1e-10);
        close(g.value(rn.kl).item().as_f64(), v_kl, 1e-10);
        close(g.value(ag).item().as_f64(), v_adv_g, 1e-10);
        close(g.value(amm).item().as_f64(), v_adv_mm, 1e-10);
        close(g.value(ad).item().as_f64(), v_adv_d, 1e-10);

        let v_rt = recon_total(&cfg, v_cross, v_same, v_cycle, v_code);
        close(g.value(rn.recon_total).item().as_f64(), v_rt, 1e-10);
    }

    #[test]
    fn loss_report_round_trips_total() {
        let cfg = RunConfig::default();
        let rep = LossReport {
            recon_cross: 0.3,
            recon_same: 0.2,
            recon_cycle: 0.4,
            recon_code: 0.1,
            kl: 0.05,
            adv_gen: 2.0,
            adv_dis: 4.0,
            ce: 3.0,
            trip: 0.3,
            total: 0.0,
        };
        let t = rep.recomputed_total(&cfg);
        let expect = 50.0 * 0.3 + 50.0 * 0.2 + 50.0 * 0.4 + 10.0 * 0.1
            + 1.0 * 0.05 + 20.0 * 2.0 + 1.0 * 3.0 + 1.0 * 0.3;
        assert!((t - expect).abs() < 1e-12);
        let row = rep.csv_row(42);
        assert!(row.starts_with("42,0.3,0.2,"));
        assert_eq!(LossReport::csv_header().split(',').count(), row.split(',').count());
    }
}
