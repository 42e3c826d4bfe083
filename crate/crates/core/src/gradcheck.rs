//! Central finite-difference verification of every loss component's analytic
//! gradient, on a tiny double-precision configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::graph::{Graph, Var};
use crate::hfl::hfl_nodes;
use crate::losses::{adversarial_dis_node, adversarial_gen_node, recon_kl_nodes};
use crate::nets::{forward_generation_nodes, DiscriminatorParams, GeneratorParams};
use crate::params::{bind, ParamId};
use crate::tensor::Tensor;
use crate::types::{IdentityPair, Modality, PairBatch};

/// Largest allowed disagreement between analytic and finite-difference
/// gradients.
pub const GRAD_TOL: f64 = 1e-4;

/// Every scalar the generator and discriminator objectives are built from,
/// plus the two weighted totals.
pub const COMPONENTS: [&str; 11] = [
    "recon_cross",
    "recon_same",
    "recon_cycle",
    "recon_code",
    "kl",
    "adv_gen",
    "adv_dis",
    "ce",
    "trip",
    "recon_total",
    "total",
];

/// Worst observed error for one loss component.
#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst_at: String,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub components: Vec<ComponentCheck>,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_err <= self.tolerance)
    }
}

/// The built-in tiny double-precision configuration: 8×8 images, all code
/// dimensions at most 4.
pub fn check_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.image_height = 8;
    cfg.image_width = 8;
    cfg.dim_style = 3;
    cfg.dim_illum = 2;
    cfg.dim_pose = 2;
    cfg.proto_channels = 4;
    cfg.dim_proto_embed = 4;
    cfg.dim_feature = 4;
    cfg.stem_width = 3;
    cfg.attr_width = 3;
    cfg.dis_width = 3;
    cfg.res_mid = 3;
    cfg.dec_width = 4;
    cfg.embed_width = 3;
    cfg.batch_pairs = 2;
    cfg.validate().expect("built-in check config must validate");
    cfg
}

/// `|a - b|` relative to the larger magnitude, falling back to the absolute
/// difference when both are below the tolerance scale.
pub fn grad_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    let diff = (a - b).abs();
    if scale >= GRAD_TOL {
        diff / scale
    } else {
        diff
    }
}

struct Fixture {
    cfg: RunConfig,
    gen: GeneratorParams<f64>,
    dis: DiscriminatorParams<f64>,
    batch: PairBatch<f64>,
    /// Detached fakes the discriminator loss trains on; fixed once so they
    /// stay constant under parameter perturbation (as they are in training).
    baked_cross: [Tensor<f64>; 2],
    baked_illum: [Tensor<f64>; 2],
}

/// Deterministic pseudo-image in `[-1, 1]`.
fn toy_image(h: usize, w: usize, salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1dc0de ^ salt);
    Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(-0.9..0.9)).collect())
}

/// The HFL schedule iteration the check runs at; odd so the re-encoded
/// (hat) pathways also feed the retrieval features.
const CHECK_ITERATION: u64 = 1;

fn fixture(cfg: &RunConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = GeneratorParams::<f64>::new(cfg, 2, &mut rng);
    let mut dis = DiscriminatorParams::<f64>::new(cfg, &mut rng);
    // Check at a generic point: zero-initialized biases and heads put ReLU
    // pre-activations exactly on the kink, where one-sided finite
    // differences legitimately disagree with the (zero) subgradient.
    let mut jitter = ChaCha8Rng::seed_from_u64(0xa5a5);
    for set in [&mut gen.set, &mut dis.set] {
        for id in set.ids().collect::<Vec<_>>() {
            for v in set.value_mut(id).data_mut() {
                *v += jitter.gen_range(-0.05..0.05);
            }
        }
    }
    let (h, w) = (cfg.image_height, cfg.image_width);
    let batch = PairBatch::new(vec![
        IdentityPair { label: 0, visible: toy_image(h, w, 1), infrared: toy_image(h, w, 2) },
        IdentityPair { label: 1, visible: toy_image(h, w, 3), infrared: toy_image(h, w, 4) },
    ])
    .unwrap();

    // Bake the fakes for the discriminator objective from the initial
    // parameters; they are constants of the check.
    let mut g = Graph::<f64>::new();
    let gb = bind(&mut g, &gen.set, false);
    let xv = g.constant(batch.stacked(Modality::Visible));
    let xi = g.constant(batch.stacked(Modality::Infrared));
    let nodes = forward_generation_nodes(&mut g, cfg, &gen, &gb, xv, xi);
    // Indexed by the domain the image lives in.
    let baked_cross =
        [g.value(nodes.cross_from[1]).clone(), g.value(nodes.cross_from[0]).clone()];
    let baked_illum =
        [g.value(nodes.illum_fake_in[0]).clone(), g.value(nodes.illum_fake_in[1]).clone()];
    Fixture { cfg: cfg.clone(), gen, dis, batch, baked_cross, baked_illum }
}

/// Builds every checked loss on one graph. Both parameter sets are bound with
/// gradients enabled so each component's full dependency is verified.
fn build_losses(f: &Fixture, g: &mut Graph<f64>) -> (Vec<Var>, crate::params::Binding, crate::params::Binding) {
    let gb = bind(g, &f.gen.set, true);
    let db = bind(g, &f.dis.set, true);
    let xv = g.constant(f.batch.stacked(Modality::Visible));
    let xi = g.constant(f.batch.stacked(Modality::Infrared));
    let nodes = forward_generation_nodes(g, &f.cfg, &f.gen, &gb, xv, xi);
    let recon = recon_kl_nodes(g, &f.cfg, &nodes);
    let adv_gen = adversarial_gen_node(g, &f.dis, &db, &nodes, f.cfg.adv_mode);
    let labels = f.batch.labels();
    let hfl = hfl_nodes(g, &f.cfg, &f.gen, &gb, &nodes, &labels, CHECK_ITERATION);
    let total = g.weighted_sum(&[
        (recon.recon_total, 1.0),
        (recon.kl, f.cfg.lambda_kl),
        (adv_gen, f.cfg.lambda_adv),
        (hfl.ce, f.cfg.lambda_ce),
        (hfl.trip, f.cfg.lambda_trip),
    ]);

    let real = [
        g.constant(f.batch.stacked(Modality::Visible)),
        g.constant(f.batch.stacked(Modality::Infrared)),
    ];
    let fake_cross = [g.constant(f.baked_cross[0].clone()), g.constant(f.baked_cross[1].clone())];
    let fake_illum = [g.constant(f.baked_illum[0].clone()), g.constant(f.baked_illum[1].clone())];
    let adv_dis = adversarial_dis_node(g, &f.dis, &db, real, fake_cross, fake_illum);

    let vars = vec![
        recon.cross,
        recon.same,
        recon.cycle,
        recon.code,
        recon.kl,
        adv_gen,
        adv_dis,
        hfl.ce,
        hfl.trip,
        recon.recon_total,
        total,
    ];
    (vars, gb, db)
}

fn eval_all(f: &Fixture) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let (vars, _, _) = build_losses(f, &mut g);
    vars.iter().map(|&v| g.value(v).data()[0]).collect()
}

/// A sampled parameter coordinate: which set (0 = generator, 1 =
/// discriminator), which parameter, which flat element.
type Coord = (usize, ParamId, usize);

fn sample_coords(f: &Fixture, per_array: usize) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    for (si, set) in [&f.gen.set, &f.dis.set].into_iter().enumerate() {
        for id in set.ids() {
            let n = set.value(id).numel();
            let k = per_array.min(n);
            let mut picked = Vec::with_capacity(k);
            while picked.len() < k {
                let i = rng.gen_range(0..n);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            out.extend(picked.into_iter().map(|i| (si, id, i)));
        }
    }
    out
}

/// Runs the full suite: analytic gradients of all eleven components against
/// central finite differences over a stratified sample touching every
/// parameter array. `corrupt` poisons one component's analytic gradients so
/// the harness can prove it detects bad gradients.
pub fn run_gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> GradCheckOutcome {
    let mut f = fixture(cfg);

    // Analytic pass: one graph, one backward per component.
    let mut g = Graph::<f64>::new();
    let (vars, gb, db) = build_losses(&f, &mut g);
    let bindings = [gb, db];
    let sets = [f.gen.set.len(), f.dis.set.len()];
    // analytic[case][set] maps ParamId index -> gradient vector (absent if
    // the loss never reaches the parameter).
    let mut analytic: Vec<[Vec<Option<Vec<f64>>>; 2]> = Vec::with_capacity(vars.len());
    for &v in &vars {
        let grads = g.backward(v);
        let mut per_set = [Vec::new(), Vec::new()];
        for si in 0..2 {
            per_set[si] = (0..sets[si])
                .map(|i| grads.get(bindings[si].var(ParamId(i))).map(|s| s.to_vec()))
                .collect();
        }
        analytic.push(per_set);
    }
    if let Some(name) = corrupt {
        let case = COMPONENTS
            .iter()
            .position(|&c| c == name)
            .unwrap_or_else(|| panic!("unknown component {name:?}"));
        for per_set in analytic[case].iter_mut() {
            for slot in per_set.iter_mut().flatten() {
                for v in slot.iter_mut() {
                    *v += 1e-2;
                }
            }
        }
    }
    drop(g);

    let coords = sample_coords(&f, 8);
    let mut checks: Vec<ComponentCheck> = COMPONENTS
        .iter()
        .map(|&name| ComponentCheck { name, max_err: 0.0, worst_at: String::new(), checked: 0 })
        .collect();

    for &(si, id, idx) in &coords {
        let set = if si == 0 { &mut f.gen.set } else { &mut f.dis.set };
        let orig = set.value(id).data()[idx];
        // Small enough that the deep cycle path's curvature stays out of the
        // truncation term, large enough to stay clear of f64 cancellation.
        let h = 1e-6 * orig.abs().max(1.0);
        set.value_mut(id).data_mut()[idx] = orig + h;
        let plus = eval_all(&f);
        let set = if si == 0 { &mut f.gen.set } else { &mut f.dis.set };
        set.value_mut(id).data_mut()[idx] = orig - h;
        let minus = eval_all(&f);
        let set = if si == 0 { &mut f.gen.set } else { &mut f.dis.set };
        set.value_mut(id).data_mut()[idx] = orig;

        for (case, check) in checks.iter_mut().enumerate() {
            let fd = (plus[case] - minus[case]) / (2.0 * h);
            let an = analytic[case][si][id.0]
                .as_ref()
                .map(|v| v[idx])
                .unwrap_or(0.0);
            let err = grad_err(an, fd);
            check.checked += 1;
            if err > check.max_err {
                check.max_err = err;
                let set = if si == 0 { &f.gen.set } else { &f.dis.set };
                check.worst_at = format!("{}[{idx}]", set.name(id));
            }
        }
    }

    GradCheckOutcome { components: checks, tolerance: GRAD_TOL }
}
