//! End-to-end training: alternating discriminator/generator updates, loss
//! logging, and binary checkpoints that resume bit-exactly.

use std::fs;
use std::io::{self, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{DataError, LoadedSet};
use crate::graph::Graph;
use crate::hfl::{clamp_alpha, hfl_nodes};
use crate::losses::{
    adversarial_dis_node, adversarial_gen_node, recon_kl_nodes, LossReport,
};
use crate::nets::{forward_generation_nodes, DiscriminatorParams, GeneratorParams};
use crate::optim::{clip_global_norm, collect_grads, Adam, AdamSlot, GradList, SgdMomentum};
use crate::params::{bind, ParamGroup, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::types::{Modality, PairBatch};

const CKPT_MAGIC: &[u8; 8] = b"HICMDCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("I/O failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Everything a run carries between iterations.
pub struct TrainState<S: Scalar> {
    pub cfg: RunConfig,
    pub gen: GeneratorParams<S>,
    pub dis: DiscriminatorParams<S>,
    pub opt_gen: Adam<S>,
    pub opt_dis: Adam<S>,
    pub opt_feat: SgdMomentum<S>,
    pub rng: ChaCha8Rng,
    /// Completed iterations (0 before the first step).
    pub iteration: u64,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: RunConfig, n_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = GeneratorParams::new(&cfg, n_classes, &mut rng);
        let dis = DiscriminatorParams::new(&cfg, &mut rng);
        let opt_gen = Adam::new(cfg.gen_lr, cfg.adam_beta1, cfg.adam_beta2);
        let opt_dis = Adam::new(cfg.dis_lr, cfg.adam_beta1, cfg.adam_beta2);
        let opt_feat = SgdMomentum::new(cfg.hfl_lr, cfg.hfl_momentum);
        TrainState { cfg, gen, dis, opt_gen, opt_dis, opt_feat, rng, iteration: 0 }
    }

    /// One optimization step over a pair batch: the discriminators update on
    /// detached fakes first, then the generator side trains against the
    /// already-updated discriminators.
    pub fn train_step(&mut self, batch: &PairBatch<S>) -> LossReport {
        let cfg = &self.cfg;

        // Generator-side graph, gradients enabled.
        let mut g = Graph::new();
        let gb = bind(&mut g, &self.gen.set, true);
        let xv = g.constant(batch.stacked(Modality::Visible));
        let xi = g.constant(batch.stacked(Modality::Infrared));
        let nodes = forward_generation_nodes(&mut g, cfg, &self.gen, &gb, xv, xi);

        // Discriminator step on a separate graph; fakes enter as constants so
        // no gradient reaches the generator. Fake arrays are indexed by the
        // domain the image lives in.
        let mut dg = Graph::<S>::new();
        let db = bind(&mut dg, &self.dis.set, true);
        let real = [
            dg.constant(batch.stacked(Modality::Visible)),
            dg.constant(batch.stacked(Modality::Infrared)),
        ];
        let fake_cross = [
            dg.constant(g.value(nodes.cross_from[1]).clone()),
            dg.constant(g.value(nodes.cross_from[0]).clone()),
        ];
        let fake_illum = [
            dg.constant(g.value(nodes.illum_fake_in[0]).clone()),
            dg.constant(g.value(nodes.illum_fake_in[1]).clone()),
        ];
        let d_loss = adversarial_dis_node(&mut dg, &self.dis, &db, real, fake_cross, fake_illum);
        let adv_dis = dg.value(d_loss).data()[0].as_f64();
        let d_grads = dg.backward(d_loss);
        let d_ids: Vec<ParamId> = self.dis.set.ids().collect();
        let mut d_list = collect_grads(&db, &d_grads, &d_ids);
        clip_global_norm(&mut d_list, cfg.grad_clip);
        self.opt_dis.step(&mut self.dis.set, &d_list);

        // Generator objective against the updated discriminators (no grads
        // flow into them here).
        let db_frozen = bind(&mut g, &self.dis.set, false);
        let adv_gen = adversarial_gen_node(&mut g, &self.dis, &db_frozen, &nodes, cfg.adv_mode);
        let recon = recon_kl_nodes(&mut g, cfg, &nodes);
        let labels = batch.labels();
        let hfl = hfl_nodes(&mut g, cfg, &self.gen, &gb, &nodes, &labels, self.iteration);
        let total = g.weighted_sum(&[
            (recon.recon_total, S::one()),
            (recon.kl, S::of(cfg.lambda_kl)),
            (adv_gen, S::of(cfg.lambda_adv)),
            (hfl.ce, S::of(cfg.lambda_ce)),
            (hfl.trip, S::of(cfg.lambda_trip)),
        ]);

        let scalar_of = |g: &Graph<S>, v| g.value(v).data()[0].as_f64();
        let report = LossReport {
            recon_cross: scalar_of(&g, recon.cross),
            recon_same: scalar_of(&g, recon.same),
            recon_cycle: scalar_of(&g, recon.cycle),
            recon_code: scalar_of(&g, recon.code),
            kl: scalar_of(&g, recon.kl),
            adv_gen: scalar_of(&g, adv_gen),
            adv_dis,
            ce: scalar_of(&g, hfl.ce),
            trip: scalar_of(&g, hfl.trip),
            total: scalar_of(&g, total),
        };

        let grads = g.backward(total);
        let mut ids = self.gen.set.ids_in_group(ParamGroup::Generation);
        ids.extend(self.gen.set.ids_in_group(ParamGroup::Feature));
        let mut list = collect_grads(&gb, &grads, &ids);
        clip_global_norm(&mut list, cfg.grad_clip);
        let (gen_list, feat_list): (GradList<S>, GradList<S>) = list
            .into_iter()
            .partition(|(id, _)| self.gen.set.entries()[id.0].group == ParamGroup::Generation);
        self.opt_gen.step(&mut self.gen.set, &gen_list);
        self.opt_feat.step(&mut self.gen.set, &feat_list);
        clamp_alpha(&mut self.gen);

        self.iteration += 1;
        report
    }
}

/// Artifacts of a completed [`fit`] run.
pub struct FitResult<S: Scalar> {
    pub state: TrainState<S>,
    pub final_checkpoint: PathBuf,
    pub losses_csv: PathBuf,
    /// One report per iteration executed in this call (resume runs only
    /// carry the continued tail).
    pub reports: Vec<LossReport>,
}

/// Trains to `cfg.iterations`, writing `losses.csv`, a config snapshot,
/// periodic checkpoints, and `checkpoint_final.ckpt` under `out_dir`.
/// `resume` continues from a checkpoint written by the same config.
pub fn fit<S: Scalar>(
    cfg: &RunConfig,
    data: &LoadedSet<S>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitResult<S>, TrainError> {
    cfg.validate()?;
    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint::<S>(path)?;
            if state.cfg.snapshot() != cfg.snapshot() {
                return Err(TrainError::Checkpoint(format!(
                    "resume config differs from the checkpoint's (from {})",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::new(cfg.clone(), data.index.n_classes()),
    };

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let snap_path = out_dir.join("config.txt");
    fs::write(&snap_path, cfg.snapshot()).map_err(io_err(&snap_path))?;

    let losses_csv = out_dir.join("losses.csv");
    let file = fs::File::create(&losses_csv).map_err(io_err(&losses_csv))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", LossReport::csv_header()).map_err(io_err(&losses_csv))?;

    let mut reports = Vec::new();
    while state.iteration < cfg.iterations {
        let batch = data.sample_pair_batch(cfg.batch_pairs, &mut state.rng)?;
        let report = state.train_step(&batch);
        writeln!(log, "{}", report.csv_row(state.iteration)).map_err(io_err(&losses_csv))?;
        if cfg.checkpoint_every > 0
            && state.iteration % cfg.checkpoint_every == 0
            && state.iteration < cfg.iterations
        {
            let path = out_dir.join(format!("checkpoint_{:08}.ckpt", state.iteration));
            save_checkpoint(&state, &path)?;
        }
        reports.push(report);
    }
    log.flush().map_err(io_err(&losses_csv))?;

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(FitResult { state, final_checkpoint, losses_csv, reports })
}

// --- checkpoint serialization ---------------------------------------------

fn write_str<W: IoWrite>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: IoRead>(r: &mut R) -> io::Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn write_values<S: Scalar, W: IoWrite>(w: &mut W, vals: &[S]) -> io::Result<()> {
    for v in vals {
        w.write_f64::<LE>(v.as_f64())?;
    }
    Ok(())
}

fn read_values<S: Scalar, R: IoRead>(r: &mut R, n: usize) -> io::Result<Vec<S>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(S::of(r.read_f64::<LE>()?));
    }
    Ok(out)
}

fn write_param_set<S: Scalar, W: IoWrite>(w: &mut W, set: &ParamSet<S>) -> io::Result<()> {
    w.write_u32::<LE>(set.len() as u32)?;
    for e in set.entries() {
        write_str(w, &e.name)?;
        w.write_u8(e.group.code())?;
        w.write_u32::<LE>(e.value.shape().len() as u32)?;
        for &d in e.value.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        write_values(w, e.value.data())?;
    }
    Ok(())
}

/// Loads stored parameters into an already-built set, insisting that names,
/// order, and shapes all match the architecture exactly.
fn read_param_set_into<S: Scalar, R: IoRead>(
    r: &mut R,
    set: &mut ParamSet<S>,
    which: &str,
) -> Result<(), TrainError> {
    let count = r.read_u32::<LE>().map_err(ckpt_io)? as usize;
    if count != set.len() {
        return Err(TrainError::Checkpoint(format!(
            "{which} parameter count {count} does not match the architecture's {}",
            set.len()
        )));
    }
    for i in 0..count {
        let name = read_str(r).map_err(ckpt_io)?;
        let group = r.read_u8().map_err(ckpt_io)?;
        let ndim = r.read_u32::<LE>().map_err(ckpt_io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LE>().map_err(ckpt_io)? as usize);
        }
        let entry_name = set.entries()[i].name.clone();
        let entry_shape = set.entries()[i].value.shape().to_vec();
        if entry_name != name {
            return Err(TrainError::Checkpoint(format!(
                "{which} parameter {i} is named {name:?}, expected {entry_name:?}"
            )));
        }
        if ParamGroup::from_code(group) != Some(set.entries()[i].group) {
            return Err(TrainError::Checkpoint(format!("{which} {name}: group code mismatch")));
        }
        if entry_shape != shape {
            return Err(TrainError::Checkpoint(format!(
                "{which} {name}: stored shape {shape:?}, architecture wants {entry_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let vals = read_values::<S, R>(r, numel).map_err(ckpt_io)?;
        set.value_mut(ParamId(i)).data_mut().copy_from_slice(&vals);
    }
    Ok(())
}

fn ckpt_io(e: io::Error) -> TrainError {
    TrainError::Checkpoint(format!("truncated or unreadable: {e}"))
}

fn write_adam<S: Scalar, W: IoWrite>(
    w: &mut W,
    opt: &Adam<S>,
    set: &ParamSet<S>,
) -> io::Result<()> {
    for id in set.ids() {
        match opt.slot(id) {
            Some(slot) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(slot.t)?;
                write_values(w, &slot.m)?;
                write_values(w, &slot.v)?;
            }
            None => w.write_u8(0)?,
        }
    }
    Ok(())
}

fn read_adam<S: Scalar, R: IoRead>(
    r: &mut R,
    opt: &mut Adam<S>,
    set: &ParamSet<S>,
) -> Result<(), TrainError> {
    for id in set.ids() {
        if r.read_u8().map_err(ckpt_io)? == 1 {
            let t = r.read_u64::<LE>().map_err(ckpt_io)?;
            let n = set.value(id).numel();
            let m = read_values::<S, R>(r, n).map_err(ckpt_io)?;
            let v = read_values::<S, R>(r, n).map_err(ckpt_io)?;
            opt.set_slot(id, AdamSlot { t, m, v });
        }
    }
    Ok(())
}

fn write_sgd<S: Scalar, W: IoWrite>(
    w: &mut W,
    opt: &SgdMomentum<S>,
    set: &ParamSet<S>,
) -> io::Result<()> {
    for id in set.ids() {
        match opt.velocity(id) {
            Some(v) => {
                w.write_u8(1)?;
                write_values(w, v)?;
            }
            None => w.write_u8(0)?,
        }
    }
    Ok(())
}

fn read_sgd<S: Scalar, R: IoRead>(
    r: &mut R,
    opt: &mut SgdMomentum<S>,
    set: &ParamSet<S>,
) -> Result<(), TrainError> {
    for id in set.ids() {
        if r.read_u8().map_err(ckpt_io)? == 1 {
            let n = set.value(id).numel();
            opt.set_velocity(id, read_values::<S, R>(r, n).map_err(ckpt_io)?);
        }
    }
    Ok(())
}

/// Serializes the whole training state: config snapshot, RNG position,
/// every parameter, and both optimizers' state.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<(), TrainError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let werr = io_err(path);
    (|| -> io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LE>(CKPT_VERSION)?;
        w.write_u8(std::mem::size_of::<S>() as u8)?;
        w.write_u64::<LE>(state.iteration)?;
        write_str(&mut w, &state.cfg.snapshot())?;
        w.write_all(&state.rng.get_seed())?;
        w.write_u64::<LE>(state.rng.get_stream())?;
        let pos = state.rng.get_word_pos();
        w.write_u64::<LE>(pos as u64)?;
        w.write_u64::<LE>((pos >> 64) as u64)?;
        w.write_u32::<LE>(state.gen.n_classes as u32)?;
        write_param_set(&mut w, &state.gen.set)?;
        write_param_set(&mut w, &state.dis.set)?;
        write_adam(&mut w, &state.opt_gen, &state.gen.set)?;
        write_adam(&mut w, &state.opt_dis, &state.dis.set)?;
        write_sgd(&mut w, &state.opt_feat, &state.gen.set)?;
        w.flush()
    })()
    .map_err(werr)
}

/// Rebuilds a [`TrainState`] exactly as it was saved.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>, TrainError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = io::BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ckpt_io)?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("magic bytes missing (not a checkpoint)".into()));
    }
    let version = r.read_u32::<LE>().map_err(ckpt_io)?;
    if version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = r.read_u8().map_err(ckpt_io)?;
    if dtype as usize != std::mem::size_of::<S>() {
        return Err(TrainError::Checkpoint(format!(
            "stored scalar width {dtype} does not match the requested one ({})",
            std::mem::size_of::<S>()
        )));
    }
    let iteration = r.read_u64::<LE>().map_err(ckpt_io)?;
    let cfg = RunConfig::parse(&read_str(&mut r).map_err(ckpt_io)?)?;

    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(ckpt_io)?;
    let stream = r.read_u64::<LE>().map_err(ckpt_io)?;
    let lo = r.read_u64::<LE>().map_err(ckpt_io)? as u128;
    let hi = r.read_u64::<LE>().map_err(ckpt_io)? as u128;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));

    let n_classes = r.read_u32::<LE>().map_err(ckpt_io)? as usize;
    // Scaffold networks to get names/shapes; every value is then overwritten.
    let mut scaffold_rng = ChaCha8Rng::seed_from_u64(0);
    let mut gen = GeneratorParams::<S>::new(&cfg, n_classes, &mut scaffold_rng);
    let mut dis = DiscriminatorParams::<S>::new(&cfg, &mut scaffold_rng);
    read_param_set_into(&mut r, &mut gen.set, "generator")?;
    read_param_set_into(&mut r, &mut dis.set, "discriminator")?;

    let mut opt_gen = Adam::new(cfg.gen_lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_dis = Adam::new(cfg.dis_lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_feat = SgdMomentum::new(cfg.hfl_lr, cfg.hfl_momentum);
    read_adam(&mut r, &mut opt_gen, &gen.set)?;
    read_adam(&mut r, &mut opt_dis, &dis.set)?;
    read_sgd(&mut r, &mut opt_feat, &gen.set)?;

    Ok(TrainState { cfg, gen, dis, opt_gen, opt_dis, opt_feat, rng, iteration })
}
