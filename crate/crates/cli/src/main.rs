//! Command-line workbench for cross-modality re-identification: synthesize a
//! dataset, train the disentangling generator, evaluate retrieval, render
//! factor-swap grids, interpolate excluded codes, and verify gradients.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hicmd_core::config::RunConfig;
use hicmd_core::data::{
    index_folder, index_splits, load_image, make_synthetic, save_image, ImageRecord, LoadedSet,
    SyntheticSpec,
};
use hicmd_core::eval::{
    cmc_csv, distance_histogram, extract_features, histogram_csv, single_shot_all_search,
    visible_to_infrared_protocol, AggregatedResult,
};
use hicmd_core::gradcheck::{check_config, run_gradcheck, COMPONENTS, GRAD_TOL};
use hicmd_core::nets::{decode_single, encode_single, interpolate_excluded};
use hicmd_core::plot::{histogram_plot, line_plot, Series};
use hicmd_core::train::{fit, load_checkpoint};
use hicmd_core::types::{CodeBundle, Modality};
use hicmd_core::{Tensor, TrainScalar};

#[derive(Parser)]
#[command(name = "hicmd", version, about = "Cross-modality re-identification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-modality person dataset with known factors.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train the generation and retrieval networks on a dataset.
    Train(TrainArgs),
    /// Evaluate retrieval quality from a checkpoint.
    Eval(EvalArgs),
    /// Render a factor-swap grid from a checkpoint.
    Generate(GenerateArgs),
    /// Interpolate the identity-excluded code between two images.
    Interpolate(InterpolateArgs),
    /// Compare every analytic loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    /// Poses per identity; roughly the last fifth is held out for evaluation.
    #[arg(long, default_value_t = 10)]
    poses: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x32")]
    size: String,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Replace the splits of an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Hyperparameter file (key = value lines); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding a train/ split.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for losses.csv, checkpoints, and plots.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to resume from (must match the config exactly).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding query/ and gallery/ splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::Allsearch)]
    protocol: Protocol,
    /// Random gallery draws averaged into the report.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metric CSVs and plots.
    #[arg(long)]
    out: PathBuf,
}

/// Retrieval protocol: single-shot all-search draws one gallery image per
/// identity, the visible-to-infrared protocol scores half-identity subsets.
#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum Protocol {
    Allsearch,
    Regdb,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which factor block each grid cell takes from the column reference.
    #[arg(long, value_enum)]
    mode: SwapMode,
    #[arg(long)]
    out: PathBuf,
    /// Grid rows (infrared inputs).
    #[arg(long, default_value_t = 4)]
    inputs: usize,
    /// Grid columns (visible references).
    #[arg(long, default_value_t = 4)]
    references: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SwapMode {
    /// Keep the input's prototype and style, take illumination and pose from the reference.
    SwapExcluded,
    /// Take the reference's prototype and style, keep the input's illumination and pose.
    SwapDiscriminative,
    /// Take only the illumination code from the reference.
    SwapIllum,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Two image paths: identity source, then excluded-code target.
    #[arg(long, num_args = 2, value_names = ["FROM", "TO"], required = true)]
    pair: Vec<PathBuf>,
    /// Frames in the strip, including both endpoints.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional hyperparameter file; defaults to the built-in verification config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adds a constant bias to one component's analytic gradients (testing hook).
    #[arg(long)]
    corrupt: Option<String>,
}

fn main() {
    let result = match Cli::parse().command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// The HICMD_SEED environment variable outranks the flag, which outranks the
/// per-command fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Ok(text) = std::env::var("HICMD_SEED") {
        return text
            .trim()
            .parse()
            .with_context(|| format!("HICMD_SEED must be an unsigned integer, got {text:?}"));
    }
    Ok(flag.unwrap_or(fallback))
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .with_context(|| format!("size must look like 64x32, got {text:?}"))?;
    let h: usize = h.trim().parse().with_context(|| format!("bad height in {text:?}"))?;
    let w: usize = w.trim().parse().with_context(|| format!("bad width in {text:?}"))?;
    Ok((h, w))
}

fn cmd_make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let seed = resolve_seed(Some(args.seed), args.seed)?;
    let (height, width) = parse_size(&args.size)?;

    let occupied = args.out.is_dir() && fs::read_dir(&args.out)?.next().is_some();
    if occupied && !args.force {
        bail!(
            "output directory {} is not empty; pass --force to replace its splits",
            args.out.display()
        );
    }
    if occupied {
        for split in ["train", "query", "gallery"] {
            let dir = args.out.join(split);
            if dir.is_dir() {
                fs::remove_dir_all(&dir)
                    .with_context(|| format!("removing stale split {}", dir.display()))?;
            }
        }
        let csv = args.out.join("factors.csv");
        if csv.is_file() {
            fs::remove_file(&csv)?;
        }
    }

    if (2..4).contains(&args.identities) {
        eprintln!(
            "warning: training samples 4 distinct identities per batch by default; \
             a {}-identity dataset is evaluation-only",
            args.identities
        );
    }
    let spec = SyntheticSpec {
        identities: args.identities,
        poses: args.poses,
        height,
        width,
        noise_level: 0.0,
    };
    let rows = make_synthetic(&args.out, &spec, seed)?;
    println!(
        "wrote {} images ({} identities x {} poses x 2 renders) under {}",
        rows.len(),
        spec.identities,
        spec.poses,
        args.out.display()
    );
    println!(
        "splits: train ({} poses), query/gallery ({} held-out poses); factors.csv lists ground truth",
        spec.train_poses(),
        spec.eval_poses()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Errors unless the dataset images match the geometry the model was built for.
fn check_geometry(cfg: &RunConfig, set: &LoadedSet<TrainScalar>, what: &str) -> Result<()> {
    if let Some(img) = set.images.first() {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if (h, w) != (cfg.image_height, cfg.image_width) {
            bail!(
                "{what} expects {}x{} images but the dataset provides {h}x{w}",
                cfg.image_height,
                cfg.image_width
            );
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;

    let index = index_folder(&args.data, "train")?;
    let data = LoadedSet::<TrainScalar>::load(index)?;
    check_geometry(&cfg, &data, "the configured model")?;

    let result = fit(&cfg, &data, &args.out, args.resume.as_deref())?;

    let svg_path = args.out.join("losses.svg");
    fs::write(&svg_path, plot_losses(&result.losses_csv)?)?;

    if let Some(last) = result.reports.last() {
        println!(
            "trained to iteration {} (total {:.4}, recon_same {:.4}, adv_dis {:.4})",
            result.state.iteration, last.total, last.recon_same, last.adv_dis
        );
    }
    println!("losses:     {}", result.losses_csv.display());
    println!("checkpoint: {}", result.final_checkpoint.display());
    Ok(())
}

/// Renders selected loss columns of a losses.csv file as an SVG line plot.
fn plot_losses(csv_path: &Path) -> Result<String> {
    let text = fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty losses file")?.split(',').collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for line in lines {
        for (i, field) in line.split(',').enumerate() {
            let v: f64 = field.parse().with_context(|| format!("bad number {field:?}"))?;
            columns.get_mut(i).context("ragged losses row")?.push(v);
        }
    }
    let col = |name: &str| -> Result<&Vec<f64>> {
        let i = header.iter().position(|h| *h == name);
        Ok(&columns[i.with_context(|| format!("losses file lacks a {name} column"))?])
    };
    let x = col("iteration")?;
    let mut points = Vec::new();
    for name in ["total", "recon_same", "adv_gen", "adv_dis", "ce", "trip"] {
        let ys = col(name)?;
        points.push((name, x.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>()));
    }
    let series: Vec<Series> =
        points.iter().map(|(name, pts)| Series { name, points: pts }).collect();
    Ok(line_plot("training losses", "iteration", "loss", &series))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.trials == 0 {
        bail!("need at least one trial");
    }
    let state = load_checkpoint::<TrainScalar>(&args.checkpoint)?;
    let cfg = &state.cfg;

    let index = index_splits(&args.data, &["query", "gallery"])?;
    let set = LoadedSet::<TrainScalar>::load(index)?;
    check_geometry(cfg, &set, "the checkpoint")?;

    let identities: Vec<usize> = set.index.records.iter().map(|r| r.class).collect();
    let modalities: Vec<Modality> = set.index.records.iter().map(|r| r.modality).collect();
    let features = extract_features(cfg, &state.gen, &set.images, &modalities);

    let seed = resolve_seed(args.seed, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = match args.protocol {
        Protocol::Allsearch => single_shot_all_search(
            &features,
            &identities,
            &modalities,
            args.trials,
            cfg.cmc_max_rank,
            &mut rng,
        )?,
        Protocol::Regdb => visible_to_infrared_protocol(
            &features,
            &identities,
            &modalities,
            args.trials,
            cfg.cmc_max_rank,
            &mut rng,
        )?,
    };
    let hist = distance_histogram(&features, &identities, &modalities, 24)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("cmc.csv"), cmc_csv(&result))?;
    fs::write(args.out.join("histogram.csv"), histogram_csv(&hist))?;
    fs::write(args.out.join("cmc.svg"), cmc_plot(&result))?;
    fs::write(args.out.join("histogram.svg"), histogram_plot("cross-modal distances", &hist))?;

    let protocol = match args.protocol {
        Protocol::Allsearch => "single-shot all-search",
        Protocol::Regdb => "visible-to-infrared",
    };
    println!(
        "{protocol}: {} images, {} identities, {} trials (seed {seed})",
        identities.len(),
        set.index.n_classes(),
        args.trials
    );
    let rank = |k: usize| result.cmc.get(k - 1).or(result.cmc.last()).copied().unwrap_or(0.0);
    println!("rank-1  {:.4}", rank(1));
    println!("rank-10 {:.4}", rank(10));
    println!("mAP     {:.4}", result.map);
    println!(
        "distances: same-identity mean {:.4}, different-identity mean {:.4}",
        hist.intra_mean, hist.inter_mean
    );
    println!("metrics written under {}", args.out.display());
    Ok(())
}

fn cmc_plot(result: &AggregatedResult) -> String {
    let points: Vec<(f64, f64)> =
        result.cmc.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)).collect();
    let series = [Series { name: "cmc", points: &points }];
    line_plot("cumulative match characteristic", "rank", "match rate", &series)
}

/// Picks `k` record indices from `candidates`, spreading over distinct
/// identities first and reusing identities only when there are fewer than `k`.
fn pick_spread(
    records: &[ImageRecord],
    candidates: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in candidates {
        by_class.entry(records[i].class).or_default().push(i);
    }
    let mut chosen: Vec<usize> = by_class
        .values()
        .map(|group| *group.choose(rng).expect("group is non-empty"))
        .collect();
    chosen.shuffle(rng);
    chosen.truncate(k);
    if chosen.len() < k {
        let mut rest: Vec<usize> =
            candidates.iter().copied().filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(k - chosen.len()));
    }
    chosen
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    if args.inputs == 0 || args.references == 0 {
        bail!("need at least one input and one reference");
    }
    let state = load_checkpoint::<TrainScalar>(&args.checkpoint)?;
    let cfg = &state.cfg;

    let eval_splits = args.data.join("query").is_dir() && args.data.join("gallery").is_dir();
    let index = if eval_splits {
        index_splits(&args.data, &["query", "gallery"])?
    } else {
        index_folder(&args.data, "train")?
    };
    let set = LoadedSet::<TrainScalar>::load(index)?;
    check_geometry(cfg, &set, "the checkpoint")?;

    let of_modality = |m: Modality| -> Vec<usize> {
        (0..set.index.records.len()).filter(|&i| set.index.records[i].modality == m).collect()
    };
    let infrared = of_modality(Modality::Infrared);
    let visible = of_modality(Modality::Visible);
    if infrared.is_empty() || visible.is_empty() {
        bail!("the grid needs both infrared inputs and visible references in the dataset");
    }

    let seed = resolve_seed(args.seed, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_rows = pick_spread(&set.index.records, &infrared, args.inputs, &mut rng);
    let reference_cols = pick_spread(&set.index.records, &visible, args.references, &mut rng);
    if input_rows.len() < args.inputs || reference_cols.len() < args.references {
        bail!(
            "dataset has only {} infrared and {} visible images",
            infrared.len(),
            visible.len()
        );
    }

    let encode = |i: usize| -> CodeBundle<TrainScalar> {
        encode_single(cfg, &state.gen, &set.images[i], set.index.records[i].modality)
    };
    let input_codes: Vec<_> = input_rows.iter().map(|&i| encode(i)).collect();
    let reference_codes: Vec<_> = reference_cols.iter().map(|&i| encode(i)).collect();

    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut grid = GridCanvas::new(args.inputs + 1, args.references + 1, h, w);
    let mut manifest = String::from(
        "row,col,role,input_identity,reference_identity,input_path,reference_path\n",
    );
    manifest.push_str("0,0,blank,,,,\n");
    for (j, &rec) in reference_cols.iter().enumerate() {
        grid.blit(0, j + 1, &set.images[rec]);
        let r = &set.index.records[rec];
        manifest.push_str(&format!("0,{},reference,,{},,{}\n", j + 1, r.identity_name, r.rel_path));
    }
    for (i, &in_rec) in input_rows.iter().enumerate() {
        grid.blit(i + 1, 0, &set.images[in_rec]);
        let ri = &set.index.records[in_rec];
        manifest.push_str(&format!("{},0,input,{},,{},\n", i + 1, ri.identity_name, ri.rel_path));
        for (j, &ref_rec) in reference_cols.iter().enumerate() {
            let (a, b) = (&input_codes[i], &reference_codes[j]);
            let cell = match args.mode {
                SwapMode::SwapExcluded => {
                    decode_single(cfg, &state.gen, &a.prototype, &a.style, &b.illum, &b.pose)
                }
                SwapMode::SwapDiscriminative => {
                    decode_single(cfg, &state.gen, &b.prototype, &b.style, &a.illum, &a.pose)
                }
                SwapMode::SwapIllum => {
                    decode_single(cfg, &state.gen, &a.prototype, &a.style, &b.illum, &a.pose)
                }
            };
            grid.blit(i + 1, j + 1, &cell);
            let rj = &set.index.records[ref_rec];
            manifest.push_str(&format!(
                "{},{},cell,{},{},{},{}\n",
                i + 1,
                j + 1,
                ri.identity_name,
                rj.identity_name,
                ri.rel_path,
                rj.rel_path
            ));
        }
    }

    fs::create_dir_all(&args.out)?;
    let grid_path = args.out.join("grid.png");
    save_image(&grid_path, &grid.into_tensor())?;
    fs::write(args.out.join("manifest.csv"), manifest)?;

    let mode = match args.mode {
        SwapMode::SwapExcluded => "swap-excluded",
        SwapMode::SwapDiscriminative => "swap-discriminative",
        SwapMode::SwapIllum => "swap-illum",
    };
    println!(
        "{mode} grid: {} input rows x {} reference columns (+1 header strip each, seed {seed})",
        args.inputs, args.references
    );
    println!("grid:     {}", grid_path.display());
    println!("manifest: {}", args.out.join("manifest.csv").display());
    Ok(())
}

/// Mid-gray canvas of `rows x cols` image tiles.
struct GridCanvas {
    buf: Vec<TrainScalar>,
    h: usize,
    w: usize,
    width_px: usize,
    height_px: usize,
}

impl GridCanvas {
    fn new(rows: usize, cols: usize, h: usize, w: usize) -> Self {
        let (height_px, width_px) = (rows * h, cols * w);
        GridCanvas { buf: vec![0.0; height_px * width_px * 3], h, w, width_px, height_px }
    }

    /// Copies one `[h, w, 3]` tile into grid position (row, col).
    fn blit(&mut self, row: usize, col: usize, tile: &Tensor<TrainScalar>) {
        assert_eq!(tile.shape(), [self.h, self.w, 3]);
        let data = tile.data();
        for y in 0..self.h {
            let src = y * self.w * 3;
            let dst = ((row * self.h + y) * self.width_px + col * self.w) * 3;
            self.buf[dst..dst + self.w * 3].copy_from_slice(&data[src..src + self.w * 3]);
        }
    }

    fn into_tensor(self) -> Tensor<TrainScalar> {
        Tensor::new(vec![self.height_px, self.width_px, 3], self.buf)
    }
}

/// Reads the modality of an image from its directory components.
fn modality_of_path(path: &Path) -> Result<Modality> {
    path.components()
        .rev()
        .find_map(|c| Modality::parse_dir(&c.as_os_str().to_string_lossy()))
        .with_context(|| {
            format!(
                "cannot infer the modality of {}: expected a visible/ or infrared/ directory component",
                path.display()
            )
        })
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    if args.steps < 2 {
        bail!("need at least two steps to include both endpoints");
    }
    let state = load_checkpoint::<TrainScalar>(&args.checkpoint)?;
    let cfg = &state.cfg;

    let mut bundles = Vec::new();
    for path in &args.pair {
        let modality = modality_of_path(path)?;
        let img = load_image::<TrainScalar>(path)?;
        if (img.shape()[0], img.shape()[1]) != (cfg.image_height, cfg.image_width) {
            bail!(
                "the checkpoint expects {}x{} images but {} is {}x{}",
                cfg.image_height,
                cfg.image_width,
                path.display(),
                img.shape()[0],
                img.shape()[1]
            );
        }
        bundles.push(encode_single(cfg, &state.gen, &img, modality));
    }
    let (from, to) = (&bundles[0], &bundles[1]);

    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut strip = GridCanvas::new(1, args.steps, h, w);
    let mut ts = Vec::new();
    for i in 0..args.steps {
        let t = i as f64 / (args.steps - 1) as f64;
        let mix = interpolate_excluded(from, to, t).map_err(anyhow::Error::msg)?;
        let frame = decode_single(cfg, &state.gen, &mix.prototype, &mix.style, &mix.illum, &mix.pose);
        strip.blit(0, i, &frame);
        ts.push(format!("{t:.3}"));
    }

    fs::create_dir_all(&args.out)?;
    let strip_path = args.out.join("strip.png");
    save_image(&strip_path, &strip.into_tensor())?;
    println!(
        "{}-step excluded-code interpolation (t = {}) from {} toward {}",
        args.steps,
        ts.join(", "),
        args.pair[0].display(),
        args.pair[1].display()
    );
    println!("strip: {}", strip_path.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = match args.config.as_deref() {
        Some(p) => load_config(Some(p))?,
        None => check_config(),
    };
    if let Some(name) = args.corrupt.as_deref() {
        if !COMPONENTS.contains(&name) {
            bail!("unknown component {name:?}; expected one of: {}", COMPONENTS.join(", "));
        }
        eprintln!("warning: corrupting the analytic gradients of {name} (testing hook)");
    }

    let outcome = run_gradcheck(&cfg, args.corrupt.as_deref());
    for c in &outcome.components {
        println!(
            "{:12} max err {:10.3e} over {:4} coordinates (worst at {})",
            c.name, c.max_err, c.checked, c.worst_at
        );
    }
    let failing: Vec<&str> =
        outcome.components.iter().filter(|c| c.max_err > GRAD_TOL).map(|c| c.name).collect();
    if failing.is_empty() {
        println!("gradient check passed: all components within {GRAD_TOL:.0e}");
        Ok(())
    } else {
        bail!("gradient check FAILED above {GRAD_TOL:.0e}: {}", failing.join(", "));
    }
}
