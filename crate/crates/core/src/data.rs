//! Dataset handling: folder indexing and loading for two-modality person
//! image sets, the identity-pair batch sampler, and a procedural synthetic
//! dataset with ground-truth factors (body template + clothes stripes per
//! identity; horizontal offset + limb angle per image; palette per modality).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{IdentityPair, Modality, PairBatch};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{needed} identities requested but the factor grid only has {available} distinct combinations")]
    IdentityCapacity { needed: usize, available: usize },
    #[error("{needed} poses requested but the pose grid only has {available} distinct combinations")]
    PoseCapacity { needed: usize, available: usize },
    #[error("identities {a} and {b} collide on factors (template {template}, stripes {stripes})")]
    FactorCollision { a: usize, b: usize, template: usize, stripes: usize },
    #[error("identity {identity} has no {modality} images in the train split")]
    MissingModality { identity: String, modality: &'static str },
    #[error("bad dataset layout: {0}")]
    BadLayout(String),
    #[error("image {path} is {got_h}x{got_w} but the set is {want_h}x{want_w}")]
    SizeMismatch { path: PathBuf, got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("synthetic canvas {h}x{w} is too small (need at least 16x12)")]
    CanvasTooSmall { h: usize, w: usize },
    #[error("batch needs {requested} identities but only {available} have both modalities")]
    NotEnoughIdentities { requested: usize, available: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Synthetic rendering
// ---------------------------------------------------------------------------

/// Number of distinct body templates / stripe patterns / offsets / limb
/// angles the procedural renderer can produce.
pub const TEMPLATE_LEVELS: usize = 4;
pub const STRIPE_LEVELS: usize = 5;
pub const OFFSET_LEVELS: usize = 5;
pub const ANGLE_LEVELS: usize = 3;

const BACKGROUND: u8 = 25;
const STRIPE_BRIGHT: u8 = 210;
const STRIPE_DARK: u8 = 90;
const LIMB_VALUE: u8 = 170;

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub identities: usize,
    /// Poses per identity; roughly the last fifth is held out for evaluation.
    pub poses: usize,
    pub height: usize,
    pub width: usize,
    /// Uniform pixel noise amplitude as a fraction of full scale. Noise is
    /// keyed by (identity, pose), never by modality, so the palette-inverse
    /// identity between modalities is exact even with noise.
    pub noise_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { identities: 20, poses: 10, height: 64, width: 32, noise_level: 0.0 }
    }
}

impl SyntheticSpec {
    /// Poses reserved for the query/gallery splits (at least one, roughly a
    /// fifth; at least one always stays in train).
    pub fn eval_poses(&self) -> usize {
        (self.poses / 5).max(1).min(self.poses - 1)
    }

    pub fn train_poses(&self) -> usize {
        self.poses - self.eval_poses()
    }
}

/// Identity-discriminative factors: template index scales the body silhouette,
/// stripe index sets the clothes stripe period.
pub fn identity_factors(identity: usize, n_identities: usize) -> Result<(usize, usize), DataError> {
    let capacity = TEMPLATE_LEVELS * STRIPE_LEVELS;
    if n_identities > capacity {
        return Err(DataError::IdentityCapacity { needed: n_identities, available: capacity });
    }
    if identity >= n_identities {
        return Err(DataError::BadLayout(format!("identity {identity} out of range")));
    }
    Ok((identity / STRIPE_LEVELS, identity % STRIPE_LEVELS))
}

/// Identity-excluded pose factors: horizontal offset in abstract units
/// (scaled by canvas width) and limb spread angle level.
pub fn pose_factors(pose: usize, n_poses: usize) -> Result<(i32, usize), DataError> {
    let capacity = OFFSET_LEVELS * ANGLE_LEVELS;
    if n_poses > capacity {
        return Err(DataError::PoseCapacity { needed: n_poses, available: capacity });
    }
    if pose >= n_poses {
        return Err(DataError::BadLayout(format!("pose {pose} out of range")));
    }
    Ok((pose as i32 % OFFSET_LEVELS as i32 - 2, pose / OFFSET_LEVELS))
}

fn rounded(num: usize, mul: usize, div: usize) -> usize {
    (num * mul + div / 2) / div
}

/// Renders the grayscale person figure for one (identity, pose) combination.
/// Deterministic: noise comes from the caller-provided stream.
pub fn render_gray(
    spec: &SyntheticSpec,
    template: usize,
    stripes: usize,
    offset_units: i32,
    angle: usize,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<u8>, DataError> {
    let (h, w) = (spec.height, spec.width);
    if h < 16 || w < 12 {
        return Err(DataError::CanvasTooSmall { h, w });
    }
    let mut v = vec![BACKGROUND; h * w];

    let cx = w as i32 / 2 + offset_units * (w as i32 / 16).max(1);
    let head_cy = (h / 8) as i32;
    let head_r = (h / 16).max(2) as i32;
    // The body-shape template scales the torso in both directions — wider AND
    // taller (legs shorten to match), like a heavier build. The redundancy is
    // deliberate: width changes pixel mass, which pooled retrieval features
    // read well, while the bottom edge is a position cue that survives the
    // blur of generation; either alone is one failure away from ambiguity.
    // The shortest torso still spans one period of the widest stripe pattern.
    let torso_top = h * 7 / 32;
    let torso_bot = h * (30 + 6 * template) / 64;
    let legs_top = torso_bot + (h / 32).max(1);
    let legs_bot = h * 30 / 32;
    let torso_half = rounded(w, 5 + 2 * template, 32) as i32;
    let period = rounded(h, 6 + 2 * stripes, 64).max(2);
    let spread_bottom = rounded(w, 3 + 3 * angle, 32) as i32;
    let leg_half = rounded(w, 1, 32).max(1) as i32;

    let mut paint = |r: i32, c: i32, val: u8| {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            v[r as usize * w + c as usize] = val;
        }
    };

    // Head: filled circle.
    for r in (head_cy - head_r)..=(head_cy + head_r) {
        for c in (cx - head_r)..=(cx + head_r) {
            let (dr, dc) = (r - head_cy, c - cx);
            if dr * dr + dc * dc <= head_r * head_r {
                paint(r, c, LIMB_VALUE);
            }
        }
    }
    // Torso: striped rectangle; the stripe phase is locked to the torso top,
    // so the pattern travels with the figure and survives pose changes.
    for r in torso_top..torso_bot {
        let bright = (r - torso_top) % period < period / 2;
        let val = if bright { STRIPE_BRIGHT } else { STRIPE_DARK };
        for c in (cx - torso_half)..=(cx + torso_half) {
            paint(r as i32, c, val);
        }
    }
    // Legs: two bars spreading linearly toward the bottom.
    let span = (legs_bot - legs_top).max(1);
    for r in legs_top..legs_bot {
        let t = (r - legs_top) as i32;
        let spread = 1 + spread_bottom * t / span as i32;
        for side in [-1i32, 1] {
            let center = cx + side * spread;
            for c in (center - leg_half)..=(center + leg_half) {
                paint(r as i32, c, LIMB_VALUE);
            }
        }
    }

    if let Some(rng) = noise_rng {
        let amp = (spec.noise_level * 255.0).round() as i32;
        if amp > 0 {
            for px in v.iter_mut() {
                let n = rng.gen_range(-amp..=amp);
                *px = (*px as i32 + n).clamp(0, 255) as u8;
            }
        }
    }
    Ok(v)
}

/// Visible palette: warm channel gains. The red channel carries the exact
/// grayscale value, so the inverse map is lossless.
fn visible_pixel(v: u8) -> [u8; 3] {
    let f = v as f64;
    [v, (f * 0.85).round() as u8, (f * 0.70).round() as u8]
}

/// Infrared palette: thermal inversion plus a fixed green tint; the green
/// channel carries the (inverted) grayscale exactly.
fn infrared_pixel(v: u8) -> [u8; 3] {
    let w = 255 - v;
    let f = w as f64;
    [(f * 0.35).round() as u8, w, (f * 0.20).round() as u8]
}

/// Recolors a grayscale rendering into the given modality's palette.
pub fn apply_palette(gray: &[u8], modality: Modality) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for &v in gray {
        let px = match modality {
            Modality::Visible => visible_pixel(v),
            Modality::Infrared => infrared_pixel(v),
        };
        rgb.extend_from_slice(&px);
    }
    rgb
}

/// Exact inverse of [`apply_palette`]: recovers the grayscale rendering from
/// the palette's carrier channel.
pub fn gray_from_rgb(rgb: &[u8], palette: Modality) -> Vec<u8> {
    rgb.chunks_exact(3)
        .map(|px| match palette {
            Modality::Visible => px[0],
            Modality::Infrared => 255 - px[1],
        })
        .collect()
}

/// Converts a `[-1, 1]` image tensor back to bytes and inverts the palette.
pub fn gray_from_tensor<S: Scalar>(img: &Tensor<S>, palette: Modality) -> Vec<u8> {
    let rgb: Vec<u8> = img
        .data()
        .iter()
        .map(|&x| ((x.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    gray_from_rgb(&rgb, palette)
}

// ---------------------------------------------------------------------------
// Factor sidecar
// ---------------------------------------------------------------------------

/// One image's ground-truth factors, as written to `factors.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub image_id: String,
    pub identity: usize,
    pub modality: Modality,
    pub template: usize,
    pub stripes: usize,
    pub offset: i32,
    pub angle: usize,
}

pub const FACTORS_HEADER: &str = "image_id,identity,modality,template,stripes,offset,angle,palette";

impl FactorRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}-palette",
            self.image_id,
            self.identity,
            self.modality.dir_name(),
            self.template,
            self.stripes,
            self.offset,
            self.angle,
            self.modality.dir_name()
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset emission
// ---------------------------------------------------------------------------

fn save_png(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<(), DataError> {
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .expect("buffer size matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Renders the full dataset under `root`: train poses with both modalities in
/// `train/`, held-out poses as infrared queries in `query/` and visible
/// gallery images in `gallery/`, plus the `factors.csv` sidecar.
pub fn make_synthetic(root: &Path, spec: &SyntheticSpec, seed: u64) -> Result<Vec<FactorRow>, DataError> {
    if spec.identities < 2 {
        return Err(DataError::BadLayout("need at least two identities".to_string()));
    }
    if spec.poses < 2 {
        return Err(DataError::BadLayout("need at least two poses (one is held out)".to_string()));
    }
    // Defensive injectivity check over the identity factor assignment.
    let mut seen: Vec<(usize, usize)> = Vec::new();
    for id in 0..spec.identities {
        let (template, stripes) = identity_factors(id, spec.identities)?;
        if let Some(prev) = seen.iter().position(|&f| f == (template, stripes)) {
            return Err(DataError::FactorCollision { a: prev, b: id, template, stripes });
        }
        seen.push((template, stripes));
    }

    let train_poses = spec.train_poses();
    let mut rows = Vec::new();
    for id in 0..spec.identities {
        let (template, stripes) = identity_factors(id, spec.identities)?;
        for pose in 0..spec.poses {
            let (offset, angle) = pose_factors(pose, spec.poses)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((id as u64) << 24 | pose as u64);
            let gray = render_gray(spec, template, stripes, offset, angle, Some(&mut rng))?;
            let in_train = pose < train_poses;
            let targets: &[(&str, Modality)] = if in_train {
                &[("train", Modality::Visible), ("train", Modality::Infrared)]
            } else {
                &[("query", Modality::Infrared), ("gallery", Modality::Visible)]
            };
            for &(split, modality) in targets {
                let dir = root
                    .join(split)
                    .join(format!("id{id:02}"))
                    .join(modality.dir_name());
                fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                let file = dir.join(format!("p{pose}.png"));
                let rgb = apply_palette(&gray, modality);
                save_png(&file, &rgb, spec.height, spec.width)?;
                rows.push(FactorRow {
                    image_id: format!("{split}/id{id:02}/{}/p{pose}.png", modality.dir_name()),
                    identity: id,
                    modality,
                    template,
                    stripes,
                    offset,
                    angle,
                });
            }
        }
    }

    let mut csv = String::from(FACTORS_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let csv_path = root.join("factors.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// The offset-invariant stripe classifier (generation sanity oracle)
// ---------------------------------------------------------------------------

/// Row-mean intensity profile. Horizontal offset moves columns but leaves row
/// sums unchanged, and the limb spread keeps per-row leg mass constant, so
/// the profile depends (up to noise) only on the identity factors.
pub fn row_profile(gray: &[u8], h: usize, w: usize) -> Vec<f64> {
    (0..h)
        .map(|r| gray[r * w..(r + 1) * w].iter().map(|&v| v as f64).sum::<f64>() / w as f64)
        .collect()
}

/// Nearest-profile identity classifier built from clean ground-truth renders
/// at the canonical pose.
pub struct StripeClassifier {
    profiles: Vec<Vec<f64>>,
    h: usize,
    w: usize,
}

impl StripeClassifier {
    pub fn from_ground_truth(spec: &SyntheticSpec) -> Result<Self, DataError> {
        let canonical = SyntheticSpec { noise_level: 0.0, ..spec.clone() };
        let mut profiles = Vec::with_capacity(spec.identities);
        for id in 0..spec.identities {
            let (template, stripes) = identity_factors(id, spec.identities)?;
            let gray = render_gray(&canonical, template, stripes, 0, 0, None)?;
            profiles.push(row_profile(&gray, spec.height, spec.width));
        }
        Ok(StripeClassifier { profiles, h: spec.height, w: spec.width })
    }

    /// Returns the identity whose canonical profile is nearest in L2.
    pub fn classify(&self, gray: &[u8]) -> usize {
        let p = row_profile(gray, self.h, self.w);
        let mut best = (0, f64::INFINITY);
        for (id, q) in self.profiles.iter().enumerate() {
            let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (id, d);
            }
        }
        best.0
    }
}

// ---------------------------------------------------------------------------
// Folder indexing and loading
// ---------------------------------------------------------------------------

/// One indexed image file.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub split: String,
    pub identity_name: String,
    /// Contiguous class index over the identities seen by this index.
    pub class: usize,
    pub modality: Modality,
    pub rel_path: String,
}

/// Index over one or more splits of a dataset root, with a single class
/// mapping across all indexed splits.
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<String>, DataError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
        let entry = entry.map_err(|e| io_err(path, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn sorted_files(path: &Path) -> Result<Vec<String>, DataError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
        let entry = entry.map_err(|e| io_err(path, e))?;
        if entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Indexes `<root>/<split>/<identity>/<modality>/<files>` for the given
/// splits. Train-split identities must have images in both modalities;
/// query/gallery identities may be single-modality.
pub fn index_splits(root: &Path, splits: &[&str]) -> Result<DatasetIndex, DataError> {
    let mut class_names: Vec<String> = Vec::new();
    for split in splits {
        let split_dir = root.join(split);
        if !split_dir.is_dir() {
            return Err(DataError::BadLayout(format!("missing split directory {split_dir:?}")));
        }
        for id in sorted_dirs(&split_dir)? {
            if !class_names.contains(&id) {
                class_names.push(id);
            }
        }
    }
    class_names.sort();
    if class_names.is_empty() {
        return Err(DataError::BadLayout(format!("no identity directories under {root:?}")));
    }

    let mut records = Vec::new();
    for split in splits {
        let split_dir = root.join(split);
        for identity_name in sorted_dirs(&split_dir)? {
            let class = class_names.iter().position(|c| *c == identity_name).unwrap();
            let id_dir = split_dir.join(&identity_name);
            let mut present = [false; 2];
            for mod_name in sorted_dirs(&id_dir)? {
                let Some(modality) = Modality::parse_dir(&mod_name) else {
                    return Err(DataError::BadLayout(format!(
                        "unexpected directory {mod_name:?} under {id_dir:?} (want visible/infrared)"
                    )));
                };
                let mod_dir = id_dir.join(&mod_name);
                for file in sorted_files(&mod_dir)? {
                    present[modality.index()] = true;
                    records.push(ImageRecord {
                        split: split.to_string(),
                        identity_name: identity_name.clone(),
                        class,
                        modality,
                        rel_path: format!("{split}/{identity_name}/{mod_name}/{file}"),
                    });
                }
            }
            if *split == "train" {
                for m in Modality::BOTH {
                    if !present[m.index()] {
                        return Err(DataError::MissingModality {
                            identity: identity_name.clone(),
                            modality: m.dir_name(),
                        });
                    }
                }
            }
        }
    }
    Ok(DatasetIndex { root: root.to_path_buf(), records, class_names })
}

pub fn index_folder(root: &Path, split: &str) -> Result<DatasetIndex, DataError> {
    index_splits(root, &[split])
}

/// Loads one image file into a `[H, W, 3]` tensor scaled to `[-1, 1]`.
pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<S> = img
        .into_raw()
        .into_iter()
        .map(|u| S::of(u as f64 / 127.5 - 1.0))
        .collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data))
}

/// Writes a `[H, W, 3]` tensor in `[-1, 1]` to a PNG (values clamped).
pub fn save_image<S: Scalar>(path: &Path, img: &Tensor<S>) -> Result<(), DataError> {
    assert_eq!(img.shape().len(), 3, "expected [H, W, 3]");
    assert_eq!(img.shape()[2], 3, "expected RGB");
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let rgb: Vec<u8> = img
        .data()
        .iter()
        .map(|&x| ((x.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    save_png(path, &rgb, h, w)
}

/// A fully loaded split: every image in memory, grouped for pair sampling.
pub struct LoadedSet<S> {
    pub index: DatasetIndex,
    pub images: Vec<Tensor<S>>,
    /// `by_class_mod[class][modality]` -> record indices.
    by_class_mod: Vec<[Vec<usize>; 2]>,
}

impl<S: Scalar> LoadedSet<S> {
    pub fn load(index: DatasetIndex) -> Result<Self, DataError> {
        let mut images = Vec::with_capacity(index.records.len());
        let mut shape: Option<Vec<usize>> = None;
        for rec in &index.records {
            let path = index.root.join(&rec.rel_path);
            let img = load_image::<S>(&path)?;
            if let Some(s) = &shape {
                if img.shape() != &s[..] {
                    return Err(DataError::SizeMismatch {
                        path,
                        got_h: img.shape()[0],
                        got_w: img.shape()[1],
                        want_h: s[0],
                        want_w: s[1],
                    });
                }
            } else {
                shape = Some(img.shape().to_vec());
            }
            images.push(img);
        }
        let mut by_class_mod = vec![[Vec::new(), Vec::new()]; index.n_classes()];
        for (i, rec) in index.records.iter().enumerate() {
            by_class_mod[rec.class][rec.modality.index()].push(i);
        }
        Ok(LoadedSet { index, images, by_class_mod })
    }

    /// Classes that can form a cross-modality pair.
    pub fn pairable_classes(&self) -> Vec<usize> {
        (0..self.index.n_classes())
            .filter(|&c| !self.by_class_mod[c][0].is_empty() && !self.by_class_mod[c][1].is_empty())
            .collect()
    }

    /// Samples `n_pairs` distinct identities, one visible and one infrared
    /// image each.
    pub fn sample_pair_batch(
        &self,
        n_pairs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairBatch<S>, DataError> {
        let classes = self.pairable_classes();
        if classes.len() < n_pairs {
            return Err(DataError::NotEnoughIdentities {
                requested: n_pairs,
                available: classes.len(),
            });
        }
        let chosen: Vec<usize> = classes.choose_multiple(rng, n_pairs).copied().collect();
        let mut pairs = Vec::with_capacity(n_pairs);
        for class in chosen {
            let vi = *self.by_class_mod[class][0].choose(rng).unwrap();
            let ii = *self.by_class_mod[class][1].choose(rng).unwrap();
            pairs.push(IdentityPair {
                label: class,
                visible: self.images[vi].clone(),
                infrared: self.images[ii].clone(),
            });
        }
        PairBatch::new(pairs).map_err(|e| DataError::BadLayout(e.to_string()))
    }
}
