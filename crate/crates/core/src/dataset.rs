//! Sample assembly, deterministic splits, paired augmentation,
//! normalization, archives, and the synthetic oracle generator used for
//! desk-scale verification.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{atomic_write, ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::period::Period;
use crate::s2_ingest::Sentinel2Tile;
use crate::s5p_ingest::Sentinel5PPatch;

/// Weight of the summed emitter intensity in the synthetic target.
pub const SYNTH_ALPHA: f64 = 0.04;
/// Weight of the column-field mean in the synthetic target.
pub const SYNTH_BETA: f64 = 0.5;
/// Coupling of the column-field amplitude to total emitter intensity.
const FIELD_COUPLING: f64 = 0.02;
/// Reflectance counts added to the image per unit of emitter intensity.
const EMITTER_DN_PER_UNIT: f64 = 700.0;
/// Per-band response of the image to an emitter blob.
const BAND_WEIGHTS: [f64; 12] = [
    0.35, 1.20, 1.05, 0.90, 0.80, 0.70, 0.62, 1.10, 0.55, 0.30, 0.48, 0.42,
];
/// Per-band background reflectance level.
const BAND_BASE: [f64; 12] = [
    420.0, 600.0, 720.0, 840.0, 960.0, 1080.0, 1200.0, 1320.0, 1440.0, 560.0, 1680.0, 1800.0,
];
/// Label count of the land-cover taxonomy used for pretraining.
pub const LCC_CLASSES: usize = 19;

/// One aligned training sample: image tile, optional column-density
/// patch, and the station's mean concentration for the period.
#[derive(Debug, Clone)]
pub struct Sample {
    pub station_id: String,
    pub period: Period,
    /// 12 x size x size band-major image.
    pub s2: Array3<f32>,
    /// size x size column-density patch; absent samples are usable by
    /// the image-only variant only.
    pub s5p: Option<Array2<f32>>,
    /// ug/m^3.
    pub target: f64,
    /// (latitude, longitude) of the tile center.
    pub center: (f64, f64),
    /// Generator-side factors, present for synthetic samples only.
    pub latents: Option<SynthLatents>,
}

/// The generator's hidden factors, stored so the target is exactly
/// recomputable: target = SYNTH_ALPHA * total_intensity +
/// SYNTH_BETA * mean_field + noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthLatents {
    pub total_intensity: f64,
    pub mean_field: f64,
    pub noise: f64,
}

impl SynthLatents {
    pub fn oracle_target(&self) -> f64 {
        SYNTH_ALPHA * self.total_intensity + SYNTH_BETA * self.mean_field + self.noise
    }
}

/// Bookkeeping from the inner join in `build_samples`.
#[derive(Debug, Default)]
pub struct JoinReport {
    pub matched: usize,
    pub fusion_capable: usize,
    pub unmatched_tiles: Vec<(String, Period)>,
    pub unmatched_patches: Vec<(String, Period)>,
    pub unmatched_targets: Vec<(String, Period)>,
}

fn keyed<T>(items: Vec<((String, Period), T)>, what: &str) -> Result<BTreeMap<(String, Period), T>> {
    let mut map = BTreeMap::new();
    for (key, item) in items {
        if map.insert(key.clone(), item).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate {what} for station {} period {}",
                key.0, key.1
            )));
        }
    }
    Ok(map)
}

/// Inner-join tiles with targets on (station_id, period); a patch with
/// the same key is attached when present. Output is sorted by key.
pub fn build_samples(
    tiles: Vec<((String, Period), Sentinel2Tile)>,
    patches: Vec<((String, Period), Sentinel5PPatch)>,
    targets: Vec<((String, Period), f64)>,
) -> Result<(Vec<Sample>, JoinReport)> {
    let tiles = keyed(tiles, "tile")?;
    let mut patches = keyed(patches, "patch")?;
    let targets = keyed(targets, "target")?;
    let mut report = JoinReport::default();
    let mut samples = Vec::new();
    for (key, tile) in &tiles {
        let Some(&target) = targets.get(key) else {
            report.unmatched_tiles.push(key.clone());
            continue;
        };
        if target < 0.0 {
            return Err(Error::Integrity(format!(
                "negative target {target} for station {} period {}",
                key.0, key.1
            )));
        }
        let s5p = patches.remove(key).map(|p| p.data);
        if s5p.is_some() {
            report.fusion_capable += 1;
        }
        samples.push(Sample {
            station_id: key.0.clone(),
            period: key.1,
            s2: tile.data.clone(),
            s5p,
            target,
            center: tile.center,
            latents: None,
        });
        report.matched += 1;
    }
    report.unmatched_patches = patches.into_keys().collect();
    report.unmatched_targets = targets
        .keys()
        .filter(|k| !tiles.contains_key(*k))
        .cloned()
        .collect();
    Ok((samples, report))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            fractions: (0.6, 0.2, 0.2),
            seed,
        }
    }
}

/// Shuffle-and-cut split: validation and test sizes are floors of their
/// fractions, the remainder goes to train.
pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (ft, fv, fs) = spec.fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 || ft <= 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Argument(format!(
            "split fractions {:?} do not sum to 1",
            spec.fractions
        )));
    }
    let n = samples.len();
    if n < 5 {
        return Err(Error::Argument(format!(
            "need at least 5 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fs * n as f64).floor() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<Sample>>, idx: &[usize]| -> Vec<Sample> {
        idx.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let val = take(&mut slots, &order[0..n_val]);
    let test = take(&mut slots, &order[n_val..n_val + n_test]);
    let train = take(&mut slots, &order[n_val + n_test..]);
    Ok((train, val, test))
}

/// One of the 8 symmetries of the square: an optional horizontal flip
/// followed by `rot` quarter-turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> [Dihedral; 8] {
        let mut ops = [Dihedral::IDENTITY; 8];
        for (i, op) in ops.iter_mut().enumerate() {
            *op = Dihedral {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        ops
    }

    /// `self` after `other` (apply `other` first).
    pub fn compose(&self, other: &Dihedral) -> Dihedral {
        // r^a f^b . r^c f^d = r^(a + c*(-1)^b) f^(b xor d)
        let c = other.rot as i8;
        let rot = if self.flip { self.rot as i8 - c } else { self.rot as i8 + c };
        Dihedral {
            rot: rot.rem_euclid(4) as u8,
            flip: self.flip ^ other.flip,
        }
    }

    pub fn inverse(&self) -> Dihedral {
        if self.flip {
            *self
        } else {
            Dihedral {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    /// Apply to a square array.
    pub fn apply(&self, a: &Array2<f32>) -> Array2<f32> {
        let (h, w) = a.dim();
        assert_eq!(h, w, "dihedral ops are defined on square arrays");
        Array2::from_shape_fn((h, w), |(i, j)| {
            // invert the output coordinate through the transform
            let (mut si, mut sj) = (i, j);
            for _ in 0..self.rot {
                // inverse of a ccw quarter turn: (i, j) <- (j, n-1-i) applied backwards
                let (ni, nj) = (sj, h - 1 - si);
                si = ni;
                sj = nj;
            }
            if self.flip {
                sj = w - 1 - sj;
            }
            a[[si, sj]]
        })
    }

    fn apply3(&self, a: &Array3<f32>) -> Array3<f32> {
        let views: Vec<Array2<f32>> = a
            .axis_iter(Axis(0))
            .map(|ch| self.apply(&ch.to_owned()))
            .collect();
        let mut out = Array3::zeros(a.raw_dim());
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(views) {
            dst.assign(&src);
        }
        out
    }
}

/// Apply one uniformly drawn dihedral symmetry identically to both input
/// streams; the target is untouched.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let op = Dihedral::all()[rng.random_range(0..8)];
    augment_with(sample, op)
}

pub fn augment_with(sample: &Sample, op: Dihedral) -> Sample {
    Sample {
        s2: op.apply3(&sample.s2),
        s5p: sample.s5p.as_ref().map(|p| op.apply(p)),
        ..sample.clone()
    }
}

/// Per-channel standardization statistics, computed from the training
/// partition only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
    /// Absent when no training sample carries a patch.
    pub s5p_mean: Option<f64>,
    pub s5p_std: Option<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

pub fn compute_norm_stats(train: &[Sample]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training samples for statistics".into()));
    }
    let channels = train[0].s2.dim().0;
    let mut sum = vec![0.0f64; channels];
    let mut sumsq = vec![0.0f64; channels];
    let mut count = 0usize;
    let mut psum = 0.0f64;
    let mut psumsq = 0.0f64;
    let mut pcount = 0usize;
    let mut tsum = 0.0f64;
    let mut tsumsq = 0.0f64;
    for s in train {
        count += s.s2.dim().1 * s.s2.dim().2;
        for (c, plane) in s.s2.axis_iter(Axis(0)).enumerate() {
            for &v in plane.iter() {
                sum[c] += v as f64;
                sumsq[c] += (v as f64) * (v as f64);
            }
        }
        if let Some(p) = &s.s5p {
            pcount += p.len();
            for &v in p.iter() {
                psum += v as f64;
                psumsq += (v as f64) * (v as f64);
            }
        }
        tsum += s.target;
        tsumsq += s.target * s.target;
    }
    let moments = |sum: f64, sumsq: f64, n: f64, what: &str| -> Result<(f64, f64)> {
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        if var.sqrt() <= 0.0 {
            return Err(Error::Stats(format!("zero standard deviation in {what}")));
        }
        Ok((mean, var.sqrt()))
    };
    let mut image_mean = Vec::with_capacity(channels);
    let mut image_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let (m, s) = moments(sum[c], sumsq[c], count as f64, &format!("image channel {c}"))?;
        image_mean.push(m);
        image_std.push(s);
    }
    let (s5p_mean, s5p_std) = if pcount > 0 {
        let (m, s) = moments(psum, psumsq, pcount as f64, "column-density channel")?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let (target_mean, target_std) = moments(tsum, tsumsq, train.len() as f64, "targets")?;
    Ok(NormStats {
        image_mean,
        image_std,
        s5p_mean,
        s5p_std,
        target_mean,
        target_std,
    })
}

fn scale_plane(plane: &mut ndarray::ArrayViewMut2<f32>, mean: f64, std: f64, forward: bool) {
    plane.mapv_inplace(|v| {
        if forward {
            ((v as f64 - mean) / std) as f32
        } else {
            (v as f64 * std + mean) as f32
        }
    });
}

fn transform(sample: &Sample, stats: &NormStats, forward: bool) -> Result<Sample> {
    let channels = sample.s2.dim().0;
    if channels != stats.image_mean.len() {
        return Err(Error::Argument(format!(
            "stats cover {} channels, sample has {channels}",
            stats.image_mean.len()
        )));
    }
    let mut out = sample.clone();
    for (c, mut plane) in out.s2.axis_iter_mut(Axis(0)).enumerate() {
        scale_plane(&mut plane, stats.image_mean[c], stats.image_std[c], forward);
    }
    if let Some(p) = &mut out.s5p {
        let (mean, std) = match (stats.s5p_mean, stats.s5p_std) {
            (Some(m), Some(s)) => (m, s),
            _ => {
                return Err(Error::Stats(
                    "sample carries a patch but stats have no column-density moments".into(),
                ))
            }
        };
        scale_plane(&mut p.view_mut(), mean, std, forward);
    }
    Ok(out)
}

/// (x - mean) / std per channel; the target is left in ug/m^3.
pub fn normalize(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    transform(sample, stats, true)
}

/// Exact inverse of `normalize` up to float rounding.
pub fn denormalize(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    transform(sample, stats, false)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    /// Inclusive range of emitters per sample.
    pub n_emitters: (usize, usize),
    /// Intensity units per emitter, uniform on this range.
    pub intensity: (f64, f64),
    /// Standard deviation of per-pixel reflectance noise.
    pub background_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        SynthConfig {
            n_samples,
            image_size: 120,
            n_emitters: (0, 4),
            intensity: (50.0, 200.0),
            background_noise: 30.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0
            || self.image_size < 16
            || self.n_emitters.0 > self.n_emitters.1
            || self.intensity.0 >= self.intensity.1
            || self.intensity.0 <= 0.0
            || self.background_noise < 0.0
        {
            return Err(Error::Argument(format!("degenerate synth config {self:?}")));
        }
        Ok(())
    }
}

/// Box-Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

struct Emitter {
    row: f64,
    col: f64,
    sigma: f64,
    intensity: f64,
}

/// Draw the 12-band image for one sample; returns the emitters and
/// total intensity alongside.
fn draw_image(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Array3<f32>, Vec<Emitter>, f64) {
    let size = cfg.image_size;
    let n_e = rng.random_range(cfg.n_emitters.0..=cfg.n_emitters.1);
    let margin = (size as f64 / 15.0).max(4.0);
    let emitters: Vec<Emitter> = (0..n_e)
        .map(|_| Emitter {
            row: rng.random_range(margin..size as f64 - margin),
            col: rng.random_range(margin..size as f64 - margin),
            sigma: rng.random_range(3.0..8.0),
            intensity: rng.random_range(cfg.intensity.0..cfg.intensity.1),
        })
        .collect();
    let total: f64 = emitters.iter().map(|e| e.intensity).sum();

    // mass-normalized emitter plane shared by all bands
    let mut plane = Array2::<f64>::zeros((size, size));
    for e in &emitters {
        let mut blob = Array2::<f64>::zeros((size, size));
        for ((i, j), v) in blob.indexed_iter_mut() {
            let d2 = (i as f64 - e.row).powi(2) + (j as f64 - e.col).powi(2);
            *v = (-d2 / (2.0 * e.sigma * e.sigma)).exp();
        }
        let mass: f64 = blob.sum();
        plane.zip_mut_with(&blob, |p, &b| *p += e.intensity * EMITTER_DN_PER_UNIT * b / mass);
    }

    let common = normal(rng);
    let mut image = Array3::<f32>::zeros((12, size, size));
    for (b, mut band) in image.axis_iter_mut(Axis(0)).enumerate() {
        let offset = BAND_BASE[b] + 60.0 * common + 20.0 * normal(rng);
        for ((i, j), v) in band.indexed_iter_mut() {
            let noise = cfg.background_noise * normal(rng);
            *v = (offset + BAND_WEIGHTS[b] * plane[[i, j]] + noise) as f32;
        }
    }
    (image, emitters, total)
}

/// Smooth positive bump over the unit square.
fn field_shape(i: usize, j: usize, size: usize) -> f64 {
    let x = (j as f64 + 0.5) / size as f64;
    let y = (i as f64 + 0.5) / size as f64;
    (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
}

/// Generate the synthetic oracle dataset. Targets follow
/// `SYNTH_ALPHA * S + SYNTH_BETA * mean(field) + noise` where S is the
/// summed emitter intensity; the field carries factors invisible in the
/// image, so fusion is strictly more informative than image-only input.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let size = cfg.image_size;
    (0..cfg.n_samples)
        .map(|idx| {
            let mut rng = sample_rng(cfg.seed, idx as u64);
            let (s2, _emitters, total) = draw_image(&mut rng, cfg);
            // column field: baseline and amplitude latents are not
            // visible in the image
            let baseline = rng.random_range(20.0..40.0);
            let amplitude = FIELD_COUPLING * total + 3.0 * normal(&mut rng);
            let mut field = Array2::<f64>::zeros((size, size));
            for ((i, j), v) in field.indexed_iter_mut() {
                *v = baseline + amplitude * field_shape(i, j, size);
            }
            let mean_field = field.sum() / field.len() as f64;
            let noise = 0.5 * normal(&mut rng);
            let latents = SynthLatents {
                total_intensity: total,
                mean_field,
                noise,
            };
            Ok(Sample {
                station_id: format!("synth-{idx:05}"),
                period: Period::Full,
                s2,
                s5p: Some(field.mapv(|v| v as f32)),
                target: latents.oracle_target(),
                center: (48.0, 11.0),
                latents: Some(latents),
            })
        })
        .collect()
}

fn sample_rng(seed: u64, idx: u64) -> ChaCha8Rng {
    // splittable per-sample state: order-independent generation
    ChaCha8Rng::seed_from_u64(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A 12-band tile with multi-label land-cover annotations, for the
/// pretraining task.
#[derive(Debug, Clone)]
pub struct LccSample {
    pub image: Array3<f32>,
    /// 0/1 indicators over `LCC_CLASSES` classes.
    pub labels: Array1<f32>,
}

/// Synthetic multi-label land-cover set drawn from the same image
/// distribution as `synth_generate`: classes 0..16 mark the 4x4 quadrant
/// holding an emitter, 16 = any emitter, 17 = high total intensity,
/// 18 = three or more emitters.
pub fn synth_lcc_generate(cfg: &SynthConfig) -> Result<Vec<LccSample>> {
    cfg.validate()?;
    let high = 0.5
        * (cfg.intensity.0 + cfg.intensity.1)
        * (cfg.n_emitters.0 + cfg.n_emitters.1) as f64
        * 0.5;
    (0..cfg.n_samples)
        .map(|idx| {
            let mut rng = sample_rng(cfg.seed ^ 0x4C43_4C43, idx as u64);
            let (image, emitters, total) = draw_image(&mut rng, cfg);
            let mut labels = Array1::<f32>::zeros(LCC_CLASSES);
            for e in &emitters {
                let qi = ((e.row / cfg.image_size as f64) * 4.0) as usize;
                let qj = ((e.col / cfg.image_size as f64) * 4.0) as usize;
                labels[qi.min(3) * 4 + qj.min(3)] = 1.0;
            }
            if !emitters.is_empty() {
                labels[16] = 1.0;
            }
            if total >= high {
                labels[17] = 1.0;
            }
            if emitters.len() >= 3 {
                labels[18] = 1.0;
            }
            Ok(LccSample { image, labels })
        })
        .collect()
}

const SAMPLE_MAGIC: &[u8; 4] = b"AQSM";
const ARCHIVE_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    station_id: String,
    period: Period,
    center: (f64, f64),
    target: f64,
    size: usize,
    channels: usize,
    has_s5p: bool,
    latents: Option<SynthLatents>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub schema_version: u32,
    pub n_samples: usize,
    pub files: Vec<String>,
    /// Present for synthetic archives: the oracle constants and the
    /// generating configuration.
    pub synth: Option<SynthManifest>,
    pub norm: Option<NormStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub alpha: f64,
    pub beta: f64,
    pub config: SynthConfig,
}

impl SynthManifest {
    pub fn new(config: SynthConfig) -> Self {
        SynthManifest {
            alpha: SYNTH_ALPHA,
            beta: SYNTH_BETA,
            config,
        }
    }
}

/// Write samples as one container file each plus `manifest.json`.
pub fn write_archive(
    dir: &Path,
    samples: &[Sample],
    synth: Option<SynthManifest>,
    norm: Option<NormStats>,
) -> Result<ArchiveManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (idx, s) in samples.iter().enumerate() {
        let name = format!("sample-{idx:06}.aqsm");
        let (channels, size, _) = s.s2.dim();
        let header = SampleHeader {
            station_id: s.station_id.clone(),
            period: s.period,
            center: s.center,
            target: s.target,
            size,
            channels,
            has_s5p: s.s5p.is_some(),
            latents: s.latents,
        };
        let mut w = ContainerWriter::create(&dir.join(&name), SAMPLE_MAGIC, &header)?;
        w.write_block(s.s2.as_slice().expect("standard layout"))?;
        if let Some(p) = &s.s5p {
            w.write_block(p.as_slice().expect("standard layout"))?;
        }
        w.finish()?;
        files.push(name);
    }
    let manifest = ArchiveManifest {
        schema_version: ARCHIVE_SCHEMA,
        n_samples: samples.len(),
        files,
        synth,
        norm,
    };
    let body = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    atomic_write(&dir.join("manifest.json"), &body)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ArchiveManifest> {
    let path = dir.join("manifest.json");
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ArchiveManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != ARCHIVE_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported archive schema {}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

pub fn read_archive(dir: &Path) -> Result<(Vec<Sample>, ArchiveManifest)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let (mut r, header): (ContainerReader, SampleHeader) =
            ContainerReader::open(&dir.join(name), SAMPLE_MAGIC)?;
        let s2_raw = r.read_block()?;
        let s2 = Array3::from_shape_vec((header.channels, header.size, header.size), s2_raw)
            .map_err(|e| Error::Format(format!("{name}: image block: {e}")))?;
        let s5p = if header.has_s5p {
            let raw = r.read_block()?;
            Some(
                Array2::from_shape_vec((header.size, header.size), raw)
                    .map_err(|e| Error::Format(format!("{name}: patch block: {e}")))?,
            )
        } else {
            None
        };
        samples.push(Sample {
            station_id: header.station_id,
            period: header.period,
            s2,
            s5p,
            target: header.target,
            center: header.center,
            latents: header.latents,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("archive {} has no samples", dir.display())));
    }
    Ok((samples, manifest))
}
