//! Command-line entry point for the NO2 estimation pipeline.
//!
//! Exit codes: 0 success, 2 invalid arguments (including flag parsing),
//! 3 data errors (corrupt products, gaps, empty datasets), 4 numeric
//! errors, 5 I/O errors, 6 configuration errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aqnet::container::atomic_write;
use aqnet::dataset::{
    self, NormStats, Sample, SplitSpec, SynthConfig, SynthManifest,
};
use aqnet::mapping;
use aqnet::model::{pretrain_lcc, Model, PretrainConfig, Variant, FEATURE_DIM, FUSION_DIM};
use aqnet::period::Period;
use aqnet::s2_ingest::{
    crop_centered, load_s2_scene, screen_tile, S2Scene, TILE_SIZE,
};
use aqnet::s5p_ingest::{
    extract_patch, filter_qa, grid_product, temporal_average, NO2Grid, S5PProduct,
};
use aqnet::stations::{
    aggregate_target, filter_quality, parse_station_file, write_targets, MIN_COVERAGE_FRACTION,
};
use aqnet::train_eval::{evaluate, multi_seed_run, train, ExperimentSummary, Metrics, TrainConfig};
use aqnet::{Error, Result};

#[derive(Parser)]
#[command(name = "aqnet", version, about = "Surface NO2 estimation from satellite data")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the seeds in the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory; created if absent
    #[arg(long, global = true, default_value = "aqnet-out")]
    output: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw Sentinel-2/Sentinel-5P/station products into a sample archive
    Ingest,
    /// Generate a synthetic oracle archive
    Synth,
    /// Land-cover pretrain a backbone on synthetic tiles and save the checkpoint
    Pretrain,
    /// Train a model on an archive and save the checkpoint
    Train {
        /// Sample archive directory
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint to start from (head is re-initialized)
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an archive's test split
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Multi-seed train/evaluate runs with Table-1-style aggregation
    Experiment {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint shared across seeds (head re-initialized per seed)
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Overlapping-tile heatmap inference over a scene
    Map {
        /// Level-2A product directory
        #[arg(long)]
        scene: PathBuf,
        /// Column-density grid base path (required for fusion checkpoints)
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-period predictions at one station as a tabular series
    Series {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// run configuration file

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    ingest: IngestSection,
    synth: SynthSection,
    model: ModelSection,
    pretrain: PretrainSection,
    train: TrainSection,
    experiment: ExperimentSection,
    map: MapSection,
    series: SeriesSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct IngestSection {
    /// Level-2A product directories.
    scenes: Vec<PathBuf>,
    /// Level-2 S5P product files (JSON observation lists).
    s5p: Vec<PathBuf>,
    /// Station export CSV.
    stations: PathBuf,
    /// Temporal regime: "full", "quarterly" or "monthly".
    regime: String,
    /// Hours in the full study span, for coverage thresholds.
    study_span_hours: u64,
    qa_threshold: f64,
    cloud_fraction: f64,
    min_coverage_fraction: f64,
    /// South-west corner (lat, lon) of the column-density grid.
    grid_origin: (f64, f64),
    grid_rows: usize,
    grid_cols: usize,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            scenes: Vec::new(),
            s5p: Vec::new(),
            stations: PathBuf::new(),
            regime: "full".into(),
            study_span_hours: 720,
            qa_threshold: aqnet::s5p_ingest::DEFAULT_QA_THRESHOLD,
            cloud_fraction: aqnet::s2_ingest::DEFAULT_CLOUD_FRACTION,
            min_coverage_fraction: MIN_COVERAGE_FRACTION,
            grid_origin: (0.0, 0.0),
            grid_rows: 0,
            grid_cols: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthSection {
    n_samples: usize,
    image_size: usize,
    seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_samples: 2000,
            image_size: 120,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    /// "fusion" or "image-only".
    variant: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "fusion".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainSection {
    n_samples: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            n_samples: 192,
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    lr: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    seed: u64,
    augment: bool,
    freeze_backbone: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            seed: d.seed,
            augment: d.augment,
            freeze_backbone: d.freeze_backbone,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentSection {
    seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MapSection {
    /// Period label attached to the output map.
    period: String,
    cloud_fraction: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            period: "full".into(),
            cloud_fraction: aqnet::s2_ingest::DEFAULT_CLOUD_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SeriesSection {
    station: String,
    periods: Vec<String>,
}

impl RunConfigFile {
    fn load(path: Option<&Path>) -> Result<RunConfigFile> {
        let Some(path) = path else {
            return Ok(RunConfigFile::default());
        };
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the --seed override to every seeded stage.
    fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.experiment.seeds = (0..self.experiment.seeds.len().max(2) as u64)
            .map(|i| seed + i)
            .collect();
    }

    fn variant(&self) -> Result<Variant> {
        match self.model.variant.as_str() {
            "fusion" => Ok(Variant::Fusion),
            "image-only" => Ok(Variant::ImageOnly),
            other => Err(Error::Config(format!(
                "unknown model variant '{other}' (expected 'fusion' or 'image-only')"
            ))),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.train.seed,
            augment: self.train.augment,
            freeze_backbone: self.train.freeze_backbone,
        }
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_samples: self.synth.n_samples,
            image_size: self.synth.image_size,
            ..SynthConfig::new(self.synth.n_samples, self.synth.seed)
        }
    }
}

// ---------------------------------------------------------------------------
// entry point and error mapping

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 2,
        Error::CorruptProduct(_)
        | Error::GeoReferenceMissing(_)
        | Error::InsufficientCoverage(_)
        | Error::DataGap(_)
        | Error::Format(_)
        | Error::Integrity(_)
        | Error::EmptyDataset(_) => 3,
        Error::Numeric(_) | Error::Stats(_) => 4,
        Error::Io { .. } => 5,
        Error::Config(_) | Error::Provenance(_) => 6,
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Argument("--jobs must be at least 1".into()));
    }
    let mut config = RunConfigFile::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    std::fs::create_dir_all(&cli.output).map_err(|e| Error::io(&cli.output, e))?;
    write_resolved_config(&cli.output, &config)?;

    match &cli.command {
        Command::Ingest => cmd_ingest(&config, &cli.output),
        Command::Synth => cmd_synth(&config, &cli.output),
        Command::Pretrain => cmd_pretrain(&config, &cli.output),
        Command::Train { data, init } => cmd_train(&config, &cli.output, data, init.as_deref()),
        Command::Evaluate { data, checkpoint } => {
            cmd_evaluate(&config, &cli.output, data, checkpoint)
        }
        Command::Experiment { data, init } => {
            cmd_experiment(&config, &cli.output, data, init.as_deref())
        }
        Command::Map {
            scene,
            grid,
            checkpoint,
        } => cmd_map(&config, &cli.output, scene, grid.as_deref(), checkpoint),
        Command::Series { data, checkpoint } => cmd_series(&config, &cli.output, data, checkpoint),
    }
}

fn write_resolved_config(out: &Path, config: &RunConfigFile) -> Result<()> {
    let toml = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("resolved config encode: {e}")))?;
    atomic_write(&out.join("run-config.toml"), toml.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Format(format!("{}: encode: {e}", path.display())))?;
    json.push(b'\n');
    atomic_write(path, &json)
}

/// Produce a file via `f` at a temp sibling, then rename into place.
fn atomic_file(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    // keep the original extension so format-by-extension writers still work
    let tmp = dir.join(format!(
        ".tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    f(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// commands

#[derive(Debug, Default, Serialize)]
struct IngestReport {
    station_rows: usize,
    station_rows_rejected: usize,
    records_after_quality_filter: usize,
    s5p_products: usize,
    s5p_observations_in: usize,
    s5p_observations_after_qa: usize,
    tiles_attempted: usize,
    tiles_screened_out: usize,
    tiles_accepted: usize,
    patches_extracted: usize,
    targets_aggregated: usize,
    samples_matched: usize,
    samples_fusion_capable: usize,
}

fn cmd_ingest(config: &RunConfigFile, out: &Path) -> Result<()> {
    let ing = &config.ingest;
    let mut report = IngestReport::default();

    // stations
    let (records, rejects) = parse_station_file(&ing.stations)?;
    report.station_rows = records.len() + rejects.len();
    report.station_rows_rejected = rejects.len();
    let records = filter_quality(&records);
    report.records_after_quality_filter = records.len();
    if records.is_empty() {
        return Err(Error::EmptyDataset(
            "no station record passed the quality filter".into(),
        ));
    }
    let mut station_coords: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in &records {
        station_coords
            .entry(r.station_id.clone())
            .or_insert((r.lat, r.lon));
    }

    // temporal regime
    let period_of = |ts| -> Result<Period> {
        match ing.regime.as_str() {
            "full" => Ok(Period::Full),
            "quarterly" => Ok(Period::quarter_of(ts)),
            "monthly" => Ok(Period::month_of(ts)),
            other => Err(Error::Config(format!(
                "unknown temporal regime '{other}' (expected full, quarterly or monthly)"
            ))),
        }
    };
    let mut periods: BTreeSet<Period> = BTreeSet::new();
    for r in &records {
        periods.insert(period_of(r.timestamp)?);
    }

    // column-density grids, one per period
    let mut grids_by_period: BTreeMap<Period, Vec<NO2Grid>> = BTreeMap::new();
    for path in &ing.s5p {
        let product = S5PProduct::read(path)?;
        report.s5p_products += 1;
        report.s5p_observations_in += product.observations.len();
        let product = filter_qa(&product, ing.qa_threshold)?;
        report.s5p_observations_after_qa += product.observations.len();
        let period = period_of(product.sensing_time)?;
        let grid = grid_product(
            &product,
            ing.grid_origin,
            ing.grid_rows,
            ing.grid_cols,
            period,
        )?;
        grids_by_period.entry(period).or_default().push(grid);
    }
    let mut grids: BTreeMap<Period, NO2Grid> = BTreeMap::new();
    for (period, parts) in grids_by_period {
        grids.insert(period, temporal_average(&parts, period)?);
    }

    // tiles and patches
    let mut tiles = Vec::new();
    let mut patches = Vec::new();
    let mut seen: BTreeSet<(String, Period)> = BTreeSet::new();
    for scene_path in &ing.scenes {
        let scene = load_s2_scene(scene_path)?.to_10m()?;
        let scene_period = period_of(scene.acquisition_time)?;
        if !periods.contains(&scene_period) {
            continue;
        }
        for (station_id, &center) in &station_coords {
            let key = (station_id.clone(), scene_period);
            if seen.contains(&key) {
                continue;
            }
            report.tiles_attempted += 1;
            let tile = match crop_centered(&scene, center, TILE_SIZE, Some(station_id.clone())) {
                Ok(t) => t,
                Err(Error::InsufficientCoverage(_)) => continue,
                Err(e) => return Err(e),
            };
            let scl = scene.scl_window(center.0, center.1, TILE_SIZE)?;
            if !screen_tile(&tile, &scl, ing.cloud_fraction)?.is_accept() {
                report.tiles_screened_out += 1;
                continue;
            }
            report.tiles_accepted += 1;
            if let Some(grid) = grids.get(&scene_period) {
                match extract_patch(grid, center) {
                    Ok(patch) => {
                        report.patches_extracted += 1;
                        patches.push((key.clone(), patch));
                    }
                    Err(Error::InsufficientCoverage(_)) | Err(Error::DataGap(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            seen.insert(key.clone());
            tiles.push((key, tile));
        }
    }

    // targets
    let mut targets = Vec::new();
    for station_id in station_coords.keys() {
        for &period in &periods {
            match aggregate_target(
                &records,
                station_id,
                period,
                ing.study_span_hours,
                ing.min_coverage_fraction,
            ) {
                Ok(t) => targets.push(((station_id.clone(), period), t)),
                Err(Error::InsufficientCoverage(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    report.targets_aggregated = targets.len();
    write_targets(
        &out.join("targets.csv"),
        &targets
            .iter()
            .map(|((id, _), t)| (id.clone(), *t))
            .collect::<Vec<_>>(),
    )?;

    // join and archive
    let target_rows = targets
        .into_iter()
        .map(|(key, t)| (key, t.mean_no2))
        .collect();
    let (samples, join) = dataset::build_samples(tiles, patches, target_rows)?;
    report.samples_matched = join.matched;
    report.samples_fusion_capable = join.fusion_capable;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(
            "ingest produced no joined samples".into(),
        ));
    }
    dataset::write_archive(&out.join("archive"), &samples, None, None)?;
    write_json(&out.join("ingest-report.json"), &report)?;
    eprintln!(
        "ingested {} samples ({} fusion-capable) into {}",
        report.samples_matched,
        report.samples_fusion_capable,
        out.join("archive").display()
    );
    Ok(())
}

fn cmd_synth(config: &RunConfigFile, out: &Path) -> Result<()> {
    let cfg = config.synth_config();
    let samples = dataset::synth_generate(&cfg)?;
    let manifest = dataset::write_archive(
        &out.join("archive"),
        &samples,
        Some(SynthManifest::new(cfg)),
        None,
    )?;
    eprintln!(
        "generated {} synthetic samples into {}",
        manifest.n_samples,
        out.join("archive").display()
    );
    Ok(())
}

fn cmd_pretrain(config: &RunConfigFile, out: &Path) -> Result<()> {
    let lcc_cfg = SynthConfig {
        n_samples: config.pretrain.n_samples,
        image_size: config.synth.image_size,
        ..SynthConfig::new(config.pretrain.n_samples, config.pretrain.seed)
    };
    let data = dataset::synth_lcc_generate(&lcc_cfg)?;
    let mut model =
        Model::<f32>::with_patch_size(config.pretrain.seed, config.variant()?, lcc_cfg.image_size);
    let losses = pretrain_lcc(
        &mut model,
        &data,
        &PretrainConfig {
            epochs: config.pretrain.epochs,
            batch_size: config.pretrain.batch_size,
            lr: config.pretrain.lr,
            seed: config.pretrain.seed,
        },
    )?;
    let path = out.join("pretrained.aqck");
    atomic_file(&path, |tmp| model.save(tmp, None))?;
    write_json(&out.join("pretrain-history.json"), &losses)?;
    eprintln!(
        "pretrained on {} land-cover samples, final loss {:.6}, saved {}",
        data.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

/// Head input width implied by a variant, for compatibility diagnostics.
fn head_width(v: Variant) -> usize {
    match v {
        Variant::Fusion => FUSION_DIM,
        Variant::ImageOnly => FEATURE_DIM,
    }
}

fn check_variant(found: Variant, want: Variant) -> Result<()> {
    if found != want {
        return Err(Error::Config(format!(
            "checkpoint variant mismatch: expected {:?} (head input {}-d), found {:?} (head input {}-d)",
            want,
            head_width(want),
            found,
            head_width(found),
        )));
    }
    Ok(())
}

/// Build the starting model: fresh, or a loaded checkpoint with a
/// re-initialized regression head.
fn init_model(
    config: &RunConfigFile,
    init: Option<&Path>,
    seed: u64,
    patch_size: usize,
) -> Result<Model<f32>> {
    let variant = config.variant()?;
    match init {
        Some(path) => {
            let (model, _) = Model::load(path)?;
            check_variant(model.variant(), variant)?;
            if model.patch_size() != patch_size {
                return Err(Error::Config(format!(
                    "checkpoint patch size {} does not match data patch size {patch_size}",
                    model.patch_size()
                )));
            }
            model.swap_head(seed, true)
        }
        None => Ok(Model::with_patch_size(seed, variant, patch_size)),
    }
}

fn load_split(
    data: &Path,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (samples, _) = dataset::read_archive(data)?;
    dataset::split(samples, &SplitSpec::new(seed))
}

fn cmd_train(
    config: &RunConfigFile,
    out: &Path,
    data: &Path,
    init: Option<&Path>,
) -> Result<()> {
    let cfg = config.train_config();
    let (train_set, val_set, test_set) = load_split(data, cfg.seed)?;
    let patch_size = train_set[0].s2.dim().1;
    let stats = dataset::compute_norm_stats(&train_set)?;
    let mut model = init_model(config, init, cfg.seed, patch_size)?;
    let history = train(&mut model, &train_set, &val_set, &stats, &cfg)?;
    let metrics = evaluate(&mut model, &test_set, &stats)?;

    let ckpt = out.join("model.aqck");
    atomic_file(&ckpt, |tmp| model.save(tmp, Some(&stats)))?;
    write_json(&out.join("history.json"), &history)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    print!("{}", metrics_table(&metrics));
    eprintln!(
        "trained {} epochs (best {}), saved {}",
        history.train_loss.len(),
        history.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(
    config: &RunConfigFile,
    out: &Path,
    data: &Path,
    checkpoint: &Path,
) -> Result<()> {
    let (mut model, norm) = Model::load(checkpoint)?;
    check_variant(model.variant(), config.variant()?)?;
    let stats: NormStats = norm.ok_or_else(|| {
        Error::Config(format!(
            "{}: checkpoint carries no normalization statistics; evaluate needs a trained checkpoint",
            checkpoint.display()
        ))
    })?;
    let (_, _, test_set) = load_split(data, config.train.seed)?;
    let metrics = evaluate(&mut model, &test_set, &stats)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    print!("{}", metrics_table(&metrics));
    Ok(())
}

fn cmd_experiment(
    config: &RunConfigFile,
    out: &Path,
    data: &Path,
    init: Option<&Path>,
) -> Result<()> {
    let (samples, _) = dataset::read_archive(data)?;
    let base_cfg = config.train_config();
    let summary = multi_seed_run(&config.experiment.seeds, |seed| {
        let (train_set, val_set, test_set) =
            dataset::split(samples.clone(), &SplitSpec::new(seed))?;
        let patch_size = train_set[0].s2.dim().1;
        let stats = dataset::compute_norm_stats(&train_set)?;
        let mut model = init_model(config, init, seed, patch_size)?;
        let cfg = TrainConfig { seed, ..base_cfg.clone() };
        train(&mut model, &train_set, &val_set, &stats, &cfg)?;
        evaluate(&mut model, &test_set, &stats)
    })?;

    let table = summary_table(&summary);
    atomic_write(&out.join("summary.tsv"), table.as_bytes())?;
    write_json(&out.join("summary.json"), &summary)?;
    print!("{table}");
    if summary.is_partial() {
        for (seed, reason) in &summary.failed {
            eprintln!("seed {seed} failed: {reason}");
        }
    }
    Ok(())
}

fn cmd_map(
    config: &RunConfigFile,
    out: &Path,
    scene_path: &Path,
    grid_base: Option<&Path>,
    checkpoint: &Path,
) -> Result<()> {
    let (mut model, norm) = Model::load(checkpoint)?;
    check_variant(model.variant(), config.variant()?)?;
    let stats = norm.ok_or_else(|| {
        Error::Config(format!(
            "{}: checkpoint carries no normalization statistics",
            checkpoint.display()
        ))
    })?;
    let scene: S2Scene = load_s2_scene(scene_path)?.to_10m()?;
    let grid = match (model.variant(), grid_base) {
        (Variant::Fusion, Some(base)) => Some(NO2Grid::read(base)?),
        (Variant::Fusion, None) => {
            return Err(Error::Argument(
                "--grid is required for fusion checkpoints".into(),
            ))
        }
        (Variant::ImageOnly, _) => None,
    };
    let dims = scene
        .bands
        .get("B02")
        .map(|b| b.shape())
        .ok_or_else(|| Error::CorruptProduct("scene lacks band B02".into()))?;
    let plan = mapping::plan_tiles(dims, mapping::TILE_PX, mapping::STRIDE_PX)?;
    let period: Period = config.map.period.parse()?;
    let checkpoint_id = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string();
    let map = mapping::predict_map(
        &mut model,
        &stats,
        &scene,
        grid.as_ref(),
        &plan,
        period,
        &checkpoint_id,
        config.map.cloud_fraction,
    )?;
    let raster_path = out.join("map.rst");
    let image_path = out.join("map.png");
    atomic_file(&raster_path, |tmp_r| {
        atomic_file(&image_path, |tmp_i| {
            mapping::export_map(&map, tmp_r, tmp_i, &[])
        })
    })?;
    let predicted = map.mask.iter().filter(|&&m| !m).count();
    eprintln!(
        "mapped {}x{} cells ({} predicted) to {} / {}",
        map.values.dim().0,
        map.values.dim().1,
        predicted,
        raster_path.display(),
        image_path.display()
    );
    Ok(())
}

fn cmd_series(
    config: &RunConfigFile,
    out: &Path,
    data: &Path,
    checkpoint: &Path,
) -> Result<()> {
    if config.series.station.is_empty() {
        return Err(Error::Config(
            "[series] station must be set for the series command".into(),
        ));
    }
    let (mut model, norm) = Model::load(checkpoint)?;
    check_variant(model.variant(), config.variant()?)?;
    let stats = norm.ok_or_else(|| {
        Error::Config(format!(
            "{}: checkpoint carries no normalization statistics",
            checkpoint.display()
        ))
    })?;
    let (samples, _) = dataset::read_archive(data)?;
    let available: BTreeMap<Period, Sample> = samples
        .into_iter()
        .filter(|s| s.station_id == config.series.station)
        .map(|s| (s.period, s))
        .collect();
    let periods: Vec<Period> = config
        .series
        .periods
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_>>()?;
    if periods.is_empty() {
        return Err(Error::Config(
            "[series] periods must list at least one period".into(),
        ));
    }
    let series = mapping::predict_series(&mut model, &stats, &available, &periods)?;

    let mut table = String::from("period\tprediction\n");
    for (period, value) in &series {
        match value {
            Some(v) => table.push_str(&format!("{period}\t{v}\n")),
            None => table.push_str(&format!("{period}\tabsent\n")),
        }
    }
    atomic_write(&out.join("series.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// tabular output

fn metrics_table(m: &Metrics) -> String {
    format!("mae\tmse\tr2\n{}\t{}\t{}\n", m.mae, m.mse, m.r2)
}

fn summary_table(s: &ExperimentSummary) -> String {
    let mut out = String::from("seed\tmae\tmse\tr2\n");
    for row in &s.per_seed {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            row.seed, row.metrics.mae, row.metrics.mse, row.metrics.r2
        ));
    }
    for (label, m) in [("mean", &s.mean), ("std", &s.std), ("best", &s.best)] {
        out.push_str(&format!("{label}\t{}\t{}\t{}\n", m.mae, m.mse, m.r2));
    }
    out
}
