//! End-to-end pipeline over a working directory: synthesize, reproject,
//! match, prepare, train, evaluate and render products.
//!
//! Layout under `work_dir`:
//! `raw/{imager,label}/*.fyt`, `eqr/{imager,label}/*.fyt`, `pairs.jsonl`,
//! `tiles/{train,val}.jsonl` with `tiles/data/`, `tiles/band_stats.json`,
//! `model/{best.fyw,history.csv}`, `eval/metrics.{json,csv}`, `product/`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    build_eqr_grid, crop_eqr, reproject_nom_to_eqr, EqrGrid, GeoError, Raster, LABEL_FILL,
};
use crate::loss::{DalConfig, NetworkLoss};
use crate::matching::{
    match_pairs, read_pairs_jsonl, write_pairs_jsonl, MatchParams, MatchSummary, SceneIndex,
};
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{argmax_classes, build_dianet, Dianet, DianetConfig, ModelError};
use crate::prep::{
    class_histogram, compute_band_stats, normalize_scene, split_dataset, tile_scene,
    write_manifest, write_tile, BandStats, ClassHistogram, PrepError, TileParams, TileRecord,
    DEFAULT_VAL_FRACTION,
};
use crate::scene::{
    format_time, read_scene, write_scene, Georef, Scene, SceneData, SceneError, SceneKind,
    IMAGER_BANDS, NUM_CLASSES,
};
use crate::synth::{gen_scene_pair, SynthError, SynthSpec};
use crate::tensor::{
    grad_check, load_checkpoint, GradCheckConfig, ParamStore, Tensor, TensorError,
};
use crate::trainer::{
    evaluate, load_manifest_tiles, save_best, train, CheckpointMeta, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Errors caused by the configuration or arguments rather than by the
    /// run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::InvalidConfig(_)
                | PipelineError::Synth(SynthError::InvalidSpec(_))
                | PipelineError::Model(ModelError::InvalidConfig(_))
                | PipelineError::Train(TrainError::InvalidConfig(_) | TrainError::Dal(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    /// Seed of the train/validation split; model initialization and batch
    /// order follow `train.seed`.
    pub seed: u64,
    /// Grid the training tiles are cut from; must lie on the label grid.
    pub metric_grid: EqrGrid,
    pub product_grid: EqrGrid,
    #[serde(rename = "match")]
    pub matching: MatchParams,
    pub tiles: TileParams,
    pub val_fraction: f64,
    pub model: DianetConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let metric = build_eqr_grid(30.0, 100.0, 200, 200, 0.05).expect("static grid");
        Self {
            work_dir: PathBuf::from("work"),
            seed: 0,
            metric_grid: metric,
            product_grid: metric,
            matching: MatchParams::default(),
            tiles: TileParams::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
            model: DianetConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.metric_grid.validate()?;
        self.product_grid.validate()?;
        if let Err(e) = self.synth.label_grid.offset_of(&self.metric_grid) {
            return bad(format!("metric grid must lie on the label grid: {e}"));
        }
        if self.model.in_channels != IMAGER_BANDS || self.model.num_classes != NUM_CLASSES {
            return bad(format!(
                "model must map {IMAGER_BANDS} bands to {NUM_CLASSES} classes"
            ));
        }
        let t = &self.tiles;
        if t.size == 0 || t.stride == 0 || t.size > self.metric_grid.rows.min(self.metric_grid.cols)
        {
            return bad(format!(
                "tile size {} / stride {} do not fit the metric grid",
                t.size, t.stride
            ));
        }
        if !(0.0..=1.0).contains(&t.max_fill_fraction) {
            return bad(format!(
                "max_fill_fraction {} outside [0, 1]",
                t.max_fill_fraction
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.matching.max_skew < 0 || self.matching.window_start > self.matching.window_end {
            return bad("match window must be ordered and max_skew >= 0".into());
        }
        Ok(())
    }

    pub fn raw_dir(&self, kind: SceneKind) -> PathBuf {
        self.work_dir.join("raw").join(kind_dir(kind))
    }

    pub fn eqr_dir(&self, kind: SceneKind) -> PathBuf {
        self.work_dir.join("eqr").join(kind_dir(kind))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.work_dir.join("pairs.jsonl")
    }

    pub fn tiles_dir(&self) -> PathBuf {
        self.work_dir.join("tiles")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.tiles_dir().join("train.jsonl")
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.tiles_dir().join("val.jsonl")
    }

    pub fn band_stats_path(&self) -> PathBuf {
        self.tiles_dir().join("band_stats.json")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.work_dir.join("model")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.model_dir().join("best.fyw")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work_dir.join("eval")
    }

    pub fn product_dir(&self) -> PathBuf {
        self.work_dir.join("product")
    }
}

fn kind_dir(kind: SceneKind) -> &'static str {
    match kind {
        SceneKind::Imager => "imager",
        SceneKind::Label => "label",
    }
}

/// File name of a scene: sensor prefix plus compact scan time.
pub fn scene_file_name(kind: SceneKind, time_begin: i64) -> String {
    let stamp: String = format_time(time_begin)
        .chars()
        .filter(|c| c.is_ascii_digit() || *c == 'T')
        .collect();
    match kind {
        SceneKind::Imager => format!("FY4A_{stamp}.fyt"),
        SceneKind::Label => format!("H08_{stamp}.fyt"),
    }
}

fn sorted_fyt(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if !dir.is_dir() {
        return Err(PipelineError::MissingInput(dir.display().to_string()));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("fyt"));
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub scenes: usize,
    pub imager: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthReport, PipelineError> {
    cfg.validate()?;
    let (di, dl) = (
        cfg.raw_dir(SceneKind::Imager),
        cfg.raw_dir(SceneKind::Label),
    );
    std::fs::create_dir_all(&di)?;
    std::fs::create_dir_all(&dl)?;
    let mut report = SynthReport {
        scenes: cfg.synth.n_scenes,
        imager: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..cfg.synth.n_scenes {
        let (img, lab) = gen_scene_pair(&cfg.synth, i)?;
        let pi = di.join(scene_file_name(SceneKind::Imager, img.time_begin));
        let pl = dl.join(scene_file_name(SceneKind::Label, lab.time_begin));
        write_scene(&img, &pi)?;
        write_scene(&lab, &pl)?;
        report.imager.push(pi);
        report.labels.push(pl);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectReport {
    pub written: Vec<PathBuf>,
}

/// Brings one scene onto `grid`: NOM imagery by nearest-neighbour
/// resampling, EQR scenes by an aligned crop.
pub fn scene_to_grid(scene: &Scene, grid: &EqrGrid) -> Result<Scene, PipelineError> {
    let data = match (&scene.georef, &scene.data) {
        (Georef::Nom(p), SceneData::Imager(r)) => {
            SceneData::Imager(reproject_nom_to_eqr(r, p, grid)?)
        }
        (Georef::Nom(p), SceneData::Label(r)) => {
            SceneData::Label(reproject_nom_to_eqr(r, p, grid)?)
        }
        (Georef::Eqr(g), SceneData::Imager(r)) => SceneData::Imager(crop_eqr(r, g, grid)?),
        (Georef::Eqr(g), SceneData::Label(r)) => SceneData::Label(crop_eqr(r, g, grid)?),
    };
    Ok(Scene {
        data,
        georef: Georef::Eqr(*grid),
        ..scene.clone()
    })
}

/// Reprojects `inputs` (or every raw scene) onto the metric grid, keeping
/// file names and sorting outputs by kind.
pub fn run_reproject(
    cfg: &PipelineConfig,
    inputs: &[PathBuf],
) -> Result<ReprojectReport, PipelineError> {
    cfg.validate()?;
    let inputs = if inputs.is_empty() {
        let mut all = sorted_fyt(&cfg.raw_dir(SceneKind::Imager))?;
        all.extend(sorted_fyt(&cfg.raw_dir(SceneKind::Label))?);
        all
    } else {
        inputs.to_vec()
    };
    let mut written = Vec::new();
    for path in &inputs {
        let scene = read_scene(path)?;
        let out = scene_to_grid(&scene, &cfg.metric_grid)?;
        let dir = cfg.eqr_dir(scene.kind());
        std::fs::create_dir_all(&dir)?;
        let name = path
            .file_name()
            .ok_or_else(|| PipelineError::MissingInput(path.display().to_string()))?;
        let dst = dir.join(name);
        write_scene(&out, &dst)?;
        written.push(dst);
    }
    Ok(ReprojectReport { written })
}

pub fn run_match(cfg: &PipelineConfig) -> Result<MatchSummary, PipelineError> {
    cfg.validate()?;
    let imager = SceneIndex::scan_dir(cfg.eqr_dir(SceneKind::Imager))?;
    let labels = SceneIndex::scan_dir(cfg.eqr_dir(SceneKind::Label))?;
    let (pairs, summary) = match_pairs(&imager, &labels, &cfg.matching);
    write_pairs_jsonl(&pairs, cfg.pairs_path())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub pairs: usize,
    pub tiles_kept: usize,
    pub tiles_dropped: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub band_stats: BandStats,
    pub histogram: ClassHistogram,
}

/// Normalizes matched imagery with dataset-wide band maxima, tiles every
/// pair and writes the train and validation manifests.
pub fn run_prep(cfg: &PipelineConfig) -> Result<PrepReport, PipelineError> {
    cfg.validate()?;
    let pairs = read_pairs_jsonl(cfg.pairs_path())?;
    if pairs.is_empty() {
        return Err(PipelineError::MissingInput("no matched pairs".into()));
    }
    let mut scenes = Vec::with_capacity(pairs.len());
    for p in &pairs {
        scenes.push((
            read_scene(&p.imager_path)?,
            read_scene(&p.label_path)?,
            p.imager_path.clone(),
        ));
    }
    let imagers: Vec<&Scene> = scenes.iter().map(|s| &s.0).collect();
    let stats = compute_band_stats(&imagers)?;

    let root = cfg.tiles_dir();
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    std::fs::create_dir_all(&root)?;
    stats.save(cfg.band_stats_path())?;
    let mut records: Vec<TileRecord> = Vec::new();
    let (mut kept, mut dropped) = (0, 0);
    for (img, lab, path) in &scenes {
        let norm = normalize_scene(img, &stats)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PipelineError::MissingInput(path.display().to_string()))?;
        let (tiles, rep) = tile_scene(&norm, lab, id, &cfg.tiles)?;
        kept += rep.kept;
        dropped += rep.dropped;
        for t in &tiles {
            records.push(write_tile(t, &root, "data")?);
        }
    }
    if records.is_empty() {
        return Err(PipelineError::Prep(PrepError::EmptyManifest));
    }
    let (train, val) = split_dataset(&records, cfg.val_fraction, cfg.seed)?;
    if val.is_empty() {
        return Err(PipelineError::InvalidConfig(format!(
            "{} tiles are too few for a validation split",
            records.len()
        )));
    }
    write_manifest(&train, cfg.train_manifest())?;
    write_manifest(&val, cfg.val_manifest())?;
    let mut histogram = ClassHistogram::default();
    for r in &records {
        histogram.merge(&r.histogram);
    }
    Ok(PrepReport {
        pairs: pairs.len(),
        tiles_kept: kept,
        tiles_dropped: dropped,
        train_tiles: train.len(),
        val_tiles: val.len(),
        band_stats: stats,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub scenes: usize,
    pub histogram: ClassHistogram,
    pub fractions: [f64; NUM_CLASSES],
    pub long_tailed: bool,
    /// Class with the most pixels (lowest index on ties).
    pub dominant_class: usize,
}

/// Class histogram over every label scene in `dir`.
pub fn run_stats(dir: &Path) -> Result<StatsReport, PipelineError> {
    let mut rasters = Vec::new();
    for p in sorted_fyt(dir)? {
        let s = read_scene(&p)?;
        if let Some(r) = s.as_label() {
            rasters.push(r.clone());
        }
    }
    if rasters.is_empty() {
        return Err(PipelineError::MissingInput(format!(
            "no label scenes in {}",
            dir.display()
        )));
    }
    let histogram = class_histogram(&rasters)?;
    let dominant_class = (0..NUM_CLASSES)
        .rev()
        .max_by_key(|&c| histogram.counts[c])
        .unwrap_or(0);
    Ok(StatsReport {
        scenes: rasters.len(),
        fractions: histogram.fractions(),
        long_tailed: histogram.is_long_tailed(),
        dominant_class,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub train_tiles: usize,
    pub val_tiles: usize,
}

pub fn run_train(cfg: &PipelineConfig) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    let train_tiles = load_manifest_tiles(&cfg.train_manifest())?;
    let val_tiles = load_manifest_tiles(&cfg.val_manifest())?;
    let (net, mut params) = build_dianet::<f32>(&cfg.model, cfg.train.seed)?;
    let outcome = train(&net, &mut params, &train_tiles, &val_tiles, &cfg.train)?;
    std::fs::create_dir_all(cfg.model_dir())?;
    save_best(&cfg.checkpoint_path(), &outcome, &cfg.model, &cfg.train)?;
    outcome
        .history
        .save_csv(&cfg.model_dir().join("history.csv"))?;
    Ok(TrainReport {
        checkpoint: cfg.checkpoint_path(),
        best_epoch: outcome.best_epoch,
        best_miou: outcome.best_miou,
        train_tiles: train_tiles.len(),
        val_tiles: val_tiles.len(),
    })
}

/// Rebuilds the network described by a checkpoint and loads its weights.
pub fn load_model(path: &Path) -> Result<(Dianet, ParamStore<f32>), PipelineError> {
    let ckpt = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config)?;
    let (net, mut params) = build_dianet::<f32>(&meta.model, 0)?;
    params.assign(&ckpt.params)?;
    Ok((net, params))
}

/// Evaluates a checkpoint on a manifest and writes `metrics.json` and
/// `metrics.csv` to the eval directory.
pub fn run_eval(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    manifest: &Path,
) -> Result<MetricsReport, PipelineError> {
    cfg.validate()?;
    let (net, params) = load_model(checkpoint)?;
    let tiles = load_manifest_tiles(manifest)?;
    let report = evaluate(
        &net,
        &params,
        &tiles,
        cfg.train.batch_size,
        cfg.train.miou_mode,
    )?;
    std::fs::create_dir_all(cfg.eval_dir())?;
    report.save_json(&cfg.eval_dir().join("metrics.json"))?;
    report.save_csv(&cfg.eval_dir().join("metrics.csv"))?;
    Ok(report)
}

/// Display colors of the 11 classes; fill pixels are black.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [30, 60, 150],
    [235, 235, 255],
    [190, 200, 235],
    [220, 30, 30],
    [120, 200, 120],
    [90, 150, 90],
    [130, 90, 170],
    [250, 200, 60],
    [240, 140, 40],
    [150, 150, 150],
    [255, 0, 255],
];

/// Writes an 8-bit indexed PNG of a class raster.
pub fn write_product_png(
    classes: &[u8],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(), PipelineError> {
    let mut palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    palette.extend_from_slice(&[0, 0, 0]);
    let fill_index = NUM_CLASSES as u8;
    let pixels: Vec<u8> = classes
        .iter()
        .map(|&c| {
            if (c as usize) < NUM_CLASSES {
                c
            } else {
                fill_index
            }
        })
        .collect();
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductReport {
    pub scene: PathBuf,
    pub png: PathBuf,
    pub class_counts: [u64; NUM_CLASSES],
    pub fill: u64,
}

/// Classifies a whole imager scene on the product grid and writes it as a
/// label scene and a PNG.
pub fn run_product(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    input: &Path,
) -> Result<ProductReport, PipelineError> {
    cfg.validate()?;
    let (net, params) = load_model(checkpoint)?;
    let stats = BandStats::load(cfg.band_stats_path())?;
    let scene = read_scene(input)?;
    if scene.kind() != SceneKind::Imager {
        return Err(PipelineError::InvalidConfig(format!(
            "{} is not an imager scene",
            input.display()
        )));
    }
    let grid = cfg.product_grid;
    let eqr = normalize_scene(&scene_to_grid(&scene, &grid)?, &stats)?;
    let bands = eqr.as_imager().expect("imager scene");
    let x = Tensor::new(
        [1, IMAGER_BANDS, grid.rows, grid.cols],
        bands
            .data
            .iter()
            .map(|v| if v.is_finite() { *v } else { 0.0 })
            .collect(),
    )?;
    let mut classes = argmax_classes(&net.predict(&params, &x)?);
    let plane = grid.len();
    for (p, c) in classes.iter_mut().enumerate() {
        if (0..IMAGER_BANDS).any(|b| !bands.data[b * plane + p].is_finite()) {
            *c = LABEL_FILL;
        }
    }
    let mut report = ProductReport {
        scene: PathBuf::new(),
        png: PathBuf::new(),
        class_counts: [0; NUM_CLASSES],
        fill: 0,
    };
    for &c in &classes {
        match report.class_counts.get_mut(c as usize) {
            Some(n) => *n += 1,
            None => report.fill += 1,
        }
    }
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| PipelineError::MissingInput(input.display().to_string()))?;
    std::fs::create_dir_all(cfg.product_dir())?;
    report.scene = cfg.product_dir().join(format!("{stem}_classes.fyt"));
    report.png = cfg.product_dir().join(format!("{stem}_classes.png"));
    let raster = Raster::new(1, grid.rows, grid.cols, classes)?;
    write_scene(
        &Scene::label(raster.clone(), Georef::Eqr(grid), scene.time_begin),
        &report.scene,
    )?;
    write_product_png(&raster.data, grid.rows, grid.cols, &report.png)?;
    Ok(report)
}

/// Side of the square input used by [`run_gradcheck`].
pub const GRADCHECK_SIZE: usize = 8;
/// Finite-difference step of [`run_gradcheck`]. Batch normalization puts
/// many pre-activations near zero, so larger steps straddle ReLU and max
/// kinks somewhere in the network.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub max_rel_error: f64,
    pub entries: usize,
    pub worst_slot: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compares analytic and central-difference gradients of the configured
/// network under the configured loss, on a random 8x8 batch of one, in
/// training mode.
pub fn run_gradcheck(cfg: &PipelineConfig) -> Result<GradcheckSummary, PipelineError> {
    cfg.validate()?;
    let (net, mut params) = build_dianet::<f32>(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Lift the zero-initialized shifts and biases off their kinks.
    params.jitter(0.05, &mut rng);
    let shape = [1, cfg.model.in_channels, GRADCHECK_SIZE, GRADCHECK_SIZE];
    let n: usize = shape.iter().product();
    let input = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels = (0..GRADCHECK_SIZE * GRADCHECK_SIZE)
        .map(|_| rng.random_range(0..cfg.model.num_classes as u8))
        .collect();
    // Keeping every pixel reduces the selection to plain mean cross-entropy.
    let dal = if cfg.train.use_dal {
        cfg.train.dal
    } else {
        DalConfig {
            prob_thresh: 1.0,
            min_kept: Some(usize::MAX),
            ..cfg.train.dal
        }
    };
    let objective = NetworkLoss {
        net: &net,
        input,
        labels,
        dal,
    };
    let check = GradCheckConfig {
        eps: GRADCHECK_EPS,
        ..Default::default()
    };
    // Analytic gradients in f64: f32 rounding is visible on the tiny
    // gradients behind the 2x2 and 1x1 normalized branches.
    let params = params.cast::<f64>();
    let report = grad_check(&objective, &params, check)?;
    Ok(GradcheckSummary {
        max_rel_error: report.max_rel_error,
        entries: report.entries,
        worst_slot: params.names()[report.worst.0].clone(),
        analytic: report.analytic,
        numeric: report.numeric,
        passed: report.max_rel_error < GRADCHECK_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub synth: SynthReport,
    pub matched: MatchSummary,
    pub prep: PrepReport,
    pub train: TrainReport,
    pub eval: MetricsReport,
}

/// synth, reproject, match, prep, train and eval on the validation tiles.
pub fn run_all(cfg: &PipelineConfig) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    let synth = run_synth(cfg)?;
    run_reproject(cfg, &[])?;
    let matched = run_match(cfg)?;
    let prep = run_prep(cfg)?;
    let train = run_train(cfg)?;
    let eval = run_eval(cfg, &cfg.checkpoint_path(), &cfg.val_manifest())?;
    Ok(PipelineSummary {
        synth,
        matched,
        prep,
        train,
        eval,
    })
}
