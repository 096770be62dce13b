//! Dataset preparation: band normalization, tiling, class statistics and
//! train/validation splitting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{EqrGrid, Raster, LABEL_FILL};
use crate::scene::{
    read_scene, write_scene, Georef, Scene, SceneData, SceneError, IMAGER_BANDS, NUM_CLASSES,
};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("band {0} has no valid pixels")]
    AllFill(usize),
    #[error("no scenes given")]
    NoScenes,
    #[error("scene grids differ or are not EQR: {0}")]
    GridMismatch(String),
    #[error("invalid label value {0}")]
    InvalidLabelValue(u8),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dataset-wide per-band maxima used for max normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub per_band_max: Vec<f32>,
    pub computed_over: String,
}

impl BandStats {
    pub fn validate(&self) -> Result<(), PrepError> {
        if self.per_band_max.len() != IMAGER_BANDS {
            return Err(PrepError::InvalidParam(format!(
                "{} band maxima, expected {IMAGER_BANDS}",
                self.per_band_max.len()
            )));
        }
        if let Some(b) = self
            .per_band_max
            .iter()
            .position(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(PrepError::InvalidParam(format!(
                "band {b} maximum must be positive"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PrepError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrepError> {
        let stats: BandStats = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        stats.validate()?;
        Ok(stats)
    }
}

/// Per-band maximum of the non-fill values over all scenes.
pub fn compute_band_stats(scenes: &[&Scene]) -> Result<BandStats, PrepError> {
    if scenes.is_empty() {
        return Err(PrepError::NoScenes);
    }
    let mut maxima = vec![f32::NEG_INFINITY; IMAGER_BANDS];
    for s in scenes {
        let r = s
            .as_imager()
            .ok_or_else(|| PrepError::InvalidParam("band statistics need imager scenes".into()))?;
        for (b, m) in maxima.iter_mut().enumerate().take(r.bands) {
            for &v in r.band(b) {
                if !v.is_nan() && v > *m {
                    *m = v;
                }
            }
        }
    }
    if let Some(b) = maxima.iter().position(|m| *m == f32::NEG_INFINITY) {
        return Err(PrepError::AllFill(b));
    }
    let stats = BandStats {
        per_band_max: maxima,
        computed_over: format!("{} imager scenes", scenes.len()),
    };
    stats.validate()?;
    Ok(stats)
}

/// Divides every non-fill value by its band maximum.
pub fn normalize_scene(scene: &Scene, stats: &BandStats) -> Result<Scene, PrepError> {
    stats.validate()?;
    let r = scene
        .as_imager()
        .ok_or_else(|| PrepError::InvalidParam("only imager scenes are normalized".into()))?;
    let mut out = r.clone();
    for b in 0..out.bands {
        let m = stats.per_band_max[b];
        for v in out.band_mut(b) {
            if !v.is_nan() {
                *v /= m;
            }
        }
    }
    Ok(Scene {
        data: SceneData::Imager(out),
        ..scene.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileOrigin {
    pub scene: String,
    pub row: usize,
    pub col: usize,
}

/// An aligned imager/label window.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub bands: Raster<f32>,
    pub label: Raster<u8>,
    pub origin: TileOrigin,
    pub grid: EqrGrid,
    pub time_begin: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileParams {
    pub size: usize,
    pub stride: usize,
    pub max_fill_fraction: f64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            size: 100,
            stride: 100,
            max_fill_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileReport {
    pub candidates: usize,
    pub kept: usize,
    pub dropped: usize,
}

/// Window origins in row-major order.
pub fn window_origins(rows: usize, cols: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let starts = |n: usize| -> Vec<usize> {
        if n < size {
            Vec::new()
        } else {
            (0..=(n - size) / stride).map(|k| k * stride).collect()
        }
    };
    let cs = starts(cols);
    starts(rows)
        .into_iter()
        .flat_map(|r| cs.iter().map(move |&c| (r, c)))
        .collect()
}

/// Cuts an imager/label pair on a shared EQR grid into windows, dropping
/// windows whose label fill fraction exceeds `max_fill_fraction`.
pub fn tile_scene(
    imager: &Scene,
    label: &Scene,
    scene_id: &str,
    params: &TileParams,
) -> Result<(Vec<TileSample>, TileReport), PrepError> {
    if params.size == 0 || params.stride == 0 {
        return Err(PrepError::InvalidParam(
            "tile size and stride must be positive".into(),
        ));
    }
    let (Georef::Eqr(gi), Georef::Eqr(gl)) = (&imager.georef, &label.georef) else {
        return Err(PrepError::GridMismatch("tiling needs EQR scenes".into()));
    };
    if gi != gl {
        return Err(PrepError::GridMismatch(format!("{gi:?} vs {gl:?}")));
    }
    let (Some(x), Some(y)) = (imager.as_imager(), label.as_label()) else {
        return Err(PrepError::InvalidParam(
            "expected an imager and a label scene".into(),
        ));
    };
    let s = params.size;
    let mut tiles = Vec::new();
    let mut report = TileReport::default();
    for (r, c) in window_origins(gi.rows, gi.cols, s, params.stride) {
        report.candidates += 1;
        let lab = y.window(r, c, s, s);
        let fill = lab.data.iter().filter(|&&v| v == LABEL_FILL).count();
        if fill as f64 > params.max_fill_fraction * (s * s) as f64 {
            report.dropped += 1;
            continue;
        }
        tiles.push(TileSample {
            bands: x.window(r, c, s, s),
            label: lab,
            origin: TileOrigin {
                scene: scene_id.to_string(),
                row: r,
                col: c,
            },
            grid: gi.window(r, c, s, s),
            time_begin: imager.time_begin,
        });
        report.kept += 1;
    }
    Ok((tiles, report))
}

/// Pixel counts per class plus the fill pixels that were skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: [u64; NUM_CLASSES],
    pub ignored: u64,
}

impl ClassHistogram {
    pub fn add(&mut self, labels: &[u8]) -> Result<(), PrepError> {
        for &v in labels {
            if v == LABEL_FILL {
                self.ignored += 1;
            } else if (v as usize) < NUM_CLASSES {
                self.counts[v as usize] += 1;
            } else {
                return Err(PrepError::InvalidLabelValue(v));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    /// Clear sky outnumbers all cloud classes combined.
    pub fn is_long_tailed(&self) -> bool {
        self.counts[0] > self.counts[1..].iter().sum::<u64>()
    }

    pub fn fractions(&self) -> [f64; NUM_CLASSES] {
        let valid: u64 = self.counts.iter().sum();
        let mut f = [0.0; NUM_CLASSES];
        if valid > 0 {
            for (o, c) in f.iter_mut().zip(self.counts) {
                *o = c as f64 / valid as f64;
            }
        }
        f
    }
}

pub fn class_histogram<'a>(
    labels: impl IntoIterator<Item = &'a Raster<u8>>,
) -> Result<ClassHistogram, PrepError> {
    let mut h = ClassHistogram::default();
    for l in labels {
        h.add(&l.data)?;
    }
    Ok(h)
}

/// One line of a tile manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub path: String,
    pub label_path: String,
    pub origin: TileOrigin,
    pub histogram: ClassHistogram,
}

impl TileRecord {
    pub fn sort_key(&self) -> (&str, usize, usize) {
        (&self.origin.scene, self.origin.row, self.origin.col)
    }
}

/// Writes the two containers of a tile under `root/subdir` and returns its
/// manifest record.
pub fn write_tile(tile: &TileSample, root: &Path, subdir: &str) -> Result<TileRecord, PrepError> {
    std::fs::create_dir_all(root.join(subdir))?;
    let stem = format!(
        "{}_r{:04}_c{:04}",
        tile.origin.scene, tile.origin.row, tile.origin.col
    );
    let x_rel = format!("{subdir}/{stem}_x.fyt");
    let y_rel = format!("{subdir}/{stem}_y.fyt");
    let georef = Georef::Eqr(tile.grid);
    write_scene(
        &Scene::imager(tile.bands.clone(), georef.clone(), tile.time_begin),
        root.join(&x_rel),
    )?;
    write_scene(
        &Scene::label(tile.label.clone(), georef, tile.time_begin),
        root.join(&y_rel),
    )?;
    let histogram = class_histogram([&tile.label])?;
    Ok(TileRecord {
        path: x_rel,
        label_path: y_rel,
        origin: tile.origin.clone(),
        histogram,
    })
}

pub fn load_tile(root: &Path, rec: &TileRecord) -> Result<TileSample, PrepError> {
    let x = read_scene(root.join(&rec.path))?;
    let y = read_scene(root.join(&rec.label_path))?;
    let grid = *x
        .georef
        .eqr()
        .ok_or_else(|| PrepError::GridMismatch(format!("{} is not EQR", rec.path)))?;
    match (x.data, y.data) {
        (SceneData::Imager(bands), SceneData::Label(label)) => Ok(TileSample {
            bands,
            label,
            origin: rec.origin.clone(),
            grid,
            time_begin: x.time_begin,
        }),
        _ => Err(PrepError::InvalidParam(format!(
            "{} / {} have the wrong kinds",
            rec.path, rec.label_path
        ))),
    }
}

pub fn write_manifest(records: &[TileRecord], path: impl AsRef<Path>) -> Result<(), PrepError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TileRecord>, PrepError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Directory against which a manifest's relative paths resolve.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Default validation share: 5,500 of 115,500 tiles.
pub const DEFAULT_VAL_FRACTION: f64 = 1.0 / 21.0;

fn split_key(seed: u64, origin: &TileOrigin) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((origin.scene.len() as u64).to_le_bytes());
    h.update(origin.scene.as_bytes());
    h.update((origin.row as u64).to_le_bytes());
    h.update((origin.col as u64).to_le_bytes());
    h.finalize().into()
}

/// Deterministic split: the `round(n * val_fraction)` tiles with the smallest
/// seeded origin hash go to validation (at least one when `n >= 2`, never
/// all). Both outputs keep the input order.
pub fn split_dataset(
    tiles: &[TileRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<TileRecord>, Vec<TileRecord>), PrepError> {
    if tiles.is_empty() {
        return Err(PrepError::EmptyManifest);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(PrepError::InvalidParam(format!(
            "val_fraction {val_fraction} not in (0, 1)"
        )));
    }
    let n = tiles.len();
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let mut keyed: Vec<([u8; 32], usize)> = tiles
        .iter()
        .enumerate()
        .map(|(i, t)| (split_key(seed, &t.origin), i))
        .collect();
    keyed.sort();
    let mut is_val = vec![false; n];
    for &(_, i) in keyed.iter().take(n_val) {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (t, v) in tiles.iter().zip(is_val) {
        if v {
            val.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_eqr_grid, GeosParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imager(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Scene {
        let n = rows * cols;
        let data = (0..IMAGER_BANDS * n).map(|i| f(i / n, i % n)).collect();
        let grid = build_eqr_grid(5.0, 85.0, rows, cols, 0.05).unwrap();
        Scene::imager(
            Raster::new(IMAGER_BANDS, rows, cols, data).unwrap(),
            Georef::Eqr(grid),
            0,
        )
    }

    fn label(rows: usize, cols: usize, data: Vec<u8>) -> Scene {
        let grid = build_eqr_grid(5.0, 85.0, rows, cols, 0.05).unwrap();
        Scene::label(
            Raster::new(1, rows, cols, data).unwrap(),
            Georef::Eqr(grid),
            0,
        )
    }

    fn rec(scene: &str, row: usize, col: usize) -> TileRecord {
        TileRecord {
            path: format!("{scene}_{row}_{col}_x.fyt"),
            label_path: format!("{scene}_{row}_{col}_y.fyt"),
            origin: TileOrigin {
                scene: scene.into(),
                row,
                col,
            },
            histogram: ClassHistogram::default(),
        }
    }

    #[test]
    fn constant_band_max() {
        let s = imager(3, 3, |b, _| if b == 2 { 3.0 } else { 1.0 });
        let st = compute_band_stats(&[&s]).unwrap();
        assert_eq!(st.per_band_max[2], 3.0);
    }

    #[test]
    fn max_over_scenes() {
        let a = imager(2, 2, |_, _| 2.0);
        let b = imager(2, 2, |_, p| if p == 3 { 5.0 } else { 1.0 });
        assert!(compute_band_stats(&[&a, &b])
            .unwrap()
            .per_band_max
            .iter()
            .all(|&m| m == 5.0));
    }

    #[test]
    fn fill_excluded_and_all_fill_rejected() {
        let s = imager(2, 2, |b, p| if b == 4 || p == 0 { f32::NAN } else { 1.5 });
        assert!(matches!(
            compute_band_stats(&[&s]),
            Err(PrepError::AllFill(4))
        ));
        let s = imager(2, 2, |_, p| if p == 0 { f32::NAN } else { 1.5 });
        assert_eq!(compute_band_stats(&[&s]).unwrap().per_band_max[0], 1.5);
    }

    #[test]
    fn random_scenes_match_flat_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scenes: Vec<Scene> = (0..3)
            .map(|_| {
                let vals: Vec<f32> = (0..IMAGER_BANDS * 25)
                    .map(|_| {
                        if rng.random::<f32>() < 0.1 {
                            f32::NAN
                        } else {
                            rng.random::<f32>() * 300.0
                        }
                    })
                    .collect();
                imager(5, 5, |b, p| vals[b * 25 + p])
            })
            .collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let st = compute_band_stats(&refs).unwrap();
        for b in 0..IMAGER_BANDS {
            let mut m = f32::NEG_INFINITY;
            for s in &scenes {
                let r = s.as_imager().unwrap();
                for i in 0..25 {
                    let v = r.data[b * 25 + i];
                    if v == v {
                        m = m.max(v);
                    }
                }
            }
            assert_eq!(st.per_band_max[b], m);
        }
    }

    #[test]
    fn normalization_divides_by_band_max() {
        let s = imager(1, 2, |_, p| if p == 0 { 2.5 } else { 5.0 });
        let st = compute_band_stats(&[&s]).unwrap();
        let n = normalize_scene(&s, &st).unwrap();
        let r = n.as_imager().unwrap();
        assert_eq!(r.data[0], 0.5);
        assert_eq!(r.data[1], 1.0);
        let again = normalize_scene(&n, &compute_band_stats(&[&n]).unwrap()).unwrap();
        assert_eq!(again, n);
    }

    #[test]
    fn normalization_preserves_fill() {
        let s = imager(1, 2, |_, p| if p == 0 { f32::NAN } else { 4.0 });
        let st = compute_band_stats(&[&s]).unwrap();
        let n = normalize_scene(&s, &st).unwrap();
        assert!(n.as_imager().unwrap().data[0].is_nan());
    }

    #[test]
    fn tile_counts() {
        assert_eq!(window_origins(900, 1000, 100, 100).len(), 90);
        assert_eq!(window_origins(99, 1000, 100, 100).len(), 0);
        assert_eq!(window_origins(250, 250, 100, 50).len(), 16);
    }

    #[test]
    fn fully_filled_tile_dropped() {
        let x = imager(4, 8, |_, _| 0.5);
        let mut lab = vec![1u8; 32];
        for r in 0..4 {
            for c in 0..4 {
                lab[r * 8 + c] = LABEL_FILL;
            }
        }
        let y = label(4, 8, lab);
        let p = TileParams {
            size: 4,
            stride: 4,
            max_fill_fraction: 0.5,
        };
        let (tiles, rep) = tile_scene(&x, &y, "s", &p).unwrap();
        assert_eq!(
            rep,
            TileReport {
                candidates: 2,
                kept: 1,
                dropped: 1
            }
        );
        assert_eq!(tiles[0].origin.col, 4);
    }

    #[test]
    fn tiles_equal_direct_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, cols) = (23, 31);
        let vals: Vec<f32> = (0..IMAGER_BANDS * rows * cols)
            .map(|_| rng.random())
            .collect();
        let labs: Vec<u8> = (0..rows * cols).map(|_| rng.random_range(0..11)).collect();
        let x = imager(rows, cols, |b, p| vals[b * rows * cols + p]);
        let y = label(rows, cols, labs.clone());
        let p = TileParams {
            size: 7,
            stride: 5,
            max_fill_fraction: 1.0,
        };
        let (tiles, rep) = tile_scene(&x, &y, "s", &p).unwrap();
        assert_eq!(rep.candidates, 4 * 5);
        for t in &tiles {
            let (r0, c0) = (t.origin.row, t.origin.col);
            for i in 0..7 {
                for j in 0..7 {
                    assert_eq!(t.label.data[i * 7 + j], labs[(r0 + i) * cols + c0 + j]);
                    for b in 0..IMAGER_BANDS {
                        assert_eq!(
                            t.bands.data[(b * 7 + i) * 7 + j],
                            vals[b * rows * cols + (r0 + i) * cols + c0 + j]
                        );
                    }
                }
            }
            assert!((t.grid.lat0 - (5.0 + (rows - 1 - r0) as f64 * 0.05)).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let x = imager(4, 4, |_, _| 0.5);
        let y = label(4, 4, vec![0; 16]);
        let mut y2 = y.clone();
        y2.georef = Georef::Eqr(build_eqr_grid(6.0, 85.0, 4, 4, 0.05).unwrap());
        assert!(matches!(
            tile_scene(&x, &y2, "s", &TileParams::default()),
            Err(PrepError::GridMismatch(_))
        ));
        let mut x2 = x.clone();
        x2.georef = Georef::Nom(GeosParams::default());
        assert!(matches!(
            tile_scene(&x2, &y, "s", &TileParams::default()),
            Err(PrepError::GridMismatch(_))
        ));
    }

    #[test]
    fn histogram_examples() {
        let m = Raster::new(1, 2, 2, vec![0, 0, 0, 1]).unwrap();
        let h = class_histogram([&m]).unwrap();
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[1], 1);
        assert!(h.is_long_tailed());
        let f = Raster::new(1, 2, 2, vec![255u8; 4]).unwrap();
        let h = class_histogram([&f]).unwrap();
        assert_eq!(h.ignored, 4);
        assert_eq!(h.counts, [0; 11]);
        let bad = Raster::new(1, 1, 1, vec![11u8]).unwrap();
        assert!(matches!(
            class_histogram([&bad]),
            Err(PrepError::InvalidLabelValue(11))
        ));
    }

    #[test]
    fn histogram_matches_naive_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks: Vec<Raster<u8>> = (0..4)
            .map(|_| {
                let d = (0..64)
                    .map(|_| {
                        let v: u8 = rng.random_range(0..12);
                        if v == 11 {
                            255
                        } else {
                            v
                        }
                    })
                    .collect();
                Raster::new(1, 8, 8, d).unwrap()
            })
            .collect();
        let h = class_histogram(masks.iter()).unwrap();
        let mut naive = [0u64; 12];
        for m in &masks {
            for &v in &m.data {
                naive[if v == 255 { 11 } else { v as usize }] += 1;
            }
        }
        assert_eq!(&h.counts[..], &naive[..11]);
        assert_eq!(h.ignored, naive[11]);
        assert_eq!(h.total(), 256);
    }

    #[test]
    fn split_twenty_to_one() {
        let tiles: Vec<TileRecord> = (0..21).map(|i| rec("a", i * 100, 0)).collect();
        let (train, val) = split_dataset(&tiles, DEFAULT_VAL_FRACTION, 7).unwrap();
        assert_eq!((train.len(), val.len()), (20, 1));
        let again = split_dataset(&tiles, DEFAULT_VAL_FRACTION, 7).unwrap();
        assert_eq!((train, val), again);
    }

    #[test]
    fn split_depends_on_seed() {
        let tiles: Vec<TileRecord> = (0..120).map(|i| rec("b", i / 10, i % 10)).collect();
        let (_, v1) = split_dataset(&tiles, 0.2, 1).unwrap();
        let (_, v2) = split_dataset(&tiles, 0.2, 2).unwrap();
        assert_eq!(v1.len(), 24);
        assert_ne!(v1, v2);
    }

    #[test]
    fn split_disjoint_and_covering() {
        let tiles: Vec<TileRecord> = (0..57).map(|i| rec("c", i, i)).collect();
        let (train, val) = split_dataset(&tiles, 0.3, 9).unwrap();
        assert_eq!(train.len() + val.len(), 57);
        for t in &tiles {
            assert_eq!(train.contains(t) as u8 + val.contains(t) as u8, 1);
        }
        assert!(matches!(
            split_dataset(&[], 0.3, 9),
            Err(PrepError::EmptyManifest)
        ));
        assert!(split_dataset(&tiles, 1.0, 9).is_err());
    }

    #[test]
    fn tile_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = imager(4, 4, |b, p| (b * 16 + p) as f32 / 300.0);
        let y = label(4, 4, (0..16).map(|v| (v % 11) as u8).collect());
        let (tiles, _) = tile_scene(
            &x,
            &y,
            "scene7",
            &TileParams {
                size: 2,
                stride: 2,
                max_fill_fraction: 0.5,
            },
        )
        .unwrap();
        let recs: Vec<TileRecord> = tiles
            .iter()
            .map(|t| write_tile(t, dir.path(), "tiles").unwrap())
            .collect();
        let mpath = dir.path().join("m.jsonl");
        write_manifest(&recs, &mpath).unwrap();
        let back = read_manifest(&mpath).unwrap();
        assert_eq!(back, recs);
        let t0 = load_tile(&manifest_root(&mpath), &back[0]).unwrap();
        assert_eq!(t0, tiles[0]);
        assert_eq!(back[3].histogram.counts.iter().sum::<u64>(), 4);
    }
}
