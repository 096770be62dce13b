//! Synthetic scene pairs with a known, recoverable class structure.
//!
//! Two smooth latent fields (cloudiness and cloud type) are evaluated at the
//! pixel centers of the label grid and thresholded into 11 classes. The label
//! scene is that class field on the EQR grid; the imager scene renders the
//! same field onto a regional window of the NOM geometry, with per-band
//! signatures that make the class recoverable from the 14 bands.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{build_eqr_grid, EqrGrid, GeoError, GeosParams, GroundPos, ImagePos, Raster};
use crate::scene::{Georef, Scene, IMAGER_BANDS, NUM_CLASSES};

/// Number of reflectance-like bands; the rest behave like brightness
/// temperatures.
pub const ALBEDO_BANDS: usize = 5;
const ALBEDO_BASE: f64 = 0.05;
const ALBEDO_STEP: f64 = 0.08;
const ALBEDO_BAND_OFFSET: f64 = 0.01;
const BT_BASE: f64 = 295.0;
const BT_STEP: f64 = 7.0;
const BT_BAND_OFFSET: f64 = 2.0;

/// Daily acquisition window (seconds of day, inclusive).
pub const WINDOW_START: i64 = 30 * 60;
pub const WINDOW_END: i64 = 10 * 3600 + 50 * 60;
pub const IMAGER_CADENCE: i64 = 15 * 60;
pub const LABEL_CADENCE: i64 = 10 * 60;
/// Both cadences coincide every half hour.
const PAIR_CADENCE: i64 = 30 * 60;
const PAIR_SLOTS: i64 = (WINDOW_END - WINDOW_START) / PAIR_CADENCE + 1;
pub const MAX_JITTER_S: i64 = 90;
/// NOM pixels added around the projected footprint of the label grid.
const NOM_MARGIN: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Generator parameters. Every output is a pure function of the spec and a
/// scene index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_scenes: usize,
    /// Target fraction of class 0 on each label scene.
    pub imbalance: f64,
    /// Relative frequencies of classes 1..=10 among cloudy pixels.
    pub cloud_weights: [f64; NUM_CLASSES - 1],
    /// Lattice spacing of the coarse latent octave, degrees.
    pub feature_scale_deg: f64,
    /// Half-width of the uniform per-band noise, in units of the class step.
    pub noise: f64,
    pub label_grid: EqrGrid,
    /// Full-disk geometry; the imager covers only the label grid footprint.
    pub geos: GeosParams<f64>,
    /// First day of the generated sequence, `YYYY-MM-DD`.
    pub start_date: String,
    /// Maximum absolute offset of imager times from the label times.
    pub jitter_s: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 8,
            imbalance: 0.6,
            cloud_weights: [0.22, 0.16, 0.13, 0.11, 0.09, 0.08, 0.07, 0.06, 0.05, 0.03],
            feature_scale_deg: 6.0,
            noise: 0.5,
            // Half a degree beyond the default metric window on every side, so
            // the fitted class fractions hold where tiles are cut.
            label_grid: build_eqr_grid(29.5, 99.5, 220, 220, 0.05).expect("static grid"),
            geos: GeosParams::default(),
            start_date: "2020-06-01".into(),
            jitter_s: 60,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_scenes == 0 {
            return bad("n_scenes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.imbalance) {
            return bad(format!("imbalance {} outside [0, 1]", self.imbalance));
        }
        if self
            .cloud_weights
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return bad("cloud_weights must be positive and finite".into());
        }
        if !(self.feature_scale_deg.is_finite() && self.feature_scale_deg > 0.0) {
            return bad(format!(
                "feature_scale_deg {} must be positive",
                self.feature_scale_deg
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if !(0..=MAX_JITTER_S).contains(&self.jitter_s) {
            return bad(format!(
                "jitter_s {} outside [0, {MAX_JITTER_S}]",
                self.jitter_s
            ));
        }
        self.start_epoch()?;
        self.label_grid.validate()?;
        self.geos.validate()?;
        Ok(())
    }

    fn start_epoch(&self) -> Result<i64, SynthError> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map(|d| {
                d.and_hms_opt(0, 0, 0)
                    .expect("midnight")
                    .and_utc()
                    .timestamp()
            })
            .map_err(|_| SynthError::InvalidSpec(format!("bad start_date {:?}", self.start_date)))
    }

    /// Fraction of each class the rule targets; sums to one.
    pub fn class_fractions(&self) -> [f64; NUM_CLASSES] {
        let total: f64 = self.cloud_weights.iter().sum();
        let mut out = [0.0; NUM_CLASSES];
        out[0] = self.imbalance;
        for (k, w) in self.cloud_weights.iter().enumerate() {
            out[k + 1] = (1.0 - self.imbalance) * w / total;
        }
        out
    }

    /// Nominal label time of pair `index`: consecutive half-hour slots
    /// inside the daily window, continuing on the next day.
    pub fn label_time(&self, index: usize) -> Result<i64, SynthError> {
        let i = index as i64;
        Ok(self.start_epoch()?
            + (i / PAIR_SLOTS) * 86_400
            + WINDOW_START
            + (i % PAIR_SLOTS) * PAIR_CADENCE)
    }

    pub fn imager_time(&self, index: usize) -> Result<i64, SynthError> {
        let t = self.label_time(index)?;
        let j = jitter(mix(self.seed ^ 0x7117_e500) ^ index as u64, self.jitter_s);
        Ok(clamp_to_window(t + j))
    }
}

/// Thresholds turning the two latent values into a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRule {
    /// Class 0 iff cloudiness is below this.
    pub clear_below: f64,
    /// Increasing cloud-type cut points; class = 1 + number of cuts at or
    /// below the type value.
    pub type_cuts: [f64; NUM_CLASSES - 2],
}

impl ClassRule {
    pub fn classify(&self, cloudiness: f64, cloud_type: f64) -> u8 {
        if cloudiness < self.clear_below {
            0
        } else {
            1 + self.type_cuts.iter().filter(|&&c| c <= cloud_type).count() as u8
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn hash3(key: u64, a: i64, b: i64) -> u64 {
    mix(mix(key ^ mix(a as u64)) ^ b as u64)
}

fn jitter(key: u64, max: i64) -> i64 {
    if max == 0 {
        return 0;
    }
    (mix(key) % (2 * max as u64 + 1)) as i64 - max
}

fn clamp_to_window(t: i64) -> i64 {
    let day = t.div_euclid(86_400) * 86_400;
    t.clamp(day + WINDOW_START, day + WINDOW_END)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise in `[0, 1)`, bilinear with smoothstep weights.
fn value_noise(key: u64, lat: f64, lon: f64, scale: f64) -> f64 {
    let (x, y) = (lon / scale, lat / scale);
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smoothstep(x - x0), smoothstep(y - y0));
    let (i, j) = (x0 as i64, y0 as i64);
    let v = |di: i64, dj: i64| unit(hash3(key, i + di, j + dj));
    let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
    let bottom = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// The two latent fields of one scene.
#[derive(Debug, Clone, Copy)]
struct Latent {
    key: u64,
    scale: f64,
}

impl Latent {
    fn field(&self, which: u64, lat: f64, lon: f64) -> f64 {
        let k = mix(self.key ^ which);
        0.65 * value_noise(k, lat, lon, self.scale)
            + 0.35 * value_noise(mix(k), lat, lon, self.scale / 2.7)
    }

    fn cloudiness(&self, lat: f64, lon: f64) -> f64 {
        self.field(1, lat, lon)
    }

    fn cloud_type(&self, lat: f64, lon: f64) -> f64 {
        self.field(2, lat, lon)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return q;
    }
    let idx = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Per-scene thresholds placing the class fractions of the label grid at
/// the spec targets.
fn fit_rule(spec: &SynthSpec, latent: &Latent) -> ClassRule {
    let grid = &spec.label_grid;
    let mut cloud = Vec::with_capacity(grid.len());
    let mut kind = Vec::with_capacity(grid.len());
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let (lat, lon) = (grid.center_lat(i), grid.center_lon(j));
            cloud.push(latent.cloudiness(lat, lon));
            kind.push(latent.cloud_type(lat, lon));
        }
    }
    let mut sorted = cloud.clone();
    sorted.sort_by(f64::total_cmp);
    let clear_below = if spec.imbalance >= 1.0 {
        f64::INFINITY
    } else {
        quantile(&sorted, spec.imbalance)
    };
    let mut cloudy: Vec<f64> = cloud
        .iter()
        .zip(&kind)
        .filter(|(c, _)| **c >= clear_below)
        .map(|(_, k)| *k)
        .collect();
    cloudy.sort_by(f64::total_cmp);
    let total: f64 = spec.cloud_weights.iter().sum();
    let mut type_cuts = [0.0; NUM_CLASSES - 2];
    let mut cum = 0.0;
    for (k, cut) in type_cuts.iter_mut().enumerate() {
        cum += spec.cloud_weights[k] / total;
        *cut = quantile(&cloudy, cum);
    }
    ClassRule {
        clear_below,
        type_cuts,
    }
}

/// Noiseless band value of `class` in band `b` (zero-based).
pub fn band_signature(class: u8, b: usize) -> f64 {
    let c = class as f64;
    if b < ALBEDO_BANDS {
        ALBEDO_BASE + ALBEDO_STEP * c + ALBEDO_BAND_OFFSET * b as f64
    } else {
        BT_BASE - BT_STEP * c - BT_BAND_OFFSET * (b - ALBEDO_BANDS) as f64
    }
}

/// Inverse band rule: nearest class signature in step-normalized band
/// space. `None` when any band is missing.
pub fn classify_bands(bands: &[f32]) -> Option<u8> {
    assert_eq!(
        bands.len(),
        IMAGER_BANDS,
        "classify_bands: need {IMAGER_BANDS} bands"
    );
    if bands.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Signatures lie on a line with unit spacing in normalized space, so the
    // nearest one is the rounded mean of the per-band class estimates.
    let est: f64 = bands
        .iter()
        .enumerate()
        .map(|(b, &v)| {
            let v = v as f64;
            if b < ALBEDO_BANDS {
                (v - band_signature(0, b)) / ALBEDO_STEP
            } else {
                (band_signature(0, b) - v) / BT_STEP
            }
        })
        .sum::<f64>()
        / IMAGER_BANDS as f64;
    Some(est.round().clamp(0.0, (NUM_CLASSES - 1) as f64) as u8)
}

fn band_step(b: usize) -> f64 {
    if b < ALBEDO_BANDS {
        ALBEDO_STEP
    } else {
        BT_STEP
    }
}

/// Regional NOM geometry covering the label grid: the full-disk offsets
/// shifted by the window origin, and the window size.
pub fn nom_window(spec: &SynthSpec) -> Result<(GeosParams<f64>, usize, usize), SynthError> {
    let g = &spec.label_grid;
    let mut edge = Vec::new();
    for i in 0..g.rows {
        edge.push((i, 0));
        edge.push((i, g.cols - 1));
    }
    for j in 0..g.cols {
        edge.push((0, j));
        edge.push((g.rows - 1, j));
    }
    let (mut lmin, mut lmax, mut cmin, mut cmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (i, j) in edge {
        match spec.geos.forward(g.center_lat(i), g.center_lon(j)) {
            ImagePos::OnDisk { line, col } => {
                lmin = lmin.min(line);
                lmax = lmax.max(line);
                cmin = cmin.min(col);
                cmax = cmax.max(col);
            }
            ImagePos::OffDisk => {
                return Err(SynthError::InvalidSpec(
                    "label grid extends off the visible disk".into(),
                ));
            }
        }
    }
    let line0 = (lmin - NOM_MARGIN).floor().max(0.0);
    let col0 = (cmin - NOM_MARGIN).floor().max(0.0);
    let rows = ((lmax + NOM_MARGIN).ceil() - line0) as usize + 1;
    let cols = ((cmax + NOM_MARGIN).ceil() - col0) as usize + 1;
    let mut p = spec.geos;
    p.loff -= line0;
    p.coff -= col0;
    Ok((p, rows, cols))
}

/// Class of the label cell containing (`lat`, `lon`), or `None` outside the
/// label grid. The class field is constant over each cell.
fn cell_class(
    spec: &SynthSpec,
    latent: &Latent,
    rule: &ClassRule,
    lat: f64,
    lon: f64,
) -> Option<u8> {
    let g = &spec.label_grid;
    let r = ((g.lat0 - lat) / g.dlat).round();
    let c = ((lon - g.lon0) / g.dlon).round();
    if r < 0.0 || c < 0.0 || r as usize >= g.rows || c as usize >= g.cols {
        return None;
    }
    let (clat, clon) = (g.center_lat(r as usize), g.center_lon(c as usize));
    Some(rule.classify(latent.cloudiness(clat, clon), latent.cloud_type(clat, clon)))
}

fn scene_latent(spec: &SynthSpec, index: usize) -> Latent {
    Latent {
        key: mix(mix(spec.seed) ^ index as u64),
        scale: spec.feature_scale_deg,
    }
}

/// Class rule fitted for scene `index`.
pub fn scene_rule(spec: &SynthSpec, index: usize) -> Result<ClassRule, SynthError> {
    spec.validate()?;
    Ok(fit_rule(spec, &scene_latent(spec, index)))
}

/// Generates imager and label scenes of pair `index`.
pub fn gen_scene_pair(spec: &SynthSpec, index: usize) -> Result<(Scene, Scene), SynthError> {
    spec.validate()?;
    let latent = scene_latent(spec, index);
    let rule = fit_rule(spec, &latent);
    let grid = spec.label_grid;

    let mut label = Raster::<u8>::filled(1, grid.rows, grid.cols);
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let (lat, lon) = (grid.center_lat(i), grid.center_lon(j));
            label.set(
                0,
                i,
                j,
                rule.classify(latent.cloudiness(lat, lon), latent.cloud_type(lat, lon)),
            );
        }
    }

    let (nom, rows, cols) = nom_window(spec)?;
    let mut imager = Raster::<f32>::filled(IMAGER_BANDS, rows, cols);
    let noise_key = mix(latent.key ^ 0x0b5e_55ed);
    for r in 0..rows {
        for c in 0..cols {
            let GroundPos::Ground { lat, lon } = nom.inverse(r as f64, c as f64) else {
                continue;
            };
            let Some(class) = cell_class(spec, &latent, &rule, lat, lon) else {
                continue;
            };
            let px = hash3(noise_key, r as i64, c as i64);
            for b in 0..IMAGER_BANDS {
                let u = 2.0 * unit(mix(px ^ b as u64)) - 1.0;
                let v = band_signature(class, b) + spec.noise * band_step(b) * u;
                imager.set(b, r, c, v as f32);
            }
        }
    }

    let t_label = spec.label_time(index)?;
    let t_imager = spec.imager_time(index)?;
    Ok((
        Scene::imager(imager, Georef::Nom(nom), t_imager),
        Scene::label(label, Georef::Eqr(grid), t_label),
    ))
}

/// Imager and label scan-begin times of one day (`YYYY-MM-DD`): imager every
/// 15 min and labels every 10 min over the daily window, imager times offset
/// by a seeded jitter of at most `jitter_s` and kept inside the window.
pub fn gen_timetable(
    seed: u64,
    day: &str,
    jitter_s: i64,
) -> Result<(Vec<i64>, Vec<i64>), SynthError> {
    if !(0..=MAX_JITTER_S).contains(&jitter_s) {
        return Err(SynthError::InvalidSpec(format!(
            "jitter_s {jitter_s} outside [0, {MAX_JITTER_S}]"
        )));
    }
    let spec = SynthSpec {
        start_date: day.to_string(),
        ..SynthSpec::default()
    };
    let day0 = spec.start_epoch()?;
    let key = mix(seed ^ mix(day0 as u64));
    let imager = (0..)
        .map(|k| WINDOW_START + k * IMAGER_CADENCE)
        .take_while(|t| *t <= WINDOW_END)
        .enumerate()
        .map(|(k, t)| clamp_to_window(day0 + t + jitter(key ^ k as u64, jitter_s)))
        .collect();
    let labels = (0..)
        .map(|k| day0 + WINDOW_START + k * LABEL_CADENCE)
        .take_while(|t| *t <= day0 + WINDOW_END)
        .collect();
    Ok((imager, labels))
}
