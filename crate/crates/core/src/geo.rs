//! Normalized geostationary (NOM) projection, equirectangular (EQR) grids and
//! nearest-neighbor reprojection between them.
//!
//! Image coordinates are zero-based with pixel centers on integer positions:
//! pixel `(i, j)` has its center at `line = i`, `col = j`. Scan angles follow
//! the CGMS convention where `col = coff + x_deg * cfac * 2^-16`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid projection parameters: {0}")]
    InvalidParams(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("target grid is not aligned with the source grid: {0}")]
    NonAligned(String),
    #[error("crop window exceeds the source grid: {0}")]
    OutOfBounds(String),
    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),
}

const SCALE_2_16: f64 = 65536.0;

/// Parameters of the normalized geostationary projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GeosParams<T> {
    /// Sub-satellite longitude, degrees east.
    pub sub_lon: T,
    /// Distance from the Earth center to the satellite, km.
    pub sat_height: T,
    /// Equatorial radius, km.
    pub r_eq: T,
    /// Polar radius, km.
    pub r_pol: T,
    pub coff: T,
    pub loff: T,
    pub cfac: T,
    pub lfac: T,
}

impl Default for GeosParams<f64> {
    /// FY-4A AGRI 4 km full disk (2748 x 2748) at 104.7E.
    fn default() -> Self {
        Self {
            sub_lon: 104.7,
            sat_height: 42164.0,
            r_eq: 6378.137,
            r_pol: 6356.7523,
            coff: 1373.5,
            loff: 1373.5,
            cfac: 10_233_137.0,
            lfac: 10_233_137.0,
        }
    }
}

/// Result of projecting a ground point into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImagePos<T> {
    OnDisk { line: T, col: T },
    OffDisk,
}

/// Result of intersecting a pixel's view ray with the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundPos<T> {
    Ground { lat: T, lon: T },
    SpaceLook,
}

impl<T: Scalar> GeosParams<T> {
    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.sat_height > self.r_eq && self.r_eq >= self.r_pol && self.r_pol > T::zero();
        if !ok {
            return Err(GeoError::InvalidParams(format!(
                "need sat_height > r_eq >= r_pol > 0, got {} / {} / {}",
                self.sat_height, self.r_eq, self.r_pol
            )));
        }
        if self.cfac == T::zero() || self.lfac == T::zero() {
            return Err(GeoError::InvalidParams(
                "cfac and lfac must be non-zero".into(),
            ));
        }
        let all = [
            self.sub_lon,
            self.sat_height,
            self.r_eq,
            self.r_pol,
            self.coff,
            self.loff,
            self.cfac,
            self.lfac,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> GeosParams<U> {
        let c = |v: T| U::of(v.widen());
        GeosParams {
            sub_lon: c(self.sub_lon),
            sat_height: c(self.sat_height),
            r_eq: c(self.r_eq),
            r_pol: c(self.r_pol),
            coff: c(self.coff),
            loff: c(self.loff),
            cfac: c(self.cfac),
            lfac: c(self.lfac),
        }
    }

    /// Returns the geocentric position of a geodetic surface point, with the
    /// x axis through the sub-satellite point.
    fn surface_point(&self, lat: T, lon: T) -> [T; 3] {
        let one = T::one();
        let lat = lat.to_radians();
        let dlon = (lon - self.sub_lon).to_radians();
        let ratio2 = (self.r_pol / self.r_eq).powi(2);
        let c_lat = (ratio2 * lat.tan()).atan();
        let e2 = one - ratio2;
        let r_l = self.r_pol / (one - e2 * c_lat.cos().powi(2)).sqrt();
        [
            r_l * c_lat.cos() * dlon.cos(),
            r_l * c_lat.cos() * dlon.sin(),
            r_l * c_lat.sin(),
        ]
    }

    /// Projects a ground point (degrees) to fractional image coordinates.
    pub fn forward(&self, lat: T, lon: T) -> ImagePos<T> {
        let [px, py, pz] = self.surface_point(lat, lon);
        // The point faces the satellite iff the outward ellipsoid normal has a
        // positive dot product with the point-to-satellite vector, which
        // reduces to px > r_eq^2 / h.
        if px * self.sat_height <= self.r_eq * self.r_eq {
            return ImagePos::OffDisk;
        }
        let r1 = self.sat_height - px;
        let r2 = -py;
        let r3 = pz;
        let rn = (r1 * r1 + r2 * r2 + r3 * r3).sqrt();
        let x = (-r2 / r1).atan().to_degrees();
        let y = (-r3 / rn).asin().to_degrees();
        let k = T::of(SCALE_2_16).recip();
        ImagePos::OnDisk {
            line: self.loff + y * self.lfac * k,
            col: self.coff + x * self.cfac * k,
        }
    }

    /// Intersects the view ray of a fractional pixel position with the
    /// ellipsoid and returns the ground point in degrees.
    pub fn inverse(&self, line: T, col: T) -> GroundPos<T> {
        let k2 = T::of(SCALE_2_16);
        let x = ((col - self.coff) * k2 / self.cfac).to_radians();
        let y = ((line - self.loff) * k2 / self.lfac).to_radians();
        let h = self.sat_height;
        let flat = (self.r_eq / self.r_pol).powi(2);
        let (cx, sx, cy, sy) = (x.cos(), x.sin(), y.cos(), y.sin());
        let a = cy * cy + flat * sy * sy;
        let hc = h * cx * cy;
        let disc = hc * hc - a * (h * h - self.r_eq * self.r_eq);
        if disc.is_nan() || disc < T::zero() {
            return GroundPos::SpaceLook;
        }
        let sn = (hc - disc.sqrt()) / a;
        let s1 = h - sn * cx * cy;
        let s2 = sn * sx * cy;
        let s3 = -sn * sy;
        let sxy = (s1 * s1 + s2 * s2).sqrt();
        let lat = (flat * s3 / sxy).atan().to_degrees();
        let lon = wrap_lon(s2.atan2(s1).to_degrees() + self.sub_lon);
        GroundPos::Ground { lat, lon }
    }

    /// Angular radius of the visible disk on a sphere of radius `r_eff`,
    /// measured at the Earth center from the sub-satellite point.
    pub fn limb_angle(&self, r_eff: T) -> T {
        (r_eff / self.sat_height).acos().to_degrees()
    }
}

/// Free-function form of [`GeosParams::forward`].
pub fn geos_forward<T: Scalar>(lat: T, lon: T, p: &GeosParams<T>) -> ImagePos<T> {
    p.forward(lat, lon)
}

/// Free-function form of [`GeosParams::inverse`].
pub fn geos_inverse<T: Scalar>(line: T, col: T, p: &GeosParams<T>) -> GroundPos<T> {
    p.inverse(line, col)
}

fn wrap_lon<T: Scalar>(lon: T) -> T {
    let full = T::of(360.0);
    let half = T::of(180.0);
    let mut l = lon;
    while l >= half {
        l = l - full;
    }
    while l < -half {
        l = l + full;
    }
    l
}

/// Equirectangular target grid. Row 0 is the northernmost row; coordinates
/// refer to pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqrGrid {
    /// Latitude of the northernmost row of pixel centers.
    pub lat0: f64,
    /// Longitude of the westernmost column of pixel centers.
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Grid centers closer than this are considered identical.
pub const ALIGN_TOL_DEG: f64 = 1e-9;

impl EqrGrid {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.dlat > 0.0 && self.dlon > 0.0) || !self.dlat.is_finite() || !self.dlon.is_finite()
        {
            return Err(GeoError::InvalidGrid(format!(
                "steps must be positive, got dlat={} dlon={}",
                self.dlat, self.dlon
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(GeoError::InvalidGrid("rows and cols must be >= 1".into()));
        }
        if !self.lat0.is_finite() || !self.lon0.is_finite() {
            return Err(GeoError::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn center_lat(&self, row: usize) -> f64 {
        self.lat0 - row as f64 * self.dlat
    }

    #[inline]
    pub fn center_lon(&self, col: usize) -> f64 {
        self.lon0 + col as f64 * self.dlon
    }

    pub fn lat_min(&self) -> f64 {
        self.center_lat(self.rows - 1)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-grid starting at (`row`, `col`) with the given extent.
    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> EqrGrid {
        EqrGrid {
            lat0: self.center_lat(row),
            lon0: self.center_lon(col),
            dlat: self.dlat,
            dlon: self.dlon,
            rows,
            cols,
        }
    }

    /// Index offset of `target` inside `self`, if every target pixel center
    /// coincides with a center of this grid.
    pub fn offset_of(&self, target: &EqrGrid) -> Result<(usize, usize), GeoError> {
        if (self.dlat - target.dlat).abs() > ALIGN_TOL_DEG
            || (self.dlon - target.dlon).abs() > ALIGN_TOL_DEG
        {
            return Err(GeoError::NonAligned(format!(
                "step ({}, {}) vs ({}, {})",
                target.dlat, target.dlon, self.dlat, self.dlon
            )));
        }
        let fr = (self.lat0 - target.lat0) / self.dlat;
        let fc = (target.lon0 - self.lon0) / self.dlon;
        let (rr, rc) = (fr.round(), fc.round());
        // Every center of the target must land on a source center; the far
        // corner accumulates the step mismatch, so check both corners.
        let far_lat =
            target.center_lat(target.rows - 1) - self.center_lat_f(rr + (target.rows - 1) as f64);
        let far_lon =
            target.center_lon(target.cols - 1) - self.center_lon_f(rc + (target.cols - 1) as f64);
        let near_lat = (fr - rr) * self.dlat;
        let near_lon = (fc - rc) * self.dlon;
        if [near_lat, near_lon, far_lat, far_lon]
            .iter()
            .any(|d| d.abs() > ALIGN_TOL_DEG)
        {
            return Err(GeoError::NonAligned(format!(
                "origin ({}, {}) is not on a source pixel center",
                target.lat0, target.lon0
            )));
        }
        if rr < 0.0
            || rc < 0.0
            || rr as usize + target.rows > self.rows
            || rc as usize + target.cols > self.cols
        {
            return Err(GeoError::OutOfBounds(format!(
                "window at ({rr}, {rc}) of {}x{} inside {}x{}",
                target.rows, target.cols, self.rows, self.cols
            )));
        }
        Ok((rr as usize, rc as usize))
    }

    fn center_lat_f(&self, row: f64) -> f64 {
        self.lat0 - row * self.dlat
    }

    fn center_lon_f(&self, col: f64) -> f64 {
        self.lon0 + col * self.dlon
    }
}

/// Builds a grid whose southernmost row of centers sits at `lat_min` and
/// westernmost column at `lon_min`.
pub fn build_eqr_grid(
    lat_min: f64,
    lon_min: f64,
    rows: usize,
    cols: usize,
    step: f64,
) -> Result<EqrGrid, GeoError> {
    if step <= 0.0 || !step.is_finite() {
        return Err(GeoError::InvalidGrid(format!(
            "step must be positive, got {step}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(GeoError::InvalidGrid(format!("empty grid {rows}x{cols}")));
    }
    let grid = EqrGrid {
        lat0: lat_min + (rows - 1) as f64 * step,
        lon0: lon_min,
        dlat: step,
        dlon: step,
        rows,
        cols,
    };
    grid.validate()?;
    Ok(grid)
}

/// Element type of a raster with its missing-data sentinel.
pub trait Pixel: Copy + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    fn fill() -> Self;
    fn is_fill(self) -> bool;
}

impl Pixel for f32 {
    const DTYPE: &'static str = "float32";

    fn fill() -> Self {
        f32::NAN
    }

    fn is_fill(self) -> bool {
        self.is_nan()
    }
}

/// Sentinel for missing label pixels; also the loss/metric ignore index.
pub const LABEL_FILL: u8 = 255;

impl Pixel for u8 {
    const DTYPE: &'static str = "uint8";

    fn fill() -> Self {
        LABEL_FILL
    }

    fn is_fill(self) -> bool {
        self == LABEL_FILL
    }
}

/// Multi-band raster stored band-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<P> {
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<P>,
}

impl<P: Pixel> Raster<P> {
    pub fn new(bands: usize, rows: usize, cols: usize, data: Vec<P>) -> Result<Self, GeoError> {
        if data.len() != bands * rows * cols {
            return Err(GeoError::ShapeMismatch(format!(
                "{} values for {bands}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            bands,
            rows,
            cols,
            data,
        })
    }

    pub fn filled(bands: usize, rows: usize, cols: usize) -> Self {
        Self {
            bands,
            rows,
            cols,
            data: vec![P::fill(); bands * rows * cols],
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> P {
        self.data[(band * self.rows + row) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, band: usize, row: usize, col: usize, v: P) {
        self.data[(band * self.rows + row) * self.cols + col] = v;
    }

    pub fn band(&self, band: usize) -> &[P] {
        let n = self.plane_len();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [P] {
        let n = self.plane_len();
        &mut self.data[band * n..(band + 1) * n]
    }

    /// Copies the index window starting at (`row`, `col`).
    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> Raster<P> {
        let mut data = Vec::with_capacity(self.bands * rows * cols);
        for b in 0..self.bands {
            for r in row..row + rows {
                let start = (b * self.rows + r) * self.cols + col;
                data.extend_from_slice(&self.data[start..start + cols]);
            }
        }
        Raster {
            bands: self.bands,
            rows,
            cols,
            data,
        }
    }
}

/// Nearest source pixel for each EQR pixel center; `None` when the center is
/// off the disk or outside the source raster.
pub fn nearest_source_index(
    geos: &GeosParams<f64>,
    src_rows: usize,
    src_cols: usize,
    lat: f64,
    lon: f64,
) -> Option<(usize, usize)> {
    match geos.forward(lat, lon) {
        ImagePos::OffDisk => None,
        ImagePos::OnDisk { line, col } => {
            let (r, c) = (line.round(), col.round());
            if r >= 0.0 && c >= 0.0 && (r as usize) < src_rows && (c as usize) < src_cols {
                Some((r as usize, c as usize))
            } else {
                None
            }
        }
    }
}

/// Resamples a NOM raster onto an EQR grid by nearest neighbor. Off-disk and
/// out-of-image positions receive the fill value.
pub fn reproject_nom_to_eqr<P: Pixel>(
    src: &Raster<P>,
    geos: &GeosParams<f64>,
    grid: &EqrGrid,
) -> Result<Raster<P>, GeoError> {
    geos.validate()?;
    grid.validate()?;
    if src.data.len() != src.bands * src.rows * src.cols {
        return Err(GeoError::ShapeMismatch("source raster length".into()));
    }
    let mut out = Raster::<P>::filled(src.bands, grid.rows, grid.cols);
    let plane_out = grid.len();
    let plane_src = src.plane_len();
    for i in 0..grid.rows {
        let lat = grid.center_lat(i);
        for j in 0..grid.cols {
            let lon = grid.center_lon(j);
            if let Some((r, c)) = nearest_source_index(geos, src.rows, src.cols, lat, lon) {
                let si = r * src.cols + c;
                let oi = i * grid.cols + j;
                for b in 0..src.bands {
                    out.data[b * plane_out + oi] = src.data[b * plane_src + si];
                }
            }
        }
    }
    Ok(out)
}

/// Copies the aligned window of `src` covering `target`. No resampling.
pub fn crop_eqr<P: Pixel>(
    src: &Raster<P>,
    src_grid: &EqrGrid,
    target: &EqrGrid,
) -> Result<Raster<P>, GeoError> {
    src_grid.validate()?;
    target.validate()?;
    if src.rows != src_grid.rows || src.cols != src_grid.cols {
        return Err(GeoError::ShapeMismatch(format!(
            "raster {}x{} vs grid {}x{}",
            src.rows, src.cols, src_grid.rows, src_grid.cols
        )));
    }
    let (r, c) = src_grid.offset_of(target)?;
    Ok(src.window(r, c, target.rows, target.cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> GeosParams<f64> {
        GeosParams::default()
    }

    fn on_disk(pos: ImagePos<f64>) -> (f64, f64) {
        match pos {
            ImagePos::OnDisk { line, col } => (line, col),
            ImagePos::OffDisk => panic!("unexpected OffDisk"),
        }
    }

    fn ground(pos: GroundPos<f64>) -> (f64, f64) {
        match pos {
            GroundPos::Ground { lat, lon } => (lat, lon),
            GroundPos::SpaceLook => panic!("unexpected SpaceLook"),
        }
    }

    #[test]
    fn nadir_maps_to_offsets() {
        let p = p();
        let (line, col) = on_disk(p.forward(0.0, p.sub_lon));
        assert!((line - p.loff).abs() < 1e-9);
        assert!((col - p.coff).abs() < 1e-9);
        let (lat, lon) = ground(p.inverse(p.loff, p.coff));
        assert!(lat.abs() < 1e-9);
        assert!((lon - p.sub_lon).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_is_off_disk() {
        let p = p();
        assert_eq!(p.forward(0.0, p.sub_lon + 90.0), ImagePos::OffDisk);
        assert_eq!(p.forward(0.0, p.sub_lon - 90.0), ImagePos::OffDisk);
    }

    #[test]
    fn far_pixel_is_space_look() {
        let p = p();
        assert_eq!(p.inverse(0.0, 0.0), GroundPos::SpaceLook);
        assert_eq!(p.inverse(p.loff, p.coff + 1500.0), GroundPos::SpaceLook);
    }

    #[test]
    fn round_trip_examples() {
        let p = p();
        for (lat, lon) in [(30.5, 110.25), (12.3, 100.7), (-45.0, 150.0), (49.95, 85.0)] {
            let (line, col) = on_disk(p.forward(lat, lon));
            let (lat2, lon2) = ground(p.inverse(line, col));
            assert!((lat - lat2).abs() < 1e-6, "{lat} vs {lat2}");
            assert!((lon - lon2).abs() < 1e-6, "{lon} vs {lon2}");
        }
    }

    #[test]
    fn north_is_up_east_is_right() {
        let p = p();
        let (l_n, _) = on_disk(p.forward(20.0, p.sub_lon));
        let (_, c_e) = on_disk(p.forward(0.0, p.sub_lon + 20.0));
        assert!(l_n < p.loff);
        assert!(c_e > p.coff);
    }

    #[test]
    fn f32_instantiation_is_close() {
        let p32: GeosParams<f32> = p().cast();
        match p32.forward(30.5, 110.25) {
            ImagePos::OnDisk { line, col } => {
                let (l64, c64) = on_disk(p().forward(30.5, 110.25));
                assert!((line as f64 - l64).abs() < 0.05);
                assert!((col as f64 - c64).abs() < 0.05);
            }
            ImagePos::OffDisk => panic!(),
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut q = p();
        q.sat_height = 6000.0;
        assert!(q.validate().is_err());
        let mut q = p();
        q.cfac = 0.0;
        assert!(q.validate().is_err());
        let mut q = p();
        q.r_pol = 7000.0;
        assert!(q.validate().is_err());
    }

    #[test]
    fn reference_grids() {
        let metric = build_eqr_grid(5.0, 85.0, 900, 1000, 0.05).unwrap();
        assert_eq!((metric.rows, metric.cols), (900, 1000));
        assert!((metric.lat_min() - 5.0).abs() < 1e-9);
        assert!((metric.center_lat(0) - 49.95).abs() < 1e-9);
        let product = build_eqr_grid(5.0, 70.0, 1000, 1400, 0.05).unwrap();
        assert_eq!((product.rows, product.cols), (1000, 1400));
        assert!((product.center_lon(1399) - 139.95).abs() < 1e-9);
        let single = build_eqr_grid(0.0, 0.0, 1, 1, 1.0).unwrap();
        assert_eq!((single.center_lat(0), single.center_lon(0)), (0.0, 0.0));
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(build_eqr_grid(0.0, 0.0, 0, 1, 1.0).is_err());
        assert!(build_eqr_grid(0.0, 0.0, 1, 0, 1.0).is_err());
        assert!(build_eqr_grid(0.0, 0.0, 1, 1, 0.0).is_err());
        assert!(build_eqr_grid(0.0, 0.0, 1, 1, -0.05).is_err());
    }

    #[test]
    fn identity_crop() {
        let g = build_eqr_grid(10.0, 100.0, 4, 5, 0.05).unwrap();
        let r = Raster::new(2, 4, 5, (0..40).map(|v| v as f32).collect()).unwrap();
        assert_eq!(crop_eqr(&r, &g, &g).unwrap(), r);
    }

    #[test]
    fn himawari_to_metric_offsets() {
        let h08 = EqrGrid {
            lat0: 60.0,
            lon0: 80.0,
            dlat: 0.05,
            dlon: 0.05,
            rows: 2401,
            cols: 2401,
        };
        let metric = build_eqr_grid(5.0, 85.0, 900, 1000, 0.05).unwrap();
        // Offsets follow from the northernmost row of centers (49.95N) and
        // the westernmost column (85E).
        let expect_row = ((60.0 - (5.0 + 899.0 * 0.05)) / 0.05_f64).round() as usize;
        let expect_col = ((85.0 - 80.0) / 0.05_f64).round() as usize;
        assert_eq!((expect_row, expect_col), (201, 100));
        assert_eq!(h08.offset_of(&metric).unwrap(), (expect_row, expect_col));
    }

    #[test]
    fn misaligned_and_out_of_bounds() {
        let g = build_eqr_grid(10.0, 100.0, 20, 20, 0.05).unwrap();
        let r = Raster::<u8>::filled(1, 20, 20);
        let mut t = g.window(2, 3, 5, 5);
        t.lat0 += 0.013;
        assert!(matches!(crop_eqr(&r, &g, &t), Err(GeoError::NonAligned(_))));
        let t = g.window(18, 0, 5, 5);
        assert!(matches!(
            crop_eqr(&r, &g, &t),
            Err(GeoError::OutOfBounds(_))
        ));
        let mut t = g.window(0, 0, 5, 5);
        t.lon0 -= 0.05;
        assert!(matches!(
            crop_eqr(&r, &g, &t),
            Err(GeoError::OutOfBounds(_))
        ));
    }

    #[test]
    fn nested_crop_equals_composed_window() {
        let g = build_eqr_grid(0.0, 90.0, 30, 40, 0.05).unwrap();
        let r = Raster::new(1, 30, 40, (0..1200).map(|v| (v % 251) as u8).collect()).unwrap();
        let outer = g.window(3, 4, 20, 25);
        let inner = outer.window(5, 6, 7, 8);
        let twice = crop_eqr(&crop_eqr(&r, &g, &outer).unwrap(), &outer, &inner).unwrap();
        let once = crop_eqr(&r, &g, &g.window(8, 10, 7, 8)).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn constant_source_reprojects_to_constant() {
        let geo = p();
        let src = Raster::new(1, 2748, 2748, vec![7.0f32; 2748 * 2748]).unwrap();
        let grid = build_eqr_grid(-80.0, 20.0, 80, 90, 2.0).unwrap();
        let out = reproject_nom_to_eqr(&src, &geo, &grid).unwrap();
        assert!(out.data.iter().all(|v| *v == 7.0 || v.is_nan()));
        assert!(out.data.contains(&7.0));
    }

    #[test]
    fn label_reprojection_creates_no_values() {
        let geo = p();
        let src = Raster::new(
            1,
            2748,
            2748,
            (0..2748 * 2748).map(|i| ((i / 97) % 11) as u8).collect(),
        )
        .unwrap();
        let grid = build_eqr_grid(-70.0, 30.0, 70, 90, 2.0).unwrap();
        let out = reproject_nom_to_eqr(&src, &geo, &grid).unwrap();
        assert!(out.data.iter().all(|v| *v <= 10 || *v == LABEL_FILL));
        assert!(out.data.contains(&LABEL_FILL));
        assert!(out.data.iter().any(|v| *v <= 10));
    }
}
