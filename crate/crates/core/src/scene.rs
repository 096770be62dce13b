//! Scene model and the `.fyt` scene container.
//!
//! Layout: `b"FYT1"`, a little-endian `u32` header length `H`, `H` bytes of
//! UTF-8 JSON header, then the payload (band-major, row-major; `f32` LE or
//! `u8`).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geo::{EqrGrid, GeosParams, Raster, LABEL_FILL};

pub const MAGIC: &[u8; 4] = b"FYT1";
pub const VERSION: u32 = 1;
pub const IMAGER_BANDS: usize = 14;
pub const NUM_CLASSES: usize = 11;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("bad magic: not a scene container")]
    BadMagic,
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("unknown container version {0}")]
    UnknownVersion(u64),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("bad timestamp {0:?}")]
    BadTime(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Imager,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridTag {
    #[serde(rename = "NOM")]
    Nom,
    #[serde(rename = "EQR")]
    Eqr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Georef {
    Nom(GeosParams<f64>),
    Eqr(EqrGrid),
}

impl Georef {
    pub fn tag(&self) -> GridTag {
        match self {
            Georef::Nom(_) => GridTag::Nom,
            Georef::Eqr(_) => GridTag::Eqr,
        }
    }

    pub fn eqr(&self) -> Option<&EqrGrid> {
        match self {
            Georef::Eqr(g) => Some(g),
            Georef::Nom(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneData {
    Imager(Raster<f32>),
    Label(Raster<u8>),
}

/// A georeferenced raster with its scan-begin time (UTC epoch seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub data: SceneData,
    pub georef: Georef,
    pub time_begin: i64,
    pub band_names: Vec<String>,
}

pub fn default_band_names() -> Vec<String> {
    (1..=IMAGER_BANDS).map(|b| format!("band{b:02}")).collect()
}

impl Scene {
    pub fn imager(raster: Raster<f32>, georef: Georef, time_begin: i64) -> Self {
        Self {
            data: SceneData::Imager(raster),
            georef,
            time_begin,
            band_names: default_band_names(),
        }
    }

    pub fn label(raster: Raster<u8>, georef: Georef, time_begin: i64) -> Self {
        Self {
            data: SceneData::Label(raster),
            georef,
            time_begin,
            band_names: Vec::new(),
        }
    }

    pub fn kind(&self) -> SceneKind {
        match self.data {
            SceneData::Imager(_) => SceneKind::Imager,
            SceneData::Label(_) => SceneKind::Label,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match &self.data {
            SceneData::Imager(r) => (r.bands, r.rows, r.cols),
            SceneData::Label(r) => (r.bands, r.rows, r.cols),
        }
    }

    pub fn as_imager(&self) -> Option<&Raster<f32>> {
        match &self.data {
            SceneData::Imager(r) => Some(r),
            SceneData::Label(_) => None,
        }
    }

    pub fn as_label(&self) -> Option<&Raster<u8>> {
        match &self.data {
            SceneData::Label(r) => Some(r),
            SceneData::Imager(_) => None,
        }
    }

    /// Checks the per-kind invariants.
    pub fn validate(&self) -> Result<(), SceneError> {
        let (bands, rows, cols) = self.dims();
        match &self.data {
            SceneData::Imager(r) => {
                if bands != IMAGER_BANDS {
                    return Err(SceneError::InvalidScene(format!(
                        "imager scene must have {IMAGER_BANDS} bands, got {bands}"
                    )));
                }
                if self.band_names.len() != bands {
                    return Err(SceneError::InvalidScene(format!(
                        "{} band names for {bands} bands",
                        self.band_names.len()
                    )));
                }
                if r.data.len() != bands * rows * cols {
                    return Err(SceneError::InvalidScene("raster length".into()));
                }
            }
            SceneData::Label(r) => {
                if bands != 1 {
                    return Err(SceneError::InvalidScene(format!(
                        "label scene must have 1 band, got {bands}"
                    )));
                }
                if r.data.len() != rows * cols {
                    return Err(SceneError::InvalidScene("raster length".into()));
                }
                if let Some(v) = r
                    .data
                    .iter()
                    .find(|&&v| v as usize >= NUM_CLASSES && v != LABEL_FILL)
                {
                    return Err(SceneError::InvalidScene(format!(
                        "label value {v} out of range"
                    )));
                }
            }
        }
        match &self.georef {
            Georef::Eqr(g) => {
                g.validate()
                    .map_err(|e| SceneError::InvalidScene(e.to_string()))?;
                if g.rows != rows || g.cols != cols {
                    return Err(SceneError::InvalidScene(format!(
                        "grid {}x{} vs raster {rows}x{cols}",
                        g.rows, g.cols
                    )));
                }
            }
            Georef::Nom(p) => p
                .validate()
                .map_err(|e| SceneError::InvalidScene(e.to_string()))?,
        }
        Ok(())
    }
}

pub fn format_time(epoch: i64) -> String {
    match Utc.timestamp_opt(epoch, 0) {
        chrono::LocalResult::Single(t) => t.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        _ => format!("invalid:{epoch}"),
    }
}

pub fn parse_time(s: &str) -> Result<i64, SceneError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp())
        .map_err(|_| SceneError::BadTime(s.to_string()))
}

/// Container header; field order here is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u64,
    pub kind: SceneKind,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: String,
    pub grid_tag: GridTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<EqrGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geos: Option<GeosParams<f64>>,
    pub time_begin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_names: Option<Vec<String>>,
    /// `255` for label scenes, the string `"NaN"` for float scenes (JSON has
    /// no NaN literal).
    pub fill_value: Value,
}

impl Header {
    fn for_scene(scene: &Scene) -> Self {
        let (bands, rows, cols) = scene.dims();
        let (dtype, fill_value) = match scene.kind() {
            SceneKind::Imager => ("float32", Value::String("NaN".into())),
            SceneKind::Label => ("uint8", Value::from(LABEL_FILL)),
        };
        Header {
            version: VERSION as u64,
            kind: scene.kind(),
            rows,
            cols,
            bands,
            dtype: dtype.into(),
            grid_tag: scene.georef.tag(),
            geo: scene.georef.eqr().copied(),
            geos: match &scene.georef {
                Georef::Nom(p) => Some(*p),
                Georef::Eqr(_) => None,
            },
            time_begin: format_time(scene.time_begin),
            band_names: if scene.band_names.is_empty() {
                None
            } else {
                Some(scene.band_names.clone())
            },
            fill_value,
        }
    }

    pub fn payload_len(&self) -> usize {
        let elem = if self.dtype == "float32" { 4 } else { 1 };
        self.rows * self.cols * self.bands * elem
    }

    pub fn time_epoch(&self) -> Result<i64, SceneError> {
        parse_time(&self.time_begin)
    }

    fn georef(&self) -> Result<Georef, SceneError> {
        match (self.grid_tag, self.geo, self.geos) {
            (GridTag::Eqr, Some(g), None) => Ok(Georef::Eqr(g)),
            (GridTag::Nom, None, Some(p)) => Ok(Georef::Nom(p)),
            _ => Err(SceneError::HeaderMismatch(
                "grid_tag must come with exactly its own georeference".into(),
            )),
        }
    }

    fn check(&self) -> Result<(), SceneError> {
        if self.version != VERSION as u64 {
            return Err(SceneError::UnknownVersion(self.version));
        }
        let expected = match self.kind {
            SceneKind::Imager => "float32",
            SceneKind::Label => "uint8",
        };
        if self.dtype != expected {
            return Err(SceneError::HeaderMismatch(format!(
                "{:?} scene with dtype {}",
                self.kind, self.dtype
            )));
        }
        Ok(())
    }
}

/// Serializes a scene into its container bytes.
pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>, SceneError> {
    scene.validate()?;
    let header = serde_json::to_vec(&Header::for_scene(scene))?;
    let mut out = Vec::with_capacity(8 + header.len() + scene_payload_len(scene));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match &scene.data {
        SceneData::Imager(r) => {
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SceneData::Label(r) => out.extend_from_slice(&r.data),
    }
    Ok(out)
}

fn scene_payload_len(scene: &Scene) -> usize {
    match &scene.data {
        SceneData::Imager(r) => r.data.len() * 4,
        SceneData::Label(r) => r.data.len(),
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8]), SceneError> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(SceneError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(SceneError::HeaderMismatch(format!(
            "header length {hlen} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
    header.check()?;
    Ok((header, &bytes[8 + hlen..]))
}

/// Parses container bytes into a validated scene.
pub fn decode_scene(bytes: &[u8]) -> Result<Scene, SceneError> {
    let (header, payload) = split_header(bytes)?;
    if payload.len() != header.payload_len() {
        return Err(SceneError::HeaderMismatch(format!(
            "declared payload {} bytes, found {}",
            header.payload_len(),
            payload.len()
        )));
    }
    let georef = header.georef()?;
    let time_begin = header.time_epoch()?;
    let (bands, rows, cols) = (header.bands, header.rows, header.cols);
    let data = match header.kind {
        SceneKind::Imager => SceneData::Imager(Raster {
            bands,
            rows,
            cols,
            data: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        }),
        SceneKind::Label => SceneData::Label(Raster {
            bands,
            rows,
            cols,
            data: payload.to_vec(),
        }),
    };
    let scene = Scene {
        data,
        georef,
        time_begin,
        band_names: header.band_names.unwrap_or_default(),
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let bytes = encode_scene(scene)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_scene(&bytes)
}

/// Reads only the header of a container, without loading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header, SceneError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut pre = [0u8; 8];
    f.read_exact(&mut pre).map_err(|_| SceneError::BadMagic)?;
    if &pre[0..4] != MAGIC {
        return Err(SceneError::BadMagic);
    }
    let hlen = u32::from_le_bytes(pre[4..8].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; hlen];
    f.read_exact(&mut buf)
        .map_err(|_| SceneError::HeaderMismatch("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&buf)?;
    header.check()?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::build_eqr_grid;

    fn label_scene() -> Scene {
        let grid = build_eqr_grid(10.0, 100.0, 3, 4, 0.05).unwrap();
        let r = Raster::new(1, 3, 4, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255]).unwrap();
        Scene::label(
            r,
            Georef::Eqr(grid),
            parse_time("2020-07-18T01:20:00Z").unwrap(),
        )
    }

    fn imager_scene() -> Scene {
        let r = Raster::new(14, 2, 3, (0..84).map(|v| v as f32 * 0.5).collect()).unwrap();
        let mut s = Scene::imager(r, Georef::Nom(GeosParams::default()), 1_595_035_140);
        if let SceneData::Imager(r) = &mut s.data {
            r.data[5] = f32::NAN;
        }
        s
    }

    #[test]
    fn time_formatting() {
        let t = parse_time("2020-07-18T01:19:00Z").unwrap();
        assert_eq!(format_time(t), "2020-07-18T01:19:00Z");
        assert_eq!(t % 86_400, 79 * 60);
        assert!(parse_time("yesterday").is_err());
    }

    #[test]
    fn label_round_trip() {
        let s = label_scene();
        let bytes = encode_scene(&s).unwrap();
        assert_eq!(&bytes[..4], b"FYT1");
        assert_eq!(decode_scene(&bytes).unwrap(), s);
        assert_eq!(encode_scene(&s).unwrap(), bytes);
    }

    #[test]
    fn imager_round_trip_keeps_nan() {
        let s = imager_scene();
        let back = decode_scene(&encode_scene(&s).unwrap()).unwrap();
        let (a, b) = (s.as_imager().unwrap(), back.as_imager().unwrap());
        assert!(b.data[5].is_nan());
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.georef, s.georef);
        assert_eq!(back.band_names[13], "band14");
    }

    #[test]
    fn header_key_order_is_fixed() {
        let bytes = encode_scene(&label_scene()).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[8..8 + hlen]).unwrap();
        assert!(text.starts_with(r#"{"version":1,"kind":"label","rows":3,"cols":4,"bands":1,"dtype":"uint8","grid_tag":"EQR","geo":"#));
        assert!(text.ends_with(r#""time_begin":"2020-07-18T01:20:00Z","fill_value":255}"#));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_scene(&label_scene()).unwrap();
        let err = decode_scene(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, SceneError::HeaderMismatch(_)));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_scene(&label_scene()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_scene(&bytes), Err(SceneError::BadMagic)));
        let mut patched = encode_scene(&label_scene()).unwrap();
        let at = patched
            .windows(10)
            .position(|w| w == b"\"version\":")
            .unwrap();
        patched[at + 10] = b'7';
        assert!(matches!(
            decode_scene(&patched),
            Err(SceneError::UnknownVersion(7))
        ));
    }

    #[test]
    fn invalid_label_value_rejected() {
        let mut s = label_scene();
        let mut bytes = encode_scene(&s).unwrap();
        let n = bytes.len();
        bytes[n - 2] = 12;
        assert!(matches!(
            decode_scene(&bytes),
            Err(SceneError::InvalidScene(_))
        ));
        if let SceneData::Label(r) = &mut s.data {
            r.data[0] = 12;
        }
        assert!(encode_scene(&s).is_err());
    }

    #[test]
    fn thirteen_band_imager_rejected() {
        let r = Raster::new(13, 1, 1, vec![0.0; 13]).unwrap();
        let mut s = Scene::imager(r, Georef::Nom(GeosParams::default()), 0);
        s.band_names.pop();
        assert!(matches!(encode_scene(&s), Err(SceneError::InvalidScene(_))));
    }

    #[test]
    fn file_round_trip_and_header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fyt");
        let s = label_scene();
        write_scene(&s, &path).unwrap();
        assert_eq!(read_scene(&path).unwrap(), s);
        let h = read_header(&path).unwrap();
        assert_eq!(h.kind, SceneKind::Label);
        assert_eq!(h.time_epoch().unwrap(), s.time_begin);
        let first = std::fs::read(&path).unwrap();
        write_scene(&s, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
