//! On-disk formats: scene manifest, meteorology and air-quality tables, and
//! band-sequential raster files with a JSON sidecar header.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::{AqObservation, ImageType, MetVector, Raster, SceneMeta, StationId};
use crate::error::{Error, Result};

/// One row of the scene manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub station_id: String,
    pub date: NaiveDate,
    pub image_type: ImageType,
    pub instrument: String,
    pub cover: f64,
    pub cloud_cover: f64,
    pub green_q05: Option<f64>,
    pub green_q50: Option<f64>,
    pub green_q95: Option<f64>,
    pub path: String,
    /// Optional acquisition timestamp; breaks ties between overpasses.
    #[serde(default)]
    pub acquired: Option<NaiveDateTime>,
}

impl ManifestRow {
    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            station_id: StationId::new(self.station_id.clone()),
            date: self.date,
            instrument: self.instrument.clone(),
            cover: self.cover,
            cloud_cover: self.cloud_cover,
            green_q05: self.green_q05,
            green_q50: self.green_q50,
            green_q95: self.green_q95,
            acquired: self.acquired,
        }
    }

    /// Raster path resolved against the manifest's directory.
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetRow {
    pub station_id: String,
    pub date: NaiveDate,
    pub t2m: f64,
    pub rh: f64,
    pub sp: f64,
    pub wind_u: f64,
    pub wind_v: f64,
    pub blh: f64,
}

impl MetRow {
    pub fn new(station_id: &StationId, date: NaiveDate, met: &MetVector) -> Self {
        MetRow {
            station_id: station_id.0.clone(),
            date,
            t2m: met.t2m,
            rh: met.rh,
            sp: met.sp,
            wind_u: met.wind_u,
            wind_v: met.wind_v,
            blh: met.blh,
        }
    }

    pub fn met(&self) -> MetVector {
        MetVector {
            t2m: self.t2m,
            rh: self.rh,
            sp: self.sp,
            wind_u: self.wind_u,
            wind_v: self.wind_v,
            blh: self.blh,
        }
    }
}

/// Hourly meteorology at a station, prior to daily aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyMetRow {
    pub station_id: String,
    pub time: NaiveDateTime,
    pub t2m: f64,
    pub rh: f64,
    pub sp: f64,
    pub wind_u: f64,
    pub wind_v: f64,
    pub blh: f64,
}

impl HourlyMetRow {
    pub fn met(&self) -> MetVector {
        MetVector {
            t2m: self.t2m,
            rh: self.rh,
            sp: self.sp,
            wind_u: self.wind_u,
            wind_v: self.wind_v,
            blh: self.blh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqRow {
    pub station_id: String,
    pub date: NaiveDate,
    pub pm10: Option<f64>,
    pub op_aa: Option<f64>,
    pub op_dtt: Option<f64>,
}

impl From<&AqObservation> for AqRow {
    fn from(aq: &AqObservation) -> Self {
        AqRow {
            station_id: aq.station_id.0.clone(),
            date: aq.date,
            pm10: aq.pm10,
            op_aa: aq.op_aa,
            op_dtt: aq.op_dtt,
        }
    }
}

impl AqRow {
    pub fn observation(&self) -> AqObservation {
        AqObservation {
            station_id: StationId::new(self.station_id.clone()),
            date: self.date,
            pm10: self.pm10,
            op_aa: self.op_aa,
            op_dtt: self.op_dtt,
        }
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar header describing a raster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: Vec<String>,
    pub image_type: ImageType,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub sha256: String,
}

pub fn sidecar_path(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("json")
}

/// Writes `<path>` (raw little-endian f32, band-sequential) and its sidecar.
pub fn write_raster(path: &Path, raster: &Raster, image_type: ImageType) -> Result<()> {
    if raster.channels != image_type.channels() {
        return Err(Error::InvalidInput(format!(
            "{} raster with {} channels",
            image_type, raster.channels
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(raster.data.len() * 4);
    for v in &raster.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let header = RasterHeader {
        width: raster.width,
        height: raster.height,
        bands: image_type.band_names().iter().map(|s| s.to_string()).collect(),
        image_type,
        dtype: "float32".into(),
        byte_order: "little".into(),
        layout: "band_sequential".into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn read_raster(path: &Path) -> Result<(Raster, RasterHeader)> {
    let side = sidecar_path(path);
    let header: RasterHeader = serde_json::from_slice(
        &fs::read(&side).map_err(|e| Error::io(&side, e))?,
    )?;
    if header.dtype != "float32" || header.byte_order != "little" {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported sample format {}/{}",
            path.display(),
            header.dtype,
            header.byte_order
        )));
    }
    if header.bands.len() != header.image_type.channels() {
        return Err(Error::InvalidInput(format!(
            "{}: {} bands declared for {}",
            path.display(),
            header.bands.len(),
            header.image_type
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.bands.len() * header.width * header.height * 4;
    if bytes.len() != expected {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    if !header.sha256.is_empty() && hex::encode(Sha256::digest(&bytes)) != header.sha256 {
        return Err(Error::InvalidInput(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let raster = Raster::new(header.bands.len(), header.height, header.width, data)?;
    Ok((raster, header))
}
