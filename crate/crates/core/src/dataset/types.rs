use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length, in pixels, of a 1 km² scene patch.
pub const PATCH_SIZE: usize = 334;

/// Number of daily meteorological covariates.
pub const MET_DIM: usize = 6;

pub const MET_COLUMNS: [&str; MET_DIM] = ["t2m", "rh", "sp", "wind_u", "wind_v", "blh"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImageType {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "TOAR")]
    Toar,
}

impl ImageType {
    pub fn channels(self) -> usize {
        match self {
            ImageType::Rgb => 3,
            ImageType::Toar => 4,
        }
    }

    /// Band order of the raster files.
    pub fn band_names(self) -> &'static [&'static str] {
        match self {
            ImageType::Rgb => &["R", "G", "B"],
            ImageType::Toar => &["B", "G", "R", "NIR"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImageType::Rgb => "RGB",
            ImageType::Toar => "TOAR",
        }
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGB" => Ok(ImageType::Rgb),
            "TOAR" => Ok(ImageType::Toar),
            other => Err(Error::InvalidInput(format!("unknown image type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationId(pub String);

impl StationId {
    pub fn new(id: impl Into<String>) -> Self {
        StationId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Planar (channel-major) multi-band raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "raster data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Raster {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// One station-day image of a 1 km² area.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePatch {
    pub station_id: StationId,
    pub date: NaiveDate,
    pub image_type: ImageType,
    pub instrument: String,
    pub raster: Raster,
}

impl ScenePatch {
    pub fn new(
        station_id: StationId,
        date: NaiveDate,
        image_type: ImageType,
        instrument: impl Into<String>,
        raster: Raster,
    ) -> Result<Self> {
        let scene = ScenePatch {
            station_id,
            date,
            image_type,
            instrument: instrument.into(),
            raster,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.raster;
        if r.height != PATCH_SIZE || r.width != PATCH_SIZE {
            return Err(Error::InvalidInput(format!(
                "scene {} {} is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
                self.station_id, self.date, r.height, r.width
            )));
        }
        if r.channels != self.image_type.channels() {
            return Err(Error::InvalidInput(format!(
                "{} scene has {} channels",
                self.image_type, r.channels
            )));
        }
        if let Some(v) = r.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite band value {v}")));
        }
        if self.image_type == ImageType::Toar && r.data.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("negative TOAR reflectance".into()));
        }
        Ok(())
    }
}

/// Scene-level metadata used by the cloud filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub station_id: StationId,
    pub date: NaiveDate,
    pub instrument: String,
    pub cover: f64,
    pub cloud_cover: f64,
    pub green_q05: Option<f64>,
    pub green_q50: Option<f64>,
    pub green_q95: Option<f64>,
    /// Acquisition time of the overpass, when known.
    pub acquired: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetVector {
    pub t2m: f64,
    pub rh: f64,
    pub sp: f64,
    pub wind_u: f64,
    pub wind_v: f64,
    pub blh: f64,
}

impl MetVector {
    pub fn from_array(v: [f64; MET_DIM]) -> Self {
        MetVector {
            t2m: v[0],
            rh: v[1],
            sp: v[2],
            wind_u: v[3],
            wind_v: v[4],
            blh: v[5],
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; MET_DIM] = v.try_into().map_err(|_| {
            Error::InvalidInput(format!(
                "meteorology vector has {} components, expected {MET_DIM}",
                v.len()
            ))
        })?;
        Ok(Self::from_array(arr))
    }

    pub fn to_array(&self) -> [f64; MET_DIM] {
        [self.t2m, self.rh, self.sp, self.wind_u, self.wind_v, self.blh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Pm10,
    OpAa,
    OpDtt,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::OpAa, Target::OpDtt, Target::Pm10];

    /// Values strictly above this are treated as outliers and dropped.
    pub fn outlier_threshold(self) -> f64 {
        match self {
            Target::Pm10 => 50.0,
            Target::OpAa => 6.0,
            Target::OpDtt => 5.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Pm10 => "pm10",
            Target::OpAa => "op_aa",
            Target::OpDtt => "op_dtt",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Target::Pm10 => "PM10",
            Target::OpAa => "OP_AA",
            Target::OpDtt => "OP_DTT",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pm10" => Ok(Target::Pm10),
            "op_aa" => Ok(Target::OpAa),
            "op_dtt" => Ok(Target::OpDtt),
            other => Err(Error::InvalidInput(format!("unknown target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqObservation {
    pub station_id: StationId,
    pub date: NaiveDate,
    pub pm10: Option<f64>,
    pub op_aa: Option<f64>,
    pub op_dtt: Option<f64>,
}

impl AqObservation {
    pub fn get(&self, target: Target) -> Option<f64> {
        match target {
            Target::Pm10 => self.pm10,
            Target::OpAa => self.op_aa,
            Target::OpDtt => self.op_dtt,
        }
    }

    pub fn slot_mut(&mut self, target: Target) -> &mut Option<f64> {
        match target {
            Target::Pm10 => &mut self.pm10,
            Target::OpAa => &mut self.op_aa,
            Target::OpDtt => &mut self.op_dtt,
        }
    }
}

/// A scene that passed filtering, referenced by path.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRef {
    pub path: PathBuf,
    pub image_type: ImageType,
    pub meta: SceneMeta,
}

/// Join unit of the corpus: one station on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct StationDayRecord {
    pub station_id: StationId,
    pub date: NaiveDate,
    pub met: MetVector,
    pub scenes: BTreeMap<ImageType, SceneRef>,
    pub aq: Option<AqObservation>,
}

impl StationDayRecord {
    pub fn scene(&self, image_type: ImageType) -> Option<&SceneRef> {
        self.scenes.get(&image_type)
    }

    pub fn target(&self, target: Target) -> Option<f64> {
        self.aq.as_ref().and_then(|aq| aq.get(target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub by_date: BTreeMap<NaiveDate, Split>,
}

impl SplitAssignment {
    pub fn get(&self, date: &NaiveDate) -> Option<Split> {
        self.by_date.get(date).copied()
    }

    pub fn dates(&self, split: Split) -> impl Iterator<Item = &NaiveDate> + '_ {
        self.by_date
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(d, _)| d)
    }

    pub fn count(&self, split: Split) -> usize {
        self.dates(split).count()
    }
}

/// Per-channel normalization statistics of one image type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_type: ImageType,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}
