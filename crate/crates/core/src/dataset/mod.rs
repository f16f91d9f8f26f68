//! Ingestion, quality filtering, day-grouped splits and image statistics.

pub mod filter;
pub mod io;
pub mod met;
pub mod norm;
pub mod splits;
pub mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use filter::{apply_cloud_filter, FilterConfig, Verdict};
pub use met::{aggregate_met, bilinear_interpolate, DailyMet, GridCell};
pub use norm::{compute_norm_stats, denormalize, normalize, NormAccumulator};
pub use splits::{assign_splits, SplitRatios};
pub use types::*;

use crate::error::{Error, Result};
use io::{AqRow, ManifestRow, MetRow};

/// Drops (sets absent) every measure strictly above its outlier threshold.
/// Surviving values are returned unchanged.
pub fn apply_outlier_filter(aq: &AqObservation) -> AqObservation {
    let mut out = aq.clone();
    for target in Target::ALL {
        let slot = out.slot_mut(target);
        if matches!(*slot, Some(v) if v > target.outlier_threshold()) {
            *slot = None;
        }
    }
    out
}

/// Locations of the three input tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub scenes: PathBuf,
    pub met: PathBuf,
    pub aq: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            scenes: dir.join("scenes.csv"),
            met: dir.join("met.csv"),
            aq: dir.join("aq.csv"),
        }
    }
}

/// Row counts from corpus assembly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub manifest_rows: usize,
    pub duplicate_overpasses: usize,
    pub cloudy: usize,
    pub scenes_without_met: usize,
    pub aq_without_met: usize,
    pub outliers: BTreeMap<Target, usize>,
    pub negative_values: usize,
}

/// Filter outcome for a manifest row, for audit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub station_id: String,
    pub date: NaiveDate,
    pub image_type: ImageType,
    pub path: String,
    pub verdict: String,
}

/// Filtered, deduplicated, joined station-day records in canonical
/// (date, station) order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: BTreeMap<(NaiveDate, StationId), StationDayRecord>,
    pub report: IngestReport,
    pub audit: Vec<FilterAudit>,
}

fn dedup_key(row: &ManifestRow) -> (StationId, NaiveDate, ImageType) {
    (StationId::new(row.station_id.clone()), row.date, row.image_type)
}

/// Keeps one overpass per station, day and image type: lowest cloud cover,
/// ties broken by the latest acquisition (later manifest rows win when no
/// timestamps are given).
fn dedup_overpasses(rows: &[ManifestRow]) -> (Vec<&ManifestRow>, usize) {
    let mut best: BTreeMap<(StationId, NaiveDate, ImageType), (usize, &ManifestRow)> =
        BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let key = dedup_key(row);
        let replace = match best.get(&key) {
            None => true,
            Some((j, cur)) => {
                let by_cloud = row.cloud_cover.total_cmp(&cur.cloud_cover);
                match by_cloud {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => (row.acquired, i) > (cur.acquired, *j),
                }
            }
        };
        if replace {
            best.insert(key, (i, row));
        }
    }
    let kept: Vec<&ManifestRow> = best.into_values().map(|(_, r)| r).collect();
    let dropped = rows.len() - kept.len();
    (kept, dropped)
}

impl Corpus {
    pub fn load(paths: &DataPaths, filter: &FilterConfig) -> Result<Self> {
        let manifest: Vec<ManifestRow> = io::read_csv(&paths.scenes)?;
        let met: Vec<MetRow> = io::read_csv(&paths.met)?;
        let aq: Vec<AqRow> = io::read_csv(&paths.aq)?;
        let dir = paths
            .scenes
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::from_rows(&manifest, &dir, &met, &aq, filter)
    }

    pub fn from_rows(
        manifest: &[ManifestRow],
        manifest_dir: &Path,
        met: &[MetRow],
        aq: &[AqRow],
        filter: &FilterConfig,
    ) -> Result<Self> {
        let mut report = IngestReport {
            manifest_rows: manifest.len(),
            ..Default::default()
        };
        let mut records: BTreeMap<(NaiveDate, StationId), StationDayRecord> = BTreeMap::new();
        for row in met {
            let station = StationId::new(row.station_id.clone());
            let m = row.met();
            if !m.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite meteorology for {} {}",
                    row.station_id, row.date
                )));
            }
            let key = (row.date, station.clone());
            if records.contains_key(&key) {
                return Err(Error::InvalidInput(format!(
                    "duplicate meteorology row for {} {}",
                    row.station_id, row.date
                )));
            }
            records.insert(
                key,
                StationDayRecord {
                    station_id: station,
                    date: row.date,
                    met: m,
                    scenes: BTreeMap::new(),
                    aq: None,
                },
            );
        }

        let mut seen_aq = BTreeSet::new();
        for row in aq {
            let obs = row.observation();
            if !seen_aq.insert((obs.date, obs.station_id.clone())) {
                return Err(Error::InvalidInput(format!(
                    "duplicate air-quality row for {} {}",
                    row.station_id, row.date
                )));
            }
            let mut obs = obs;
            for t in Target::ALL {
                let slot = obs.slot_mut(t);
                if matches!(*slot, Some(v) if !(v >= 0.0)) {
                    *slot = None;
                    report.negative_values += 1;
                }
            }
            let filtered = apply_outlier_filter(&obs);
            for t in Target::ALL {
                if obs.get(t).is_some() && filtered.get(t).is_none() {
                    *report.outliers.entry(t).or_default() += 1;
                }
            }
            match records.get_mut(&(obs.date, obs.station_id.clone())) {
                Some(rec) => rec.aq = Some(filtered),
                None => report.aq_without_met += 1,
            }
        }

        let (kept, dropped) = dedup_overpasses(manifest);
        report.duplicate_overpasses = dropped;
        let mut audit = Vec::with_capacity(kept.len());
        for row in kept {
            let meta = row.meta();
            let verdict = filter.classify(&meta);
            audit.push(FilterAudit {
                station_id: row.station_id.clone(),
                date: row.date,
                image_type: row.image_type,
                path: row.path.clone(),
                verdict: verdict.describe(),
            });
            if !verdict.is_accepted() {
                report.cloudy += 1;
                continue;
            }
            match records.get_mut(&(row.date, meta.station_id.clone())) {
                Some(rec) => {
                    rec.scenes.insert(
                        row.image_type,
                        SceneRef {
                            path: row.resolve(manifest_dir),
                            image_type: row.image_type,
                            meta,
                        },
                    );
                }
                None => report.scenes_without_met += 1,
            }
        }

        Ok(Corpus {
            records,
            report,
            audit,
        })
    }

    /// Records carrying a clear scene of `image_type`.
    pub fn with_scene(&self, image_type: ImageType) -> impl Iterator<Item = &StationDayRecord> {
        self.records
            .values()
            .filter(move |r| r.scenes.contains_key(&image_type))
    }

    /// Days with at least one usable (clear-scene) record.
    pub fn usable_dates(&self, image_type: ImageType) -> BTreeSet<NaiveDate> {
        self.with_scene(image_type).map(|r| r.date).collect()
    }
}
