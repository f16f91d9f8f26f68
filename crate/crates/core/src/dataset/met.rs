//! Reanalysis preprocessing: point interpolation and daily aggregation.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveDateTime};

use super::types::{MetVector, StationId, MET_DIM};
use crate::error::{Error, Result};

/// Hours required for a daily mean.
pub const HOURS_PER_DAY: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DailyMet {
    Usable(MetVector),
    Unusable { hours: usize },
}

impl DailyMet {
    pub fn usable(self) -> Option<MetVector> {
        match self {
            DailyMet::Usable(v) => Some(v),
            DailyMet::Unusable { .. } => None,
        }
    }
}

/// Component-wise mean of one station-day's hourly values. Days with fewer
/// than 24 hours are flagged unusable.
pub fn aggregate_met(hourly: &[MetVector]) -> DailyMet {
    if hourly.len() < HOURS_PER_DAY {
        return DailyMet::Unusable {
            hours: hourly.len(),
        };
    }
    let mut sum = [0.0f64; MET_DIM];
    for h in hourly {
        for (s, v) in sum.iter_mut().zip(h.to_array()) {
            *s += v;
        }
    }
    let n = hourly.len() as f64;
    DailyMet::Usable(MetVector::from_array(sum.map(|s| s / n)))
}

/// Groups hourly rows by (station, calendar day) and aggregates each group.
/// Duplicate timestamps count once.
pub fn aggregate_hourly_rows(
    rows: &[(StationId, NaiveDateTime, MetVector)],
) -> BTreeMap<(StationId, NaiveDate), DailyMet> {
    let mut groups: BTreeMap<(StationId, NaiveDate), BTreeMap<NaiveDateTime, MetVector>> =
        BTreeMap::new();
    for (station, time, met) in rows {
        groups
            .entry((station.clone(), time.date()))
            .or_default()
            .insert(*time, *met);
    }
    groups
        .into_iter()
        .map(|(key, hours)| {
            let values: Vec<MetVector> = hours.into_values().collect();
            (key, aggregate_met(&values))
        })
        .collect()
}

/// One reanalysis grid cell: corner coordinates and the four corner values,
/// indexed `values[lon_index][lat_index]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub lon: [f64; 2],
    pub lat: [f64; 2],
    pub values: [[f64; 2]; 2],
}

pub fn bilinear_interpolate(cell: &GridCell, lon: f64, lat: f64) -> Result<f64> {
    let [x0, x1] = cell.lon;
    let [y0, y1] = cell.lat;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::InvalidInput(format!(
            "degenerate grid cell lon {:?} lat {:?}",
            cell.lon, cell.lat
        )));
    }
    if !(x0..=x1).contains(&lon) || !(y0..=y1).contains(&lat) {
        return Err(Error::InvalidInput(format!(
            "point ({lon}, {lat}) lies outside cell lon {:?} lat {:?}",
            cell.lon, cell.lat
        )));
    }
    let tx = (lon - x0) / (x1 - x0);
    let ty = (lat - y0) / (y1 - y0);
    let v = &cell.values;
    Ok((1.0 - tx) * (1.0 - ty) * v[0][0]
        + tx * (1.0 - ty) * v[1][0]
        + (1.0 - tx) * ty * v[0][1]
        + tx * ty * v[1][1])
}
