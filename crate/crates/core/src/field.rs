//! Gridded daily fields: sites, calendars and the site-major value matrix.

use alloc::format;
use alloc::vec::Vec;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: u32,
    /// Degrees east.
    pub lon: f64,
    /// Degrees north.
    pub lat: f64,
}

impl Site {
    pub fn new(id: u32, lon: f64, lat: f64) -> Self {
        Self { id, lon, lat }
    }
}

/// Proleptic Gregorian leap-year rule.
pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// A run of consecutive days starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    start: NaiveDate,
    len: usize,
}

impl Calendar {
    pub fn new(start: NaiveDate, len: usize) -> Self {
        Self { start, len }
    }

    /// Calendar covering `first..=last`.
    pub fn spanning(first: NaiveDate, last: NaiveDate) -> Result<Self> {
        let days = (last - first).num_days();
        if days < 0 {
            return Err(Error::InvalidInput(format!("calendar end {last} before start {first}")));
        }
        Ok(Self::new(first, days as usize + 1))
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Last day of the calendar.
    pub fn end(&self) -> NaiveDate {
        self.date(self.len.saturating_sub(1))
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.start + Days::new(t as u64)
    }

    pub fn year_of_day(&self, t: usize) -> i32 {
        self.date(t).year()
    }

    /// Zero-based day of the year.
    pub fn day_of_year(&self, t: usize) -> u32 {
        self.date(t).ordinal0()
    }

    /// Length of the year containing day `t` (365 or 366).
    pub fn period_of_year(&self, t: usize) -> u32 {
        if is_leap_year(self.year_of_day(t)) {
            366
        } else {
            365
        }
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start).num_days();
        (d >= 0 && (d as usize) < self.len).then_some(d as usize)
    }
}

/// Dense `n_sites x n_days` field stored site-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalField {
    sites: Vec<Site>,
    calendar: Calendar,
    values: Vec<f64>,
}

impl SpatioTemporalField {
    /// Builds a field of arbitrary real values (residuals, anomalies).
    ///
    /// Sites must carry ids `0..n` in order and valid coordinates; every
    /// value must be finite.
    pub fn new(sites: Vec<Site>, calendar: Calendar, values: Vec<f64>) -> Result<Self> {
        validate_sites(&sites)?;
        let n_days = calendar.len();
        if values.len() != sites.len() * n_days {
            return Err(Error::Shape(format!(
                "{} values for {} sites x {} days",
                values.len(),
                sites.len(),
                n_days
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { site: sites[pos / n_days].id, day: pos % n_days });
        }
        Ok(Self { sites, calendar, values })
    }

    /// Builds a raw wind-speed field: additionally rejects negative speeds.
    pub fn new_speeds(sites: Vec<Site>, calendar: Calendar, values: Vec<f64>) -> Result<Self> {
        let field = Self::new(sites, calendar, values)?;
        field.check_nonnegative()?;
        Ok(field)
    }

    pub fn from_fn(sites: Vec<Site>, calendar: Calendar, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let n_days = calendar.len();
        let mut values = Vec::with_capacity(sites.len() * n_days);
        for i in 0..sites.len() {
            for t in 0..n_days {
                values.push(f(i, t));
            }
        }
        Self::new(sites, calendar, values)
    }

    pub fn check_nonnegative(&self) -> Result<()> {
        let n_days = self.n_days();
        match self.values.iter().position(|&v| v < 0.0) {
            Some(pos) => Err(Error::NegativeSpeed {
                site: self.sites[pos / n_days].id,
                day: pos % n_days,
                value: self.values[pos],
            }),
            None => Ok(()),
        }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    /// Site-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn series(&self, site: usize) -> &[f64] {
        let n = self.n_days();
        &self.values[site * n..(site + 1) * n]
    }

    pub fn value(&self, site: usize, day: usize) -> f64 {
        self.values[site * self.n_days() + day]
    }

    /// Values of all sites on day `t`.
    pub fn day_vector(&self, t: usize) -> Vec<f64> {
        (0..self.n_sites()).map(|i| self.value(i, t)).collect()
    }

    /// Same geometry and calendar, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.sites.clone(), self.calendar, values)
    }

    /// Same geometry, new calendar and values.
    pub fn with_calendar(&self, calendar: Calendar, values: Vec<f64>) -> Result<Self> {
        Self::new(self.sites.clone(), calendar, values)
    }

    /// Builds a field from per-site series.
    pub fn from_series(sites: Vec<Site>, calendar: Calendar, series: &[Vec<f64>]) -> Result<Self> {
        if series.len() != sites.len() {
            return Err(Error::Shape(format!("{} series for {} sites", series.len(), sites.len())));
        }
        let values = series.iter().flat_map(|s| s.iter().copied()).collect();
        Self::new(sites, calendar, values)
    }

    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let n = self.n_days();
        let values = self.values.iter().enumerate().map(|(k, &v)| f(k / n, k % n, v)).collect();
        self.with_values(values)
    }

    /// Splits into days strictly before `cut` and days from `cut` on.
    pub fn split_by_date(&self, cut: NaiveDate) -> Result<(Self, Self)> {
        let k = match self.calendar.index_of(cut) {
            Some(k) if k > 0 => k,
            _ => return Err(Error::DateOutOfRange(cut)),
        };
        Ok((self.select_day_range(0, k)?, self.select_day_range(k, self.n_days())?))
    }

    /// Days `from..to` as a new field.
    pub fn select_day_range(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.n_days() {
            return Err(Error::InvalidInput(format!("day range {from}..{to} of {}", self.n_days())));
        }
        let mut values = Vec::with_capacity(self.n_sites() * (to - from));
        for i in 0..self.n_sites() {
            values.extend_from_slice(&self.series(i)[from..to]);
        }
        Self::new(self.sites.clone(), Calendar::new(self.calendar.date(from), to - from), values)
    }

    /// Appends `later` on the day axis; it must start the day after `self` ends.
    pub fn concat_days(&self, later: &Self) -> Result<Self> {
        if self.sites != later.sites {
            return Err(Error::Shape("concatenated fields have different sites".into()));
        }
        if later.calendar.start() != self.calendar.date(self.n_days()) {
            return Err(Error::InvalidInput(format!(
                "second field starts {} but first ends {}",
                later.calendar.start(),
                self.calendar.end()
            )));
        }
        let mut values = Vec::with_capacity(self.values.len() + later.values.len());
        for i in 0..self.n_sites() {
            values.extend_from_slice(self.series(i));
            values.extend_from_slice(later.series(i));
        }
        Self::new(
            self.sites.clone(),
            Calendar::new(self.calendar.start(), self.n_days() + later.n_days()),
            values,
        )
    }

    /// Restricts to the given site ids (in ascending id order) and renumbers
    /// them `0..k`.
    pub fn subsample_sites(&self, ids: &[u32]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty site selection".into()));
        }
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut sites = Vec::with_capacity(ids.len());
        let mut values = Vec::with_capacity(ids.len() * self.n_days());
        for (new_id, &id) in ids.iter().enumerate() {
            let idx = id as usize;
            if idx >= self.n_sites() {
                return Err(Error::UnknownSite(id));
            }
            let s = self.sites[idx];
            sites.push(Site::new(new_id as u32, s.lon, s.lat));
            values.extend_from_slice(self.series(idx));
        }
        Self::new(sites, self.calendar, values)
    }
}

fn validate_sites(sites: &[Site]) -> Result<()> {
    for (k, s) in sites.iter().enumerate() {
        if sites[..k].iter().any(|o| o.id == s.id) {
            return Err(Error::DuplicateSite(s.id));
        }
        if s.id as usize != k {
            return Err(Error::InvalidInput(format!(
                "site ids must be contiguous from 0 in order; found id {} at position {k}",
                s.id
            )));
        }
        if !(-180.0..360.0).contains(&s.lon) || !(-90.0..=90.0).contains(&s.lat) {
            return Err(Error::InvalidInput(format!("site {} has invalid coordinates ({}, {})", s.id, s.lon, s.lat)));
        }
    }
    Ok(())
}

/// `n` sites on a regular `nx x ny` lattice, ids in row-major order.
pub fn grid_sites(nx: usize, ny: usize, lon0: f64, lat0: f64, dlon: f64, dlat: f64) -> Vec<Site> {
    let mut sites = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            sites.push(Site::new((j * nx + i) as u32, lon0 + i as f64 * dlon, lat0 + j as f64 * dlat));
        }
    }
    sites
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn leap_years_follow_gregorian_rule() {
        assert!(is_leap_year(2000));
        assert!(!is_leap_year(1900));
        assert!(is_leap_year(1984));
        assert!(!is_leap_year(1983));
        let cal = Calendar::new(date(1983, 12, 31), 3);
        assert_eq!(cal.period_of_year(0), 365);
        assert_eq!(cal.period_of_year(1), 366);
        assert_eq!(cal.year_of_day(1), 1984);
        assert_eq!(cal.day_of_year(1), 0);
    }

    #[test]
    fn constant_field_and_negative_speed() {
        let sites = grid_sites(2, 1, 40.0, 20.0, 0.625, 0.5);
        let cal = Calendar::new(date(2000, 1, 1), 3);
        let f = SpatioTemporalField::new_speeds(sites.clone(), cal, vec![5.0; 6]).unwrap();
        assert!(f.values().iter().all(|&v| v == 5.0));
        let mut vals = vec![5.0; 6];
        vals[4] = -1.0;
        let err = SpatioTemporalField::new_speeds(sites, cal, vals).unwrap_err();
        assert!(matches!(err, Error::NegativeSpeed { site: 1, day: 1, .. }));
        assert!(err.to_string().contains("negative wind speed"));
    }

    #[test]
    fn duplicate_site_rejected() {
        let sites = vec![Site::new(0, 0.0, 0.0), Site::new(0, 1.0, 0.0)];
        let cal = Calendar::new(date(2000, 1, 1), 1);
        assert_eq!(SpatioTemporalField::new(sites, cal, vec![0.0; 2]), Err(Error::DuplicateSite(0)));
    }

    #[test]
    fn split_twenty_six_years_at_1993() {
        let cal = Calendar::spanning(date(1980, 1, 1), date(2005, 12, 31)).unwrap();
        assert_eq!(cal.len(), 9497);
        let f = SpatioTemporalField::from_fn(grid_sites(2, 1, 0.0, 0.0, 1.0, 1.0), cal, |i, t| (i * 10_000 + t) as f64)
            .unwrap();
        let (a, b) = f.split_by_date(date(1993, 1, 1)).unwrap();
        assert_eq!(a.calendar().end(), date(1992, 12, 31));
        assert_eq!(b.calendar().start(), date(1993, 1, 1));
        assert_eq!(a.calendar().year_of_day(0), 1980);
        assert_eq!(b.calendar().year_of_day(b.n_days() - 1), 2005);
        assert_eq!(a.concat_days(&b).unwrap(), f);
        // 13 calendar years each
        assert_eq!(a.calendar().year_of_day(a.n_days() - 1) - 1980 + 1, 13);
        assert_eq!(2005 - b.calendar().year_of_day(0) + 1, 13);
    }

    #[test]
    fn split_outside_range_fails() {
        let cal = Calendar::new(date(2000, 1, 1), 10);
        let f = SpatioTemporalField::new(grid_sites(1, 1, 0.0, 0.0, 1.0, 1.0), cal, vec![1.0; 10]).unwrap();
        assert!(f.split_by_date(date(2000, 1, 11)).is_err());
        assert!(f.split_by_date(date(2000, 1, 1)).is_err());
    }

    #[test]
    fn subsample_sites_keeps_rows() {
        let cal = Calendar::new(date(2000, 1, 1), 4);
        let f = SpatioTemporalField::from_fn(grid_sites(3, 2, 0.0, 0.0, 1.0, 1.0), cal, |i, t| (i * 10 + t) as f64)
            .unwrap();
        let all: Vec<u32> = (0..6).collect();
        assert_eq!(f.subsample_sites(&all).unwrap(), f);
        let one = f.subsample_sites(&[0]).unwrap();
        assert_eq!(one.n_sites(), 1);
        assert_eq!(one.series(0), f.series(0));
        let two = f.subsample_sites(&[4, 2]).unwrap();
        assert_eq!(two.series(0), f.series(2));
        assert_eq!(two.series(1), f.series(4));
        assert_eq!(two.sites()[1].id, 1);
        assert_eq!(f.subsample_sites(&[9]), Err(Error::UnknownSite(9)));
    }
}
