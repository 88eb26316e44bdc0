//! Field and geometry files.
//!
//! * CSV field: header `site_id,lon,lat,date,speed_mps`, one row per
//!   `(site, day)` in any order; the days of every site must cover the same
//!   contiguous date range.
//! * Packed binary (`STG1`): the magic bytes, little-endian `u32 n_sites`,
//!   `u32 n_days`, the ISO start date as a `u32` byte length followed by
//!   ASCII, the site table (`u32 id, f64 lon, f64 lat` per site), then the
//!   `n_sites x n_days` values row by row as `f64`.
//! * Sites CSV: `site_id,lon,lat`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use windadj_core::{Calendar, Site, SpatioTemporalField};

use crate::error::{CliError, CliResult, Context};

pub const FIELD_HEADER: [&str; 5] = ["site_id", "lon", "lat", "date", "speed_mps"];
pub const MAGIC: &[u8; 4] = b"STG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFormat {
    Csv,
    PackedBinary,
}

impl FieldFormat {
    /// `.csv` is CSV; anything else is packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FieldFormat::Csv,
            _ => FieldFormat::PackedBinary,
        }
    }
}

/// Whether loaded values must be valid wind speeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Values {
    Speeds,
    Any,
}

pub fn load_field(path: &Path, format: FieldFormat, values: Values) -> CliResult<SpatioTemporalField> {
    let field = match format {
        FieldFormat::Csv => read_csv_field(path)?,
        FieldFormat::PackedBinary => read_binary_field(path)?,
    };
    if values == Values::Speeds {
        field.check_nonnegative().context(|| path.display().to_string())?;
    }
    Ok(field)
}

pub fn load_field_auto(path: &Path, values: Values) -> CliResult<SpatioTemporalField> {
    load_field(path, FieldFormat::from_path(path), values)
}

pub fn save_field(path: &Path, format: FieldFormat, field: &SpatioTemporalField) -> CliResult<()> {
    match format {
        FieldFormat::Csv => write_csv_field(path, field),
        FieldFormat::PackedBinary => write_binary_field(path, field),
    }
}

pub fn save_field_auto(path: &Path, field: &SpatioTemporalField) -> CliResult<()> {
    save_field(path, FieldFormat::from_path(path), field)
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> CliResult<()> {
    let header = rdr.headers().map_err(|e| CliError::data(path.display().to_string(), e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(CliError::data(
            format!("{}:1", path.display()),
            format!("malformed header {:?}, expected {:?}", got.join(","), expected.join(",")),
        ));
    }
    Ok(())
}

pub(crate) fn line_of(path: &Path, rec: &csv::StringRecord) -> String {
    match rec.position() {
        Some(p) => format!("{}:{}", path.display(), p.line()),
        None => path.display().to_string(),
    }
}

pub(crate) fn parse_cell<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> CliResult<T> {
    let raw = rec.get(col).ok_or_else(|| CliError::data(line_of(path, rec), format!("missing column {name}")))?;
    raw.parse().map_err(|_| CliError::data(line_of(path, rec), format!("cannot parse {name} from {raw:?}")))
}

pub(crate) fn parse_date(path: &Path, rec: &csv::StringRecord, col: usize) -> CliResult<NaiveDate> {
    let raw = rec.get(col).unwrap_or("");
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|_| CliError::data(line_of(path, rec), format!("cannot parse date from {raw:?}")))
}

struct SiteRows {
    lon: f64,
    lat: f64,
    days: BTreeMap<NaiveDate, f64>,
}

fn read_csv_field(path: &Path) -> CliResult<SpatioTemporalField> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &FIELD_HEADER)?;
    let mut sites: BTreeMap<u32, SiteRows> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(path.display().to_string(), e.to_string()))?;
        if rec.len() != FIELD_HEADER.len() {
            return Err(CliError::data(line_of(path, &rec), format!("expected 5 columns, found {}", rec.len())));
        }
        let id: u32 = parse_cell(path, &rec, 0, "site_id")?;
        let lon: f64 = parse_cell(path, &rec, 1, "lon")?;
        let lat: f64 = parse_cell(path, &rec, 2, "lat")?;
        let date = parse_date(path, &rec, 3)?;
        let v: f64 = parse_cell(path, &rec, 4, "speed_mps")?;
        if v < 0.0 {
            return Err(CliError::data(line_of(path, &rec), format!("negative wind speed {v}")));
        }
        let entry = sites.entry(id).or_insert_with(|| SiteRows { lon, lat, days: BTreeMap::new() });
        if entry.lon != lon || entry.lat != lat {
            return Err(CliError::data(line_of(path, &rec), format!("site {id} has inconsistent coordinates")));
        }
        if entry.days.insert(date, v).is_some() {
            return Err(CliError::data(line_of(path, &rec), format!("duplicate row for site {id} on {date}")));
        }
    }
    let first = sites.values().next().ok_or_else(|| CliError::data(path.display().to_string(), "no rows"))?;
    let start = *first.days.keys().next().expect("site has a row");
    let end = *first.days.keys().next_back().expect("site has a row");
    let calendar = Calendar::spanning(start, end).context(|| path.display().to_string())?;
    let mut site_list = Vec::with_capacity(sites.len());
    let mut values = Vec::with_capacity(sites.len() * calendar.len());
    for (&id, rows) in &sites {
        let complete = rows.days.len() == calendar.len()
            && rows.days.keys().next() == Some(&start)
            && rows.days.keys().next_back() == Some(&end);
        if !complete {
            return Err(CliError::data(
                path.display().to_string(),
                format!("site {id} does not cover {start}..={end} (days must form a complete rectangle)"),
            ));
        }
        site_list.push(Site::new(id, rows.lon, rows.lat));
        values.extend(rows.days.values());
    }
    SpatioTemporalField::new(site_list, calendar, values).context(|| path.display().to_string())
}

fn write_csv_field(path: &Path, field: &SpatioTemporalField) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{}", FIELD_HEADER.join(",")).map_err(io)?;
    let cal = field.calendar();
    for (i, s) in field.sites().iter().enumerate() {
        for (t, v) in field.series(i).iter().enumerate() {
            writeln!(w, "{},{},{},{},{}", s.id, s.lon, s.lat, cal.date(t).format("%Y-%m-%d"), v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn write_binary_field(path: &Path, field: &SpatioTemporalField) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    let date = field.calendar().start().format("%Y-%m-%d").to_string();
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(field.n_sites() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(field.n_days() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(date.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(date.as_bytes()).map_err(io)?;
    for s in field.sites() {
        w.write_all(&s.id.to_le_bytes()).map_err(io)?;
        w.write_all(&s.lon.to_le_bytes()).map_err(io)?;
        w.write_all(&s.lat.to_le_bytes()).map_err(io)?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> CliResult<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(CliError::data(
                format!("{} (byte {})", self.path.display(), self.at),
                "unexpected end of file",
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_binary_field(path: &Path) -> CliResult<SpatioTemporalField> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::io(path, e))?;
    let mut c = Cursor { path, bytes: &bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(CliError::data(path.display().to_string(), "malformed header: missing STG1 magic"));
    }
    let n = c.u32()? as usize;
    let t = c.u32()? as usize;
    let len = c.u32()? as usize;
    let raw = c.take(len)?;
    let text = std::str::from_utf8(raw).map_err(|_| CliError::data(path.display().to_string(), "start date is not ASCII"))?;
    let start = NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map_err(|_| CliError::data(path.display().to_string(), format!("cannot parse start date {text:?}")))?;
    let expected = c.at + n * 20 + n * t * 8;
    if bytes.len() != expected {
        return Err(CliError::data(
            path.display().to_string(),
            format!("file has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let mut sites = Vec::with_capacity(n);
    for _ in 0..n {
        let id = c.u32()?;
        let lon = c.f64()?;
        let lat = c.f64()?;
        sites.push(Site::new(id, lon, lat));
    }
    let mut values = Vec::with_capacity(n * t);
    for _ in 0..n * t {
        values.push(c.f64()?);
    }
    SpatioTemporalField::new(sites, Calendar::new(start, t), values).context(|| path.display().to_string())
}

pub fn load_sites(path: &Path) -> CliResult<Vec<Site>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["site_id", "lon", "lat"])?;
    let mut sites = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(path.display().to_string(), e.to_string()))?;
        sites.push(Site::new(
            parse_cell(path, &rec, 0, "site_id")?,
            parse_cell(path, &rec, 1, "lon")?,
            parse_cell(path, &rec, 2, "lat")?,
        ));
    }
    sites.sort_by_key(|s| s.id);
    Ok(sites)
}

pub fn save_sites(path: &Path, sites: &[Site]) -> CliResult<()> {
    let mut out = String::from("site_id,lon,lat\n");
    for s in sites {
        out.push_str(&format!("{},{},{}\n", s.id, s.lon, s.lat));
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::data(path.display().to_string(), e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> SpatioTemporalField {
        let sites = vec![Site::new(0, 39.5, 21.25), Site::new(1, 40.0, 21.75)];
        let cal = Calendar::new(NaiveDate::from_ymd_opt(2000, 2, 27).unwrap(), 4);
        SpatioTemporalField::new_speeds(sites, cal, vec![0.1, 1.0 / 3.0, 5.0, 7.25, 2.0, 0.0, 1e-7, 12.5]).unwrap()
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let f = fixture();
        for name in ["a.csv", "a.stg"] {
            let p = dir.path().join(name);
            save_field_auto(&p, &f).unwrap();
            assert_eq!(load_field_auto(&p, Values::Speeds).unwrap(), f);
        }
    }

    #[test]
    fn csv_rows_in_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(
            &p,
            "site_id,lon,lat,date,speed_mps\n1,1,1,2001-01-02,5.0\n0,0,0,2001-01-01,5.0\n0,0,0,2001-01-02,5.0\n1,1,1,2001-01-01,5.0\n",
        )
        .unwrap();
        let f = load_field_auto(&p, Values::Speeds).unwrap();
        assert_eq!(f.n_sites(), 2);
        assert_eq!(f.values(), &[5.0; 4]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "site_id,lon,lat,date,speed_mps\n0,0,0,2001-01-01,5.0\n0,0,0,2001-01-02,-1.0\n").unwrap();
        let e = load_field_auto(&p, Values::Speeds).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let msg = e.to_string();
        assert!(msg.contains("negative wind speed") && msg.contains(":3"), "{msg}");
        std::fs::write(&p, "id,lon,lat,date,speed\n").unwrap();
        assert!(load_field_auto(&p, Values::Speeds).unwrap_err().to_string().contains("malformed header"));
        std::fs::write(&p, "site_id,lon,lat,date,speed_mps\n0,0,0,2001-01-01,5.0\n1,1,1,2001-01-02,5.0\n").unwrap();
        assert!(load_field_auto(&p, Values::Speeds).unwrap_err().to_string().contains("complete rectangle"));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.stg");
        save_field_auto(&p, &fixture()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(load_field_auto(&p, Values::Speeds).unwrap_err().exit_code(), 3);
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(load_field_auto(&p, Values::Speeds).unwrap_err().to_string().contains("magic"));
    }
}
