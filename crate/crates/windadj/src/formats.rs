//! Tabular inputs and outputs other than fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use windadj_core::clustering::ClusterAssignment;
use windadj_core::energy::{FarmSite, PowerCurve, ProfilePoint, RevenueDelta};
use windadj_core::simgen::ValidationTable;
use windadj_core::Site;

use crate::error::{CliError, CliResult};
use crate::io::{check_header, line_of, parse_cell, parse_date, write_text};

pub const CURVE_HEADER: [&str; 7] = ["turbine", "hub_height_m", "rotor_d_m", "rated_kw", "cut_in", "rated_speed", "cut_out"];
pub const FARM_HEADER: [&str; 4] = ["site_id", "turbine", "count", "tariff_per_kwh"];
pub const PROFILE_HEADER: [&str; 4] = ["site_id", "date", "height_m", "speed_mps"];
pub const CLUSTER_HEADER: [&str; 2] = ["site_id", "cluster_id"];

fn open(path: &Path, header: &[&str]) -> CliResult<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(file);
    check_header(path, &mut rdr, header)?;
    Ok(rdr)
}

fn records(path: &Path, rdr: &mut csv::Reader<File>) -> CliResult<Vec<csv::StringRecord>> {
    rdr.records().collect::<Result<_, _>>().map_err(|e| CliError::data(path.display().to_string(), e.to_string()))
}

/// Power curves; an optional eighth column (any header) holds `speed:kw`
/// pairs separated by `;`.
pub fn load_power_curves(path: &Path) -> CliResult<Vec<PowerCurve>> {
    let mut rdr = open(path, &CURVE_HEADER)?;
    let mut curves: Vec<PowerCurve> = Vec::new();
    for rec in records(path, &mut rdr)? {
        let table = match rec.get(7).filter(|s| !s.is_empty()) {
            None => Vec::new(),
            Some(raw) => parse_table(raw).ok_or_else(|| CliError::data(line_of(path, &rec), format!("bad power table {raw:?}")))?,
        };
        let curve = PowerCurve {
            turbine: rec.get(0).unwrap_or_default().to_string(),
            hub_height: parse_cell(path, &rec, 1, "hub_height_m")?,
            rotor_diameter: parse_cell(path, &rec, 2, "rotor_d_m")?,
            rated_power: parse_cell(path, &rec, 3, "rated_kw")?,
            cut_in: parse_cell(path, &rec, 4, "cut_in")?,
            rated_speed: parse_cell(path, &rec, 5, "rated_speed")?,
            cut_out: parse_cell(path, &rec, 6, "cut_out")?,
            table,
        };
        curve.validate().map_err(|e| CliError::data(line_of(path, &rec), e.to_string()))?;
        if curves.iter().any(|c| c.turbine == curve.turbine) {
            return Err(CliError::data(line_of(path, &rec), format!("duplicate turbine {}", curve.turbine)));
        }
        curves.push(curve);
    }
    Ok(curves)
}

fn parse_table(raw: &str) -> Option<Vec<(f64, f64)>> {
    raw.split(';')
        .map(|pair| {
            let (v, p) = pair.split_once(':')?;
            Some((v.trim().parse().ok()?, p.trim().parse().ok()?))
        })
        .collect()
}

pub fn load_farm(path: &Path) -> CliResult<Vec<FarmSite>> {
    let mut rdr = open(path, &FARM_HEADER)?;
    let mut farm = Vec::new();
    for rec in records(path, &mut rdr)? {
        farm.push(FarmSite {
            site_id: parse_cell(path, &rec, 0, "site_id")?,
            turbine: rec.get(1).unwrap_or_default().to_string(),
            count: parse_cell(path, &rec, 2, "count")?,
            tariff: parse_cell(path, &rec, 3, "tariff_per_kwh")?,
        });
    }
    Ok(farm)
}

/// Vertical profiles grouped by site; days are counted from the earliest
/// date in the file.
pub fn load_profiles(path: &Path) -> CliResult<Vec<(u32, Vec<ProfilePoint>)>> {
    let mut rdr = open(path, &PROFILE_HEADER)?;
    let mut rows: Vec<(u32, NaiveDate, f64, f64)> = Vec::new();
    for rec in records(path, &mut rdr)? {
        rows.push((
            parse_cell(path, &rec, 0, "site_id")?,
            parse_date(path, &rec, 1)?,
            parse_cell(path, &rec, 2, "height_m")?,
            parse_cell(path, &rec, 3, "speed_mps")?,
        ));
    }
    let first = rows.iter().map(|r| r.1).min().ok_or_else(|| CliError::data(path.display().to_string(), "no rows"))?;
    let mut by_site: BTreeMap<u32, Vec<ProfilePoint>> = BTreeMap::new();
    for (id, date, height, speed) in rows {
        let day = (date - first).num_days() as usize;
        by_site.entry(id).or_default().push(ProfilePoint { day, height, speed });
    }
    Ok(by_site.into_iter().collect())
}

/// Cluster labels by site id; every site of `sites` must appear once.
pub fn load_clusters(path: &Path, sites: &[Site]) -> CliResult<ClusterAssignment> {
    let mut rdr = open(path, &CLUSTER_HEADER)?;
    let mut labels: BTreeMap<u32, usize> = BTreeMap::new();
    for rec in records(path, &mut rdr)? {
        let id: u32 = parse_cell(path, &rec, 0, "site_id")?;
        if labels.insert(id, parse_cell(path, &rec, 1, "cluster_id")?).is_some() {
            return Err(CliError::data(line_of(path, &rec), format!("duplicate site {id}")));
        }
    }
    let ordered = sites
        .iter()
        .map(|s| labels.get(&s.id).copied().ok_or_else(|| CliError::data(path.display().to_string(), format!("site {} has no cluster", s.id))))
        .collect::<CliResult<Vec<_>>>()?;
    if labels.len() != sites.len() {
        return Err(CliError::data(path.display().to_string(), "cluster file lists sites absent from the field"));
    }
    Ok(ClusterAssignment::from_labels(&ordered))
}

pub fn save_clusters(path: &Path, sites: &[Site], clusters: &ClusterAssignment) -> CliResult<()> {
    let mut out = CLUSTER_HEADER.join(",") + "\n";
    for (s, l) in sites.iter().zip(&clusters.labels) {
        out.push_str(&format!("{},{}\n", s.id, l));
    }
    write_text(path, &out)
}

pub fn save_validation(path: &Path, table: &ValidationTable) -> CliResult<()> {
    let mut out = String::from("sim_id,method,kl,kl_ratio_vs_mv\n");
    for r in &table.rows {
        out.push_str(&format!("{},{},{},{}\n", r.sim_id, r.method.name(), r.kl, r.kl_ratio_vs_mv));
    }
    write_text(path, &out)
}

/// Per-farm revenue change per day, followed by a `total` row.
pub fn save_delta(path: &Path, delta: &RevenueDelta) -> CliResult<()> {
    let mut out = String::from("site_id,delta_mean_per_day,delta_sd_per_day\n");
    for s in &delta.sites {
        out.push_str(&format!("{},{},{}\n", s.site_id, s.mean, s.sd));
    }
    out.push_str(&format!("total,{},{}\n", delta.total_mean, delta.total_sd));
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_with_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(
            &p,
            "turbine,hub_height_m,rotor_d_m,rated_kw,cut_in,rated_speed,cut_out,table\n\
             a,100,100,2000,3,12,25,\n\
             b,80,90,1500,3,12,25,3:0;6:300;9:900;12:1500\n",
        )
        .unwrap();
        let c = load_power_curves(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].table.is_empty());
        assert_eq!(c[1].table[1], (6.0, 300.0));
    }

    #[test]
    fn clusters_round_trip_and_missing_site() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        let sites: Vec<Site> = (0..4).map(|i| Site::new(i, i as f64, 0.0)).collect();
        let c = ClusterAssignment::from_labels(&[0, 1, 1, 0]);
        save_clusters(&p, &sites, &c).unwrap();
        assert_eq!(load_clusters(&p, &sites).unwrap().labels, c.labels);
        let more: Vec<Site> = (0..5).map(|i| Site::new(i, i as f64, 0.0)).collect();
        assert!(load_clusters(&p, &more).unwrap_err().to_string().contains("site 4 has no cluster"));
    }

    #[test]
    fn profiles_grouped_by_site() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, "site_id,date,height_m,speed_mps\n1,2000-01-02,10,5\n0,2000-01-01,10,4\n1,2000-01-02,50,6\n").unwrap();
        let g = load_profiles(&p).unwrap();
        assert_eq!(g[0].0, 0);
        assert_eq!(g[1].1.len(), 2);
        assert_eq!(g[1].1[0].day, 1);
    }
}
