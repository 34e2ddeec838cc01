//! File formats: raw GPS CSV input and the discretized dataset text format.
//!
//! Dataset files carry a key-value header block (grid fields, `n_time`,
//! `count`), a blank line, then one line per trajectory of space-separated
//! `cell:slot` pairs. Floats are written in shortest round-trip form, so
//! `load(save(d)) == d` bit-exactly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::geo::GridSpec;
use crate::preprocess::{Dataset, RawPoint, RawTrajectory, Trajectory, Visit};
use crate::{Error, Result};

/// Read raw traces from a CSV with header `traj_id,lat,lon,unix_timestamp`.
/// Rows are grouped by `traj_id` in file order.
pub fn load_raw_csv(path: &Path) -> Result<Vec<RawTrajectory>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let want = ["traj_id", "lat", "lon", "unix_timestamp"];
    let mut idx = [0usize; 4];
    for (k, name) in want.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Parse(format!("missing CSV column {name}")))?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawPoint>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(idx[0])
            .ok_or_else(|| Error::Parse("short CSV row".into()))?
            .to_string();
        let lat: f64 = parse_field(record.get(idx[1]), "lat")?;
        let lon: f64 = parse_field(record.get(idx[2]), "lon")?;
        let time: i64 = parse_field(record.get(idx[3]), "unix_timestamp")?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups
            .entry(id)
            .or_default()
            .push(RawPoint { lat, lon, time });
    }
    order
        .into_iter()
        .map(|id| {
            let points = groups.remove(&id).unwrap();
            RawTrajectory::new(id, points)
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str) -> Result<T> {
    field
        .ok_or_else(|| Error::Parse(format!("short CSV row (missing {name})")))?
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {name} value")))
}

/// Serialize the grid header block shared by all dataset files.
pub fn grid_header(grid: &GridSpec) -> String {
    format!(
        "min_lat {}\nmin_lon {}\nmax_lat {}\nmax_lon {}\nw {}\n",
        grid.min_lat,
        grid.min_lon,
        grid.max_lat,
        grid.max_lon,
        grid.width()
    )
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "{}", grid_header(&ds.grid))?;
    writeln!(file, "n_time {}", ds.n_time)?;
    writeln!(file, "count {}", ds.len())?;
    writeln!(file)?;
    for t in &ds.trajectories {
        let line: Vec<String> = t
            .visits()
            .iter()
            .map(|v| format!("{}:{}", v.cell, v.slot))
            .collect();
        writeln!(file, "{}", line.join(" "))?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let mut header: HashMap<String, String> = HashMap::new();
    for line in lines.by_ref() {
        let line = line?;
        if line.trim().is_empty() {
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::Parse(format!("bad header line: {line}")))?;
        header.insert(key.to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::Parse(format!("missing header key {key}")))
    };
    let min_lat: f64 = parse_header(get("min_lat")?)?;
    let min_lon: f64 = parse_header(get("min_lon")?)?;
    let max_lat: f64 = parse_header(get("max_lat")?)?;
    let max_lon: f64 = parse_header(get("max_lon")?)?;
    let w: usize = parse_header(get("w")?)?;
    let n_time: usize = parse_header(get("n_time")?)?;
    let count: usize = parse_header(get("count")?)?;
    let grid = GridSpec::with_width(min_lat, min_lon, max_lat, max_lon, w)?;

    let mut trajectories = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let visits = line
            .split_whitespace()
            .map(|pair| {
                let (cell, slot) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("bad visit token {pair}")))?;
                Ok(Visit {
                    cell: parse_header(cell)?,
                    slot: parse_header(slot)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory(visits));
    }
    if trajectories.len() != count {
        return Err(Error::Parse(format!(
            "header count {count} != {} trajectories in file",
            trajectories.len()
        )));
    }
    let ds = Dataset {
        grid,
        n_time,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_header<T: std::str::FromStr>(value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad header value {value}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::gen_straight_dataset;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join("dpmob-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("straight.traj");
        let mut ds = gen_straight_dataset(8, 50, 11).unwrap();
        // Awkward grid floats to exercise shortest round-trip printing.
        ds.grid = GridSpec::with_width(39.687, 116.105003, 40.12345678901, 116.7, 8).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        // Saving the loaded copy gives byte-identical files.
        let path2 = dir.join("straight2.traj");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn raw_csv_parses_and_groups() {
        let dir = std::env::temp_dir().join("dpmob-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("raw.csv");
        std::fs::write(
            &path,
            "traj_id,lat,lon,unix_timestamp\n\
             a,39.0,116.0,100\n\
             a,39.1,116.1,200\n\
             b,40.0,117.0,50\n",
        )
        .unwrap();
        let raws = load_raw_csv(&path).unwrap();
        assert_eq!(raws.len(), 2);
        assert_eq!(raws[0].id, "a");
        assert_eq!(raws[0].points.len(), 2);
        assert_eq!(raws[1].points[0].time, 50);
    }

    #[test]
    fn raw_csv_rejects_nonmonotone_time() {
        let dir = std::env::temp_dir().join("dpmob-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(
            &path,
            "traj_id,lat,lon,unix_timestamp\na,39.0,116.0,100\na,39.1,116.1,100\n",
        )
        .unwrap();
        assert!(load_raw_csv(&path).is_err());
    }
}
