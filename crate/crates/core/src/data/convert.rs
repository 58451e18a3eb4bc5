//! Readers for the public archive formats, feeding the canonical layout.

use std::fs::File;
use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::{Array2, Array3, Axis};
use ndarray_npy::NpzReader;

use super::{parse_timestamp, TrafficDataset};
use crate::error::{Error, Result};

/// Reads a wide CSV: a timestamp column followed by one column per sensor,
/// sensor ids in the header row. This is the plain-text form of the METR-LA
/// and PEMS-BAY speed archives.
pub fn read_metr_la_csv(path: &Path) -> Result<TrafficDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::data(format!(
            "{}: expected a timestamp column plus sensor columns",
            path.display()
        )));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = node_ids.len();

    let mut timestamps = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != n + 1 {
            return Err(Error::data(format!(
                "row {}: {} fields, expected {}",
                row + 1,
                record.len(),
                n + 1
            )));
        }
        timestamps.push(parse_timestamp(&record[0])?);
        for (col, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::data(format!(
                    "row {}, column {} ({}): not a number: {field:?}",
                    row + 1,
                    col + 1,
                    node_ids[col]
                ))
            })?;
            values.push(v);
        }
    }
    let t = timestamps.len();
    if t < 2 {
        return Err(Error::data(format!(
            "{}: need at least two rows to establish the sampling interval",
            path.display()
        )));
    }
    let interval = timestamps[1] - timestamps[0];
    let interval_minutes = interval.num_minutes();
    if interval_minutes <= 0 || interval != chrono::Duration::minutes(interval_minutes) {
        return Err(Error::data(format!(
            "timestamp spacing {interval} is not a whole positive number of minutes"
        )));
    }

    let flat = Array2::from_shape_vec((t, n), values).expect("counted during parse");
    let ds = TrafficDataset {
        readings: flat.insert_axis(Axis(2)),
        timestamps,
        interval_minutes: interval_minutes as u32,
        channels: vec!["speed".to_string()],
        node_ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads a dense `T x N x C` (or `T x N`) tensor from a `.npz` archive (the
/// `data` entry, as distributed for PEMS04/PEMS08) or a bare `.npy` file.
/// These archives carry no time axis, so the start instant comes from the
/// caller.
pub fn read_pems_array(
    path: &Path,
    start: NaiveDateTime,
    interval_minutes: u32,
) -> Result<TrafficDataset> {
    let readings = match path.extension().and_then(|e| e.to_str()) {
        Some("npz") => read_npz_tensor(path)?,
        _ => read_npy_tensor(path)?,
    };
    let t = readings.shape()[0];
    let timestamps = (0..t)
        .map(|i| start + chrono::Duration::minutes(interval_minutes as i64 * i as i64))
        .collect();
    let c = readings.shape()[2];
    let channels = match c {
        1 => vec!["flow".to_string()],
        // The PEMS distributions carry these three channels in this order.
        3 => ["flow", "occupancy", "speed"]
            .map(str::to_string)
            .to_vec(),
        _ => (0..c).map(|i| format!("ch{i}")).collect(),
    };
    let n = readings.shape()[1];
    let ds = TrafficDataset {
        readings,
        timestamps,
        interval_minutes,
        channels,
        node_ids: (0..n).map(|i| i.to_string()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

fn read_npz_tensor(path: &Path) -> Result<Array3<f64>> {
    let mut npz = NpzReader::new(File::open(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let names = npz
        .names()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let name = if names.iter().any(|n| n == "data") {
        "data".to_string()
    } else {
        names
            .first()
            .cloned()
            .ok_or_else(|| Error::data(format!("{}: empty npz archive", path.display())))?
    };
    // Tensor may be 2-D or 3-D, f64 or f32.
    let attempts: [std::result::Result<Array3<f64>, ndarray_npy::ReadNpzError>; 4] = [
        npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::Ix3>(&name)
            .map(|a| a),
        npz.by_name::<ndarray::OwnedRepr<f32>, ndarray::Ix3>(&name)
            .map(|a| a.mapv(f64::from)),
        npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::Ix2>(&name)
            .map(|a| a.insert_axis(Axis(2))),
        npz.by_name::<ndarray::OwnedRepr<f32>, ndarray::Ix2>(&name)
            .map(|a| a.mapv(f64::from).insert_axis(Axis(2))),
    ];
    for attempt in attempts {
        if let Ok(arr) = attempt {
            return Ok(arr);
        }
    }
    Err(Error::data(format!(
        "{}: entry {name:?} is not a 2-D or 3-D float tensor",
        path.display()
    )))
}

fn read_npy_tensor(path: &Path) -> Result<Array3<f64>> {
    if let Ok(a) = ndarray_npy::read_npy::<_, Array3<f64>>(path) {
        return Ok(a);
    }
    if let Ok(a) = ndarray_npy::read_npy::<_, Array3<f32>>(path) {
        return Ok(a.mapv(f64::from));
    }
    if let Ok(a) = ndarray_npy::read_npy::<_, Array2<f64>>(path) {
        return Ok(a.insert_axis(Axis(2)));
    }
    if let Ok(a) = ndarray_npy::read_npy::<_, Array2<f32>>(path) {
        return Ok(a.mapv(f64::from).insert_axis(Axis(2)));
    }
    Err(Error::data(format!(
        "{}: not a 2-D or 3-D float npy tensor",
        path.display()
    )))
}

/// Keeps a single channel of a multi-channel dataset.
pub fn select_channel(ds: &TrafficDataset, channel: usize) -> Result<TrafficDataset> {
    if channel >= ds.num_channels() {
        return Err(Error::config(format!(
            "channel {channel} out of range; dataset has {} ({:?})",
            ds.num_channels(),
            ds.channels
        )));
    }
    let readings = ds
        .readings
        .index_axis(Axis(2), channel)
        .to_owned()
        .insert_axis(Axis(2));
    Ok(TrafficDataset {
        readings,
        timestamps: ds.timestamps.clone(),
        interval_minutes: ds.interval_minutes,
        channels: vec![ds.channels[channel].clone()],
        node_ids: ds.node_ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray_npy::NpzWriter;
    use std::io::Write;

    #[test]
    fn wide_csv_loads_as_t_by_n_by_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("speeds.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, ",773869,767541").unwrap();
        writeln!(f, "2012-03-01 00:00:00,64.375,67.625").unwrap();
        writeln!(f, "2012-03-01 00:05:00,62.667,68.556").unwrap();
        writeln!(f, "2012-03-01 00:10:00,64.0,63.375").unwrap();
        drop(f);

        let ds = read_metr_la_csv(&path).unwrap();
        assert_eq!(ds.readings.dim(), (3, 2, 1));
        assert_eq!(ds.interval_minutes, 5);
        assert_eq!(ds.node_ids, vec!["773869", "767541"]);
        assert_eq!(ds.channels, vec!["speed"]);
        assert_eq!(ds.readings[[0, 1, 0]], 67.625);
        assert_eq!(ds.readings[[2, 0, 0]], 64.0);
    }

    #[test]
    fn csv_reports_bad_cells_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            ",a,b\n2012-03-01 00:00:00,1.0,oops\n2012-03-01 00:05:00,1.0,2.0\n",
        )
        .unwrap();
        let err = read_metr_la_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("oops"), "{err}");
    }

    #[test]
    fn npz_flow_tensor_loads_with_synthesized_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flows.npz");
        let data = Array3::from_shape_fn((6, 3, 3), |(t, n, c)| (t + n + c) as f64);
        let mut npz = NpzWriter::new(File::create(&path).unwrap());
        npz.add_array("data", &data).unwrap();
        npz.finish().unwrap();

        let start = parse_timestamp("2018-07-01T00:00:00").unwrap();
        let ds = read_pems_array(&path, start, 5).unwrap();
        assert_eq!(ds.readings.dim(), (6, 3, 3));
        assert_eq!(ds.channels, vec!["flow", "occupancy", "speed"]);
        assert_eq!(ds.timestamps[2], parse_timestamp("2018-07-01T00:10:00").unwrap());
        assert_eq!(ds.readings[[5, 2, 1]], 8.0);
    }

    #[test]
    fn bare_npy_and_two_dim_tensors_work() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flows.npy");
        let data = Array2::from_shape_fn((5, 2), |(t, n)| (t * 10 + n) as f32);
        ndarray_npy::write_npy(&path, &data).unwrap();
        let start = parse_timestamp("2018-01-01T00:00:00").unwrap();
        let ds = read_pems_array(&path, start, 5).unwrap();
        assert_eq!(ds.readings.dim(), (5, 2, 1));
        assert_eq!(ds.readings[[3, 1, 0]], 31.0);
        assert_eq!(ds.channels, vec!["flow"]);
    }

    #[test]
    fn select_channel_keeps_one_lane() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flows.npy");
        let data = Array3::from_shape_fn((5, 2, 3), |(t, n, c)| (t * 100 + n * 10 + c) as f64);
        ndarray_npy::write_npy(&path, &data).unwrap();
        let start = parse_timestamp("2018-01-01T00:00:00").unwrap();
        let ds = read_pems_array(&path, start, 5).unwrap();
        let flow = select_channel(&ds, 0).unwrap();
        assert_eq!(flow.readings.dim(), (5, 2, 1));
        assert_eq!(flow.readings[[4, 1, 0]], 410.0);
        assert_eq!(flow.channels, vec!["flow"]);
        assert!(select_channel(&ds, 3).is_err());
    }
}
