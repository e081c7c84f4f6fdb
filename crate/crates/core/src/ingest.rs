//! Readers for gridded containers: NetCDF classic files and raw little-endian
//! float32 arrays described by a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use ndarray::{Array2, Array3, Axis};
use netcdf3::{DataSet, DataType, DataVector, FileReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridField;

/// Sidecar describing a raw `[T, C, H, W]` (or `[C, H, W]`) float32 LE array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: Vec<usize>,
    pub variables: Vec<String>,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub timestamp: DateTime<Utc>,
}

/// `<path>.json`, next to the raw array.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_netcdf(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 3];
    let mut f = fs::File::open(path)?;
    Ok(f.read(&mut magic)? == 3 && &magic == b"CDF")
}

/// Reads `variables` at `time_index` from a container, dispatching on its magic bytes.
pub fn ingest_container(path: &Path, variables: &[&str], time_index: usize) -> Result<GridField> {
    if variables.is_empty() {
        return Err(Error::Config("no variables requested".into()));
    }
    if is_netcdf(path)? {
        ingest_netcdf(path, variables, time_index)
    } else {
        ingest_raw(path, variables, time_index)
    }
}

pub fn ingest_raw(path: &Path, variables: &[&str], time_index: usize) -> Result<GridField> {
    let side: RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let (t, c, h, w) = match side.dims[..] {
        [c, h, w] => (1, c, h, w),
        [t, c, h, w] => (t, c, h, w),
        _ => return Err(Error::Format(format!("sidecar dims {:?} must have 3 or 4 entries", side.dims))),
    };
    if side.variables.len() != c {
        return Err(Error::Format(format!("{} variable names for {c} channels", side.variables.len())));
    }
    if time_index >= t {
        return Err(Error::Shape(format!("time index {time_index} out of range ({t} steps)")));
    }
    let bytes = fs::read(path)?;
    let plane = h * w;
    if bytes.len() != t * c * plane * 4 {
        return Err(Error::Format(format!(
            "raw file holds {} bytes, sidecar implies {}",
            bytes.len(),
            t * c * plane * 4
        )));
    }
    let mut values = Array3::<f32>::zeros((variables.len(), h, w));
    for (k, name) in variables.iter().enumerate() {
        let ci = side
            .variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        let start = (time_index * c + ci) * plane * 4;
        let chunk = &bytes[start..start + plane * 4];
        for (dst, src) in values.index_axis_mut(Axis(0), k).iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }
    GridField::new(
        values,
        variables.iter().map(|s| s.to_string()).collect(),
        side.lat_range,
        side.lon_range,
        side.timestamp,
    )
}

/// Writes a field as a single-step raw array plus sidecar.
pub fn write_raw(path: &Path, field: &GridField) -> Result<()> {
    let mut bytes = Vec::with_capacity(field.values.len() * 4);
    for v in field.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let (c, h, w) = field.values.dim();
    let side = RawSidecar {
        dims: vec![1, c, h, w],
        variables: field.variables.clone(),
        lat_range: field.lat_range,
        lon_range: field.lon_range,
        timestamp: field.timestamp,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

fn nc_err(e: impl std::fmt::Debug) -> Error {
    Error::NetCdf(format!("{e:?}"))
}

fn to_f64(data: &DataVector) -> Option<Vec<f64>> {
    match data.data_type() {
        DataType::F32 => data.get_f32().map(|v| v.iter().map(|&x| x as f64).collect()),
        DataType::F64 => data.get_f64().map(|v| v.to_vec()),
        DataType::I32 => data.get_i32().map(|v| v.iter().map(|&x| x as f64).collect()),
        DataType::I16 => data.get_i16().map(|v| v.iter().map(|&x| x as f64).collect()),
        _ => None,
    }
}

fn fill_value(ds: &DataSet, var: &str) -> Option<f64> {
    ds.get_var_attr_f32(var, "_FillValue")
        .map(|v| v[0] as f64)
        .or_else(|| ds.get_var_attr_f64(var, "_FillValue").map(|v| v[0]))
}

fn coord_range(reader: &mut FileReader, names: &[&str]) -> Result<Option<(f64, f64)>> {
    let Some(name) = names.iter().find(|n| reader.data_set().has_var(n)) else {
        return Ok(None);
    };
    let data = reader.read_var(name).map_err(nc_err)?;
    let vals = to_f64(&data).ok_or_else(|| Error::NetCdf(format!("coordinate `{name}` is not numeric")))?;
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo < hi).then_some((lo, hi)))
}

/// Parses CF-style `"<unit> since <date>"` strings.
fn parse_time_units(units: &str) -> Option<(Duration, DateTime<Utc>)> {
    let (unit, origin) = units.split_once(" since ")?;
    let step = match unit.trim() {
        "seconds" | "second" | "s" => Duration::seconds(1),
        "minutes" | "minute" => Duration::minutes(1),
        "hours" | "hour" | "h" => Duration::hours(1),
        "days" | "day" | "d" => Duration::days(1),
        _ => return None,
    };
    let origin = origin.trim().trim_end_matches('Z').trim_end_matches(" UTC");
    let naive = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(origin, f).ok())
        .or_else(|| NaiveDate::parse_from_str(origin, "%Y-%m-%d").ok()?.and_hms_opt(0, 0, 0))?;
    Some((step, naive.and_utc()))
}

fn timestamp(reader: &mut FileReader, time_index: usize) -> Result<DateTime<Utc>> {
    let ds = reader.data_set();
    if !ds.has_var("time") {
        return Ok(DateTime::<Utc>::UNIX_EPOCH);
    }
    let Some((step, origin)) = ds.get_var_attr_as_string("time", "units").as_deref().and_then(parse_time_units)
    else {
        return Ok(DateTime::<Utc>::UNIX_EPOCH);
    };
    let data = reader.read_var("time").map_err(nc_err)?;
    let vals = to_f64(&data).ok_or_else(|| Error::NetCdf("time is not numeric".into()))?;
    let t = *vals
        .get(time_index)
        .ok_or_else(|| Error::Shape(format!("time index {time_index} out of range ({} steps)", vals.len())))?;
    let offset = step * t.trunc() as i32 + Duration::milliseconds((step.num_milliseconds() as f64 * t.fract()) as i64);
    Ok(origin + offset)
}

/// Reads 2-D `(lat, lon)` or 3-D `(time, lat, lon)` variables. Cells equal to the
/// variable's `_FillValue` count as missing and fail validation like NaNs.
pub fn ingest_netcdf(path: &Path, variables: &[&str], time_index: usize) -> Result<GridField> {
    let mut reader = FileReader::open(path).map_err(nc_err)?;
    let mut planes: Vec<Array2<f32>> = Vec::with_capacity(variables.len());
    for name in variables {
        let ds = reader.data_set();
        let var = ds.get_var(name).ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        let dims: Vec<usize> = var.get_dims().iter().map(|d| d.size()).collect();
        let is_record = ds.is_record_var(name).unwrap_or(false);
        let fill = fill_value(ds, name);
        let (h, w) = match dims[..] {
            [h, w] => (h, w),
            [_, h, w] => (h, w),
            _ => return Err(Error::Shape(format!("`{name}` has {} dims, expected 2 or 3", dims.len()))),
        };
        let vals = if dims.len() == 3 && is_record {
            let rec = reader.read_record(name, time_index).map_err(nc_err)?;
            to_f64(&rec)
        } else {
            let all = reader.read_var(name).map_err(nc_err)?;
            to_f64(&all).map(|v| {
                if dims.len() == 3 {
                    v.get(time_index * h * w..(time_index + 1) * h * w).map(<[f64]>::to_vec)
                } else {
                    Some(v)
                }
            }).and_then(|v| v)
        }
        .ok_or_else(|| Error::NetCdf(format!("`{name}`: unsupported type or time index {time_index}")))?;
        if let Some(first) = planes.first() {
            if first.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "`{name}` is {h}x{w} but `{}` is {:?}",
                    variables[0],
                    first.dim()
                )));
            }
        }
        let plane = Array2::from_shape_fn((h, w), |(i, j)| {
            let v = vals[i * w + j];
            if fill == Some(v) {
                f32::NAN
            } else {
                v as f32
            }
        });
        planes.push(plane);
    }
    let (h, w) = planes[0].dim();
    let mut values = Array3::<f32>::zeros((planes.len(), h, w));
    for (k, p) in planes.iter().enumerate() {
        values.index_axis_mut(Axis(0), k).assign(p);
    }
    let lat = coord_range(&mut reader, &["lat", "latitude"])?.unwrap_or((0.0, 1.0));
    let lon = coord_range(&mut reader, &["lon", "longitude"])?.unwrap_or((0.0, 1.0));
    let ts = timestamp(&mut reader, time_index)?;
    GridField::new(values, variables.iter().map(|s| s.to_string()).collect(), lat, lon, ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use netcdf3::{FileWriter, Version};

    fn write_nc(path: &Path, nan_cells: usize) {
        let (t, h, w) = (2, 6, 5);
        let mut ds = DataSet::new();
        ds.set_unlimited_dim("time", t).unwrap();
        ds.add_fixed_dim("lat", h).unwrap();
        ds.add_fixed_dim("lon", w).unwrap();
        ds.add_var_f64("time", &["time"]).unwrap();
        ds.add_var_attr_string("time", "units", "hours since 2021-06-01 00:00:00").unwrap();
        ds.add_var_f32("lat", &["lat"]).unwrap();
        ds.add_var_f32("lon", &["lon"]).unwrap();
        ds.add_var_f32("T2M", &["time", "lat", "lon"]).unwrap();
        ds.add_var_f32("MSL", &["time", "lat", "lon"]).unwrap();
        let mut wr = FileWriter::create_new(path).unwrap();
        wr.set_def(&ds, Version::Classic, 0).unwrap();
        wr.write_var_f64("time", &[0.0, 6.0]).unwrap();
        wr.write_var_f32("lat", &[20.0, 22.0, 24.0, 26.0, 28.0, 30.0]).unwrap();
        wr.write_var_f32("lon", &[100.0, 101.0, 102.0, 103.0, 104.0]).unwrap();
        for r in 0..t {
            let mut a: Vec<f32> = (0..h * w).map(|i| 280.0 + i as f32 + r as f32 * 100.0).collect();
            if r == 1 {
                for cell in a.iter_mut().skip(7).take(nan_cells) {
                    *cell = f32::NAN;
                }
            }
            wr.write_record_f32("T2M", r, &a).unwrap();
            let b: Vec<f32> = (0..h * w).map(|i| 1.0e5 - i as f32).collect();
            wr.write_record_f32("MSL", r, &b).unwrap();
        }
        wr.close().unwrap();
    }

    #[test]
    fn netcdf_two_variables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nc");
        write_nc(&p, 0);
        let f = ingest_container(&p, &["T2M", "MSL"], 1).unwrap();
        assert_eq!(f.values.dim(), (2, 6, 5));
        assert_eq!(f.values[[0, 0, 1]], 381.0);
        assert_eq!(f.values[[1, 2, 0]], 1.0e5 - 10.0);
        assert_eq!(f.lat_range, (20.0, 30.0));
        assert_eq!(f.lon_range, (100.0, 104.0));
        assert_eq!(f.timestamp, Utc.with_ymd_and_hms(2021, 6, 1, 6, 0, 0).unwrap());
    }

    #[test]
    fn netcdf_nan_cells_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nc");
        write_nc(&p, 3);
        assert!(ingest_container(&p, &["T2M"], 0).is_ok());
        match ingest_container(&p, &["MSL", "T2M"], 1) {
            Err(Error::NonFinite { variable, count, row, col }) => {
                assert_eq!((variable.as_str(), count, row, col), ("T2M", 3, 1, 2));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn netcdf_missing_variable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nc");
        write_nc(&p, 0);
        assert!(matches!(ingest_container(&p, &["U10M"], 0), Err(Error::MissingVariable(v)) if v == "U10M"));
    }

    #[test]
    fn raw_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field.bin");
        let values = Array3::from_shape_fn((2, 4, 3), |(c, i, j)| (c * 100 + i * 3 + j) as f32);
        let field = GridField::new(
            values,
            vec!["U10M".into(), "V10M".into()],
            (18.0, 54.0),
            (73.0, 135.0),
            Utc.with_ymd_and_hms(2022, 1, 1, 12, 0, 0).unwrap(),
        )
        .unwrap();
        write_raw(&p, &field).unwrap();
        assert_eq!(ingest_container(&p, &["U10M", "V10M"], 0).unwrap(), field);
        let v = ingest_container(&p, &["V10M"], 0).unwrap();
        assert_eq!(v.values[[0, 3, 2]], 111.0);
        assert!(matches!(ingest_container(&p, &["T2M"], 0), Err(Error::MissingVariable(_))));
        assert!(matches!(ingest_container(&p, &["U10M"], 1), Err(Error::Shape(_))));

        let mut bytes = fs::read(&p).unwrap();
        for k in [0usize, 5, 9] {
            bytes[k * 4..k * 4 + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            ingest_container(&p, &["U10M"], 0),
            Err(Error::NonFinite { count: 3, row: 0, col: 0, .. })
        ));
    }

    #[test]
    fn time_units() {
        let (step, origin) = parse_time_units("days since 2000-01-01").unwrap();
        assert_eq!(step, Duration::days(1));
        assert_eq!(origin, Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap());
        assert!(parse_time_units("fortnights since 2000-01-01").is_none());
    }
}
