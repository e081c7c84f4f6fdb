//! Writes a small classic NetCDF file and a raw array with sidecar, then reads both
//! through the same container entry point.
//!
//! cargo run --release --example ingest_netcdf

use latcomp::grid::GridField;
use latcomp::ingest::{ingest_container, write_raw};
use ndarray::Array3;
use netcdf3::{DataSet, FileWriter, Version};

// The writer's error types hold `Rc`s, so they cannot travel inside `anyhow::Error`.
fn nc_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("netcdf: {e:?}")
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let (h, w) = (4, 6);
    let nc = dir.path().join("analysis.nc");
    let mut ds = DataSet::new();
    ds.set_unlimited_dim("time", 2).map_err(nc_err)?;
    ds.add_fixed_dim("lat", h).map_err(nc_err)?;
    ds.add_fixed_dim("lon", w).map_err(nc_err)?;
    ds.add_var_f64("time", &["time"]).map_err(nc_err)?;
    ds.add_var_attr_string("time", "units", "hours since 2022-07-01 00:00:00").map_err(nc_err)?;
    ds.add_var_f32("lat", &["lat"]).map_err(nc_err)?;
    ds.add_var_f32("lon", &["lon"]).map_err(nc_err)?;
    ds.add_var_f32("T2M", &["time", "lat", "lon"]).map_err(nc_err)?;
    ds.add_var_f32("U10M", &["time", "lat", "lon"]).map_err(nc_err)?;
    let mut wr = FileWriter::create_new(&nc).map_err(nc_err)?;
    wr.set_def(&ds, Version::Classic, 0).map_err(nc_err)?;
    wr.write_var_f64("time", &[0.0, 1.0]).map_err(nc_err)?;
    wr.write_var_f32("lat", &[30.0, 30.5, 31.0, 31.5]).map_err(nc_err)?;
    wr.write_var_f32("lon", &[110.0, 110.5, 111.0, 111.5, 112.0, 112.5]).map_err(nc_err)?;
    for t in 0..2 {
        wr.write_record_f32("T2M", t, &(0..h * w).map(|i| 290.0 + i as f32 * 0.1 + t as f32).collect::<Vec<_>>()).map_err(nc_err)?;
        wr.write_record_f32("U10M", t, &(0..h * w).map(|i| (i % w) as f32 - 2.5).collect::<Vec<_>>()).map_err(nc_err)?;
    }
    wr.close().map_err(nc_err)?;

    let f = ingest_container(&nc, &["T2M", "U10M"], 1)?;
    println!(
        "netcdf: {:?} {:?} lat {:?} lon {:?} at {}",
        f.values.dim(),
        f.variables,
        f.lat_range,
        f.lon_range,
        f.timestamp
    );

    let raw = dir.path().join("field.raw");
    let g = GridField::new(
        Array3::from_shape_fn((1, h, w), |(_, i, j)| (i * w + j) as f32),
        vec!["MSL".into()],
        f.lat_range,
        f.lon_range,
        f.timestamp,
    )?;
    write_raw(&raw, &g)?;
    let back = ingest_container(&raw, &["MSL"], 0)?;
    println!("raw: round trip equal = {}", back == g);

    match ingest_container(&nc, &["Q500"], 0) {
        Err(e) => println!("missing variable: {e}"),
        Ok(_) => println!("unexpected success"),
    }
    Ok(())
}
