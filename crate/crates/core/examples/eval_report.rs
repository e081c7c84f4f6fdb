//! Scores three stand-in predictors against synthetic truth and writes the metric table,
//! box-plot summary and spectrum series to a directory.
//!
//! cargo run --release --example eval_report -- [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use latcomp::cli::cmd_eval;
use latcomp::downscale::bilinear_resize;
use latcomp::grid::GridField;
use latcomp::synthetic::{gen_grf, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target/eval_report"));
    let truth: BTreeMap<String, GridField> = (0..12)
        .map(|s| Ok((format!("s{s:02}"), gen_grf(&SyntheticSpec::new((64, 64), 3.0, s))?)))
        .collect::<latcomp::Result<_>>()?;
    let resize = |f: usize| -> latcomp::Result<BTreeMap<String, GridField>> {
        truth
            .iter()
            .map(|(k, t)| Ok((k.clone(), bilinear_resize(&bilinear_resize(t, (64 / f, 64 / f))?, (64, 64))?)))
            .collect()
    };
    let methods = vec![("resize2".to_string(), resize(2)?), ("resize4".to_string(), resize(4)?), ("resize8".to_string(), resize(8)?)];
    let report = cmd_eval(&truth, &methods, &["T2M".to_string()], 0, &out)?;
    println!("{:<10} {:>10} {:>10} {:>8}", "method", "median mse", "max mse", "ssim");
    for c in &report.cells {
        println!("{:<10} {:>10.5} {:>10.5} {:>8.4}", c.method, c.mse.median, c.mse.max, c.mean_ssim);
    }
    println!("wrote {}", out.display());
    Ok(())
}
