//! Generates Gaussian random fields for a few spectral slopes and fits the slope of the
//! mean zonal power spectrum back out, alongside a forecast/analysis pair.
//!
//! cargo run --release --example synth_spectrum

use latcomp::metrics::{zonal_power_spectrum, zonal_spacing_km};
use latcomp::synthetic::{gen_forecast_pair, gen_grf, PairSpec, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    for beta in [1.5, 2.5, 3.5] {
        let mut slopes = Vec::new();
        for seed in 0..8 {
            let f = gen_grf(&SyntheticSpec::new((128, 256), beta, seed))?;
            let s = zonal_power_spectrum(&f, "T2M", zonal_spacing_km(&f))?;
            slopes.push(s.loglog_slope(4.0, 64.0));
        }
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        println!("beta {beta:.1}: fitted slope {mean:+.3} (expected {:+.1})", -beta);
    }

    let (low, high) = gen_forecast_pair(&PairSpec::new(SyntheticSpec::new((64, 64), 2.5, 7), 8))?;
    println!(
        "pair: truth {:?} `{}`, input {:?} with channels {}, {}, ... {}",
        high.values.dim(),
        high.variables[0],
        low.values.dim(),
        low.variables[0],
        low.variables[1],
        low.variables[low.variables.len() - 1]
    );
    Ok(())
}
