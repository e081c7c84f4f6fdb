//! Trains a small raw-resolution U-Net on patches, then tiles a larger field with
//! different overlap and blending choices and reports seam spikes for each.
//!
//! cargo run --release --example raw_seams

use latcomp::downscale::{
    canonical_input_variables, seam_check, train_downscaler, DownscalePair, DownscaleSchedule, DownscaleSetup,
    Downscaler, Mode, RawTiling, UNetConfig,
};
use latcomp::grid::{tile_offsets, Blend, OverlapPolicy};
use latcomp::synthetic::{gen_forecast_pair, PairSpec, SyntheticSpec};

fn pair(seed: u64, dims: (usize, usize)) -> latcomp::Result<DownscalePair> {
    let (low, high) = gen_forecast_pair(&PairSpec::new(SyntheticSpec::new(dims, 4.0, seed), 8))?;
    Ok(DownscalePair { low, high })
}

fn main() -> anyhow::Result<()> {
    let train = (0..60).map(|s| pair(s, (64, 64))).collect::<latcomp::Result<Vec<_>>>()?;
    let setup = DownscaleSetup {
        unet: UNetConfig::desk(1),
        mode: Mode::Raw,
        input_variables: canonical_input_variables(),
        target_variables: vec!["T2M".into()],
        raw_patch: 32,
    };
    let schedule = DownscaleSchedule { epochs: 8, ..DownscaleSchedule::desk() };
    let down = Downscaler::new(train_downscaler(&train, &schedule, &setup, None, None)?.params)?;

    let test = pair(9_999, (256, 256))?;
    for (policy, blend) in [
        (OverlapPolicy::ShiftLast, Blend::Average),
        (OverlapPolicy::MinOverlap(16), Blend::Average),
        (OverlapPolicy::MinOverlap(16), Blend::Feather),
    ] {
        let out = down.downscale(&test.low, (256, 256), None, Some(RawTiling { patch: 64, policy, blend }))?;
        let lines: Vec<usize> = tile_offsets(256, 64, policy).into_iter().filter(|&o| o > 0).collect();
        let r = seam_check(&out.values.index_axis(ndarray::Axis(0), 0).to_owned(), &lines, &lines);
        println!(
            "{policy:?}/{blend:?}: max seam {:.4}, interior p99.9 {:.4}, spike {}",
            r.max_seam, r.interior_p999, r.spike
        );
    }
    Ok(())
}
