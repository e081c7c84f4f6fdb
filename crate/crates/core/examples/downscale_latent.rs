//! Trains a codec and a latent-space U-Net on synthetic forecast/analysis pairs,
//! then compares held-out MSE and SSIM against bilinear interpolation.
//!
//! cargo run --release --example downscale_latent -- [n_train] [n_test]

use std::time::Instant;

use latcomp::codec::{train_vae, Codec, CodecConfig, CodecDataset, TrainSchedule};
use latcomp::downscale::{
    canonical_input_variables, interp_baseline, train_downscaler, DownscalePair, DownscaleSchedule, DownscaleSetup,
    Downscaler, Mode, UNetConfig,
};
use latcomp::metrics::{mse, ssim, SsimParams};
use latcomp::synthetic::{gen_forecast_pair, PairSpec, SyntheticSpec};

fn pairs(start: u64, n: usize) -> anyhow::Result<Vec<DownscalePair>> {
    (start..start + n as u64)
        .map(|s| {
            let (low, high) = gen_forecast_pair(&PairSpec::new(SyntheticSpec::new((64, 64), 2.5, s), 8))?;
            Ok(DownscalePair { low, high })
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(100);
    let n_test = args.get(1).copied().unwrap_or(20);
    let train = pairs(0, n_train)?;
    let test = pairs(1_000_000, n_test)?;

    let t0 = Instant::now();
    let highs: Vec<_> = train.iter().map(|p| p.high.clone()).collect();
    let ds = CodecDataset::from_physical(&highs, "pairs-train")?;
    let codec = Codec::new(train_vae(&ds, &TrainSchedule::desk(), &CodecConfig::desk(), None)?.params)?;
    println!("codec trained in {:.1}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let setup = DownscaleSetup {
        unet: UNetConfig::desk(4),
        mode: Mode::Latent,
        input_variables: canonical_input_variables(),
        target_variables: vec!["T2M".into()],
        raw_patch: 64,
    };
    let out = train_downscaler(&train, &DownscaleSchedule::desk(), &setup, Some(&codec), None)?;
    println!("u-net trained in {:.1}s", t1.elapsed().as_secs_f64());
    for r in out.history.iter().step_by(5) {
        println!("epoch {:>3}  loss {:.5}", r.epoch, r.loss);
    }

    let down = Downscaler::new(out.params)?;
    let p = SsimParams::default();
    let (mut m_model, mut m_interp, mut wins) = (0.0, 0.0, 0);
    for pair in &test {
        let pred = down.downscale(&pair.low, (64, 64), Some(&codec), None)?;
        let base = interp_baseline(&pair.low, "T2M", (64, 64))?;
        m_model += mse(&pair.high, &pred, "T2M")?;
        m_interp += mse(&pair.high, &base, "T2M")?;
        if ssim(&pair.high, &pred, "T2M", &p)? > ssim(&pair.high, &base, "T2M", &p)? {
            wins += 1;
        }
    }
    let n = test.len() as f64;
    println!(
        "held-out MSE  model {:.4}  interp {:.4}  improvement {:.1}%  ssim wins {wins}/{}",
        m_model / n,
        m_interp / n,
        100.0 * (1.0 - m_model / m_interp),
        test.len()
    );
    Ok(())
}
