//! Trains the reduced codec on synthetic fields and compares held-out RMSE with
//! a bilinear down/up resize.
//!
//! cargo run --release --example train_codec -- [n_train] [n_test]

use std::time::Instant;

use latcomp::codec::{train_vae, Codec, CodecConfig, CodecDataset, TrainSchedule};
use latcomp::downscale::bilinear_resize;
use latcomp::metrics::rmse;
use latcomp::synthetic::{gen_grf, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(100);
    let n_test = args.get(1).copied().unwrap_or(20);
    let fields = |start: u64, n: usize| {
        (start..start + n as u64)
            .map(|s| gen_grf(&SyntheticSpec::new((64, 64), 2.5, s)))
            .collect::<Result<Vec<_>, _>>()
    };
    let train = fields(0, n_train)?;
    let test = fields(100_000, n_test)?;

    let t0 = Instant::now();
    let ds = CodecDataset::from_physical(&train, "synthetic-train")?;
    let out = train_vae(&ds, &TrainSchedule::desk(), &CodecConfig::desk(), None)?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for r in &out.history {
        println!("{:>8} {:>3}  recon {:.5}  kl {:.3}", r.phase.to_string(), r.epoch, r.recon, r.kl);
    }

    let fine = Codec::new(out.params)?;
    let pre = Codec::new(out.pretrain.expect("pretrain phase ran"))?;
    let (mut e_fine, mut e_pre, mut e_resize) = (0.0, 0.0, 0.0);
    for f in &test {
        let base = bilinear_resize(&bilinear_resize(f, (8, 8))?, (64, 64))?;
        e_fine += rmse(f, &fine.reconstruct(f)?, "T2M")?;
        e_pre += rmse(f, &pre.reconstruct(f)?, "T2M")?;
        e_resize += rmse(f, &base, "T2M")?;
    }
    let n = test.len() as f64;
    println!("held-out RMSE  fine-tuned {:.4}  pretrain-only {:.4}  resize {:.4}", e_fine / n, e_pre / n, e_resize / n);
    Ok(())
}
