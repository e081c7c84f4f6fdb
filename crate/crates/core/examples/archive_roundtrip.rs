//! Encodes fields with a briefly trained codec, stores the latents in an archive in both
//! dtypes, reads them back and reports compression ratios.
//!
//! cargo run --release --example archive_roundtrip

use latcomp::archive::{
    compression_ratio, default_key, read_latent, reference_ratio, store_ratio, write_latent, ArchiveMeta, LatentDtype,
    LatentMeta, LatentStore, SourceMeta, StoreMode,
};
use latcomp::codec::{train_vae, Codec, CodecConfig, CodecDataset, PhaseSpec, TrainSchedule};
use latcomp::grid::{zscore_apply, zscore_invert};
use latcomp::metrics::rmse;
use latcomp::synthetic::{gen_grf, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let fields = (0..40).map(|s| gen_grf(&SyntheticSpec::new((64, 64), 2.5, s))).collect::<Result<Vec<_>, _>>()?;
    let ds = CodecDataset::from_physical(&fields[..32], "example")?;
    let schedule = TrainSchedule { finetune: PhaseSpec { patch: 64, epochs: 2 }, ..TrainSchedule::desk() };
    let codec = Codec::new(train_vae(&ds, &schedule, &CodecConfig::desk(), None)?.params)?;

    let dir = tempfile::tempdir()?;
    for dtype in [LatentDtype::Float32, LatentDtype::Float16] {
        let store = LatentStore::open(dir.path().join(format!("{dtype:?}")))?;
        let mut worst_gap: f64 = 0.0;
        for f in &fields[32..] {
            let latent = codec.encode(&zscore_apply(f, &codec.params.norm_stats)?)?;
            let meta = LatentMeta {
                variable: "T2M".into(),
                timestamp: f.timestamp,
                source_dims: f.dims(),
                factor: codec.config().factor(),
                norm_stats_hash: codec.params.norm_stats.content_hash(),
                codec_fingerprint: codec.identity(),
            };
            let key = default_key(&meta);
            write_latent(&store, &key, &latent, StoreMode::MuOnly, dtype, &meta)?;
            let (payload, _) = read_latent(&store, &key, StoreMode::MuOnly)?;
            let decoded = zscore_invert(&codec.decode(payload.mu(), f)?, &codec.params.norm_stats)?;
            let direct = codec.reconstruct(f)?;
            worst_gap = worst_gap.max((rmse(f, &decoded, "T2M")? - rmse(f, &direct, "T2M")?).abs());
        }
        let source = SourceMeta { dims: (64, 64), channels: 1, bytes_per_value: 4, samples: 8 };
        let disk = store_ratio(&store, &source)?;
        println!("{dtype:?}: archive vs direct reconstruction RMSE gap {worst_gap:.2e}; on-disk ratio {:.2}", disk.ratio);
    }

    let full = compression_ratio(
        &SourceMeta { dims: (4384, 6880), channels: 1, bytes_per_value: 4, samples: 1 },
        &ArchiveMeta { latent_dims: (4, 548, 860), dtype: LatentDtype::Float16, mode: StoreMode::MuOnly, overhead_bytes: 0, samples: 1 },
    )?;
    println!("full-size grid, float16 mean only: {:.1}x", full.ratio);
    let r = reference_ratio();
    println!("quoted corpus figure: {:.1}x ({})", r.ratio, r.assumptions);
    Ok(())
}
