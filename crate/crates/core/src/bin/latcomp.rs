use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use latcomp::cli::{self, Overrides};
use latcomp::config::{Preset, RunConfig};
use latcomp::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Step {
    /// Write the synthetic dataset to `<out>/data`.
    Synth,
    /// Train the codec or downscaler of the preset.
    Train,
    /// Encode the test split into the latent archive.
    Encode,
    /// Decode archive entries to `<out>/predictions/decoded`.
    Decode,
    /// Score prediction directories against a truth directory.
    Eval,
    /// Everything above for the preset, end to end.
    Run,
    /// Print the resolved configuration.
    Config,
}

/// Latent compression and downscaling experiments on gridded fields.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(value_enum, default_value = "run")]
    step: Step,
    /// Archive keys for `decode` (all keys when empty).
    keys: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Truth directory for `eval`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// `METHOD=DIR` prediction directory for `eval`; repeatable.
    #[arg(long = "pred")]
    preds: Vec<String>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn eval(cfg: &RunConfig, args: &Args) -> Result<()> {
    let truth = match &args.truth {
        Some(dir) => cli::read_predictions(dir)?,
        None => cli::ensure_dataset(cfg, false)?
            .test
            .into_iter()
            .map(|s| (s.name, s.high))
            .collect::<BTreeMap<_, _>>(),
    };
    if args.preds.is_empty() {
        return Err(Error::Config("eval needs at least one --pred METHOD=DIR".into()));
    }
    let methods = args
        .preds
        .iter()
        .map(|p| {
            let (name, dir) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--pred `{p}` is not METHOD=DIR")))?;
            Ok((name.to_string(), cli::read_predictions(std::path::Path::new(dir))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = cli::cmd_eval(&truth, &methods, &cfg.data.variables, cfg.data.lead_time, &cfg.out_dir.join("eval"))?;
    for c in &report.cells {
        println!("{:<8} {:<16} n={:<4} mse={:.6e} ssim={:.4}", c.variable, c.method, c.count, c.mean_mse, c.mean_ssim);
    }
    Ok(())
}

fn run(args: &Args) -> Result<()> {
    let cfg = cli::load_config(&Overrides {
        config: args.config.clone(),
        preset: args.preset,
        seed: args.seed,
        deterministic: args.deterministic,
        out: args.out.clone(),
    })?;
    match args.step {
        Step::Config => print!("{}", cfg.to_toml()?),
        Step::Synth => {
            let dir = cfg.out_dir.join("data");
            let m = cli::cmd_synth(&cfg, &dir, args.force)?;
            println!("{} files in {}", m.entries.len(), dir.display());
        }
        Step::Train => {
            let data = cli::ensure_dataset(&cfg, args.force)?;
            let paths = if cfg.preset.is_downscale() {
                vec![cli::cmd_train_down(&cfg, &data)?]
            } else {
                cli::cmd_train_vae(&cfg, &data)?
            };
            paths.iter().for_each(|p| println!("{}", p.display()));
        }
        Step::Encode => {
            let data = cli::ensure_dataset(&cfg, false)?;
            let r = cli::cmd_encode(&cfg, &data.test)?;
            println!("{} entries, ratio {:.2} ({:.2} on disk)", r.keys.len(), r.ratio.ratio, r.on_disk.ratio);
        }
        Step::Decode => {
            let fields = cli::cmd_decode(&cfg, &args.keys)?;
            let dir = cfg.out_dir.join("predictions").join("decoded");
            cli::write_predictions(&dir, &fields)?;
            println!("{} fields in {}", fields.len(), dir.display());
        }
        Step::Eval => eval(&cfg, args)?,
        Step::Run => {
            let s = cli::cmd_run(&cfg, args.force)?;
            for c in &s.report.cells {
                println!("{:<8} {:<16} n={:<4} mse={:.6e} ssim={:.4}", c.variable, c.method, c.count, c.mean_mse, c.mean_ssim);
            }
            if let Some(e) = &s.encode {
                println!("compression ratio {:.2} ({:.2} on disk)", e.ratio.ratio, e.on_disk.ratio);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
