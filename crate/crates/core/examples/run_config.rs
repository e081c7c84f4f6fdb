//! Builds run configurations from presets, applies a partial override document and
//! shows that serialization is a fixed point.
//!
//! cargo run --release --example run_config -- [preset]

use latcomp::config::{Preset, RunConfig, Scale};

fn main() -> anyhow::Result<()> {
    let preset: Preset = std::env::args().nth(1).as_deref().unwrap_or("vae_finetune").parse()?;
    let full = RunConfig::preset(preset, Scale::Full);
    println!("{}", full.to_toml()?);

    let overrides = format!("preset = \"{preset}\"\nscale = \"desk\"\nseed = 11\n[data]\nn_train = 40\n");
    let desk = RunConfig::from_toml(&overrides, None)?;
    let text = desk.to_toml()?;
    let again = RunConfig::from_toml(&text, None)?;
    println!(
        "desk override: seed {:?}, n_train {}, codec stages {:?}; round trip stable = {}",
        desk.seed,
        desk.data.n_train,
        desk.codec.stage_channels,
        again == desk && again.to_toml()? == text
    );

    match RunConfig::from_toml("preset = \"vae_l1\"\n[codec]\nrecon_loss = \"charbonnier\"\n", None) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
