//! Tiles a field into overlapping patches, runs a per-patch transform and stitches the
//! result back, then prints the tile layout for the full-size analysis grid.
//!
//! cargo run --release --example patch_tiling

use latcomp::grid::{patchify, tile_offsets, unpatchify, Blend, OverlapPolicy, Patch};
use latcomp::synthetic::{gen_grf, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let f = gen_grf(&SyntheticSpec::new((100, 150), 2.5, 3))?;
    for policy in [OverlapPolicy::ShiftLast, OverlapPolicy::MinOverlap(8)] {
        let set = patchify(&f, (32, 32), policy)?;
        let back = unpatchify(&set, Blend::Feather)?;
        let err = (&back.values - &f.values).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        let (rows, cols) = set.seam_lines();
        println!("{policy:?}: {} patches, seams rows {rows:?} cols {cols:?}, round-trip error {err:.1e}", set.len());
    }

    let set = patchify(&f, (32, 32), OverlapPolicy::MinOverlap(8))?;
    let doubled = set.map_patches(|p: &Patch| Ok(p.data.mapv(|v| 2.0 * v)), f.variables.clone())?;
    let out = unpatchify(&doubled, Blend::Average)?;
    println!("per-patch doubling preserved: {}", out.values.iter().zip(f.values.iter()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-5));

    let rows = tile_offsets(4384, 1000, OverlapPolicy::ShiftLast);
    let cols = tile_offsets(6880, 1000, OverlapPolicy::ShiftLast);
    println!("4384x6880 in 1000x1000 tiles: {} x {} = {} (row origins {rows:?})", rows.len(), cols.len(), rows.len() * cols.len());
    Ok(())
}
