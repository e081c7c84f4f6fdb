mod common;

use common::max_relative_error;
use latcomp::codec::{CodecConfig, ReconLoss, Vae};
use latcomp::nn::{Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

fn micro(recon_loss: ReconLoss) -> CodecConfig {
    CodecConfig {
        in_channels: 1,
        base_channels: 8,
        stage_channels: vec![8, 8, 8, 8],
        norm_groups: 2,
        kl_weight: 0.05,
        recon_loss,
        ..CodecConfig::default()
    }
}

fn check_vae(recon_loss: ReconLoss) {
    let cfg = micro(recon_loss);
    let mut vae = Vae::<f64>::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random([2, 1, 8, 8], &mut rng);
    let eta = random([2, 4, 1, 1], &mut rng);
    vae.zero_grad();
    let parts = vae.loss_backward(&x, &eta).unwrap();
    assert!((parts.total - vae.loss(&x, &eta).unwrap().total).abs() < 1e-12);
    let (err, name) = max_relative_error(&mut vae, |m| m.loss(&x, &eta).unwrap().total, 12, 5);
    assert!(err <= 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn vae_gradients_match_finite_differences() {
    check_vae(ReconLoss::Charbonnier);
}

#[test]
fn vae_global_charbonnier_gradients() {
    check_vae(ReconLoss::CharbonnierGlobal);
}

#[test]
fn unet_gradients_match_finite_differences() {
    use latcomp::downscale::{UNet, UNetConfig};
    let cfg = UNetConfig {
        in_channels: 3,
        stages: 3,
        res_blocks_per_stage: 2,
        base_channels: 4,
        max_channels: 8,
        out_channels: 2,
        norm_groups: 2,
    };
    let mut unet = UNet::<f64>::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([2, 3, 8, 8], &mut rng);
    let t = random([2, 2, 8, 8], &mut rng);
    unet.zero_grad();
    let l = unet.loss_backward(&x, &t).unwrap();
    assert!((l - unet.loss(&x, &t).unwrap()).abs() < 1e-12);
    let (err, name) = max_relative_error(&mut unet, |m| m.loss(&x, &t).unwrap(), 12, 9);
    assert!(err <= 1e-4, "{name}: relative error {err:e}");
}
