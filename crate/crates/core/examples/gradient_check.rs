//! Finite-difference check of backpropagated gradients for tiny backbones.

use msm::backbone::{build_backbone, check_gradients, BackboneConfig, LossKind, SwinConfig, UnetConfig};
use msm::imaging::ImageGrid;

fn main() -> msm::error::Result<()> {
    let image = ImageGrid::from_fn(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f64 / 11.0)?;
    let configs = [
        BackboneConfig::Unet(UnetConfig { depth: 2, base_channels: 2 }),
        BackboneConfig::SwinLite(SwinConfig { embed_dim: 8, window_size: 4, heads: 2, n_blocks: 2, mlp_ratio: 2 }),
    ];
    for config in &configs {
        let model = build_backbone(config, 1)?;
        for loss in [LossKind::L1, LossKind::L2] {
            let report = check_gradients(&model, &image, &loss, 1e-6, 2)?;
            println!("{} {}: {:?}", config.arch_name(), loss.name(), report);
        }
    }
    Ok(())
}
