//! Generates a few phantoms and writes them as 16-bit PNGs.
//!
//! cargo run --example phantoms -- out/phantoms

use msm::imaging::{phantom_set, save_image, ImageFormat};

fn main() -> msm::error::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out/phantoms".into());
    std::fs::create_dir_all(&dir)?;
    for (seed, img) in phantom_set(0, 4, 64)?.iter().enumerate() {
        let path = format!("{dir}/phantom_{seed}.png");
        save_image(img, &path, ImageFormat::Png16)?;
        println!("{path}: mean {:.3}, hash {}", img.mean(), &img.content_hash()[..12]);
    }
    Ok(())
}
