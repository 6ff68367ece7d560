#![allow(dead_code)]

use candle_core::Device;
use object_novelty::dataset::{to_batch, Image};
use object_novelty::encoder::{BackboneHandle, ImageTensor, VitConfig};
use object_novelty::splits::{generate_synthetic, Partition, SyntheticSceneSpec};

pub fn toy_config() -> VitConfig {
    VitConfig::from_arch("vit_toy").unwrap()
}

pub fn toy_backbone(seed: u64) -> BackboneHandle {
    BackboneHandle::random("vit_toy", toy_config(), seed, &Device::Cpu).unwrap()
}

/// A smaller transformer for tests that need many forward passes.
pub fn small_config(image_size: usize, heads: usize) -> VitConfig {
    VitConfig {
        image_size,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        num_heads: heads,
        mlp_dim: 64,
        class_token: true,
        ln_eps: 1e-6,
    }
}

pub fn small_backbone(image_size: usize, heads: usize, seed: u64) -> BackboneHandle {
    BackboneHandle::random("vit_small_test", small_config(image_size, heads), seed, &Device::Cpu).unwrap()
}

pub fn glyph_images(n: usize, objects: (usize, usize), seed: u64) -> Vec<Image> {
    let spec = SyntheticSceneSpec {
        objects,
        seed,
        ..Default::default()
    };
    generate_synthetic(&spec, n, Partition::Train)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

/// Scenes containing only glyph `category`.
pub fn single_category_images(n: usize, category: u32, seed: u64) -> Vec<Image> {
    let spec = SyntheticSceneSpec {
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut start = 0;
    while out.len() < n {
        let scenes = generate_synthetic(&spec, start + 64, Partition::Train).unwrap();
        out.extend(
            scenes[start..]
                .iter()
                .filter(|s| s.annotation.categories.iter().eq([category].iter()))
                .map(|s| s.image.clone()),
        );
        start += 64;
    }
    out.truncate(n);
    out
}

pub fn batch(images: &[Image]) -> ImageTensor {
    let refs: Vec<&Image> = images.iter().collect();
    to_batch(&refs, &Device::Cpu).unwrap()
}

pub fn noise_image(size: usize, seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Image::new((0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(), size, size)
}
