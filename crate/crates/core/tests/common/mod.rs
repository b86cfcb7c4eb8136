#![allow(dead_code)]

use cut_core::data::render_toy_pair;
use cut_core::diffusion::{seeded_normal, Backbone, ToyBackbone, ToyBackboneConfig};
use cut_core::pipeline::{build_prompt, GenerationConfig};
use cut_core::types::{ImageSample, LatentState, PromptSpec};

pub fn toy_backbone() -> ToyBackbone {
    ToyBackbone::new(ToyBackboneConfig::default()).unwrap()
}

pub fn toy_image(seed: u64) -> ImageSample {
    let (clean, _, _) = render_toy_pair(seed, 0);
    ImageSample::new(clean, "disk", None).unwrap()
}

pub fn prompt(b: &ToyBackbone) -> PromptSpec {
    build_prompt(&GenerationConfig::default(), "disk", b).unwrap()
}

pub fn random_latent(b: &ToyBackbone, seed: u64, t: usize) -> LatentState {
    let s = b.latent_side();
    LatentState::new(seeded_normal((b.latent_channels(), s, s), seed), t, 200).unwrap()
}
