//! Synthetic digit-grid image-text datasets with controllable pairwise
//! complexity.
//!
//! Each 84x84 image is a 3x3 grid of 28x28 regions. A filled region holds a
//! tinted digit and optionally a white shape, giving two or four
//! region-attribute pairs. The text describes every pair with a templated
//! sentence.

mod generate;
pub mod glyph;
pub mod idx;
pub mod store;

pub use generate::{
    assemble_sample, complexity_score, draw_target, generate_count, generate_dataset, generate_dataset_with_pool,
    generate_sample, plan_regions, render_image, render_text, shape_pixels, Dataset, DigitSource, GenConfig,
    PlacedShape, RegionContent, RegionSpec, Sample, Shape, ShapeSize, GRID, IMAGE_SIDE, MAX_COMPLEXITY, NUM_REGIONS,
    REGION_SIDE,
};
pub use glyph::{render_glyph, DigitPool, Glyph};
pub use idx::load_mnist_idx;
