//! Arbitrary-scale image upsampling with latent modulated decoding.
//!
//! An encoder maps a low-resolution image to a grid of latent codes. A decoder
//! turns the grid into an RGB image of any requested size. The latent
//! modulated decoder splits the work into a per-code latent stage and a cheap
//! per-pixel render stage. [`cmsr`] then skips rendering at full resolution
//! where a lower scale would have been indistinguishable.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coord;
pub mod cmsr;
pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod model_io;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use coord::{bilinear_resize, cell_of, ensemble_corners, feature_unfold, make_coord_grid, output_extent, Cell};
pub use cost::{macs_lmf, macs_vanilla, CostReport, LmfDims, MacTally, StageCosts, VanillaDims};
pub use decoder::{
    decode_c2f, decode_vanilla, latent_stage, render_point, render_stage, upsample, DecoderKind, LatentModulation, LmfModel, Mask,
    Model, ModelConfig, ModulationGrid, RenderRequest,
};
pub use encoder::{Encoder, FeatureMap};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{FilmParams, Linear, Mlp};
pub use cmsr::{build_scale2mods_table, cmsr_render, query_min_scale, shift_modulation_means, Scale2ModsTable};
pub use train::{bicubic_downsample, psnr, train, TrainConfig};
pub use model_io::{load_model, save_model, ModelFile, TrainingMeta};
pub use pnm::{read_pnm, write_pnm};
