//! Sample generation: run the stack in eval mode, write paired PNGs and a
//! tiled contact sheet.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageops::{from_model_range, save_png, ImageBuffer};
use crate::models::{LatentVector, ModelSpec, Phase, Stage1Generator, Stage2Generator};
use crate::ndtensor::Tensor;

use super::stage1::Stage1Session;
use super::stage2::Stage2Session;

pub struct GeneratedSet {
    /// `(edge_i.png, gray_i.png)` paths in sample order.
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub sheet: PathBuf,
}

/// Slices sample `i` out of a `N×1×H×W` batch as an image.
pub fn tensor_slice_to_image(t: &Tensor<f32>, i: usize) -> Result<ImageBuffer> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let plane = t.data()[i * h * w..(i + 1) * h * w].to_vec();
    from_model_range(&Tensor::from_vec(vec![1, 1, h, w], plane))
}

/// Samples `n` latents, runs stage 1 then stage 2 in eval mode, and writes
/// `edge_i.png`/`gray_i.png` pairs plus `sheet.png` under `out_dir`.
pub fn generate_samples(
    g1: &Stage1Generator<f32>,
    spec1: &ModelSpec,
    g2: &Stage2Generator<f32>,
    spec2: &ModelSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<GeneratedSet> {
    const OP: &str = "generate";
    if n == 0 {
        return Err(Error::invalid(OP, "n must be >= 1"));
    }
    if spec1.image_side != spec2.image_side {
        return Err(Error::invalid(
            OP,
            format!(
                "stage-1 side {} != stage-2 side {}",
                spec1.image_side, spec2.image_side
            ),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {out_dir:?}"), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = LatentVector::sample(n, spec1.latent_dim, &mut rng);
    let edges = g1.forward(&z, &mut Phase::Eval)?.detach();
    let z2 = spec2
        .stage2_latent_enabled
        .then(|| LatentVector::sample(n, spec2.latent_dim, &mut rng));
    let grays = g2.forward(&edges, z2.as_ref(), &mut Phase::Eval)?;

    let mut pairs = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let edge_img = tensor_slice_to_image(&edges, i)?;
        let gray_img = tensor_slice_to_image(&grays, i)?;
        let edge_path = out_dir.join(format!("edge_{i:03}.png"));
        let gray_path = out_dir.join(format!("gray_{i:03}.png"));
        save_png(&edge_img, &edge_path)?;
        save_png(&gray_img, &gray_path)?;
        pairs.push((edge_path, gray_path));
        images.push((edge_img, gray_img));
    }

    let sheet_img = compose_sheet(&images)?;
    let sheet = out_dir.join("sheet.png");
    save_png(&sheet_img, &sheet)?;
    Ok(GeneratedSet { pairs, sheet })
}

/// Path-based wrapper used by the CLI: loads both checkpoints first.
pub fn generate(
    stage1_ckpt: &Path,
    stage2_ckpt: &Path,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<GeneratedSet> {
    let (g1, spec1) = Stage1Session::load_generator(stage1_ckpt)?;
    let (g2, spec2) = Stage2Session::load_generator(stage2_ckpt)?;
    generate_samples(&g1, &spec1, &g2, &spec2, n, seed, out_dir)
}

/// Tiles samples into a grid: each sample is one column cell with its edge
/// image above the grayscale result, eight cells per row.
fn compose_sheet(images: &[(ImageBuffer, ImageBuffer)]) -> Result<ImageBuffer> {
    const MARGIN: usize = 2;
    let side = images[0].0.width() as usize;
    let cols = images.len().min(8);
    let rows = images.len().div_ceil(cols);
    let cell_w = side + MARGIN;
    let cell_h = 2 * side + 3 * MARGIN;
    let sheet_w = cols * cell_w + MARGIN;
    let sheet_h = rows * cell_h;
    let mut px = vec![255u8; sheet_w * sheet_h];

    let mut blit = |img: &ImageBuffer, x0: usize, y0: usize| {
        let w = img.width() as usize;
        for (row_i, row) in img.pixels().chunks_exact(w).enumerate() {
            let dst = (y0 + row_i) * sheet_w + x0;
            px[dst..dst + w].copy_from_slice(row);
        }
    };
    for (i, (edge, gray)) in images.iter().enumerate() {
        let cx = (i % cols) * cell_w + MARGIN;
        let cy = (i / cols) * cell_h + MARGIN;
        blit(edge, cx, cy);
        blit(gray, cx, cy + side + MARGIN);
    }
    ImageBuffer::new(sheet_w as u32, sheet_h as u32, 1, px)
}
