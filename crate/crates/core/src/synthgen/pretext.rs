use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, BBox, Image, ImageSample, SynthError};

/// Resample attempts per grid cell before giving up on a draw.
const RESAMPLE_BUDGET: usize = 16;

/// Grid-shuffled composite whose label is the number of distinct source
/// instances among its cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample {
    pub pixels: Image,
    /// In `1..=grid_size`.
    pub y_ins: usize,
    /// Number of cells (a perfect square).
    pub grid_size: usize,
    /// Dataset index of the instance each cell was cropped from, row-major.
    pub contributor_ids: Vec<usize>,
}

fn grid_side(grid_size: usize) -> Result<usize, SynthError> {
    let g = (grid_size as f64).sqrt().round() as usize;
    if grid_size == 0 || g * g != grid_size {
        return Err(SynthError::GridNotSquare(grid_size));
    }
    Ok(g)
}

/// Top-left corners of every cell-sized crop whose overlap with `bbox`
/// covers at least half of the crop.
fn valid_crops(bbox: &BBox, h: usize, w: usize, ch: usize, cw: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..=h - ch {
        for x in 0..=w - cw {
            let crop = BBox { x0: x, y0: y, x1: x + cw, y1: y + ch };
            if 2 * crop.intersection_area(bbox) >= ch * cw {
                out.push((y, x));
            }
        }
    }
    out
}

fn procure_one(
    images: &[ImageSample],
    grid_size: usize,
    y_ins: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PretextSample, SynthError> {
    let g = grid_side(grid_size)?;
    let (h, w) = (images[0].pixels.h, images[0].pixels.w);
    if h % g != 0 || w % g != 0 {
        return Err(SynthError::GridDoesNotDivide { h, w, g });
    }
    let (ch, cw) = (h / g, w / g);

    // Draw instances without replacement, replacing any that admit no
    // valid crop.
    let mut order: Vec<usize> = index::sample(rng, images.len(), images.len()).into_vec();
    let mut chosen = Vec::with_capacity(y_ins);
    let mut crops = Vec::with_capacity(y_ins);
    let mut rejected = 0;
    while chosen.len() < y_ins {
        let Some(idx) = order.pop() else {
            return Err(SynthError::CropBudgetExhausted(rejected));
        };
        let c = valid_crops(&images[idx].bbox, h, w, ch, cw);
        if c.is_empty() {
            rejected += 1;
            if rejected > RESAMPLE_BUDGET {
                return Err(SynthError::CropBudgetExhausted(rejected));
            }
            continue;
        }
        chosen.push(idx);
        crops.push(c);
    }

    // Random surjection cells -> instances: every instance once, the rest
    // uniformly, then shuffled over the grid.
    let mut owner: Vec<usize> = (0..y_ins).collect();
    owner.extend((y_ins..grid_size).map(|_| rng.gen_range(0..y_ins)));
    owner.shuffle(rng);

    let mut pixels = Image::filled(h, w, 0.0);
    for (cell, &k) in owner.iter().enumerate() {
        let (gy, gx) = (cell / g, cell % g);
        let (sy, sx) = crops[k][rng.gen_range(0..crops[k].len())];
        let src = &images[chosen[k]].pixels;
        for dy in 0..ch {
            let dst_off = (gy * ch + dy) * w + gx * cw;
            let src_off = (sy + dy) * w + sx;
            pixels.pixels[dst_off..dst_off + cw].copy_from_slice(&src.pixels[src_off..src_off + cw]);
        }
    }
    Ok(PretextSample {
        pixels,
        y_ins,
        grid_size,
        contributor_ids: owner.iter().map(|&k| chosen[k]).collect(),
    })
}

fn check_inputs(images: &[ImageSample], grid_size: usize) -> Result<(), SynthError> {
    grid_side(grid_size)?;
    if images.len() < grid_size {
        return Err(SynthError::TooFewImages {
            need: grid_size,
            got: images.len(),
        });
    }
    Ok(())
}

/// Builds `n` composites with `y_ins ~ U{1..grid_size}`. Crops are taken at
/// native cell resolution; class labels of `images` are never read.
pub fn procure_pretext(
    images: &[ImageSample],
    grid_size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PretextSample>, SynthError> {
    check_inputs(images, grid_size)?;
    (0..n)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, j as u64));
            let y = rng.gen_range(1..=grid_size);
            procure_one(images, grid_size, y, &mut rng)
        })
        .collect()
}

/// Same construction with a prescribed instance count, used to fill
/// evaluation bins.
pub fn procure_pretext_with_label(
    images: &[ImageSample],
    grid_size: usize,
    y_ins: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PretextSample>, SynthError> {
    check_inputs(images, grid_size)?;
    if !(1..=grid_size).contains(&y_ins) {
        return Err(SynthError::LabelOutOfRange(y_ins, grid_size));
    }
    (0..n)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, j as u64));
            procure_one(images, grid_size, y_ins, &mut rng)
        })
        .collect()
}
