use image::{imageops, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Patch {
    /// Grid row index (pixel origin is `row * stride`).
    pub row: u32,
    pub col: u32,
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub parent_image_id: String,
    pub patch_size: u32,
    pub stride: u32,
    pub rows: u32,
    pub cols: u32,
    /// Row-major.
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn expected_count(width: u32, height: u32, size: u32, stride: u32) -> usize {
        if size > width || size > height || stride == 0 {
            return 0;
        }
        (((height - size) / stride + 1) * ((width - size) / stride + 1)) as usize
    }
}

/// Tiles `image` into `patch_size` squares every `stride` pixels. Patches
/// never extend past the image border.
pub fn make_patches(
    parent_image_id: &str,
    image: &RgbImage,
    patch_size: u32,
    stride: u32,
) -> Result<PatchGrid> {
    let (w, h) = image.dimensions();
    if patch_size == 0 || patch_size > w.min(h) {
        return Err(Error::PatchTooLarge {
            size: patch_size,
            width: w,
            height: h,
        });
    }
    if stride == 0 {
        return Err(Error::Config("patch stride must be >= 1".into()));
    }
    let rows = (h - patch_size) / stride + 1;
    let cols = (w - patch_size) / stride + 1;
    let mut patches = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let sub = imageops::crop_imm(image, col * stride, row * stride, patch_size, patch_size)
                .to_image();
            patches.push(Patch {
                row,
                col,
                image: sub,
            });
        }
    }
    Ok(PatchGrid {
        parent_image_id: parent_image_id.to_string(),
        patch_size,
        stride,
        rows,
        cols,
        patches,
    })
}
