//! Image files: PNG tile grids and portable-graymap masks.

use std::path::Path;

use genflow::autodiff::Tensor;
use genflow::data::to_u8;
use genflow::inpaint::Mask;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{CliError, CliResult};

/// Columns of a near-square grid holding `n` tiles.
pub fn grid_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

/// Tiles a `[n, c, h, w]` batch in `[-1, 1]` row-major into one image with
/// `cols` tiles per row; unused tiles stay black. One channel gives a
/// grayscale image, three an RGB one.
pub fn tile(batch: &Tensor, cols: usize) -> CliResult<DynamicImage> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(CliError::Usage(format!(
            "cannot tile a batch of shape {:?}",
            batch.shape()
        )));
    };
    let cols = cols.max(1);
    let rows = n.div_ceil(cols).max(1);
    let (width, height) = ((cols * w) as u32, (rows * h) as u32);
    let data = batch.data();
    let px = |i: usize, ch: usize, y: usize, x: usize| to_u8(data[((i * c + ch) * h + y) * w + x]);
    match c {
        1 => {
            let mut img = GrayImage::new(width, height);
            for i in 0..n {
                let (ty, tx) = (i / cols * h, i % cols * w);
                for y in 0..h {
                    for x in 0..w {
                        img.put_pixel((tx + x) as u32, (ty + y) as u32, image::Luma([px(i, 0, y, x)]));
                    }
                }
            }
            Ok(DynamicImage::ImageLuma8(img))
        }
        3 => {
            let mut img = RgbImage::new(width, height);
            for i in 0..n {
                let (ty, tx) = (i / cols * h, i % cols * w);
                for y in 0..h {
                    for x in 0..w {
                        let rgb = [px(i, 0, y, x), px(i, 1, y, x), px(i, 2, y, x)];
                        img.put_pixel((tx + x) as u32, (ty + y) as u32, image::Rgb(rgb));
                    }
                }
            }
            Ok(DynamicImage::ImageRgb8(img))
        }
        _ => Err(CliError::Usage(format!("cannot render {c}-channel images"))),
    }
}

/// Writes `img` as PNG.
pub fn save_png(img: &DynamicImage, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Rows of `Original → Masked → columns...`, one row per image. Holes in
/// the masked column are drawn mid-gray.
pub fn panel(original: &Tensor, masks: &Tensor, results: &[&Tensor]) -> CliResult<DynamicImage> {
    let masked = original.zip_map(masks, |x, m| if m == 1.0 { x } else { 0.0 })?;
    let mut columns = vec![original, &masked];
    columns.extend_from_slice(results);
    let n = original.shape()[0];
    let per = original.len() / n.max(1);
    let mut data = Vec::with_capacity(original.len() * columns.len());
    for i in 0..n {
        for col in &columns {
            if col.shape() != original.shape() {
                return Err(CliError::Usage("panel columns must share a shape".into()));
            }
            data.extend_from_slice(&col.data()[i * per..(i + 1) * per]);
        }
    }
    let mut shape = original.shape().to_vec();
    shape[0] = n * columns.len();
    tile(&Tensor::new(&shape, data)?, columns.len())
}

/// Reads a hole mask (0 = hole, 255 = known) from any grayscale image file
/// the decoder understands, PGM included.
pub fn load_mask(path: &Path) -> CliResult<Mask> {
    let img = image::open(path)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_gray(h as usize, w as usize, img.as_raw())?)
}

/// Writes a mask as a binary PGM.
pub fn save_mask(mask: &Mask, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    let file = std::fs::File::create(path).map_err(CliError::io(path))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &mask.to_gray(),
            mask.width() as u32,
            mask.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(CliError::io(dir)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_four_tiles_make_an_eight_by_eight_grid() {
        let batch = Tensor::new(&[64, 1, 8, 8], (0..64 * 64).map(|i| (i % 3) as f64 - 1.0).collect()).unwrap();
        let img = tile(&batch, grid_columns(64)).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        let rgb = Tensor::zeros(&[5, 3, 4, 4]);
        let img = tile(&rgb, grid_columns(5)).unwrap();
        assert_eq!((img.width(), img.height()), (12, 8));
    }

    #[test]
    fn tile_places_examples_row_major() {
        let mut data = vec![-1.0; 4 * 4];
        data[4..8].fill(1.0); // second example white
        let batch = Tensor::new(&[4, 1, 2, 2], data).unwrap();
        let img = tile(&batch, 2).unwrap().into_luma8();
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(2, 0).0, [255]);
        assert_eq!(img.get_pixel(0, 2).0, [0]);
    }

    #[test]
    fn mask_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = vec![1.0; 16];
        v[5] = 0.0;
        let mask = Mask::custom(Tensor::new(&[4, 4], v).unwrap()).unwrap();
        let path = dir.path().join("m.pgm");
        save_mask(&mask, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.values(), mask.values());
        assert_eq!(back.hole_pixels(), 1);
    }
}
