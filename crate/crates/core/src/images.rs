//! Image files to and from `[-1, 1]` tensors, and tiled grids.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::error::{invalid, Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

/// Raster files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(invalid!("{} is not a directory", dir.display()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn center_square(img: DynamicImage) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
}

/// Decodes one file, center-crops to a square, resizes to `resolution` and
/// maps pixel values to `[-1, 1]`. Returns `(C, H, W)`.
pub fn load_image(path: &Path, resolution: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let img = center_square(img);
    let r = resolution as u32;
    let img = if img.width() == r { img } else { img.resize_exact(r, r, FilterType::Triangle) };
    let data: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(invalid!("unsupported channel count {c}")),
    };
    let t = Tensor::from_vec(data, (resolution, resolution, channels), &Device::Cpu)?;
    Ok(((t.permute((2, 0, 1))?.to_dtype(DType::F32)? / 127.5)? - 1.0)?)
}

/// Every image in `dir` as one `(N, C, H, W)` batch plus the source paths.
pub fn load_dir(dir: &Path, resolution: usize, channels: usize) -> Result<(Tensor, Vec<PathBuf>)> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(invalid!("no images in {}", dir.display()));
    }
    let imgs: Vec<Tensor> = files.iter().map(|p| load_image(p, resolution, channels)).collect::<Result<_>>()?;
    Ok((Tensor::stack(&imgs, 0)?, files))
}

fn to_bytes(t: &Tensor) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (c, h, w) = t.dims3().map_err(|_| invalid!("expected a (C, H, W) image, got {:?}", t.dims()))?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.permute((1, 2, 0))?.flatten_all()?.to_vec1()?;
    let bytes = v.iter().map(|x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    Ok((c, h, w, bytes))
}

/// Writes a `(C, H, W)` image in `[-1, 1]` as PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w, bytes) = to_bytes(t)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let (w, h) = (w as u32, h as u32);
    let res = match c {
        1 => GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(invalid!("unsupported channel count {c}")),
    };
    res.ok_or_else(|| image_err(path, "buffer size mismatch"))?.map_err(|e| image_err(path, e))
}

/// Writes each image of a batch as `<prefix><index:04>.png`; returns the paths.
pub fn save_batch(batch: &Tensor, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let n = batch.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = dir.join(format!("{prefix}{i:04}.png"));
        save_image(&batch.get(i)?, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Tiles a `(B, C, H, W)` batch into a `(C, rows·H, cols·W)` image. Tile `i`
/// sits at row `i / cols`, column `i % cols`; unused tiles are black.
pub fn make_grid(batch: &Tensor, cols: usize) -> Result<Tensor> {
    let (b, c, h, w) = batch.dims4()?;
    if b == 0 || cols == 0 {
        return Err(invalid!("grid needs at least one image and one column"));
    }
    let cols = cols.min(b);
    let rows = b.div_ceil(cols);
    let pad = rows * cols - b;
    let batch = if pad > 0 {
        let fill = (Tensor::ones((pad, c, h, w), batch.dtype(), batch.device())? * -1.0)?;
        Tensor::cat(&[batch.clone(), fill], 0)?
    } else {
        batch.clone()
    };
    Ok(batch
        .reshape((rows, cols, c, h, w))?
        .permute((2, 0, 3, 1, 4))?
        .reshape((c, rows * h, cols * w))?)
}

/// Bytes of a PNG-encoded image; used to compare outputs.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w, bytes) = to_bytes(t)?;
    let img = match c {
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("sized")),
        3 => DynamicImage::ImageRgb8(ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("sized")),
        c => return Err(invalid!("unsupported channel count {c}")),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_255_levels() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..48).map(|i| i as f32 / 47.0 * 2.0 - 1.0).collect();
        let t = Tensor::from_vec(vals.clone(), (3, 4, 4), &Device::Cpu).unwrap();
        let p = dir.path().join("x.png");
        save_image(&t, &p).unwrap();
        let back: Vec<f32> = load_image(&p, 4, 3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 127.5 + 1e-6);
        }
    }

    #[test]
    fn directory_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::zeros((3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        for name in ["b.png", "a.png", "c.PNG"] {
            save_image(&img, &dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<String> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "c.PNG"]);
        let (batch, _) = load_dir(dir.path(), 4, 3).unwrap();
        assert_eq!(batch.dims(), &[3, 3, 4, 4]);
        assert!(load_dir(&dir.path().join("none"), 4, 3).is_err());
    }

    #[test]
    fn grid_order() {
        let tiles: Vec<Tensor> = (0..3).map(|i| Tensor::full(i as f32 * 0.5, (1, 2, 2), &Device::Cpu).unwrap()).collect();
        let g = make_grid(&Tensor::stack(&tiles, 0).unwrap(), 2).unwrap();
        assert_eq!(g.dims(), &[1, 4, 4]);
        let v: Vec<Vec<f32>> = g.squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(v[0], [0.0, 0.0, 0.5, 0.5]);
        assert_eq!(v[3], [1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn non_square_inputs_are_center_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(12, 8);
        for (x, _, px) in img.enumerate_pixels_mut() {
            *px = if (2..10).contains(&x) { image::Rgb([255, 255, 255]) } else { image::Rgb([0, 0, 0]) };
        }
        let p = dir.path().join("wide.png");
        img.save(&p).unwrap();
        let t = load_image(&p, 8, 3).unwrap();
        assert_eq!(t.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap(), 1.0);
    }
}
