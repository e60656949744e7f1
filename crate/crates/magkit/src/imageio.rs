//! PNG reading and writing. Pixel values map linearly between `0..=255` and
//! `[-1, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use magkit_core::Image;

use crate::error::{Error, Result};

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_rgb(img: &RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = to_unit(px[c]);
        }
    }
    Image::new(3, h, w, data).expect("shape matches buffer")
}

pub fn to_rgb(img: &Image) -> RgbImage {
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let c = |k: usize| if img.channels == 3 { to_byte(img.data[k * plane + i]) } else { to_byte(img.data[i]) };
        Rgb([c(0), c(1), c(2)])
    })
}

/// Reads a PNG as RGB and resizes it to `side × side` when needed.
pub fn read_png(path: &Path, side: usize) -> Result<Image> {
    let err = |source| Error::Image { path: path.to_path_buf(), source };
    let mut rgb = image::open(path).map_err(err)?.to_rgb8();
    if rgb.width() as usize != side || rgb.height() as usize != side {
        rgb = image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle);
    }
    Ok(from_rgb(&rgb))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    to_rgb(img).save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Tiles equally sized images into `rows × cols`, row-major.
pub fn grid(images: &[Image], cols: usize) -> Image {
    let (h, w) = (images[0].height, images[0].width);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![-1.0; 3 * gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for ch in 0..3 {
            for y in 0..h {
                let src = &img.data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let at = ch * gh * gw + (r * h + y) * gw + c * w;
                data[at..at + w].copy_from_slice(src);
            }
        }
    }
    Image::new(3, gh, gw, data).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_values_survive_a_round_trip() {
        let img = Image::new(3, 1, 2, vec![-1.0, 1.0, 0.0, 0.5, 0.2, -0.2]).unwrap();
        let rgb = to_rgb(&img);
        assert_eq!(rgb.get_pixel(0, 0).0, [0, 128, 153]);
        let back = from_rgb(&rgb);
        assert_eq!(to_rgb(&back), rgb);
        assert_eq!(back.data[0], -1.0);
        assert_eq!(back.data[1], 1.0);
    }

    #[test]
    fn png_files_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Image::new(3, 2, 2, vec![-1.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        write_png(&p, &img).unwrap();
        let back = read_png(&p, 2).unwrap();
        assert_eq!(to_rgb(&back), to_rgb(&img));
        assert_eq!(read_png(&p, 4).unwrap().height, 4);
    }

    #[test]
    fn grid_places_tiles_row_major() {
        let a = Image::filled(3, 1, 1, -1.0);
        let b = Image::filled(3, 1, 1, 1.0);
        let g = grid(&[a, b.clone(), b], 2);
        assert_eq!((g.height, g.width), (2, 2));
        assert_eq!(&g.data[..4], &[-1.0, 1.0, 1.0, -1.0]);
    }
}
