//! Image transformations: RGB → grayscale → Sobel edges, bilinear resizing,
//! and the pixel ↔ model-range conversion.
//!
//! All operations are pure; identical input bytes produce identical output
//! bytes, which is what makes dataset builds reproducible and parallelizable.

use std::io::Cursor;
use std::path::Path;

use image::ImageReader;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

/// Decoded 8-bit image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(
                "ImageBuffer",
                format!("channels must be 1 or 3, got {channels}"),
            ));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(Error::invalid(
                "ImageBuffer",
                format!(
                    "pixel buffer length {} != {width}x{height}x{channels}",
                    pixels.len()
                ),
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Decodes PNG or JPEG bytes into an 8-bit RGB or grayscale buffer.
/// `origin` identifies the source in error messages.
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<ImageBuffer> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(format!("probing image format of {origin:?}"), e))?;
    let img = reader.decode().map_err(|source| Error::ImageDecode {
        path: origin.to_path_buf(),
        source,
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            ImageBuffer::new(g.width(), g.height(), 1, g.into_raw())
        }
        other => {
            let rgb = other.to_rgb8();
            ImageBuffer::new(rgb.width(), rgb.height(), 3, rgb.into_raw())
        }
    }
}

/// Reads and decodes an image file.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {path:?}"), e))?;
    decode_image(&bytes, path)
}

/// Encodes a buffer as PNG bytes (8-bit grayscale or RGB).
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    use image::codecs::png::PngEncoder;
    use image::{ExtendedColorType, ImageEncoder};
    let mut out = Vec::new();
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    PngEncoder::new(&mut out)
        .write_image(&img.pixels, img.width, img.height, color)
        .map_err(Error::ImageEncode)?;
    Ok(out)
}

/// Encodes and writes a PNG file, creating parent directories as needed.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {parent:?}"), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {path:?}"), e))
}

/// ITU-R 601 luma: `round(0.299·R + 0.587·G + 0.114·B)` per pixel.
/// Returns the input unchanged if it is already single-channel.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|rgb| {
            let l = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
            l.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
    }
}

const SOBEL_GX: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_GY: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// Sobel gradient magnitude of a single-channel image (correlation
/// convention, replicate-edge padding), clamped to `[0, 255]`. The edge map
/// keeps graded magnitudes; there is no binarization step.
pub fn sobel_edges(gray: &ImageBuffer) -> Result<ImageBuffer> {
    const OP: &str = "sobel_edges";
    if gray.channels != 1 {
        return Err(Error::invalid(
            OP,
            format!("expected single-channel input, got {} channels", gray.channels),
        ));
    }
    let (w, h) = (gray.width as i64, gray.height as i64);
    if w < 3 || h < 3 {
        return Err(Error::invalid(OP, format!("input {w}x{h} smaller than 3x3")));
    }
    let px = &gray.pixels;
    let sample = |x: i64, y: i64| -> i32 {
        let xc = x.clamp(0, w - 1) as usize;
        let yc = y.clamp(0, h - 1) as usize;
        px[yc * w as usize + xc] as i32
    };
    let mut out = vec![0u8; px.len()];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0i32;
            let mut gy = 0i32;
            for (ky, (row_x, row_y)) in SOBEL_GX.iter().zip(&SOBEL_GY).enumerate() {
                for kx in 0..3 {
                    let v = sample(x + kx as i64 - 1, y + ky as i64 - 1);
                    gx += row_x[kx] * v;
                    gy += row_y[kx] * v;
                }
            }
            let mag = ((gx as f64).powi(2) + (gy as f64).powi(2)).sqrt();
            out[(y * w + x) as usize] = mag.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageBuffer::new(gray.width, gray.height, 1, out)
}

/// Bilinear resize with half-pixel-center alignment. Constant images stay
/// constant; identity dimensions return an identical copy.
pub fn resize_bilinear(img: &ImageBuffer, out_w: u32, out_h: u32) -> Result<ImageBuffer> {
    const OP: &str = "resize_bilinear";
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(OP, "output dimensions must be positive"));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);
    let scale_x = w as f64 / out_w as f64;
    let scale_y = h as f64 / out_h as f64;
    let mut out = vec![0u8; out_w as usize * out_h as usize * c];
    for oy in 0..out_h as usize {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0i = (y0 as i64).clamp(0, h as i64 - 1) as usize;
        let y1i = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
        for ox in 0..out_w as usize {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0i = (x0 as i64).clamp(0, w as i64 - 1) as usize;
            let x1i = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
            for ch in 0..c {
                let at = |x: usize, y: usize| img.pixels[(y * w + x) * c + ch] as f64;
                let top = at(x0i, y0i) * (1.0 - fx) + at(x1i, y0i) * fx;
                let bottom = at(x0i, y1i) * (1.0 - fx) + at(x1i, y1i) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(oy * out_w as usize + ox) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::new(out_w, out_h, img.channels, out)
}

/// Maps 8-bit pixels into the generator range: `x ↦ x/127.5 − 1`, giving a
/// `1×C×H×W` tensor in `[−1, 1]`.
pub fn to_model_range(img: &ImageBuffer) -> Tensor<f32> {
    let data: Vec<f32> = img
        .pixels
        .iter()
        .map(|&p| p as f32 / 127.5 - 1.0)
        .collect();
    // interleaved u8 -> planar NCHW
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);
    if c == 1 {
        return Tensor::from_vec(vec![1, 1, h, w], data);
    }
    let mut planar = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                planar[ch * h * w + y * w + x] = data[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::from_vec(vec![1, c, h, w], planar)
}

/// Inverse of [`to_model_range`] for a single-image tensor: clamps to
/// `[−1, 1]` then maps back with rounding. Round-trip error is at most one
/// pixel level (and exactly zero over the 256 representable levels).
pub fn from_model_range(t: &Tensor<f32>) -> Result<ImageBuffer> {
    const OP: &str = "from_model_range";
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3) {
        return Err(Error::shape(
            OP,
            format!("expected 1x{{1|3}}xHxW tensor, got {s:?}"),
        ));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let data = t.data();
    let mut pixels = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = data[ch * h * w + y * w + x].clamp(-1.0, 1.0);
                pixels[(y * w + x) * c + ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::new(w as u32, h as u32, c as u8, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise_image(w: u32, h: u32, seed: u64) -> ImageBuffer {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h).map(|_| rng.random::<u8>()).collect();
        ImageBuffer::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn decode_one_pixel_white_png() {
        let white = ImageBuffer::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        let png = encode_png(&white).unwrap();
        let decoded = decode_image(&png, Path::new("white.png")).unwrap();
        assert_eq!(decoded.pixels(), &[255, 255, 255]);
        assert_eq!((decoded.width(), decoded.height()), (1, 1));
    }

    #[test]
    fn decode_truncated_file_is_an_error_not_a_crash() {
        let img = noise_image(8, 8, 1);
        let mut png = encode_png(&img).unwrap();
        png.truncate(png.len() / 2);
        let err = decode_image(&png, Path::new("broken.png")).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "error names the file");
    }

    #[test]
    fn decode_garbage_is_an_error() {
        assert!(decode_image(&[0u8; 16], Path::new("noise.bin")).is_err());
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let img = noise_image(13, 7, 2);
        let png = encode_png(&img).unwrap();
        let back = decode_image(&png, Path::new("x.png")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_reference_values() {
        let img = ImageBuffer::new(3, 1, 3, vec![255, 255, 255, 0, 0, 0, 255, 0, 0]).unwrap();
        let gray = to_grayscale(&img);
        assert_eq!(gray.channels(), 1);
        // weights sum to 1; pure red is round(0.299·255) = round(76.245)
        assert_eq!(gray.pixels(), &[255, 0, 76]);
    }

    proptest! {
        #[test]
        fn grayscale_of_equal_channels_is_identity(v in 0u8..=255) {
            let img = ImageBuffer::new(2, 2, 3, vec![v; 12]).unwrap();
            let gray = to_grayscale(&img);
            prop_assert_eq!(gray.pixels(), &[v; 4]);
        }
    }

    #[test]
    fn sobel_of_constant_image_is_zero() {
        let img = ImageBuffer::new(9, 5, 1, vec![140; 45]).unwrap();
        let edges = sobel_edges(&img).unwrap();
        assert!(edges.pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn sobel_vertical_step_saturates_boundary_columns() {
        // Columns 0..4 are 0, columns 4..8 are 255. |gx| at the two columns
        // adjacent to the step is 4·255 = 1020 pre-clamp.
        let w = 8usize;
        let h = 6usize;
        let mut px = vec![0u8; w * h];
        for y in 0..h {
            for x in 4..w {
                px[y * w + x] = 255;
            }
        }
        let edges = sobel_edges(&ImageBuffer::new(w as u32, h as u32, 1, px).unwrap()).unwrap();
        for y in 0..h {
            assert_eq!(edges.pixels()[y * w + 3], 255, "left of step saturates");
            assert_eq!(edges.pixels()[y * w + 4], 255, "right of step saturates");
            assert_eq!(edges.pixels()[y * w], 0, "far interior is flat");
            assert_eq!(edges.pixels()[y * w + 7], 0, "far interior is flat");
        }
    }

    #[test]
    fn sobel_matches_direct_convolution_oracle() {
        let img = noise_image(8, 8, 3);
        let edges = sobel_edges(&img).unwrap();
        // Independent nested-loop oracle with replicate padding.
        let (w, h) = (8i64, 8i64);
        let at = |x: i64, y: i64| {
            img.pixels()[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as f64
        };
        for y in 0..h {
            for x in 0..w {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ky in -1..=1i64 {
                    for kx in -1..=1i64 {
                        let v = at(x + kx, y + ky);
                        let gxk = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
                            [(ky + 1) as usize][(kx + 1) as usize];
                        let gyk = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]
                            [(ky + 1) as usize][(kx + 1) as usize];
                        gx += gxk * v;
                        gy += gyk * v;
                    }
                }
                let expected = (gx * gx + gy * gy).sqrt().round().clamp(0.0, 255.0) as u8;
                assert_eq!(
                    edges.pixels()[(y * w + x) as usize],
                    expected,
                    "pixel ({x}, {y})"
                );
            }
        }
    }

    #[test]
    fn sobel_rejects_multichannel_and_tiny_inputs() {
        let rgb = ImageBuffer::new(4, 4, 3, vec![0; 48]).unwrap();
        assert!(sobel_edges(&rgb).is_err());
        let tiny = ImageBuffer::new(2, 4, 1, vec![0; 8]).unwrap();
        assert!(sobel_edges(&tiny).is_err());
    }

    #[test]
    fn sobel_is_translation_equivariant_in_the_interior() {
        // A small bright square, then the same square shifted 1px right:
        // interior responses must shift by exactly 1px.
        let w = 16usize;
        let mut base = vec![0u8; w * w];
        for y in 6..9 {
            for x in 5..8 {
                base[y * w + x] = 200;
            }
        }
        let mut shifted = vec![0u8; w * w];
        for y in 6..9 {
            for x in 6..9 {
                shifted[y * w + x] = 200;
            }
        }
        let e0 = sobel_edges(&ImageBuffer::new(w as u32, w as u32, 1, base).unwrap()).unwrap();
        let e1 = sobel_edges(&ImageBuffer::new(w as u32, w as u32, 1, shifted).unwrap()).unwrap();
        for y in 2..w - 2 {
            for x in 2..w - 3 {
                assert_eq!(
                    e0.pixels()[y * w + x],
                    e1.pixels()[y * w + x + 1],
                    "response at ({x},{y}) should shift with the pattern"
                );
            }
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageBuffer::new(10, 10, 1, vec![77; 100]).unwrap();
        let small = resize_bilinear(&img, 4, 4).unwrap();
        assert!(small.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn resize_identity_returns_identical_pixels() {
        let img = noise_image(6, 9, 4);
        let same = resize_bilinear(&img, 6, 9).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn resize_upscale_matches_half_pixel_formula() {
        let img = ImageBuffer::new(2, 1, 1, vec![0, 255]).unwrap();
        let up = resize_bilinear(&img, 4, 1).unwrap();
        // src_x = (dst + 0.5)·0.5 − 0.5 = {−0.25, 0.25, 0.75, 1.25}
        // → clamped samples {0, 63.75, 191.25, 255}
        assert_eq!(up.pixels(), &[0, 64, 191, 255]);
        let p = up.pixels();
        assert!(p.windows(2).all(|w| w[0] <= w[1]), "monotone nondecreasing");
    }

    #[test]
    fn model_range_reference_points() {
        let img = ImageBuffer::new(3, 1, 1, vec![0, 255, 128]).unwrap();
        let t = to_model_range(&img);
        assert_eq!(t.shape(), &[1, 1, 1, 3]);
        let d = t.to_vec();
        assert_eq!(d[0], -1.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn model_range_roundtrip_is_identity_over_all_levels() {
        let all: Vec<u8> = (0..=255).collect();
        let img = ImageBuffer::new(16, 16, 1, all.clone()).unwrap();
        let back = from_model_range(&to_model_range(&img)).unwrap();
        assert_eq!(back.pixels(), &all[..]);
    }

    #[test]
    fn model_range_rgb_roundtrip_preserves_channel_order() {
        let img = ImageBuffer::new(2, 1, 3, vec![10, 20, 30, 200, 150, 100]).unwrap();
        let t = to_model_range(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let back = from_model_range(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn from_model_range_clamps_out_of_range_values() {
        let t = Tensor::from_vec(vec![1, 1, 1, 2], vec![-3.0f32, 42.0]);
        let img = from_model_range(&t).unwrap();
        assert_eq!(img.pixels(), &[0, 255]);
    }
}
