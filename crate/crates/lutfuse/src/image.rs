//! Unit-range RGB images: container, resizing, cropping, PNG/PPM I/O.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// H×W×3 float image with channel order R, G, B and values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer length");
        ImageRgb {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageRgb::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.pixels.iter().map(|&v| f64::from(v)).sum();
        (sum / self.pixels.len() as f64) as f32
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageRgb {
        ImageRgb::new(
            self.height,
            self.width,
            self.pixels.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Channel-planar copy: [R plane, G plane, B plane], each H×W.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; hw * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[hw + i] = px[1];
            out[2 * hw + i] = px[2];
        }
        out
    }

    /// Inverse of [`Self::to_planar`].
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> ImageRgb {
        let hw = height * width;
        assert_eq!(planar.len(), hw * 3);
        let mut pixels = vec![0.0f32; hw * 3];
        for i in 0..hw {
            pixels[i * 3] = planar[i];
            pixels[i * 3 + 1] = planar[hw + i];
            pixels[i * 3 + 2] = planar[2 * hw + i];
        }
        ImageRgb::new(height, width, pixels)
    }
}

/// Half-pixel bilinear resize with edge clamping. Resizing to the source
/// size reproduces the input exactly.
pub fn resize_bilinear(img: &ImageRgb, height: usize, width: usize) -> Result<ImageRgb> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let (sh, sw) = (img.height, img.width);
    let mut out = vec![0.0f32; height * width * 3];
    for oy in 0..height {
        let (y0, y1, ty) = span(oy, sh, height);
        for ox in 0..width {
            let (x0, x1, tx) = span(ox, sw, width);
            for c in 0..3 {
                let p00 = img.pixels[(y0 * sw + x0) * 3 + c];
                let p01 = img.pixels[(y0 * sw + x1) * 3 + c];
                let p10 = img.pixels[(y1 * sw + x0) * 3 + c];
                let p11 = img.pixels[(y1 * sw + x1) * 3 + c];
                let top = p00 + tx * (p01 - p00);
                let bot = p10 + tx * (p11 - p10);
                out[(oy * width + ox) * 3 + c] = top + ty * (bot - top);
            }
        }
    }
    Ok(ImageRgb::new(height, width, out))
}

fn span(i: usize, src: usize, dst: usize) -> (usize, usize, f32) {
    if src == 1 {
        return (0, 0, 0.0);
    }
    let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let s = s.clamp(0.0, (src - 1) as f64);
    let lo = (s.floor() as usize).min(src - 2);
    (lo, lo + 1, (s - lo as f64) as f32)
}

/// Centered crop to height×width.
pub fn center_crop(img: &ImageRgb, height: usize, width: usize) -> Result<ImageRgb> {
    if height == 0 || width == 0 || height > img.height || width > img.width {
        return Err(Error::shape(
            "center_crop",
            format!("target within {}x{}", img.height, img.width),
            format!("{height}x{width}"),
        ));
    }
    let y0 = (img.height - height) / 2;
    let x0 = (img.width - width) / 2;
    let mut out = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let row = ((y0 + y) * img.width + x0) * 3;
        out.extend_from_slice(&img.pixels[row..row + width * 3]);
    }
    Ok(ImageRgb::new(height, width, out))
}

/// Rounds a unit-range value to the nearest 8-bit code (half rounds up).
#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PNG or binary PPM image; 8-bit codes map to [0,1] by /255.
pub fn read_image(path: &Path) -> Result<ImageRgb> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => read_ppm(path),
        "png" => read_png(path),
        other => Err(Error::InvalidArgument(format!(
            "unsupported image format `.{other}` for {}",
            path.display()
        ))),
    }
}

/// Writes a PNG or binary PPM depending on the extension.
pub fn write_image(path: &Path, img: &ImageRgb) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => write_ppm(path, img),
        "png" => write_png(path, img),
        other => Err(Error::InvalidArgument(format!(
            "unsupported image format `.{other}` for {}",
            path.display()
        ))),
    }
}

fn read_png(path: &Path) -> Result<ImageRgb> {
    let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ImageDecode {
            path: path.to_path_buf(),
            msg: "image has zero dimensions".into(),
        });
    }
    let pixels = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(ImageRgb::new(h, w, pixels))
}

fn write_png(path: &Path, img: &ImageRgb) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Binary PPM (P6, maxval 255). Parse errors report the byte offset.
fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    let fail = |offset: usize, msg: &str| Error::ParseAt {
        offset,
        msg: format!("{msg} in {}", path.display()),
    };

    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(fail(0, "expected PPM magic `P6`"));
    }
    let mut pos = 2usize;

    let next_token = |pos: &mut usize| -> Result<usize> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "expected integer"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "invalid integer"))
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if width == 0 || height == 0 {
        return Err(fail(2, "image has zero dimensions"));
    }
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    // single whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected whitespace before raster"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(fail(
            bytes.len(),
            &format!("truncated raster: need {need} bytes"),
        ));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok(ImageRgb::new(height, width, pixels))
}

fn write_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height).map_err(io)?;
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageRgb {
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                px.push(x as f32 / (w.max(2) - 1) as f32);
                px.push(y as f32 / (h.max(2) - 1) as f32);
                px.push(((x + y) % 7) as f32 / 6.0);
            }
        }
        ImageRgb::new(h, w, px)
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = gradient_image(9, 13);
        let out = resize_bilinear(&img, 9, 13).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_resizes_to_same_constant() {
        let img = ImageRgb::filled(8, 6, 0.37);
        let out = resize_bilinear(&img, 3, 5).unwrap();
        for &v in out.pixels() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_downsample_averages_blocks() {
        // 4x4 checkerboard -> 2x2: every output pixel is its 2x2 block mean.
        let mut px = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let v = ((x + y) % 2) as f32;
                px.extend_from_slice(&[v, v, v]);
            }
        }
        let img = ImageRgb::new(4, 4, px);
        let out = resize_bilinear(&img, 2, 2).unwrap();
        for &v in out.pixels() {
            assert!((v - 0.5).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn center_crop_takes_middle_window() {
        let img = gradient_image(6, 8);
        let out = center_crop(&img, 2, 4).unwrap();
        assert_eq!(out.get(0, 0), img.get(2, 2));
        assert!(center_crop(&img, 7, 4).is_err());
    }

    #[test]
    fn ppm_roundtrip_within_half_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = gradient_image(5, 7);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 7);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn png_roundtrip_within_half_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(6, 4);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn minimal_ppm_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.ppm");
        fs::write(&path, b"P6 2 1 255 \x00\x01\x02\x03\x04\x05").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert!((img.get(0, 1)[2] - 5.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn corrupt_magic_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"Q6 2 1 255 junk").unwrap();
        match read_image(&path) {
            Err(crate::error::Error::ParseAt { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected ParseAt error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        fs::write(&path, b"P6 2 2 255 \x00\x01").unwrap();
        assert!(read_image(&path).is_err());
    }
}
