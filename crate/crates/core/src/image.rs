//! RGB images on `[0, 1]`: 8-bit PNG and ASCII PPM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RenderedImage;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major `H x W x 3`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        Image {
            width,
            height,
            data: (0..n).flat_map(|_| rgb).collect(),
        }
    }

    pub fn from_render<T: Real>(r: &RenderedImage<T>) -> Self {
        Image {
            width: r.width,
            height: r.height,
            data: r.color.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ResolutionMismatch {
                left_w: self.width as usize,
                left_h: self.height as usize,
                right_w: other.width as usize,
                right_h: other.height as usize,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Self {
        Image {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Rounds every value to the nearest 8-bit level, as a save and load would.
    pub fn quantized(&self) -> Self {
        Image::from_bytes(self.width, self.height, &self.to_bytes())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Writes PNG, or ASCII PPM when the extension is `.ppm`.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if is_ppm(path) {
        let mut out = Vec::new();
        writeln!(out, "P3\n{} {}\n255", img.width, img.height)?;
        for row in img.to_bytes().chunks(3 * img.width as usize) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        fs::write(path, out).map_err(|e| Error::file(path, e))
    } else {
        image::save_buffer(path, &img.to_bytes(), img.width, img.height, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    if is_ppm(path) {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        parse_ppm(&text).map_err(|msg| Error::Image(format!("{}: {msg}", path.display())))
    } else {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Image::from_bytes(img.width(), img.height(), img.as_raw()))
    }
}

fn parse_ppm(text: &str) -> std::result::Result<Image, String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P3") {
        return Err("not an ASCII PPM (P3)".into());
    }
    let mut number = |what: &str| -> std::result::Result<u32, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what}"))?
            .parse::<u32>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let (w, h, max) = (number("width")?, number("height")?, number("maxval")?);
    if max == 0 || max > 65535 {
        return Err(format!("maxval {max} out of range"));
    }
    let n = 3 * w as usize * h as usize;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = number(&format!("sample {i}"))?;
        if v > max {
            return Err(format!("sample {i} exceeds maxval"));
        }
        data.push(v as f64 / max as f64);
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> Image {
        let mut img = Image::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        img
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient();
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            assert_eq!(load_image(&p).unwrap(), img.quantized());
        }
    }

    #[test]
    fn ppm_comments_and_maxval() {
        let img = parse_ppm("P3 # c\n2 1\n# x\n15\n15 0 0 0 15 0\n").unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(parse_ppm("P3 1 1 255 1 2").is_err());
        assert!(parse_ppm("P6 1 1 255").is_err());
    }
}
