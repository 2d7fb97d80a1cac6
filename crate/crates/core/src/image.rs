//! 8-bit grayscale images, binary PGM I/O and fixed-point resampling.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error("crop {want_w}x{want_h} larger than source {src_w}x{src_h}")]
    CropTooLarge { want_w: usize, want_h: usize, src_w: usize, src_h: usize },
    #[error("pixel buffer of {got} bytes does not match {width}x{height}")]
    BadBuffer { width: usize, height: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BadBuffer { width, height, got: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage, ImageError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(ImageError::CropTooLarge { want_w: w, want_h: h, src_w: self.width, src_h: self.height });
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Ok(GrayImage { width: w, height: h, pixels })
    }

    /// Centered crop without resampling.
    pub fn crop_center(&self, w: usize, h: usize) -> Result<GrayImage, ImageError> {
        if w > self.width || h > self.height {
            return Err(ImageError::CropTooLarge { want_w: w, want_h: h, src_w: self.width, src_h: self.height });
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        parse_pgm(bytes)
    }

    pub fn to_pgm(&self, comment: Option<&str>) -> Vec<u8> {
        let mut out = b"P5\n".to_vec();
        if let Some(c) = comment {
            for line in c.lines() {
                out.extend_from_slice(format!("# {line}\n").as_bytes());
            }
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        parse_pgm(&fs::read(path)?)
    }

    pub fn write_pgm(&self, path: &Path, comment: Option<&str>) -> Result<(), ImageError> {
        fs::File::create(path)?.write_all(&self.to_pgm(comment))?;
        Ok(())
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let bad = |m: &str| ImageError::Malformed(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Ok(GrayImage { width, height, pixels: bytes[pos..pos + n].to_vec() })
}

/// Bilinear resize with 8.8 fixed-point interpolation weights and
/// pixel-centre alignment; integer-only, so results are platform independent.
pub fn resize_bilinear(src: &GrayImage, width: usize, height: usize) -> GrayImage {
    // source coordinate of destination pixel i, in 1/256 pixel units
    let coords = |dst: usize, srcn: usize| -> Vec<(usize, usize, u32)> {
        (0..dst)
            .map(|i| {
                let num = ((2 * i + 1) * srcn) as i64 * 128 / dst as i64 - 128;
                let num = num.clamp(0, ((srcn - 1) * 256) as i64);
                let i0 = (num / 256) as usize;
                let i1 = (i0 + 1).min(srcn - 1);
                (i0, i1, (num % 256) as u32)
            })
            .collect()
    };
    let xs = coords(width, src.width);
    let ys = coords(height, src.height);
    let mut pixels = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (src.row(y0), src.row(y1));
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] as u32 * (256 - fx) + r0[x1] as u32 * fx;
            let bot = r1[x0] as u32 * (256 - fx) + r1[x1] as u32 * fx;
            let v = (top * (256 - fy) + bot * fy + (1 << 15)) >> 16;
            pixels.push(v as u8);
        }
    }
    GrayImage { width, height, pixels }
}
