//! Planar 3-channel byte images.

use crate::error::{Error, Result};

/// A `3 x height x width` RGB image stored channel-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    /// Builds from channel-major bytes.
    pub fn from_planar(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("3x{height}x{width} = {} bytes", 3 * width * height),
                found: format!("{} bytes", data.len()),
            });
        }
        Ok(RgbImage { width, height, data })
    }

    /// Builds from interleaved `RGBRGB...` bytes (PPM order).
    pub fn from_interleaved(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        let mut img = RgbImage::black(width, height);
        if rgb.len() != 3 * width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} interleaved bytes", 3 * width * height),
                found: format!("{} bytes", rgb.len()),
            });
        }
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            let (y, x) = (p / width, p % width);
            img.set(x, y, [px[0], px[1], px[2]]);
        }
        Ok(img)
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                out.extend_from_slice(&self.get(x, y));
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn planar(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut out = RgbImage::black(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_interleaved());
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::ShapeMismatch {
            expected: "binary PPM (P6, maxval 255)".into(),
            found: why.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("not P6/255"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
        RgbImage::from_interleaved(w, h, raster)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::black(5, 3);
        img.set(4, 2, [1, 2, 3]);
        img.set(0, 1, [255, 0, 9]);
        let back = RgbImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
        assert!(img.to_ppm().starts_with(b"P6\n5 3\n255\n"));
    }

    #[test]
    fn crop_copies_window() {
        let mut img = RgbImage::black(6, 6);
        img.set(4, 5, [7, 7, 7]);
        let c = img.crop(3, 3, 3, 3);
        assert_eq!(c.get(1, 2), [7, 7, 7]);
        assert_eq!(c.get(0, 0), [0, 0, 0]);
    }

    #[test]
    fn planar_length_is_checked() {
        assert!(RgbImage::from_planar(2, 2, vec![0; 11]).is_err());
    }
}
