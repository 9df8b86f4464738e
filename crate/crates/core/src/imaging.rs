//! Single-channel floating-point images.
//!
//! Pixel `(i, j)` is sampled at continuous coordinate `(i, j)`, so landmark
//! coordinates and pixel indices share one frame.

use std::path::Path;

use crate::error::Result;
use crate::schema::Point;

/// Background value for pixels sampled outside the source (white paper).
pub const PAPER_WHITE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "pixel buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn put(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    fn get_or(&self, x: i64, y: i64, fill: f64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            fill
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear interpolation; taps outside the image read `fill`.
    pub fn sample_bilinear(&self, p: Point, fill: f64) -> f64 {
        let x0 = p.x.floor();
        let y0 = p.y.floor();
        let fx = p.x - x0;
        let fy = p.y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = self.get_or(x0, y0, fill);
        let v10 = self.get_or(x0 + 1, y0, fill);
        let v01 = self.get_or(x0, y0 + 1, fill);
        let v11 = self.get_or(x0 + 1, y0 + 1, fill);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        top + (bottom - top) * fy
    }

    /// Builds a `width × height` image whose pixel `q` is this image sampled
    /// at `source_of(q)`.
    pub fn warp(
        &self,
        width: usize,
        height: usize,
        fill: f64,
        source_of: impl Fn(Point) -> Point,
    ) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| {
            self.sample_bilinear(source_of(Point::new(x as f64, y as f64)), fill)
        })
    }

    /// Copies the pixel rectangle `[x0, x0+w) × [y0, y0+h)`, clipped to the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        let x1 = (x0 + w).min(self.width);
        let y1 = (y0 + h).min(self.height);
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        GrayImage::from_fn(x1 - x0, y1 - y0, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GrayImage> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(GrayImage::from_vec(w as usize, h as usize, data))
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_luma8()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}
