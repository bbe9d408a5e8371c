//! Anti-aliased grayscale rasterization on a square canvas.

use alloc::vec;
use alloc::vec::Vec;

/// A row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Zeroes columns `start..end`.
    pub fn blank_columns(&mut self, start: usize, end: usize) {
        for row in self.pixels.chunks_mut(self.width) {
            row[start.min(self.width)..end.min(self.width)].fill(0.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Maps world coordinates in `[-extent, extent]²` (y up) onto an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub extent: f64,
}

impl Canvas {
    fn pixel_size(&self) -> f64 {
        2.0 * self.extent / self.size as f64
    }

    fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.pixel_size();
        (
            -self.extent + (col as f64 + 0.5) * p,
            self.extent - (row as f64 + 0.5) * p,
        )
    }

    /// Draws a shape given its world-space distance function; coverage is
    /// approximated as `clamp(0.5 − d/pixel, 0, 1)` and composited by `max`.
    fn draw(&self, img: &mut Image, intensity: f32, dist: impl Fn(f64, f64) -> f64) {
        let p = self.pixel_size();
        for row in 0..self.size {
            for col in 0..self.size {
                let (x, y) = self.pixel_center(row, col);
                let cover = (0.5 - dist(x, y) / p).clamp(0.0, 1.0) as f32;
                let v = &mut img.pixels[row * self.size + col];
                *v = v.max(cover * intensity);
            }
        }
    }

    pub fn disc(&self, img: &mut Image, center: (f64, f64), radius: f64, intensity: f32) {
        self.draw(img, intensity, |x, y| {
            libm::hypot(x - center.0, y - center.1) - radius
        });
    }

    pub fn segment(
        &self,
        img: &mut Image,
        from: (f64, f64),
        to: (f64, f64),
        half_width: f64,
        intensity: f32,
    ) {
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let len2 = dx * dx + dy * dy;
        self.draw(img, intensity, |x, y| {
            let t = if len2 > 0.0 {
                (((x - from.0) * dx + (y - from.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            libm::hypot(x - from.0 - t * dx, y - from.1 - t * dy) - half_width
        });
    }

    pub fn blank(&self) -> Image {
        Image::blank(self.size, self.size)
    }
}
