//! RGB images, a z-buffered triangle rasteriser and keypoint overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom;

/// Row-major `height x width x 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`); outside the image yields `fill`.
    pub fn sample(&self, x: f64, y: f64, fill: [f64; 3]) -> [f64; 3] {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let (ax, ay) = (fx - x0, fy - y0);
        let mut out = [0.0; 3];
        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
            for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                let px = x0 as i64 + dx;
                let py = y0 as i64 + dy;
                let c = if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height {
                    self.get(px as usize, py as usize)
                } else {
                    fill
                };
                for k in 0..3 {
                    out[k] += wx * wy * c[k];
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Bilinear resize to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let c = self.sample((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, [0.0; 3]);
                out.set(x, y, c);
            }
        }
        out
    }
}

/// Flat-shaded render of a mesh given in image coordinates: `x`, `y` in
/// pixels and `z` growing away from the viewer.
pub fn render_mesh(
    vertices: &[[f64; 3]],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    background: [f64; 3],
    color: [f64; 3],
) -> Image {
    let mut img = Image::filled(width, height, background);
    let mut depth = vec![f64::INFINITY; width * height];
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i]);
        let n = geom::normalize(geom::face_normal(a, b, c));
        let shade = 0.25 + 0.75 * n[2].abs();
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let y0 = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let x1 = (a[0].max(b[0]).max(c[0]).ceil() as i64).min(width as i64 - 1);
        let y1 = (a[1].max(b[1]).max(c[1]).ceil() as i64).min(height as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
                let w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let i = y * width + x;
                if z < depth[i] {
                    depth[i] = z;
                    img.set(x, y, color.map(|v| v * shade));
                }
            }
        }
    }
    img
}

pub fn draw_line(img: &mut Image, a: [f64; 2], b: [f64; 2], rgb: [f64; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

pub fn draw_disc(img: &mut Image, c: [f64; 2], radius: f64, rgb: [f64; 3]) {
    let r = radius.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) > radius * radius {
                continue;
            }
            let x = c[0].floor() as i64 + dx;
            let y = c[1].floor() as i64 + dy;
            if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                img.set(x as usize, y as usize, rgb);
            }
        }
    }
}

/// Draws mesh edges (green), skeleton bones (white) and keypoints (red)
/// on a copy of `base`.
pub fn overlay(
    base: &Image,
    keypoints: Option<&[[f64; 2]]>,
    bones: &[(usize, usize)],
    wireframe: Option<(&[[f64; 2]], &[(usize, usize)])>,
) -> Image {
    let mut img = base.clone();
    if let Some((pts, edges)) = wireframe {
        for &(i, j) in edges {
            draw_line(&mut img, pts[i], pts[j], [0.1, 0.8, 0.2]);
        }
    }
    if let Some(kp) = keypoints {
        for &(i, j) in bones {
            if i < kp.len() && j < kp.len() {
                draw_line(&mut img, kp[i], kp[j], [1.0, 1.0, 1.0]);
            }
        }
        for p in kp {
            draw_disc(&mut img, *p, 2.0, [0.9, 0.1, 0.1]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_covers_expected_pixels() {
        let v = [[2.0, 2.0, 1.0], [6.0, 2.0, 1.0], [6.0, 6.0, 1.0], [2.0, 6.0, 1.0]];
        let f = [[0, 1, 2], [0, 2, 3]];
        let img = render_mesh(&v, &f, 8, 8, [0.0; 3], [1.0; 3]);
        let lit = (0..64).filter(|i| img.data[i * 3] > 0.0).count();
        assert_eq!(lit, 16);
        assert_eq!(img.get(3, 3), [1.0; 3]);
        assert_eq!(img.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn nearer_triangle_wins() {
        // the near triangle is tilted, so it shades darker than the far one
        let v = [
            [0.0, 0.0, 5.0],
            [8.0, 0.0, 5.0],
            [0.0, 8.0, 5.0],
            [0.0, 0.0, 1.0],
            [8.0, 0.0, 1.0],
            [0.0, 8.0, 4.0],
        ];
        let red = [1.0, 0.0, 0.0];
        let near = render_mesh(&v, &[[3, 4, 5]], 8, 8, [0.0; 3], red);
        let both = render_mesh(&v, &[[0, 1, 2], [3, 4, 5]], 8, 8, [0.0; 3], red);
        let swapped = render_mesh(&v, &[[3, 4, 5], [0, 1, 2]], 8, 8, [0.0; 3], red);
        assert_eq!(both, swapped);
        assert_eq!(near, both);
        assert!(near.get(1, 1)[0] < 1.0);
    }

    #[test]
    fn png_round_trip() {
        let mut img = Image::filled(5, 3, [0.2, 0.4, 0.6]);
        img.set(4, 2, [1.0, 0.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn bilinear_sampling() {
        let mut img = Image::filled(2, 1, [0.0; 3]);
        img.set(1, 0, [1.0; 3]);
        assert_eq!(img.sample(1.0, 0.5, [0.0; 3]), [0.5; 3]);
        assert_eq!(img.sample(0.5, 0.5, [0.0; 3]), [0.0; 3]);
        assert_eq!(img.resized(2, 1), img);
    }
}
