//! Synthetic logo galleries with planted near-duplicate groups.
//!
//! Each group has a base design made of a few coloured primitives on a white
//! canvas. Group members redraw that design shifted, rescaled and with mild
//! colour jitter.

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::MemoryImages;
use crate::retrieval::GroundTruth;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle {
        cx: f32,
        cy: f32,
        r: f32,
    },
    Ring {
        cx: f32,
        cy: f32,
        r: f32,
        width: f32,
    },
    Rect {
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
    },
    Triangle {
        p: [(f32, f32); 3],
    },
    Bar {
        cx: f32,
        cy: f32,
        len: f32,
        thick: f32,
        angle: f32,
    },
}

#[derive(Debug, Clone)]
struct Design {
    parts: Vec<(Shape, [u8; 3])>,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let c = |rng: &mut ChaCha8Rng| rng.random_range(0.25f32..0.75);
        match rng.random_range(0..5) {
            0 => Shape::Circle {
                cx: c(rng),
                cy: c(rng),
                r: rng.random_range(0.08..0.22),
            },
            1 => Shape::Ring {
                cx: c(rng),
                cy: c(rng),
                r: rng.random_range(0.12..0.25),
                width: rng.random_range(0.03..0.07),
            },
            2 => {
                let (x, y) = (c(rng), c(rng));
                let (w, h) = (rng.random_range(0.08..0.25), rng.random_range(0.08..0.25));
                Shape::Rect {
                    x0: x - w,
                    y0: y - h,
                    x1: x + w,
                    y1: y + h,
                }
            }
            3 => {
                let (x, y) = (c(rng), c(rng));
                let s = rng.random_range(0.12..0.28);
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                let p = [0.0f32, 1.0, 2.0].map(|k| {
                    let t = a + k * std::f32::consts::TAU / 3.0;
                    (x + s * t.cos(), y + s * t.sin())
                });
                Shape::Triangle { p }
            }
            _ => Shape::Bar {
                cx: c(rng),
                cy: c(rng),
                len: rng.random_range(0.2..0.45),
                thick: rng.random_range(0.03..0.08),
                angle: rng.random_range(0.0..std::f32::consts::PI),
            },
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Ring { cx, cy, r, width } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d <= r && d >= r - width
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let s = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
            Shape::Bar {
                cx,
                cy,
                len,
                thick,
                angle,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= len / 2.0 && across.abs() <= thick / 2.0
            }
        }
    }
}

impl Design {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=4);
        let parts = (0..n)
            .map(|_| {
                let colour = [0, 1, 2].map(|_| rng.random_range(0u8..200));
                (Shape::random(rng), colour)
            })
            .collect();
        Self { parts }
    }

    /// Render with the design scaled by `scale` about the canvas centre and
    /// shifted by `(dx, dy)` (fractions of the canvas).
    fn render(&self, size: u32, scale: f32, dx: f32, dy: f32, jitter: [i16; 3]) -> RgbImage {
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let inv = 1.0 / size as f32;
        for (px, py, pixel) in img.enumerate_pixels_mut() {
            let u = (px as f32 + 0.5) * inv;
            let v = (py as f32 + 0.5) * inv;
            // map back into design coordinates
            let x = (u - 0.5 - dx) / scale + 0.5;
            let y = (v - 0.5 - dy) / scale + 0.5;
            for (shape, colour) in &self.parts {
                if shape.contains(x, y) {
                    let c = [0, 1, 2].map(|k| (colour[k] as i16 + jitter[k]).clamp(0, 255) as u8);
                    *pixel = Rgb(c);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGallery {
    /// `(id, image)` in generation order.
    pub images: Vec<(String, RgbImage)>,
    pub groups: Vec<Vec<String>>,
}

impl SyntheticGallery {
    /// `groups x per_group` images of `size x size` pixels.
    pub fn generate(groups: usize, per_group: usize, size: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(groups * per_group);
        let mut members = Vec::with_capacity(groups);
        for g in 0..groups {
            let design = Design::random(&mut rng);
            let mut ids = Vec::with_capacity(per_group);
            for v in 0..per_group {
                let scale = rng.random_range(0.7f32..1.1);
                let dx = rng.random_range(-0.12f32..0.12);
                let dy = rng.random_range(-0.12f32..0.12);
                let jitter = [0, 1, 2].map(|_| rng.random_range(-20i16..=20));
                let id = format!("g{g:03}_v{v:02}");
                images.push((id.clone(), design.render(size, scale, dx, dy, jitter)));
                ids.push(id);
            }
            members.push(ids);
        }
        Self {
            images,
            groups: members,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::from_groups(self.groups.iter().map(|g| g.iter().cloned()))
    }

    pub fn to_memory(&self) -> MemoryImages {
        let mut m = MemoryImages::new();
        for (id, img) in &self.images {
            m.insert(id.clone(), DynamicImage::ImageRgb8(img.clone()));
        }
        m
    }

    /// Write `<id>.png` files into `dir`.
    pub fn save_pngs(&self, dir: &std::path::Path) -> crate::Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        for (id, img) in &self.images {
            let path = dir.join(format!("{id}.png"));
            img.save(&path).map_err(|e| crate::Error::Input {
                id: id.clone(),
                msg: format!("cannot write {}: {e}", path.display()),
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_grouped() {
        let a = SyntheticGallery::generate(3, 4, 64, 11);
        let b = SyntheticGallery::generate(3, 4, 64, 11);
        assert_eq!(a.images.len(), 12);
        assert_eq!(a.groups.len(), 3);
        assert!(a
            .images
            .iter()
            .zip(&b.images)
            .all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        let gt = a.ground_truth();
        assert_eq!(gt.relevant("g001_v02").unwrap().len(), 4);
    }

    #[test]
    fn designs_are_not_blank() {
        let g = SyntheticGallery::generate(5, 2, 64, 2);
        for (id, img) in &g.images {
            let ink = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
            assert!(ink > 50, "{id} has only {ink} inked pixels");
        }
    }
}
