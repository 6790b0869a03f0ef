//! Training data: labelled 2-D mixture samples and procedural 16x16 shapes.

use rand::Rng as _;

use crate::predictor::{Component, GaussianMixture};
use crate::rng::{self, Rng};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// A labelled source of clean samples `x_0`.
pub trait Dataset {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> (Vec<f64>, usize);
}

impl Dataset for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn num_classes(&self) -> usize {
        self.len()
    }

    fn sample(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        GaussianMixture::sample(self, rng)
    }
}

/// Style of a procedural image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle = 0,
    Disc = 1,
}

/// Axis-aligned rectangles (class 0) and discs (class 1) on a dark
/// background, pixel values mapped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShapesDataset;

impl ShapesDataset {
    /// One image of the given style, pixels in `[0, 1]`.
    pub fn render(shape: Shape, rng: &mut Rng) -> Vec<f64> {
        let n = IMAGE_SIDE as i64;
        let intensity = rng.random_range(0.6..=1.0);
        let mut px = vec![0.0; IMAGE_PIXELS];
        match shape {
            Shape::Rectangle => {
                let w = rng.random_range(4..=11);
                let h = rng.random_range(4..=11);
                let x0 = rng.random_range(0..=n - w);
                let y0 = rng.random_range(0..=n - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        px[(y * n + x) as usize] = intensity;
                    }
                }
            }
            Shape::Disc => {
                let r: f64 = rng.random_range(2.5..=5.5);
                let cx: f64 = rng.random_range(r..=(n as f64 - r));
                let cy: f64 = rng.random_range(r..=(n as f64 - r));
                for y in 0..n {
                    for x in 0..n {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            px[(y * n + x) as usize] = intensity;
                        }
                    }
                }
            }
        }
        px
    }

    /// Fraction of the bright pixels' bounding box that is bright. Close to
    /// 1 for rectangles and near `pi / 4` for discs. Takes signed pixels.
    pub fn fill_ratio(x: &[f64]) -> f64 {
        let n = IMAGE_SIDE;
        let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (n, 0, n, 0);
        let mut bright = 0usize;
        for (i, &v) in x.iter().enumerate().take(IMAGE_PIXELS) {
            if v > 0.0 {
                let (r, c) = (i / n, i % n);
                x_lo = x_lo.min(c);
                x_hi = x_hi.max(c);
                y_lo = y_lo.min(r);
                y_hi = y_hi.max(r);
                bright += 1;
            }
        }
        if bright == 0 {
            return 0.0;
        }
        bright as f64 / ((x_hi - x_lo + 1) * (y_hi - y_lo + 1)) as f64
    }

    /// One-dimensional Gaussian mixture over [`ShapesDataset::fill_ratio`],
    /// one component per style, fitted from `n` renders each. Scores how
    /// far an edit moved an image toward a style.
    pub fn reference_mixture(n: usize, seed: u64) -> GaussianMixture {
        let mut rng = rng::seeded(seed);
        let components = [Shape::Rectangle, Shape::Disc]
            .iter()
            .map(|&shape| {
                let feats: Vec<f64> = (0..n)
                    .map(|_| {
                        let img: Vec<f64> = Self::render(shape, &mut rng)
                            .into_iter()
                            .map(|p| 2.0 * p - 1.0)
                            .collect();
                        Self::fill_ratio(&img)
                    })
                    .collect();
                let mean = feats.iter().sum::<f64>() / n as f64;
                let var = feats.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n as f64;
                Component {
                    weight: 0.5,
                    mean: vec![mean],
                    var: vec![var + 1e-3],
                }
            })
            .collect();
        GaussianMixture::new(components).expect("two equal weights sum to one")
    }
}

impl Dataset for ShapesDataset {
    fn dim(&self) -> usize {
        IMAGE_PIXELS
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn sample(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        let shape = if rng.random_bool(0.5) {
            Shape::Disc
        } else {
            Shape::Rectangle
        };
        let img = Self::render(shape, rng);
        (
            img.into_iter().map(|p| 2.0 * p - 1.0).collect(),
            shape as usize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_in_range_and_nonempty() {
        let mut r = rng::seeded(1);
        for _ in 0..50 {
            let (x, label) = ShapesDataset.sample(&mut r);
            assert!(label < 2);
            assert_eq!(x.len(), IMAGE_PIXELS);
            assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(x.iter().filter(|&&v| v > -1.0).count() >= 9);
        }
    }

    #[test]
    fn reference_mixture_separates_styles() {
        let g = ShapesDataset::reference_mixture(400, 7);
        let mut r = rng::seeded(99);
        let mut correct = 0;
        for _ in 0..100 {
            let (x, label) = ShapesDataset.sample(&mut r);
            let post = g
                .responsibilities(&[ShapesDataset::fill_ratio(&x)], 1.0)
                .unwrap();
            if post[label] > 0.5 {
                correct += 1;
            }
        }
        assert!(correct >= 95, "only {correct}/100 classified");
    }
}
