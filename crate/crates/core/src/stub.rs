//! Deterministic procedural stand-in for a frozen text-guided stylizer.
//!
//! The style is keyed by `hash(prompt, seed)`: a channel-monotone palette
//! gradient map blended with the input, an oriented sinusoidal stroke
//! texture, and Sobel edge darkening. Structure survives because the palette
//! is monotone in every channel and the original is mixed back in.

use alloc::vec::Vec;

use rand::Rng;

use crate::image::ImageTensor;
use crate::rng::{derive_seed, fnv1a, seeded};
use crate::tensor::Tensor;

pub const STUB_GENERATOR_ID: &str = "procedural-stub-v1";

const PALETTE_SIZE: usize = 4;
const PALETTE_MIX: f64 = 0.5;
const STROKE_AMPLITUDE: f64 = 0.05;
const EDGE_WEIGHT: f64 = 0.25;

/// Parameters derived from `(prompt, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StubStyle {
    /// Dark-to-light colors, non-decreasing in every channel.
    pub palette: [[f64; 3]; PALETTE_SIZE],
    pub angle: f64,
    /// Stroke cycles across the image.
    pub frequency: f64,
    pub phase: f64,
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl StubStyle {
    pub fn derive(prompt: &str, seed: u64) -> Self {
        let key = derive_seed(seed, "stub") ^ fnv1a(prompt.as_bytes());
        let mut rng = seeded(key);
        let mut palette = [[0.0; 3]; PALETTE_SIZE];
        for c in palette.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.random_range(-0.9..0.9);
            }
        }
        // Sorting every channel independently makes the gradient map
        // monotone per channel, so local contrast keeps its sign.
        #[allow(clippy::needless_range_loop)]
        for c in 0..3 {
            let mut col: [f64; PALETTE_SIZE] = core::array::from_fn(|i| palette[i][c]);
            col.sort_by(f64::total_cmp);
            for (i, v) in col.into_iter().enumerate() {
                palette[i][c] = v;
            }
        }
        Self {
            palette,
            angle: rng.random_range(0.0..core::f64::consts::PI),
            frequency: rng.random_range(3.0..8.0),
            phase: rng.random_range(0.0..core::f64::consts::TAU),
        }
    }

    fn gradient(&self, t: f64) -> [f64; 3] {
        let x = t.clamp(0.0, 1.0) * (PALETTE_SIZE - 1) as f64;
        let i = (libm::floor(x) as usize).min(PALETTE_SIZE - 2);
        let f = x - i as f64;
        let (a, b) = (self.palette[i], self.palette[i + 1]);
        [
            a[0] + f * (b[0] - a[0]),
            a[1] + f * (b[1] - a[1]),
            a[2] + f * (b[2] - a[2]),
        ]
    }
}

pub fn stub_stylize(img: &ImageTensor, prompt: &str, seed: u64) -> ImageTensor {
    let style = StubStyle::derive(prompt, seed);
    let (h, w) = (img.height(), img.width());
    let p = h * w;
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let lum: Vec<f64> = (0..p).map(|i| luminance([r[i], g[i], b[i]])).collect();

    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        lum[y * w + x]
    };
    let (ca, sa) = (libm::cos(style.angle), libm::sin(style.angle));
    let scale = core::f64::consts::TAU * style.frequency / w.max(1) as f64;
    let mut out = alloc::vec![0.0; 3 * p];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (yi, xi) = (y as isize, x as isize);
            let gx = (at(yi - 1, xi + 1) + 2.0 * at(yi, xi + 1) + at(yi + 1, xi + 1))
                - (at(yi - 1, xi - 1) + 2.0 * at(yi, xi - 1) + at(yi + 1, xi - 1));
            let gy = (at(yi + 1, xi - 1) + 2.0 * at(yi + 1, xi) + at(yi + 1, xi + 1))
                - (at(yi - 1, xi - 1) + 2.0 * at(yi - 1, xi) + at(yi - 1, xi + 1));
            let edge = (libm::sqrt(gx * gx + gy * gy) / 8.0).min(1.0);
            let stroke = STROKE_AMPLITUDE
                * libm::sin(scale * (x as f64 * ca + y as f64 * sa) + style.phase);
            let mapped = style.gradient((lum[i] + 1.0) / 2.0);
            let orig = [r[i], g[i], b[i]];
            for c in 0..3 {
                let v = PALETTE_MIX * mapped[c] + (1.0 - PALETTE_MIX) * orig[c] + stroke
                    - EDGE_WEIGHT * edge;
                out[c * p + i] = v.clamp(-1.0, 1.0);
            }
        }
    }
    ImageTensor::new(Tensor::new(&[3, h, w], out)).expect("stub output is finite")
}
