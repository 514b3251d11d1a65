//! Procedural "photograph" scenes used as the bundled fixture corpus.

use rand::Rng;

use crate::image::ImageTensor;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Scene `index` at `size × size`: a two-color sky/ground gradient with a
/// few discs and boxes. Deterministic in `(index, size)` up to resampling.
pub fn procedural_scene(index: u64, size: usize) -> ImageTensor {
    let mut rng = seeded(derive_seed(index, "scene"));
    let color = |rng: &mut crate::rng::SeededRng| -> [f64; 3] {
        [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]
    };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let horizon: f64 = rng.random_range(0.3..0.7);
    let n_shapes = rng.random_range(2..5);
    let mut shapes = alloc::vec::Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let disc: bool = rng.random_bool(0.5);
        let cx: f64 = rng.random_range(0.15..0.85);
        let cy: f64 = rng.random_range(0.15..0.85);
        let r: f64 = rng.random_range(0.08..0.25);
        shapes.push((disc, cx, cy, r, color(&mut rng)));
    }
    let p = size * size;
    let mut data = alloc::vec![0.0; 3 * p];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut px = if v < horizon {
                let t = v / horizon;
                [0, 1, 2].map(|c| top[c] * (1.0 - 0.4 * t))
            } else {
                let t = (v - horizon) / (1.0 - horizon);
                [0, 1, 2].map(|c| bottom[c] * (0.6 + 0.4 * t))
            };
            for &(disc, cx, cy, r, col) in &shapes {
                let inside = if disc {
                    (u - cx) * (u - cx) + (v - cy) * (v - cy) < r * r
                } else {
                    libm::fabs(u - cx) < r && libm::fabs(v - cy) < 0.6 * r
                };
                if inside {
                    px = col;
                }
            }
            for c in 0..3 {
                data[c * p + y * size + x] = px[c].clamp(-1.0, 1.0);
            }
        }
    }
    ImageTensor::new(Tensor::new(&[3, size, size], data)).expect("finite scene")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(procedural_scene(3, 16), procedural_scene(3, 16));
        assert_ne!(procedural_scene(3, 16), procedural_scene(4, 16));
        assert!(procedural_scene(1, 8).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
