//! Standard CIFAR augmentation: zero-pad, random crop back to the original
//! size, random horizontal flip.

use rand::Rng;

use crate::tensor::Element;

/// Pads `[C, H, W]` image `x` by `pad` on every side, crops an `H×W` window
/// at `offset = (dy, dx)` into the padded image, and optionally mirrors it.
pub fn augment_with<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    offset: (usize, usize),
    flip: bool,
) -> Vec<T> {
    let (dy, dx) = offset;
    assert!(
        dy <= 2 * pad && dx <= 2 * pad,
        "crop offset {offset:?} outside padding {pad}"
    );
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xo in 0..w {
                let col = if flip { w - 1 - xo } else { xo };
                let sx = (col + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + xo] = x[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// [`augment_with`] with a uniform crop offset and a fair-coin flip.
pub fn augment<T: Element, R: Rng + ?Sized>(x: &[T], c: usize, h: usize, w: usize, pad: usize, rng: &mut R) -> Vec<T> {
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let flip = rng.random::<bool>();
    augment_with(x, c, h, w, pad, (dy, dx), flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn ramp(c: usize, h: usize, w: usize) -> Vec<f64> {
        (0..c * h * w).map(|i| i as f64 + 1.0).collect()
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let x = ramp(3, 5, 4);
        assert_eq!(augment_with(&x, 3, 5, 4, 2, (2, 2), false), x);
    }

    #[test]
    fn shifted_crop_exposes_padding() {
        let x = ramp(1, 3, 3);
        let y = augment_with(&x, 1, 3, 3, 1, (0, 0), false);
        assert_eq!(y, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = ramp(2, 4, 4);
        let once = augment_with(&x, 2, 4, 4, 4, (4, 4), true);
        assert_eq!(once[0], x[3]);
        assert_eq!(augment_with(&once, 2, 4, 4, 4, (4, 4), true), x);
    }

    #[test]
    fn random_augment_preserves_shape_and_values() {
        let x = ramp(3, 8, 8);
        let mut rng = stream(5, Stream::Augment);
        for _ in 0..20 {
            let y = augment(&x, 3, 8, 8, 4, &mut rng);
            assert_eq!(y.len(), x.len());
            assert!(y.iter().all(|v| *v == 0.0 || x.contains(v)));
        }
    }
}
