//! Plain-array interpolation helpers shared by the tensor resampler, the
//! dataset pipeline, and metric evaluation.
//!
//! Bilinear weights use the half-pixel-center convention: source coordinate
//! `(dst + 0.5) * in/out - 0.5`, clamped to the valid range. Rows of the
//! resulting weight matrix sum to one, so resampling a constant map returns
//! the same constant.

use ndarray::{Array2, Array3};

/// Row-stochastic interpolation matrix of shape `(out_len, in_len)` stored
/// row-major. Each output sample mixes at most two adjacent input samples.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    assert!(in_len >= 1 && out_len >= 1);
    let mut m = vec![0.0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[o * in_len + lo] += 1.0 - frac;
        m[o * in_len + hi] += frac;
    }
    m
}

/// Index map for nearest-neighbour resizing with half-pixel centers.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    assert!(in_len >= 1 && out_len >= 1);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).round();
            src.clamp(0.0, in_len as f64 - 1.0) as usize
        })
        .collect()
}

/// Bilinear resize of a single-channel map.
pub fn resize_bilinear(a: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    if (h, w) == (out_h, out_w) {
        return a.clone();
    }
    let wh = bilinear_weights(h, out_h);
    let ww = bilinear_weights(w, out_w);
    let mut rows = Array2::<f64>::zeros((out_h, w));
    for o in 0..out_h {
        for i in 0..h {
            let weight = wh[o * h + i];
            if weight != 0.0 {
                for c in 0..w {
                    rows[(o, c)] += weight * a[(i, c)];
                }
            }
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for o in 0..out_w {
        for i in 0..w {
            let weight = ww[o * w + i];
            if weight != 0.0 {
                for r in 0..out_h {
                    out[(r, o)] += weight * rows[(r, i)];
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a single-channel map (used for masks so the
/// result stays binary).
pub fn resize_nearest(a: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    if (h, w) == (out_h, out_w) {
        return a.clone();
    }
    let ih = nearest_indices(h, out_h);
    let iw = nearest_indices(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| a[(ih[r], iw[c])])
}

/// Bilinear resize of a channel-first image `(c, h, w)`.
pub fn resize_bilinear_chw(a: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, _, _) = a.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = resize_bilinear(&a.index_axis(ndarray::Axis(0), ch).to_owned(), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn weights_rows_sum_to_one() {
        for (i, o) in [(11, 22), (44, 22), (7, 5), (1, 4), (5, 1)] {
            let m = bilinear_weights(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{i}->{o} row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn constant_map_resizes_to_constant() {
        let a = Array2::from_elem((11, 11), 3.25);
        let up = resize_bilinear(&a, 22, 22);
        assert!(up.iter().all(|v| (v - 3.25).abs() < 1e-12));
        let down = resize_bilinear(&a, 5, 7);
        assert!(down.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn nearest_keeps_values_binary() {
        let a = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let up = resize_nearest(&a, 5, 5);
        assert!(up.iter().all(|v| *v == 0.0 || *v == 1.0));
    }
}
