//! Distance and similarity kernels, and bilinear resampling of score maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ScoreMap;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

pub fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance.
pub fn l2_dist<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("l2 of lengths {} and {}", a.len(), b.len())));
    }
    Ok(squared_l2(a, b).sqrt())
}

/// Source coordinate of output index `i` under align-corners sampling.
fn source_coord(i: usize, out: usize, src: usize) -> f64 {
    if out <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Align-corners bilinear upsampling. Corner pixels of the output equal the
/// corner values of the input; the normalized flag carries over.
pub fn bilinear_upsample<T: Scalar>(map: &ScoreMap<T>, out_h: usize, out_w: usize) -> Result<ScoreMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("zero-size upsampling target".into()));
    }
    let (h, w) = (map.height(), map.width());
    if out_h < h || out_w < w {
        return Err(Error::InvalidArgument(format!(
            "upsampling target {out_h}x{out_w} smaller than source {h}x{w}"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(map.clone());
    }
    // Per-column taps are shared by every output row.
    let cols: Vec<(usize, usize, T)> = (0..out_w)
        .map(|x| {
            let sx = source_coord(x, out_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, T::of(sx - x0 as f64))
        })
        .collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = source_coord(y, out_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = T::of(sy - y0 as f64);
        for &(x0, x1, fx) in &cols {
            let top = map.get(y0, x0) + (map.get(y0, x1) - map.get(y0, x0)) * fx;
            let bottom = map.get(y1, x0) + (map.get(y1, x1) - map.get(y1, x0)) * fx;
            values.push(top + (bottom - top) * fy);
        }
    }
    if map.is_normalized() {
        for v in &mut values {
            *v = v.max(T::zero()).min(T::one());
        }
        ScoreMap::new_normalized(out_h, out_w, values)
    } else {
        ScoreMap::new(out_h, out_w, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c: f64 = cosine_sim(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_dist(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(l2_dist(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(l2_dist(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn l2_matches_sqrt_of_sum_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let mut acc = 0.0;
            for i in 0..8 {
                acc += (a[i] - b[i]) * (a[i] - b[i]);
            }
            assert!((l2_dist(&a, &b).unwrap() - acc.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsample_constant_and_midpoint() {
        let c = ScoreMap::constant(3, 2, 0.25).unwrap();
        let up = bilinear_upsample(&c, 7, 5).unwrap();
        assert!(up.values().iter().all(|&v| v == 0.25));

        let m = ScoreMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&m, 1, 3).unwrap();
        assert_eq!(up.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn upsample_matches_per_pixel_formula() {
        // f(y, x) = sum of corner values weighted by (1-u)(1-v), (1-u)v, u(1-v), uv
        let src = [0.3, -1.2, 2.5, 0.7];
        let m = ScoreMap::new(2, 2, src.to_vec()).unwrap();
        let up = bilinear_upsample(&m, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let u = y as f64 / 3.0;
                let v = x as f64 / 3.0;
                let expect = src[0] * (1.0 - u) * (1.0 - v)
                    + src[1] * (1.0 - u) * v
                    + src[2] * u * (1.0 - v)
                    + src[3] * u * v;
                assert!((up.get(y, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_zero_and_shrinking_targets() {
        let m = ScoreMap::constant(2, 2, 1.0).unwrap();
        assert!(bilinear_upsample(&m, 0, 4).is_err());
        assert!(bilinear_upsample(&m, 1, 4).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            lambda in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_sim(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_sim(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            prop_assert!((cosine_sim(&scaled, &b).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn upsample_keeps_corners_and_range(
            h in 1usize..5, w in 1usize..5, dh in 0usize..6, dw in 0usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let vals: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
            let m = ScoreMap::new(h, w, vals).unwrap();
            let up = bilinear_upsample(&m, h + dh, w + dw).unwrap();
            let (oh, ow) = (h + dh, w + dw);
            prop_assert_eq!(up.get(0, 0), m.get(0, 0));
            prop_assert_eq!(up.get(0, ow - 1), m.get(0, w - 1));
            prop_assert_eq!(up.get(oh - 1, 0), m.get(h - 1, 0));
            prop_assert_eq!(up.get(oh - 1, ow - 1), m.get(h - 1, w - 1));
            prop_assert!(up.min() >= m.min() - 1e-12);
            prop_assert!(up.max() <= m.max() + 1e-12);
            if dh == 0 && dw == 0 {
                prop_assert_eq!(&up, &m);
            }
        }
    }
}
