use bifuser_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::imaging::{CoordTransform, Point};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub canonical: Point,
    pub original: Point,
    /// Pixels at or above the threshold.
    pub selected: usize,
    /// No pixel passed the threshold and the argmax pixel was used.
    pub fallback: bool,
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Median coordinates of the pixels of an `[H, W]` probability map with
/// `p >= threshold`, falling back to the first maximal pixel in row-major order.
pub fn extract_fovea<T: Scalar>(prob: &Tensor<T>, transform: &CoordTransform, threshold: f64) -> LocalizationResult {
    let (h, w) = match prob.shape() {
        [h, w] => (*h, *w),
        s => (s[s.len() - 2], s[s.len() - 1]),
    };
    let data = &prob.data()[prob.numel() - h * w..];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &p) in data.iter().enumerate() {
        if p.to_f64_lossy() >= threshold {
            xs.push((i % w) as f64);
            ys.push((i / w) as f64);
        }
    }
    let selected = xs.len();
    let (canonical, fallback) = match (median(&mut xs), median(&mut ys)) {
        (Some(x), Some(y)) => (Point::new(x, y), false),
        _ => {
            let mut best = 0;
            for (i, &p) in data.iter().enumerate() {
                if p > data[best] {
                    best = i;
                }
            }
            (Point::new((best % w) as f64, (best / w) as f64), true)
        }
    };
    LocalizationResult { canonical, original: transform.to_original(canonical), selected, fallback }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[h, w]);
        for &(x, y) in on {
            t.set(&[y, x], 0.9);
        }
        t
    }

    #[test]
    fn singleton() {
        let r = extract_fovea(&map(256, 256, &[(100, 200)]), &CoordTransform::identity(), 0.5);
        assert_eq!(r.canonical, Point::new(100.0, 200.0));
        assert_eq!((r.selected, r.fallback), (1, false));
    }

    #[test]
    fn even_count_takes_midpoint() {
        let r = extract_fovea(&map(64, 64, &[(10, 50), (20, 50)]), &CoordTransform::identity(), 0.5);
        assert_eq!(r.canonical, Point::new(15.0, 50.0));
    }

    #[test]
    fn argmax_fallback_prefers_first_maximum() {
        let mut t = Tensor::<f64>::full(&[16, 16], 0.1);
        t.set(&[9, 7], 0.3);
        t.set(&[12, 2], 0.3);
        let r = extract_fovea(&t, &CoordTransform::identity(), 0.5);
        assert_eq!(r.canonical, Point::new(7.0, 9.0));
        assert!(r.fallback);
        assert_eq!(r.selected, 0);
    }

    #[test]
    fn maps_back_to_original_frame() {
        let t = CoordTransform { crop_offset: (0, 0), pad_offset: (0, 0), scale: 0.5 };
        let r = extract_fovea(&map(64, 64, &[(20, 30)]), &t, 0.5);
        assert_eq!(r.original, Point::new(40.5, 60.5));
    }

    proptest! {
        #[test]
        fn median_matches_sorted_oracle(mut v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let expect = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
            prop_assert_eq!(median(&mut v).unwrap(), expect);
        }
    }
}
