//! Non-learned interpolators.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::Image;

/// Which input slice the nearest-neighbour baseline copies. The target is
/// equidistant from both, so this is a convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NearestPolicy {
    #[default]
    Lower,
    Upper,
}

/// Elementwise midpoint of the two neighbours.
pub fn interpolate_linear(lower: &Image, upper: &Image) -> Result<Image> {
    lower.check_same(upper, "interpolate_linear")?;
    let data = lower
        .data
        .iter()
        .zip(&upper.data)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    Image::new(lower.height, lower.width, data)
}

pub fn interpolate_nearest(lower: &Image, upper: &Image, policy: NearestPolicy) -> Result<Image> {
    lower.check_same(upper, "interpolate_nearest")?;
    Ok(match policy {
        NearestPolicy::Lower => lower.clone(),
        NearestPolicy::Upper => upper.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn linear_midpoint() {
        let a = Image::filled(3, 3, 0.2);
        let b = Image::filled(3, 3, 0.6);
        let m = interpolate_linear(&a, &b).unwrap();
        assert!(m.data.iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert_eq!(interpolate_linear(&a, &a).unwrap(), a);
        let c = Image::filled(2, 3, 0.0);
        assert!(matches!(interpolate_linear(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn nearest_copies() {
        let a = Image::new(1, 2, vec![0.1, 0.2]).unwrap();
        let b = Image::new(1, 2, vec![0.3, 0.4]).unwrap();
        assert_eq!(interpolate_nearest(&a, &b, NearestPolicy::Lower).unwrap(), a);
        assert_eq!(interpolate_nearest(&a, &b, NearestPolicy::Upper).unwrap(), b);
        assert_eq!(NearestPolicy::default(), NearestPolicy::Lower);
    }

    proptest! {
        #[test]
        fn linear_bounded_by_inputs(
            pairs in proptest::collection::vec((0.0f32..1.0, 0.0f32..1.0), 1..64)
        ) {
            let n = pairs.len();
            let a = Image::new(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
            let b = Image::new(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
            let m = interpolate_linear(&a, &b).unwrap();
            for ((&x, &y), &v) in a.data.iter().zip(&b.data).zip(&m.data) {
                prop_assert!(v >= x.min(y) && v <= x.max(y));
            }
        }
    }
}
