#![allow(dead_code)]

use reslstm::gradcheck::rel_error;
use reslstm::params::ParamSet;

/// Central differences at eps = 1e-5 on O(1) objectives carry about 1e-11
/// of float64 rounding noise, so entries that small are compared absolutely.
pub const ROUNDOFF: f64 = 1e-10;

/// Every entry within `rel` relative or within rounding noise.
pub fn assert_close<P: ParamSet>(analytic: &P, numeric: &P, rel: f64, what: &str) {
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors()) {
        for (i, (&x, &y)) in a.data.iter().zip(n.data).enumerate() {
            assert!(
                rel_error(x, y) < rel || (x - y).abs() < ROUNDOFF,
                "{what}: {}[{i}] analytic {x:e} numeric {y:e}",
                a.name
            );
        }
    }
}
