//! Fixed sinusoidal positional encodings.

use super::tensor::{Element, Tensor};

/// Classic interleaved sin/cos table: row `pos`, column pair `2i`/`2i+1`
/// holds `sin(pos/10000^(2i/d))` and `cos(pos/10000^(2i/d))`.
///
/// `d` must be even; positions index flattened token order.
pub fn sinusoidal_pe<E: Element>(n: usize, d: usize) -> Tensor<E> {
    assert!(
        d % 2 == 0,
        "positional encoding width must be even, got {}",
        d
    );
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        let row = t.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * i] = E::from_f64(angle.sin());
            row[2 * i + 1] = E::from_f64(angle.cos());
        }
    }
    t
}
