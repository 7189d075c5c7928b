//! Quantization-quality and training-dynamics metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Summary of the difference between a tensor and its reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// ||x_hat - x||_2 / ||x||_2; `None` when the reference has zero norm.
    pub rel_l2: Option<f64>,
    /// Largest elementwise absolute deviation.
    pub max_abs: f64,
    /// Fraction of reconstructed elements that are exactly zero.
    pub zero_fraction: f64,
    /// Number of elements compared.
    pub count: usize,
}

/// Compare a reconstruction against its reference.
pub fn relative_error(x: &Tensor, x_hat: &Tensor) -> Result<ErrorReport> {
    if !x.same_shape(x_hat) {
        return Err(Error::Shape(format!(
            "shape {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mut diff_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut zeros = 0usize;
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let d = b - a;
        diff_sq += d * d;
        ref_sq += a * a;
        max_abs = max_abs.max(d.abs());
        if b == 0.0 {
            zeros += 1;
        }
    }
    let rel_l2 = if ref_sq > 0.0 {
        Some((diff_sq / ref_sq).sqrt())
    } else {
        None
    };
    Ok(ErrorReport {
        rel_l2,
        max_abs,
        zero_fraction: zeros as f64 / x.numel().max(1) as f64,
        count: x.numel(),
    })
}

/// Error of the inverse square root `h(v) = 1 / (sqrt(v) + eps)` applied to a
/// second moment and its reconstruction. A reconstruction that pushes small
/// entries to exactly zero sends `h` to `1/eps`, which this metric makes
/// visible. `zero_fraction` in the report counts exact zeros of the
/// reconstruction itself (the transform is always positive).
pub fn inv_sqrt_error(v: &Tensor, v_hat: &Tensor, eps: f64) -> Result<ErrorReport> {
    if v.data().iter().any(|&x| x < 0.0) || v_hat.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Domain(
            "inverse-square-root error requires nonnegative inputs".into(),
        ));
    }
    let h = |t: &Tensor| {
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| 1.0 / (x.sqrt() + eps)).collect(),
        )
    };
    let mut report = relative_error(&h(v)?, &h(v_hat)?)?;
    report.zero_fraction =
        v_hat.data().iter().filter(|&&x| x == 0.0).count() as f64 / v_hat.numel().max(1) as f64;
    Ok(report)
}

/// Mean parameter movement in units of the quantization step: the average of
/// `|new - prev| / delta` over all elements. Zero means the optimizer
/// stalled below the resolution of the parameter quantizer.
pub fn bin_change_ratio(prev: &Tensor, new: &Tensor, delta: &[f64]) -> Result<f64> {
    if !prev.same_shape(new) || prev.numel() != delta.len() {
        return Err(Error::Shape(format!(
            "shapes {:?} / {:?} with {} steps",
            prev.shape(),
            new.shape(),
            delta.len()
        )));
    }
    if delta.iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain("quantization step must be positive".into()));
    }
    let sum: f64 = prev
        .data()
        .iter()
        .zip(new.data())
        .zip(delta)
        .map(|((&a, &b), &d)| (b - a).abs() / d)
        .sum();
    Ok(sum / prev.numel() as f64)
}

/// Equal-width histogram with density normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges, increasing.
    pub edges: Vec<f64>,
    /// Density per bin; sum(density) * width = 1.
    pub densities: Vec<f64>,
}

/// Histogram of a tensor, optionally of its log10 (positive data only).
pub fn histogram(x: &Tensor, bins: usize, log10: bool) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Domain("at least one bin required".into()));
    }
    if x.numel() == 0 {
        return Err(Error::Shape("cannot histogram an empty tensor".into()));
    }
    if log10 && x.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(
            "log10 histogram requires strictly positive data".into(),
        ));
    }
    let values: Vec<f64> = if log10 {
        x.data().iter().map(|v| v.log10()).collect()
    } else {
        x.data().to_vec()
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    // constant data: center a unit-width range so densities stay finite
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        densities: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::NormScheme;
    use crate::qmap::build_de_map;
    use crate::quantizer::{dequantize, quantize, QuantizerSpec, Rounding};
    use crate::rng::StreamKey;

    #[test]
    fn identical_tensors_have_zero_error() {
        let x = Tensor::from_vec(vec![1.0, 0.0, -2.0]);
        let r = relative_error(&x, &x).unwrap();
        assert_eq!(r.rel_l2, Some(0.0));
        assert_eq!(r.max_abs, 0.0);
        assert!((r.zero_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_reconstruction_has_unit_error() {
        let x = Tensor::from_vec(vec![3.0, -4.0]);
        let r = relative_error(&x, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(r.rel_l2, Some(1.0));
        assert_eq!(r.zero_fraction, 1.0);
    }

    #[test]
    fn zero_norm_reference_is_undefined() {
        let z = Tensor::zeros(vec![4]);
        let r = relative_error(&z, &Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(r.rel_l2, None);
    }

    #[test]
    fn rel_l2_matches_recomputation_oracle() {
        let key = StreamKey::new(13);
        let data: Vec<f64> = (0..10_000)
            .map(|i| (key.uniform(i as u64) - 0.5) * 6.0)
            .collect();
        let x = Tensor::from_vec(data);
        let spec = QuantizerSpec::new(
            NormScheme::Block(128),
            build_de_map(4, true, true).unwrap(),
            Rounding::Nearest,
        );
        let x_hat = dequantize(&quantize(&x, &spec, StreamKey::new(0)).unwrap()).unwrap();
        let r = relative_error(&x, &x_hat).unwrap();

        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in x.data().iter().zip(x_hat.data()) {
            num += (b - a) * (b - a);
            den += a * a;
        }
        assert!((r.rel_l2.unwrap() - (num / den).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_blows_up_on_zeroed_entries() {
        let v = Tensor::from_vec(vec![1e-4]);
        let r = inv_sqrt_error(&v, &Tensor::zeros(vec![1]), 1e-6).unwrap();
        // h jumps from ~1e2 to 1e6
        let expect = (1e6 - 1.0 / (1e-2 + 1e-6)) / (1.0 / (1e-2 + 1e-6));
        assert!((r.rel_l2.unwrap() - expect).abs() / expect < 1e-9);
        assert_eq!(r.zero_fraction, 1.0);

        let same = inv_sqrt_error(&v, &v, 1e-6).unwrap();
        assert_eq!(same.rel_l2, Some(0.0));
        assert!(inv_sqrt_error(&Tensor::from_vec(vec![-1.0]), &v, 1e-6).is_err());
    }

    #[test]
    fn de0_reconstruction_never_zeroes_positive_input() {
        let key = StreamKey::new(2);
        let v = Tensor::from_vec(
            (0..300)
                .map(|i| 10f64.powf(key.uniform(i) * 4.0 - 4.0))
                .collect(),
        );
        let spec = QuantizerSpec::new(
            NormScheme::Block(128),
            build_de_map(4, false, false).unwrap(),
            Rounding::Nearest,
        );
        let v_hat = dequantize(&quantize(&v, &spec, StreamKey::new(0)).unwrap()).unwrap();
        let r = inv_sqrt_error(&v, &v_hat, 1e-6).unwrap();
        assert_eq!(r.zero_fraction, 0.0);
    }

    #[test]
    fn bin_change_ratio_basics() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let d = vec![0.5, 0.5];
        assert_eq!(bin_change_ratio(&a, &a, &d).unwrap(), 0.0);
        let b = Tensor::from_vec(vec![1.5, 1.5]);
        assert_eq!(bin_change_ratio(&a, &b, &d).unwrap(), 1.0);
        // shifting both tensors leaves the ratio unchanged
        let shift = |t: &Tensor| {
            Tensor::from_vec(t.data().iter().map(|v| v + 7.0).collect())
        };
        assert_eq!(
            bin_change_ratio(&shift(&a), &shift(&b), &d).unwrap(),
            bin_change_ratio(&a, &b, &d).unwrap()
        );
        assert!(bin_change_ratio(&a, &b, &[0.5, 0.0]).is_err());
    }

    #[test]
    fn histogram_constant_tensor() {
        let h = histogram(&Tensor::from_vec(vec![2.5; 40]), 5, false).unwrap();
        assert_eq!(h.densities.iter().filter(|&&d| d > 0.0).count(), 1);
        let width = h.edges[1] - h.edges[0];
        let total: f64 = h.densities.iter().sum::<f64>() * width;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_density_integrates_to_one() {
        let key = StreamKey::new(8);
        let x = Tensor::from_vec((0..1000).map(|i| key.uniform(i) * 3.0 + 1.0).collect());
        for log10 in [false, true] {
            let h = histogram(&x, 13, log10).unwrap();
            let width = h.edges[1] - h.edges[0];
            let total: f64 = h.densities.iter().sum::<f64>() * width;
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_of_uniform_sample_is_flat() {
        let key = StreamKey::new(21);
        let x = Tensor::from_vec((0..100_000).map(|i| key.uniform(i)).collect());
        let h = histogram(&x, 10, false).unwrap();
        for d in &h.densities {
            assert!((d - 1.0).abs() < 0.05, "density {d}");
        }
    }

    #[test]
    fn histogram_rejects_bad_input() {
        let x = Tensor::from_vec(vec![1.0, -1.0]);
        assert!(histogram(&x, 0, false).is_err());
        assert!(histogram(&x, 4, true).is_err());
    }
}
