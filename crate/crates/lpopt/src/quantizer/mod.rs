//! Full tensor quantizer: normalization, mapping and rounding composed, with
//! memory-overhead accounting and a bit-exact checkpoint format.

pub mod checkpoint;

use crate::bitpack::{self, CodeArray};
use crate::error::{Error, Result};
use crate::normalize::{self, NormScheme, ScaleState};
use crate::parallel;
use crate::qmap::{self, QuantMap};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

/// Block size used when a rank-1 spec meets a 1-dimensional tensor.
pub const RANK1_FALLBACK_BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Nearest,
    Stochastic,
}

/// How to quantize one tensor: normalization granularity, value map, rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub scheme: NormScheme,
    pub map: QuantMap,
    pub rounding: Rounding,
}

impl QuantizerSpec {
    pub fn new(scheme: NormScheme, map: QuantMap, rounding: Rounding) -> Self {
        QuantizerSpec {
            scheme,
            map,
            rounding,
        }
    }

    /// Scheme actually applied to a tensor of `shape`: rank-1 normalization
    /// degenerates on 1-d tensors, so those use block-128 instead.
    pub fn effective_scheme(&self, shape: &[usize]) -> NormScheme {
        match self.scheme {
            NormScheme::Rank1 if shape.len() <= 1 => NormScheme::Block(RANK1_FALLBACK_BLOCK),
            s => s,
        }
    }

    /// Short name for reports, e.g. `b128/de` or `rank1/linear`.
    pub fn label(&self) -> String {
        format!("{}/{}", scheme_name(&self.scheme), map_name(&self.map))
    }
}

pub fn scheme_name(scheme: &NormScheme) -> String {
    match scheme {
        NormScheme::PerTensor => "pertensor".into(),
        NormScheme::PerAxis(a) => format!("axis{a}"),
        NormScheme::Block(b) => format!("b{b}"),
        NormScheme::Rank1 => "rank1".into(),
    }
}

pub fn map_name(map: &QuantMap) -> &'static str {
    match map.map_id() {
        qmap::MAP_ID_LINEAR => "linear",
        qmap::MAP_ID_DE => "de",
        _ => "de0",
    }
}

/// A quantized tensor: packed codes plus everything needed to reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    shape: Vec<usize>,
    payload: Vec<u8>,
    scales: ScaleState,
    spec: QuantizerSpec,
}

impl PackedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn scales(&self) -> &ScaleState {
        &self.scales
    }

    pub fn spec(&self) -> &QuantizerSpec {
        &self.spec
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        payload: Vec<u8>,
        scales: ScaleState,
        spec: QuantizerSpec,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let expected = bitpack::packed_len(numel, spec.map.bitwidth());
        if payload.len() != expected {
            return Err(Error::format(
                payload.len() as u64,
                format!(
                    "payload of {} bytes does not match {numel} codes at {} bits",
                    payload.len(),
                    spec.map.bitwidth()
                ),
            ));
        }
        Ok(PackedTensor {
            shape,
            payload,
            scales,
            spec,
        })
    }
}

/// Quantize a tensor. Scales are recomputed from the data on every call; the
/// stream key is consumed only under stochastic rounding, one uniform per
/// element, so parallel and sequential runs agree bit for bit.
pub fn quantize(x: &Tensor, spec: &QuantizerSpec, key: StreamKey) -> Result<PackedTensor> {
    if !x.is_all_finite() {
        return Err(Error::Domain(
            "cannot quantize a tensor containing NaN or infinity".into(),
        ));
    }
    if !spec.map.signed() && x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "negative input to an unsigned quantizer spec".into(),
        ));
    }
    let scheme = spec.effective_scheme(x.shape());
    let scales = normalize::compute_scales(x, scheme)?;
    let map = &spec.map;
    let data = x.data();
    let codes: Vec<u8> = match spec.rounding {
        Rounding::Nearest => parallel::map_indexed(data.len(), |j| {
            let s = scales.scale_at_flat(j);
            let n = if s > 0.0 { data[j] / s } else { 0.0 };
            qmap::encode_nearest(map, n) as u8
        }),
        Rounding::Stochastic => parallel::map_indexed(data.len(), |j| {
            let s = scales.scale_at_flat(j);
            let n = if s > 0.0 { data[j] / s } else { 0.0 };
            qmap::encode_stochastic_with(map, n, key.uniform(j as u64)) as u8
        }),
    };
    let payload = bitpack::pack(&CodeArray::new(codes, map.bitwidth())?);
    Ok(PackedTensor {
        shape: x.shape().to_vec(),
        payload,
        scales,
        spec: QuantizerSpec {
            scheme,
            map: map.clone(),
            rounding: spec.rounding,
        },
    })
}

/// Reconstruct the tensor a [`PackedTensor`] approximates.
pub fn dequantize(p: &PackedTensor) -> Result<Tensor> {
    let numel = p.numel();
    let codes = bitpack::unpack(&p.payload, p.spec.map.bitwidth(), numel)?;
    let map_len = p.spec.map.len();
    if let Some(&bad) = codes.codes().iter().find(|&&c| usize::from(c) >= map_len) {
        return Err(Error::format(
            0,
            format!("code {bad} out of range for map of {map_len} values"),
        ));
    }
    let values = p.spec.map.values();
    let code_slice = codes.codes();
    let out = parallel::map_indexed(numel, |j| {
        values[usize::from(code_slice[j])] * p.scales.scale_at_flat(j)
    });
    Tensor::new(p.shape.clone(), out)
}

/// Storage cost in bits per element: code bits plus f32 scales amortized over
/// the tensor.
pub fn overhead_bits_per_element(spec: &QuantizerSpec, shape: &[usize]) -> Result<f64> {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(Error::Shape("overhead of an empty shape is undefined".into()));
    }
    let scheme = spec.effective_scheme(shape);
    let scales = scheme.scale_count(shape);
    Ok(f64::from(spec.map.bitwidth()) + 32.0 * scales as f64 / numel as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmap::{build_de_map, build_linear_map};

    fn spec(scheme: NormScheme, map: QuantMap, rounding: Rounding) -> QuantizerSpec {
        QuantizerSpec::new(scheme, map, rounding)
    }

    fn key() -> StreamKey {
        StreamKey::new(0)
    }

    #[test]
    fn on_grid_values_roundtrip_exactly() {
        let map = build_linear_map(4, false).unwrap();
        // every element is scale * map value with scale = 2.0
        let x = Tensor::from_vec(vec![0.125, 1.0, 2.0, 0.625]);
        let s = spec(NormScheme::PerTensor, map, Rounding::Nearest);
        let p = quantize(&x, &s, key()).unwrap();
        assert_eq!(dequantize(&p).unwrap().data(), x.data());
    }

    #[test]
    fn all_zero_roundtrips_under_any_spec() {
        let x = Tensor::zeros(vec![3, 5]);
        for (scheme, map) in [
            (NormScheme::PerTensor, build_de_map(4, true, true).unwrap()),
            (NormScheme::Block(4), build_linear_map(4, true).unwrap()),
            (NormScheme::Rank1, build_de_map(4, true, false).unwrap()),
        ] {
            let p = quantize(&x, &spec(scheme, map, Rounding::Nearest), key()).unwrap();
            assert_eq!(dequantize(&p).unwrap().data(), x.data());
        }
    }

    #[test]
    fn matches_scalar_oracle_under_block_de() {
        let rng = StreamKey::new(5);
        let data: Vec<f64> = (0..256).map(|i| (rng.uniform(i as u64) - 0.5) * 8.0).collect();
        let x = Tensor::from_vec(data.clone());
        let map = build_de_map(4, true, true).unwrap();
        let s = spec(NormScheme::Block(128), map.clone(), Rounding::Nearest);
        let got = dequantize(&quantize(&x, &s, key()).unwrap()).unwrap();

        // scalar-by-scalar reference: block absmax, argmin scan, rescale
        let mut expect = vec![0.0f64; 256];
        for (k, chunk) in data.chunks(128).enumerate() {
            let scale = chunk.iter().fold(0.0f64, |a, &v| a.max(v.abs())) as f32 as f64;
            for (j, &v) in chunk.iter().enumerate() {
                let n = if scale > 0.0 { v / scale } else { 0.0 };
                let best = map
                    .values()
                    .iter()
                    .min_by(|a, b| {
                        (n - **a).abs().partial_cmp(&(n - **b).abs()).unwrap()
                    })
                    .unwrap();
                expect[k * 128 + j] = best * scale;
            }
        }
        let err = |a: &[f64], b: &[f64]| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let den: f64 = b.iter().map(|y| y * y).sum();
            (num / den).sqrt()
        };
        let e_impl = err(got.data(), &data);
        let e_oracle = err(&expect, &data);
        assert!((e_impl - e_oracle).abs() < 1e-12, "{e_impl} vs {e_oracle}");
        assert_eq!(got.data(), &expect[..]);
    }

    #[test]
    fn requantizing_reconstruction_reproduces_codes() {
        let rng = StreamKey::new(6);
        for scheme in [NormScheme::PerTensor, NormScheme::Block(32), NormScheme::Rank1] {
            let data: Vec<f64> = (0..24 * 16)
                .map(|i| (rng.uniform(i as u64) - 0.5) * 3.0)
                .collect();
            let x = Tensor::new(vec![24, 16], data).unwrap();
            let s = spec(scheme, build_de_map(4, true, false).unwrap(), Rounding::Nearest);
            let p = quantize(&x, &s, key()).unwrap();
            let p2 = quantize(&dequantize(&p).unwrap(), &s, key()).unwrap();
            assert_eq!(p.payload(), p2.payload());
            assert_eq!(p.scales(), p2.scales());
        }
    }

    #[test]
    fn max_code_everywhere_decodes_to_scaled_map_max() {
        let map = build_linear_map(4, false).unwrap();
        let x = Tensor::from_vec(vec![3.0; 10]);
        let s = spec(NormScheme::PerTensor, map, Rounding::Nearest);
        let p = quantize(&x, &s, key()).unwrap();
        let back = dequantize(&p).unwrap();
        assert_eq!(back.data(), &[3.0; 10]);
    }

    #[test]
    fn single_element_roundtrip_within_bound() {
        let map = build_de_map(4, true, false).unwrap();
        let x = Tensor::from_vec(vec![0.7]);
        let s = spec(NormScheme::Rank1, map.clone(), Rounding::Nearest);
        let p = quantize(&x, &s, key()).unwrap();
        // 1-d rank-1 silently becomes block-128
        assert_eq!(p.spec().scheme, NormScheme::Block(128));
        let back = dequantize(&p).unwrap();
        assert!((back.data()[0] - 0.7).abs() <= 0.7 * map.max_adjacent_gap() / 2.0 + 1e-12);
    }

    #[test]
    fn overhead_formula() {
        let map4 = build_de_map(4, false, true).unwrap();
        let s = spec(NormScheme::Block(128), map4.clone(), Rounding::Nearest);
        assert_eq!(overhead_bits_per_element(&s, &[1280]).unwrap(), 4.25);
        let s = spec(NormScheme::PerTensor, map4.clone(), Rounding::Nearest);
        assert_eq!(overhead_bits_per_element(&s, &[64]).unwrap(), 4.5);
        let s = spec(NormScheme::Rank1, map4, Rounding::Nearest);
        assert_eq!(
            overhead_bits_per_element(&s, &[1024, 1024]).unwrap(),
            4.0625
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let unsigned = spec(
            NormScheme::PerTensor,
            build_linear_map(4, false).unwrap(),
            Rounding::Nearest,
        );
        assert!(quantize(&Tensor::from_vec(vec![-1.0, 2.0]), &unsigned, key()).is_err());
        let signed = spec(
            NormScheme::PerTensor,
            build_linear_map(4, true).unwrap(),
            Rounding::Nearest,
        );
        assert!(quantize(&Tensor::from_vec(vec![f64::NAN]), &signed, key()).is_err());
        assert!(quantize(&Tensor::from_vec(vec![f64::INFINITY]), &signed, key()).is_err());
    }

    #[test]
    fn elementwise_error_bound_holds() {
        let rng = StreamKey::new(31);
        let data: Vec<f64> = (0..40 * 30)
            .map(|i| (rng.uniform(i as u64) - 0.5) * 20.0)
            .collect();
        let x = Tensor::new(vec![40, 30], data).unwrap();
        for scheme in [NormScheme::PerTensor, NormScheme::Block(64), NormScheme::Rank1] {
            let map = build_de_map(4, true, true).unwrap();
            let half_gap = map.max_adjacent_gap() / 2.0;
            let s = spec(scheme, map, Rounding::Nearest);
            let p = quantize(&x, &s, key()).unwrap();
            let back = dequantize(&p).unwrap();
            for j in 0..x.numel() {
                let bound = p.scales().scale_at_flat(j) * half_gap * (1.0 + 1e-6) + 1e-15;
                assert!((back.data()[j] - x.data()[j]).abs() <= bound);
            }
        }
    }

    #[test]
    fn stochastic_quantizer_is_unbiased_elementwise() {
        let x = Tensor::from_vec(vec![0.31, -0.07, 0.93, -0.55]);
        let s = spec(
            NormScheme::PerTensor,
            build_linear_map(4, true).unwrap(),
            Rounding::Stochastic,
        );
        let trials = 40_000u64;
        let mut sums = vec![0.0f64; 4];
        let mut sq = vec![0.0f64; 4];
        for t in 0..trials {
            let p = quantize(&x, &s, StreamKey::new(77).with(t)).unwrap();
            let back = dequantize(&p).unwrap();
            for (j, v) in back.data().iter().enumerate() {
                sums[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / trials as f64;
            let var = (sq[j] / trials as f64 - mean * mean).max(0.0);
            let se = (var / trials as f64).sqrt();
            assert!(
                (mean - x.data()[j]).abs() <= 4.0 * se + 1e-12,
                "element {j}: mean {mean} vs {}",
                x.data()[j]
            );
        }
    }

    #[test]
    fn zero_reconstruction_depends_on_map_zero() {
        let rng = StreamKey::new(47);
        // strictly positive data spanning five orders of magnitude
        let data: Vec<f64> = (0..512)
            .map(|i| 10f64.powf(rng.uniform(i as u64) * 5.0 - 5.0))
            .collect();
        let x = Tensor::from_vec(data);
        let with_zero = spec(
            NormScheme::Block(128),
            build_de_map(4, false, true).unwrap(),
            Rounding::Nearest,
        );
        let no_zero = spec(
            NormScheme::Block(128),
            build_de_map(4, false, false).unwrap(),
            Rounding::Nearest,
        );
        let linear = spec(
            NormScheme::Block(128),
            build_linear_map(4, false).unwrap(),
            Rounding::Nearest,
        );
        let zeros = |s: &QuantizerSpec| {
            dequantize(&quantize(&x, s, key()).unwrap())
                .unwrap()
                .data()
                .iter()
                .filter(|&&v| v == 0.0)
                .count()
        };
        assert!(zeros(&with_zero) > 0);
        assert_eq!(zeros(&no_zero), 0);
        assert_eq!(zeros(&linear), 0);
    }
}
