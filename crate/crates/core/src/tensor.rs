//! In-memory tensor model, safetensors ingestion and synthetic calibration layers.
//!
//! Archives pair tensors by name: `<layer>.weight` holds the `N x K` weight
//! matrix and the optional `<layer>.calib` holds calibration activations whose
//! trailing dimension is `K`. Leading activation dimensions are collapsed into
//! a single token axis. Every value is widened to `f32` on load.

use std::collections::BTreeMap;
use std::path::Path;

use half::{bf16, f16};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUFFIX: &str = ".weight";
const CALIB_SUFFIX: &str = ".calib";

macro_rules! dense_matrix {
    ($(#[$meta:meta])* $name:ident, $rows:literal) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            rows: usize,
            cols: usize,
            data: Vec<f32>,
        }

        impl $name {
            /// Builds a row-major matrix, rejecting empty shapes and non-finite entries.
            pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
                if rows == 0 || cols == 0 {
                    return Err(Error::validation(format!(
                        "{} must be non-empty, got {rows}x{cols}",
                        stringify!($name)
                    )));
                }
                if data.len() != rows * cols {
                    return Err(Error::validation(format!(
                        "{} data has {} values, expected {rows}x{cols}",
                        stringify!($name),
                        data.len()
                    )));
                }
                if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "{} has non-finite value at flat index {i}",
                        stringify!($name)
                    )));
                }
                Ok(Self { rows, cols, data })
            }

            #[doc = concat!("Number of ", $rows, ".")]
            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn cols(&self) -> usize {
                self.cols
            }

            pub fn data(&self) -> &[f32] {
                &self.data
            }

            pub fn into_data(self) -> Vec<f32> {
                self.data
            }

            pub fn row(&self, r: usize) -> &[f32] {
                &self.data[r * self.cols..(r + 1) * self.cols]
            }

            pub fn get(&self, r: usize, c: usize) -> f32 {
                self.data[r * self.cols + c]
            }
        }
    };
}

dense_matrix!(
    /// Dense `N x K` weight matrix of one linear layer (`y = x W^T`), row-major.
    WeightMatrix,
    "output features (N)"
);

dense_matrix!(
    /// Calibration activations flattened to `T x K`, row-major.
    ActivationMatrix,
    "tokens (T)"
);

/// One linear layer: its weights and, optionally, calibration activations.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBundle {
    pub name: String,
    pub weights: WeightMatrix,
    pub activations: Option<ActivationMatrix>,
}

impl LayerBundle {
    pub fn new(
        name: impl Into<String>,
        weights: WeightMatrix,
        activations: Option<ActivationMatrix>,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(x) = &activations {
            if x.cols() != weights.cols() {
                return Err(Error::Pairing {
                    layer: name,
                    message: format!(
                        "calibration has {} columns but weight has {}",
                        x.cols(),
                        weights.cols()
                    ),
                });
            }
        }
        Ok(Self {
            name,
            weights,
            activations,
        })
    }
}

fn map_safetensors_error(err: SafeTensorError, header_len: Option<usize>) -> Error {
    use SafeTensorError::*;
    let payload_start = header_len.map_or(8, |n| 8 + n);
    let offset = match &err {
        HeaderTooSmall | HeaderTooLarge | InvalidHeaderLength => 0,
        InvalidHeader(_) | InvalidHeaderDeserialization(_) | JsonError(_) => 8,
        _ => payload_start,
    };
    Error::Format {
        offset,
        message: err.to_string(),
    }
}

fn widen(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let values: Vec<f32> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        other => {
            return Err(Error::UnsupportedDtype {
                tensor: name.to_string(),
                dtype: format!("{other:?}"),
            })
        }
    };
    Ok(values)
}

/// Parses a safetensors byte buffer into layer bundles, sorted by layer name.
pub fn parse_tensor_archive(bytes: &[u8]) -> Result<Vec<LayerBundle>> {
    let header_len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize);
    let archive =
        SafeTensors::deserialize(bytes).map_err(|e| map_safetensors_error(e, header_len))?;

    let mut weights: BTreeMap<String, WeightMatrix> = BTreeMap::new();
    let mut calibs: BTreeMap<String, ActivationMatrix> = BTreeMap::new();

    for (name, view) in archive.iter() {
        if let Some(layer) = name.strip_suffix(WEIGHT_SUFFIX) {
            let shape = view.shape();
            if shape.len() != 2 {
                return Err(Error::validation(format!(
                    "weight tensor `{name}` must be 2-D, got shape {shape:?}"
                )));
            }
            let data = widen(name, &view)?;
            let w = WeightMatrix::new(shape[0], shape[1], data)
                .map_err(|e| Error::validation(format!("tensor `{name}`: {e}")))?;
            weights.insert(layer.to_string(), w);
        } else if let Some(layer) = name.strip_suffix(CALIB_SUFFIX) {
            let shape = view.shape();
            if shape.is_empty() {
                return Err(Error::validation(format!(
                    "calibration tensor `{name}` must have at least one dimension"
                )));
            }
            let k = *shape.last().unwrap();
            let tokens: usize = shape[..shape.len() - 1].iter().product();
            let data = widen(name, &view)?;
            let x = ActivationMatrix::new(tokens.max(1), k, data)
                .map_err(|e| Error::validation(format!("tensor `{name}`: {e}")))?;
            calibs.insert(layer.to_string(), x);
        }
    }

    if let Some(orphan) = calibs.keys().find(|k| !weights.contains_key(*k)) {
        return Err(Error::Pairing {
            layer: orphan.clone(),
            message: "calibration tensor has no matching weight".into(),
        });
    }

    weights
        .into_iter()
        .map(|(name, w)| {
            let x = calibs.remove(&name);
            LayerBundle::new(name, w, x)
        })
        .collect()
}

/// Loads every `<layer>.weight` (and matching `<layer>.calib`) from a safetensors file.
pub fn load_tensor_archive(path: impl AsRef<Path>) -> Result<Vec<LayerBundle>> {
    let bytes = std::fs::read(path)?;
    parse_tensor_archive(&bytes)
}

/// Serializes bundles as f32 safetensors. Output is independent of input order.
pub fn tensor_archive_bytes(bundles: &[LayerBundle]) -> Result<Vec<u8>> {
    let mut names = std::collections::BTreeSet::new();
    let mut payloads: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for b in bundles {
        if !names.insert(b.name.clone()) {
            return Err(Error::validation(format!(
                "duplicate layer name `{}`",
                b.name
            )));
        }
        payloads.push((
            format!("{}{WEIGHT_SUFFIX}", b.name),
            vec![b.weights.rows(), b.weights.cols()],
            f32_bytes(b.weights.data()),
        ));
        if let Some(x) = &b.activations {
            payloads.push((
                format!("{}{CALIB_SUFFIX}", b.name),
                vec![x.rows(), x.cols()],
                f32_bytes(x.data()),
            ));
        }
    }
    let views = payloads
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| map_safetensors_error(e, None))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize(views, None).map_err(|e| map_safetensors_error(e, None))
}

pub fn save_tensor_archive(path: impl AsRef<Path>, bundles: &[LayerBundle]) -> Result<()> {
    let bytes = tensor_archive_bytes(bundles)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Weight distribution for a synthetic layer. All components are zero-mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDistribution {
    Gaussian {
        sigma: f64,
    },
    Laplace {
        scale: f64,
    },
    /// Scale mixture of zero-mean Gaussians.
    Mixture {
        weights: Vec<f64>,
        sigmas: Vec<f64>,
    },
}

/// Recipe for a deterministic synthetic layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_synth_name")]
    pub name: String,
    pub distribution: WeightDistribution,
    pub rows: usize,
    pub cols: usize,
    pub tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_synth_name() -> String {
    "layer".to_string()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.tokens == 0 {
            return Err(Error::validation(format!(
                "synthetic layer needs N, K, T >= 1 (got N={}, K={}, T={})",
                self.rows, self.cols, self.tokens
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match &self.distribution {
            WeightDistribution::Gaussian { sigma } if !positive(*sigma) => Err(Error::validation(
                format!("gaussian sigma must be > 0, got {sigma}"),
            )),
            WeightDistribution::Laplace { scale } if !positive(*scale) => Err(Error::validation(
                format!("laplace scale must be > 0, got {scale}"),
            )),
            WeightDistribution::Mixture { weights, sigmas } => {
                if weights.is_empty() || weights.len() != sigmas.len() {
                    return Err(Error::validation(
                        "mixture needs one sigma per weight and at least one component",
                    ));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::validation("mixture weights must be non-negative"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "mixture weights must sum to 1, got {total}"
                    )));
                }
                if !sigmas.iter().all(|s| positive(*s)) {
                    return Err(Error::validation("mixture sigmas must be > 0"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn sample_weight(dist: &WeightDistribution, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        WeightDistribution::Gaussian { sigma } => {
            let z: f64 = rng.sample(StandardNormal);
            z * sigma
        }
        WeightDistribution::Laplace { scale } => {
            // inverse CDF on u in (-1/2, 1/2)
            let u: f64 = rng.random::<f64>() - 0.5;
            let magnitude = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
            scale * magnitude.copysign(u)
        }
        WeightDistribution::Mixture { weights, sigmas } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            z * sigmas[pick]
        }
    }
}

/// Generates a synthetic layer. Pure function of `spec`.
///
/// Activation column `k` is Gaussian with a variance drawn log-uniformly from
/// `[0.1, 10]`, so per-column importance is deliberately non-uniform.
pub fn synth_layer(spec: &SynthSpec) -> Result<LayerBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let weights: Vec<f32> = (0..spec.rows * spec.cols)
        .map(|_| sample_weight(&spec.distribution, &mut rng) as f32)
        .collect();

    let (lo, hi) = (0.1f64.ln(), 10f64.ln());
    let col_std: Vec<f64> = (0..spec.cols)
        .map(|_| rng.random_range(lo..hi).exp().sqrt())
        .collect();
    let mut activations = Vec::with_capacity(spec.tokens * spec.cols);
    for _ in 0..spec.tokens {
        for std in &col_std {
            let z: f64 = rng.sample(StandardNormal);
            activations.push((z * std) as f32);
        }
    }

    LayerBundle::new(
        spec.name.clone(),
        WeightMatrix::new(spec.rows, spec.cols, weights)?,
        Some(ActivationMatrix::new(spec.tokens, spec.cols, activations)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(name: &str, n: usize, k: usize, t: Option<(usize, usize)>) -> LayerBundle {
        let w =
            WeightMatrix::new(n, k, (0..n * k).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap();
        let x = t.map(|(t, kx)| {
            ActivationMatrix::new(t, kx, (0..t * kx).map(|i| (i % 7) as f32 - 3.5).collect())
                .unwrap()
        });
        LayerBundle {
            name: name.into(),
            weights: w,
            activations: x,
        }
    }

    #[test]
    fn archive_with_calibration_round_trips() {
        let b = bundle("q", 8, 16, Some((4, 16)));
        let bytes = tensor_archive_bytes(std::slice::from_ref(&b)).unwrap();
        let back = parse_tensor_archive(&bytes).unwrap();
        assert_eq!(back, vec![b]);
    }

    #[test]
    fn archive_without_calibration() {
        let b = bundle("q", 8, 16, None);
        let bytes = tensor_archive_bytes(std::slice::from_ref(&b)).unwrap();
        let back = parse_tensor_archive(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].activations.is_none());
    }

    #[test]
    fn mismatched_calibration_is_a_pairing_error() {
        let b = bundle("q", 8, 16, Some((4, 12)));
        let bytes = tensor_archive_bytes(std::slice::from_ref(&b)).unwrap();
        match parse_tensor_archive(&bytes) {
            Err(Error::Pairing { layer, .. }) => assert_eq!(layer, "q"),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }

    #[test]
    fn half_precision_inputs_are_widened() {
        let vals = [1.5f32, -2.0, 0.099975586, 3.0];
        let f16_bytes: Vec<u8> = vals
            .iter()
            .flat_map(|v| f16::from_f32(*v).to_le_bytes())
            .collect();
        let bf_bytes: Vec<u8> = vals
            .iter()
            .flat_map(|v| bf16::from_f32(*v).to_le_bytes())
            .collect();
        let views = vec![
            (
                "a.weight",
                TensorView::new(Dtype::F16, vec![2, 2], &f16_bytes).unwrap(),
            ),
            (
                "b.weight",
                TensorView::new(Dtype::BF16, vec![2, 2], &bf_bytes).unwrap(),
            ),
        ];
        let bytes = safetensors::tensor::serialize(views, None).unwrap();
        let layers = parse_tensor_archive(&bytes).unwrap();
        let want_f16: Vec<f32> = vals.iter().map(|v| f16::from_f32(*v).to_f32()).collect();
        let want_bf16: Vec<f32> = vals.iter().map(|v| bf16::from_f32(*v).to_f32()).collect();
        assert_eq!(layers[0].weights.data(), &want_f16[..]);
        assert_eq!(layers[1].weights.data(), &want_bf16[..]);
    }

    #[test]
    fn unsupported_dtype_is_rejected() {
        let data = [0u8; 8];
        let views = vec![(
            "a.weight",
            TensorView::new(Dtype::I32, vec![1, 2], &data).unwrap(),
        )];
        let bytes = safetensors::tensor::serialize(views, None).unwrap();
        assert!(matches!(
            parse_tensor_archive(&bytes),
            Err(Error::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn calibration_leading_dims_are_flattened() {
        let data: Vec<u8> = (0..2 * 3 * 4)
            .flat_map(|i| (i as f32).to_le_bytes())
            .collect();
        let w: Vec<u8> = (0..4).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let views = vec![
            (
                "l.calib",
                TensorView::new(Dtype::F32, vec![2, 3, 4], &data).unwrap(),
            ),
            (
                "l.weight",
                TensorView::new(Dtype::F32, vec![1, 4], &w).unwrap(),
            ),
        ];
        let bytes = safetensors::tensor::serialize(views, None).unwrap();
        let layers = parse_tensor_archive(&bytes).unwrap();
        let x = layers[0].activations.as_ref().unwrap();
        assert_eq!((x.rows(), x.cols()), (6, 4));
    }

    #[test]
    fn malformed_headers_report_offsets() {
        match parse_tensor_archive(&[1, 2, 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let mut bytes = 5u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{nope");
        match parse_tensor_archive(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(WeightMatrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(ActivationMatrix::new(1, 2, vec![f32::INFINITY, 0.0]).is_err());
        assert!(WeightMatrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            name: "s".into(),
            distribution: WeightDistribution::Gaussian { sigma: 1.0 },
            rows: 4,
            cols: 16,
            tokens: 8,
            seed: 7,
        };
        let a = synth_layer(&spec).unwrap();
        let b = synth_layer(&spec).unwrap();
        let bits = |l: &LayerBundle| -> Vec<u32> {
            l.weights
                .data()
                .iter()
                .chain(l.activations.as_ref().unwrap().data())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn synth_mixture_matches_closed_form_std() {
        let spec = SynthSpec {
            name: "m".into(),
            distribution: WeightDistribution::Mixture {
                weights: vec![0.5, 0.5],
                sigmas: vec![1.0, 5.0],
            },
            rows: 256,
            cols: 256,
            tokens: 1,
            seed: 1,
        };
        let l = synth_layer(&spec).unwrap();
        let n = l.weights.data().len() as f64;
        let mean = l.weights.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = l
            .weights
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = ((1.0 + 25.0) / 2.0f64).sqrt();
        assert!(
            (var.sqrt() - expected).abs() / expected < 0.2,
            "std {}",
            var.sqrt()
        );
    }

    #[test]
    fn synth_rejects_bad_specs() {
        let mut spec = SynthSpec {
            name: "s".into(),
            distribution: WeightDistribution::Gaussian { sigma: 1.0 },
            rows: 0,
            cols: 16,
            tokens: 8,
            seed: 7,
        };
        assert!(matches!(synth_layer(&spec), Err(Error::Validation(_))));
        spec.rows = 4;
        spec.distribution = WeightDistribution::Mixture {
            weights: vec![0.5, 0.4],
            sigmas: vec![1.0, 2.0],
        };
        assert!(matches!(synth_layer(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn synth_activation_importance_is_non_uniform() {
        let spec = SynthSpec {
            name: "s".into(),
            distribution: WeightDistribution::Laplace { scale: 0.5 },
            rows: 2,
            cols: 32,
            tokens: 256,
            seed: 3,
        };
        let l = synth_layer(&spec).unwrap();
        let x = l.activations.unwrap();
        let energy: Vec<f64> = (0..x.cols())
            .map(|c| (0..x.rows()).map(|t| (x.get(t, c) as f64).powi(2)).sum())
            .collect();
        let max = energy.iter().cloned().fold(f64::MIN, f64::max);
        let min = energy.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min > 3.0);
    }
}
