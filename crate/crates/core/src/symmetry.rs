//! Equioutput transformations of MLP parameter vectors.
//!
//! A transformation pairs, per hidden layer, a neuron permutation with a sign
//! vector (tanh sign flips). Applied to a parameter vector it acts as a
//! block-diagonal orthogonal map: incoming weight rows, biases, and outgoing
//! weight columns of each hidden neuron move (and flip) together, so the
//! network's input-output map is unchanged. Transforms are stored
//! structurally and never materialized as `d x d` matrices.
//!
//! ReLU scaling symmetries form an infinite family and are not representable
//! here; [`relu_scaling_deviation`] exists only as a verification check.

use num_bigint::BigUint;
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::net::{self, Activation, Architecture};
use crate::{Error, Result};

/// Permutation and sign flips for one hidden layer.
///
/// `perm[new] = old` gives the source neuron (0-based within the layer) for
/// each new position; `signs[new]` is `-1.0` or `+1.0` and is applied after
/// the move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTransform {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

/// One element of the equioutput transformation set: a [`LayerTransform`]
/// per hidden layer, ordered `l = 2..=K-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquioutputTransform {
    #[serde(rename = "layers")]
    pub hidden: Vec<LayerTransform>,
}

impl EquioutputTransform {
    /// The identity transformation for `arch`.
    pub fn identity(arch: &Architecture) -> Self {
        let hidden = arch
            .hidden_layers()
            .map(|l| {
                let w = arch.width(l);
                LayerTransform {
                    perm: (0..w).collect(),
                    signs: vec![1.0; w],
                }
            })
            .collect();
        Self { hidden }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.hidden.len() != arch.num_hidden_layers() {
            return Err(Error::InvalidTransform(format!(
                "transform has {} layer blocks, architecture has {} hidden layers",
                self.hidden.len(),
                arch.num_hidden_layers()
            )));
        }
        for (h, lt) in self.hidden.iter().enumerate() {
            let width = arch.width(h + 2);
            if lt.perm.len() != width || lt.signs.len() != width {
                return Err(Error::InvalidTransform(format!(
                    "layer {} block has lengths {}/{}, expected {width}",
                    h + 2,
                    lt.perm.len(),
                    lt.signs.len()
                )));
            }
            let mut seen = vec![false; width];
            for &src in &lt.perm {
                if src >= width || seen[src] {
                    return Err(Error::InvalidTransform(format!(
                        "layer {} permutation is not a bijection",
                        h + 2
                    )));
                }
                seen[src] = true;
            }
            if lt.signs.iter().any(|&s| s != 1.0 && s != -1.0) {
                return Err(Error::InvalidTransform(format!(
                    "layer {} signs must be -1 or +1",
                    h + 2
                )));
            }
        }
        Ok(())
    }

    /// Whether any sign flip is present.
    pub fn has_sign_flips(&self) -> bool {
        self.hidden
            .iter()
            .any(|lt| lt.signs.iter().any(|&s| s == -1.0))
    }

    /// The composition `other after self`: applying the result once equals
    /// applying `self` first and then `other`.
    pub fn then(&self, other: &EquioutputTransform) -> Result<EquioutputTransform> {
        if self.hidden.len() != other.hidden.len() {
            return Err(Error::InvalidTransform(
                "cannot compose transforms for different architectures".into(),
            ));
        }
        let hidden = self
            .hidden
            .iter()
            .zip(&other.hidden)
            .map(|(first, second)| {
                let width = first.perm.len();
                let mut perm = vec![0; width];
                let mut signs = vec![1.0; width];
                for i in 0..width {
                    perm[i] = first.perm[second.perm[i]];
                    signs[i] = second.signs[i] * first.signs[second.perm[i]];
                }
                LayerTransform { perm, signs }
            })
            .collect();
        Ok(EquioutputTransform { hidden })
    }

    /// The group inverse: `apply(inverse, apply(self, theta)) == theta`.
    pub fn inverse(&self) -> EquioutputTransform {
        let hidden = self
            .hidden
            .iter()
            .map(|lt| {
                let width = lt.perm.len();
                let mut perm = vec![0; width];
                let mut signs = vec![1.0; width];
                for (new, &old) in lt.perm.iter().enumerate() {
                    perm[old] = new;
                }
                for i in 0..width {
                    signs[i] = lt.signs[perm[i]];
                }
                LayerTransform { perm, signs }
            })
            .collect();
        EquioutputTransform { hidden }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transform serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Applies an equioutput transformation, returning the transformed vector.
///
/// Sign flips require tanh activation; a transform with flips on a ReLU
/// architecture is rejected.
pub fn apply_transform(
    arch: &Architecture,
    theta: &[f64],
    transform: &EquioutputTransform,
) -> Result<Vec<f64>> {
    transform.validate(arch)?;
    if arch.hidden_activation == Activation::Relu && transform.has_sign_flips() {
        return Err(Error::InvalidTransform(
            "sign flips are not equioutput under relu activation".into(),
        ));
    }
    let mut out = theta.to_vec();
    for (h, lt) in transform.hidden.iter().enumerate() {
        net::permute_hidden_neurons(arch, &mut out, h + 2, &lt.perm, &lt.signs)?;
    }
    Ok(out)
}

/// Draws a uniform random transformation: a Fisher-Yates permutation and
/// i.i.d. uniform signs per hidden layer.
pub fn random_transform<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<EquioutputTransform> {
    if arch.hidden_activation != Activation::Tanh {
        return Err(Error::InvalidTransform(
            "random sign-flip transforms require tanh activation".into(),
        ));
    }
    let hidden = arch
        .hidden_layers()
        .map(|l| {
            let width = arch.width(l);
            let mut perm: Vec<usize> = (0..width).collect();
            perm.shuffle(rng);
            let signs = (0..width)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            LayerTransform { perm, signs }
        })
        .collect();
    Ok(EquioutputTransform { hidden })
}

/// Cardinality lower bound of the equioutput transformation set.
#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityBound {
    /// `log10` of `prod_l M_l! * 2^(M_l)` over hidden layers.
    pub log10_value: f64,
    /// Exact value, when cheap to materialize.
    pub exact_integer: Option<BigUint>,
}

/// Computes the lower bound `|E| >= prod_l M_l! * 2^(M_l)` for tanh networks.
///
/// ReLU architectures admit an infinite scaling family, so no finite bound is
/// reported for them.
pub fn cardinality_lower_bound(arch: &Architecture) -> Result<CardinalityBound> {
    if arch.hidden_activation != Activation::Tanh {
        return Err(Error::InvalidInput(
            "cardinality bound is finite only for tanh activation".into(),
        ));
    }
    let mut log10 = 0.0;
    for l in arch.hidden_layers() {
        let width = arch.width(l);
        for k in 2..=width {
            log10 += (k as f64).log10();
        }
        log10 += width as f64 * 2f64.log10();
    }
    let exact_integer = if log10 <= 100_000.0 {
        let mut value = BigUint::from(1u8);
        for l in arch.hidden_layers() {
            let width = arch.width(l);
            for k in 2..=width as u64 {
                value *= k;
            }
            value <<= width;
        }
        Some(value)
    } else {
        None
    };
    Ok(CardinalityBound {
        log10_value: log10,
        exact_integer,
    })
}

/// Largest sup-norm output difference between two parameterizations over
/// `n_inputs` i.i.d. standard normal inputs.
pub fn max_output_deviation<R: Rng>(
    arch: &Architecture,
    theta_a: &[f64],
    theta_b: &[f64],
    n_inputs: usize,
    rng: &mut R,
) -> Result<f64> {
    let layout = arch.layout();
    let mut scratch = net::ForwardScratch::default();
    let mut ya = vec![0.0; arch.output_dim()];
    let mut yb = vec![0.0; arch.output_dim()];
    let mut x = vec![0.0; arch.input_dim()];
    let mut max_dev = 0.0f64;
    for _ in 0..n_inputs {
        for xi in x.iter_mut() {
            *xi = rng.sample::<f64, _>(StandardNormal);
        }
        net::forward_into(arch, &layout, theta_a, &x, &mut ya, &mut scratch)?;
        net::forward_into(arch, &layout, theta_b, &x, &mut yb, &mut scratch)?;
        for (a, b) in ya.iter().zip(&yb) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    Ok(max_dev)
}

/// Checks the equioutput property of `transform` on random inputs.
///
/// Returns `(holds, max_deviation)` where `holds = max_deviation < tol`.
pub fn verify_equioutput<R: Rng>(
    arch: &Architecture,
    theta: &[f64],
    transform: &EquioutputTransform,
    n_test_inputs: usize,
    tol: f64,
    rng: &mut R,
) -> Result<(bool, f64)> {
    let transformed = apply_transform(arch, theta, transform)?;
    let dev = max_output_deviation(arch, theta, &transformed, n_test_inputs, rng)?;
    Ok((dev < tol, dev))
}

/// ReLU scaling check: scales one hidden neuron's incoming weights and bias
/// by `c > 0` and its outgoing weights by `1/c`, then measures the output
/// deviation. For ReLU activation the deviation is zero up to rounding.
pub fn relu_scaling_deviation<R: Rng>(
    arch: &Architecture,
    theta: &[f64],
    layer: usize,
    neuron: usize,
    c: f64,
    n_test_inputs: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidInput(format!(
            "scaling factor must be positive and finite, got {c}"
        )));
    }
    let mut phi = net::extract_neuron_vector(arch, theta, layer, neuron)?;
    for w in phi.incoming.iter_mut() {
        *w *= c;
    }
    phi.bias *= c;
    for w in phi.outgoing.iter_mut() {
        *w /= c;
    }
    let mut scaled = theta.to_vec();
    net::write_neuron_vector(arch, &mut scaled, &phi)?;
    max_output_deviation(arch, theta, &scaled, n_test_inputs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::param_dim;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tanh_arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec(), Activation::Tanh).unwrap()
    }

    fn random_theta(arch: &Architecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..param_dim(arch))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn identity_transform_is_noop() {
        let arch = tanh_arch(&[2, 4, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = random_theta(&arch, &mut rng);
        let out = apply_transform(&arch, &theta, &EquioutputTransform::identity(&arch)).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn inverse_recovers_original_bitwise() {
        let arch = tanh_arch(&[2, 4, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let theta = random_theta(&arch, &mut rng);
            let e = random_transform(&arch, &mut rng).unwrap();
            let forward = apply_transform(&arch, &theta, &e).unwrap();
            let back = apply_transform(&arch, &forward, &e.inverse()).unwrap();
            assert_eq!(back, theta);
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let arch = tanh_arch(&[1, 3, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let theta = random_theta(&arch, &mut rng);
            let e1 = random_transform(&arch, &mut rng).unwrap();
            let e2 = random_transform(&arch, &mut rng).unwrap();
            let sequential =
                apply_transform(&arch, &apply_transform(&arch, &theta, &e1).unwrap(), &e2)
                    .unwrap();
            let composed = apply_transform(&arch, &theta, &e1.then(&e2).unwrap()).unwrap();
            assert_eq!(sequential, composed);
        }
    }

    #[test]
    fn transforms_preserve_outputs() {
        let arch = tanh_arch(&[2, 4, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let theta = random_theta(&arch, &mut rng);
            let e = random_transform(&arch, &mut rng).unwrap();
            let (ok, dev) = verify_equioutput(&arch, &theta, &e, 100, 1e-10, &mut rng).unwrap();
            assert!(ok, "deviation {dev} exceeds 1e-10");
        }
    }

    #[test]
    fn transforms_preserve_euclidean_norm() {
        let arch = tanh_arch(&[2, 5, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let theta = random_theta(&arch, &mut rng);
            let e = random_transform(&arch, &mut rng).unwrap();
            let transformed = apply_transform(&arch, &theta, &e).unwrap();
            let n0: f64 = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = transformed.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupted_transform_is_detected() {
        // Flip a neuron's incoming weights and bias but not its outgoing
        // weights; the result is not equioutput.
        let arch = tanh_arch(&[1, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = random_theta(&arch, &mut rng);
        let mut corrupted = theta.clone();
        let mut phi = net::extract_neuron_vector(&arch, &theta, 2, 2).unwrap();
        for w in phi.incoming.iter_mut() {
            *w = -*w;
        }
        phi.bias = -phi.bias;
        net::write_neuron_vector(&arch, &mut corrupted, &phi).unwrap();
        let dev = max_output_deviation(&arch, &theta, &corrupted, 100, &mut rng).unwrap();
        assert!(dev > 1e-3, "corruption went undetected (dev {dev})");
    }

    #[test]
    fn relu_scaling_is_equioutput() {
        let arch = Architecture::new(vec![1, 3, 1], Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random_theta(&arch, &mut rng);
        let dev = relu_scaling_deviation(&arch, &theta, 2, 1, 3.7, 100, &mut rng).unwrap();
        assert!(dev < 1e-10, "relu scaling deviation {dev}");
        // The same rescaling is not equioutput under tanh.
        let tanh = tanh_arch(&[1, 3, 1]);
        let dev = relu_scaling_deviation(&tanh, &theta, 2, 1, 3.7, 100, &mut rng).unwrap();
        assert!(dev > 1e-3);
    }

    #[test]
    fn sign_flips_rejected_for_relu() {
        let arch = Architecture::new(vec![1, 2, 1], Activation::Relu).unwrap();
        let theta = vec![0.0; param_dim(&arch)];
        let e = EquioutputTransform {
            hidden: vec![LayerTransform {
                perm: vec![0, 1],
                signs: vec![-1.0, 1.0],
            }],
        };
        assert!(apply_transform(&arch, &theta, &e).is_err());
        // Pure permutations remain valid under relu.
        let p = EquioutputTransform {
            hidden: vec![LayerTransform {
                perm: vec![1, 0],
                signs: vec![1.0, 1.0],
            }],
        };
        assert!(apply_transform(&arch, &theta, &p).is_ok());
    }

    #[test]
    fn cardinality_bound_examples() {
        let wide = tanh_arch(&[1, 128, 1]);
        let bound = cardinality_lower_bound(&wide).unwrap();
        assert!((bound.log10_value - 254.117).abs() < 0.01);

        let deep = tanh_arch(&[1, 16, 16, 16, 1]);
        let bound = cardinality_lower_bound(&deep).unwrap();
        assert!((bound.log10_value - 54.411).abs() < 0.01);

        let tiny = tanh_arch(&[1, 1, 1]);
        let bound = cardinality_lower_bound(&tiny).unwrap();
        assert_eq!(bound.exact_integer, Some(BigUint::from(2u8)));
        assert!((bound.log10_value - 2f64.log10()).abs() < 1e-12);

        let relu = Architecture::new(vec![1, 4, 1], Activation::Relu).unwrap();
        assert!(cardinality_lower_bound(&relu).is_err());
    }

    #[test]
    fn cardinality_exact_matches_log10() {
        let arch = tanh_arch(&[1, 3, 1]);
        let bound = cardinality_lower_bound(&arch).unwrap();
        // 3! * 2^3 = 48.
        assert_eq!(bound.exact_integer, Some(BigUint::from(48u8)));
        assert!((bound.log10_value - 48f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn random_transforms_cover_the_group() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let e = random_transform(&arch, &mut rng).unwrap();
            let key: Vec<(usize, bool)> = e.hidden[0]
                .perm
                .iter()
                .zip(&e.hidden[0].signs)
                .map(|(&p, &s)| (p, s > 0.0))
                .collect();
            seen.insert(key);
        }
        assert_eq!(seen.len(), 48); // 3! * 2^3
    }

    #[test]
    fn random_transform_is_seed_deterministic() {
        let arch = tanh_arch(&[2, 4, 4, 1]);
        let e1 = random_transform(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let e2 = random_transform(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn transform_json_round_trip() {
        let arch = tanh_arch(&[1, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e = random_transform(&arch, &mut rng).unwrap();
        let json = e.to_json();
        assert!(json.contains("\"perm\""));
        assert!(json.contains("\"signs\""));
        assert_eq!(EquioutputTransform::from_json(&json).unwrap(), e);
    }
}
