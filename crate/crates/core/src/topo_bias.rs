//! Terrain-aware attention bias.
//!
//! For patches `i` (query) and `j` (key) with mean elevations `h_i`, `h_j`
//! in metres, the penalty is
//!
//! ```text
//! J[i,j] = clamp(-α · max(0, (h_j - h_i) / h₀), -10, 0),   h₀ = 1000 m
//! ```
//!
//! so attending uphill costs logit mass and attending downhill or level is
//! free. The same `N x N` matrix is shared by every head and layer.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fields::GridSpec;

/// Reference height h₀ in metres.
pub const REFERENCE_HEIGHT: f64 = 1000.0;
pub const CLAMP_MIN: f64 = -10.0;
pub const CLAMP_MAX: f64 = 0.0;
/// Initial value of the learnable scale α.
pub const ALPHA_INIT: f64 = 2.0;

/// How the penalty matrix is turned into the additive logit bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasCombine {
    /// The penalty is added to the logits as is.
    #[default]
    Identity,
    /// Gram matrix `R·Rᵀ` of the unscaled uphill penalty `R`, divided by its
    /// maximum and rescaled to `R`'s range before α and the clamp apply.
    RowCorrelation,
}

impl BiasCombine {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BiasCombine::Identity),
            "row_correlation" => Ok(BiasCombine::RowCorrelation),
            _ => Err(Error::Config(format!(
                "unknown bias_combine `{s}` (identity|row_correlation)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BiasCombine::Identity => "identity",
            BiasCombine::RowCorrelation => "row_correlation",
        }
    }
}

/// Mean elevation of every patch, in canonical patch order.
pub fn patch_elevations(elevation: &[f32], spec: &GridSpec) -> Result<Vec<f64>> {
    if elevation.len() != spec.cells() {
        return Err(Error::Shape(format!(
            "elevation of length {} for a {}x{} grid",
            elevation.len(),
            spec.height,
            spec.width
        )));
    }
    let p = spec.patch;
    let area = (p * p) as f64;
    Ok((0..spec.n_patches())
        .map(|idx| {
            let (pr, pc) = spec.patch_position(idx);
            let mut sum = 0.0f64;
            for r in pr * p..(pr + 1) * p {
                for c in pc * p..(pc + 1) * p {
                    sum += elevation[r * spec.width + c] as f64;
                }
            }
            sum / area
        })
        .collect())
}

/// Bias matrix for a given α together with what is needed for its
/// α-derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationBias {
    elevations: Vec<f64>,
    alpha: f64,
    /// Bias per unit α before clamping.
    unit: Array2<f64>,
    matrix: Array2<f64>,
}

impl ElevationBias {
    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `B_elev`, every entry in `[-10, 0]`.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    /// `∂B/∂α`: the unit penalty where the clamp is inactive, 0 where it
    /// saturates, including exactly at -10. At α = 0 the derivative is the
    /// one-sided value from α > 0.
    pub fn gradient_alpha(&self) -> Array2<f64> {
        let alpha = self.alpha;
        self.unit.mapv(|g| {
            let raw = alpha * g;
            if raw > CLAMP_MIN && raw <= CLAMP_MAX {
                g
            } else {
                0.0
            }
        })
    }
}

fn uphill(elevations: &[f64]) -> Array2<f64> {
    let n = elevations.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        ((elevations[j] - elevations[i]) / REFERENCE_HEIGHT).max(0.0)
    })
}

fn unit_bias(elevations: &[f64], combine: BiasCombine) -> Array2<f64> {
    let relu = uphill(elevations);
    match combine {
        BiasCombine::Identity => relu.mapv(|x| -x),
        BiasCombine::RowCorrelation => {
            let gram = relu.dot(&relu.t());
            let gmax = gram.iter().cloned().fold(0.0f64, f64::max);
            let rmax = relu.iter().cloned().fold(0.0f64, f64::max);
            if gmax == 0.0 {
                Array2::zeros(relu.raw_dim())
            } else {
                gram.mapv(|c| -(c / gmax) * rmax)
            }
        }
    }
}

/// Build `B_elev` from patch elevations (metres) and the current α.
pub fn build_bias(elevations: &[f64], alpha: f64) -> Result<ElevationBias> {
    build_bias_with(elevations, alpha, BiasCombine::Identity)
}

pub fn build_bias_with(elevations: &[f64], alpha: f64, combine: BiasCombine) -> Result<ElevationBias> {
    if !alpha.is_finite() {
        return Err(Error::numeric("elevation bias", format!("alpha is {alpha}")));
    }
    if let Some(h) = elevations.iter().find(|h| !h.is_finite()) {
        return Err(Error::Input(format!("non-finite patch elevation {h}")));
    }
    let unit = unit_bias(elevations, combine);
    let matrix = unit.mapv(|g| (alpha * g).clamp(CLAMP_MIN, CLAMP_MAX));
    Ok(ElevationBias {
        elevations: elevations.to_vec(),
        alpha,
        unit,
        matrix,
    })
}

/// `∂B_elev/∂α` for the identity combine rule.
pub fn bias_gradient_alpha(elevations: &[f64], alpha: f64) -> Result<Array2<f64>> {
    Ok(build_bias(elevations, alpha)?.gradient_alpha())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_elevation_examples() {
        let spec = GridSpec::new(2, 4, 2, 1, 1).unwrap();
        let flat = patch_elevations(&[500.0; 8], &spec).unwrap();
        assert_eq!(flat, vec![500.0, 500.0]);
        // patch 0 cells {0, 1000, 2000, 1000}; patch 1 a ridge
        let h = [0.0, 1000.0, 3000.0, 3000.0, 2000.0, 1000.0, 3000.0, 3000.0];
        let means = patch_elevations(&h, &spec).unwrap();
        assert_eq!(means, vec![1000.0, 3000.0]);
    }

    #[test]
    fn bias_examples() {
        let b = build_bias(&[100.0, 100.0], 2.0).unwrap();
        assert_eq!(b.matrix()[[0, 1]], 0.0);
        let b = build_bias(&[0.0, 500.0], 2.0).unwrap();
        assert_eq!(b.matrix()[[0, 1]], -1.0);
        assert_eq!(b.matrix()[[1, 0]], 0.0);
        let b = build_bias(&[0.0, 10_000.0], 2.0).unwrap();
        assert_eq!(b.matrix()[[0, 1]], -10.0);
        assert!(build_bias(&[0.0], f64::NAN).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = bias_gradient_alpha(&[500.0, 0.0], 2.0).unwrap();
        assert_eq!(g[[0, 1]], 0.0); // downhill
        let g = bias_gradient_alpha(&[0.0, 500.0], 2.0).unwrap();
        assert_eq!(g[[0, 1]], -0.5);
        let g = bias_gradient_alpha(&[0.0, 10_000.0], 2.0).unwrap();
        assert_eq!(g[[0, 1]], 0.0); // raw -20, clamped
        let g = bias_gradient_alpha(&[0.0, 5_000.0], 2.0).unwrap();
        assert_eq!(g[[0, 1]], 0.0); // exactly on the boundary
    }

    #[test]
    fn zero_alpha_gives_zero_bias() {
        let b = build_bias(&[0.0, 4000.0, 250.0], 0.0).unwrap();
        assert!(b.matrix().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn row_correlation_stays_in_range() {
        let h = [0.0, 1500.0, 300.0, 4200.0, 900.0];
        let b = build_bias_with(&h, 2.0, BiasCombine::RowCorrelation).unwrap();
        assert!(b.matrix().iter().all(|&x| (CLAMP_MIN..=CLAMP_MAX).contains(&x)));
        let flat = build_bias_with(&[7.0; 4], 2.0, BiasCombine::RowCorrelation).unwrap();
        assert!(flat.matrix().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn bias_contract(
            h in prop::collection::vec(-500.0f64..9000.0, 1..12),
            alpha in -50.0f64..50.0,
        ) {
            let b = build_bias(&h, alpha).unwrap();
            let m = b.matrix();
            for i in 0..h.len() {
                for j in 0..h.len() {
                    prop_assert!(m[[i, j]] >= CLAMP_MIN && m[[i, j]] <= CLAMP_MAX);
                    if h[j] <= h[i] {
                        prop_assert_eq!(m[[i, j]], 0.0);
                    }
                    for k in 0..h.len() {
                        if alpha >= 0.0 && h[k] >= h[j] {
                            prop_assert!(m[[i, k]] <= m[[i, j]]);
                        }
                    }
                }
            }
        }

        #[test]
        fn alpha_gradient_matches_central_differences(
            h in prop::collection::vec(0.0f64..4000.0, 2..8),
            alpha in 0.1f64..3.0,
        ) {
            let eps = 1e-6;
            let g = bias_gradient_alpha(&h, alpha).unwrap();
            let plus = build_bias(&h, alpha + eps).unwrap().into_matrix();
            let minus = build_bias(&h, alpha - eps).unwrap().into_matrix();
            let raw = build_bias_with(&h, 1.0, BiasCombine::Identity).unwrap().unit;
            for ((idx, &gv), &u) in g.indexed_iter().zip(raw.iter()) {
                let r = alpha * u;
                // only where the clamp is comfortably inactive on both sides
                if r > CLAMP_MIN + 1e-3 {
                    let fd = (plus[idx] - minus[idx]) / (2.0 * eps);
                    let denom = gv.abs().max(1e-12);
                    prop_assert!((fd - gv).abs() / denom < 1e-6 || (fd - gv).abs() < 1e-9,
                        "entry {:?}: fd {} vs analytic {}", idx, fd, gv);
                }
            }
        }
    }
}
