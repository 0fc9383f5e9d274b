//! Wind-guided patch reordering.
//!
//! The patch grid is cut into sectors of `sector_cols x sector_rows`
//! patches. Each sector gets one wind direction, and its patches are sorted
//! by their projection onto that direction, so sequence order runs
//! upwind to downwind. Sector orders are concatenated into one permutation
//! over the canonical patch numbering of [`GridSpec::patch_index`].
//!
//! Axes: `x` grows with column index, `y` grows with row index, `u` is the
//! velocity along `x` and `v` the velocity along `y`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::fields::GridSpec;

/// How per-sector winds are averaged before taking the direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindMean {
    /// Each cell weighted by its wind speed.
    #[default]
    Weighted,
    /// Arithmetic mean of the components.
    Plain,
}

impl WindMean {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(WindMean::Weighted),
            "plain" => Ok(WindMean::Plain),
            _ => Err(Error::Config(format!("unknown wind_mean `{s}` (weighted|plain)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WindMean::Weighted => "weighted",
            WindMean::Plain => "plain",
        }
    }
}

/// Magnitude-weighted mean wind direction over a set of cells, in radians.
///
/// Returns `0.0` when every cell is calm.
pub fn patch_wind_direction(u: &[f32], v: &[f32]) -> f64 {
    wind_direction(u.iter().zip(v).map(|(&a, &b)| (a as f64, b as f64)), WindMean::Weighted).0
}

/// `(theta, calm)` where `calm` means the averaging weights vanished.
fn wind_direction(cells: impl Iterator<Item = (f64, f64)>, mode: WindMean) -> (f64, bool) {
    let (mut su, mut sv, mut sw, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for (u, v) in cells {
        let w = match mode {
            WindMean::Weighted => (u * u + v * v).sqrt(),
            WindMean::Plain => 1.0,
        };
        su += u * w;
        sv += v * w;
        sw += w;
        n += 1;
    }
    let calm = match mode {
        WindMean::Weighted => sw == 0.0,
        WindMean::Plain => n == 0 || (su == 0.0 && sv == 0.0),
    };
    if calm {
        return (0.0, true);
    }
    ((sv / sw).atan2(su / sw), false)
}

/// Projected coordinate `x cos θ + y sin θ`.
pub fn projection(x: f64, y: f64, theta: f64) -> f64 {
    x * theta.cos() + y * theta.sin()
}

/// A sector-block permutation of patches and its exact inverse.
///
/// `forward[a]` is the canonical patch index placed at sequence position `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorPermutation {
    spec: GridSpec,
    forward: Vec<usize>,
    inverse: Vec<usize>,
    angles: Vec<f64>,
}

impl SectorPermutation {
    pub fn identity(spec: GridSpec) -> Self {
        let n = spec.n_patches();
        SectorPermutation {
            spec,
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
            angles: vec![0.0; spec.n_sectors()],
        }
    }

    /// Wrap an arbitrary bijection; sector angles are left at zero.
    pub fn from_forward(spec: GridSpec, forward: Vec<usize>) -> Result<Self> {
        let n = spec.n_patches();
        if forward.len() != n {
            return Err(Error::Shape(format!("permutation of length {} for {n} patches", forward.len())));
        }
        let inverse = invert(&forward)?;
        Ok(SectorPermutation {
            spec,
            forward,
            inverse,
            angles: vec![0.0; spec.n_sectors()],
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Wind direction used for each sector, radians.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }

    /// Reorder tokens into sequence order.
    pub fn apply<T: Clone>(&self, tokens: &[T]) -> Result<Vec<T>> {
        self.check_len(tokens.len())?;
        Ok(self.forward.iter().map(|&i| tokens[i].clone()).collect())
    }

    /// Put sequence-ordered tokens back at their canonical positions.
    pub fn unapply<T: Clone>(&self, tokens: &[T]) -> Result<Vec<T>> {
        self.check_len(tokens.len())?;
        Ok(self.inverse.iter().map(|&a| tokens[a].clone()).collect())
    }

    /// Row-wise [`SectorPermutation::apply`] on an `N x d` token matrix.
    pub fn apply_rows<A: Clone>(&self, tokens: ArrayView2<'_, A>) -> Result<Array2<A>> {
        self.check_len(tokens.nrows())?;
        Ok(tokens.select(ndarray::Axis(0), &self.forward))
    }

    pub fn unapply_rows<A: Clone>(&self, tokens: ArrayView2<'_, A>) -> Result<Array2<A>> {
        self.check_len(tokens.nrows())?;
        Ok(tokens.select(ndarray::Axis(0), &self.inverse))
    }

    /// Co-permute an `N x N` pairwise matrix so that entry `(a, b)` refers to
    /// the patches at sequence positions `a` and `b`.
    pub fn apply_pairwise<A: Clone>(&self, m: ArrayView2<'_, A>) -> Result<Array2<A>> {
        self.check_len(m.nrows())?;
        self.check_len(m.ncols())?;
        Ok(m.select(ndarray::Axis(0), &self.forward)
            .select(ndarray::Axis(1), &self.forward))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.forward.len() {
            return Err(Error::Shape(format!(
                "{n} tokens for a permutation over {} patches",
                self.forward.len()
            )));
        }
        Ok(())
    }
}

fn invert(forward: &[usize]) -> Result<Vec<usize>> {
    let n = forward.len();
    let mut inverse = vec![usize::MAX; n];
    for (a, &i) in forward.iter().enumerate() {
        if i >= n || inverse[i] != usize::MAX {
            return Err(Error::Input(format!("not a permutation: index {i} at position {a}")));
        }
        inverse[i] = a;
    }
    Ok(inverse)
}

/// Sector-local normalized patch centre `((col+½)/cols, (row+½)/rows)`.
pub fn sector_coordinates(spec: &GridSpec, local: usize) -> (f64, f64) {
    let (lr, lc) = (local / spec.sector_cols, local % spec.sector_cols);
    (
        (lc as f64 + 0.5) / spec.sector_cols as f64,
        (lr as f64 + 0.5) / spec.sector_rows as f64,
    )
}

/// Build the wind-guided permutation from per-cell winds (`H x W`, row-major,
/// physical units).
pub fn build_permutation(spec: &GridSpec, u: &[f32], v: &[f32], mode: WindMean) -> Result<SectorPermutation> {
    build_permutation_counted(spec, u, v, mode).map(|(p, _)| p)
}

/// [`build_permutation`] that also reports the number of comparisons the
/// per-sector sorts performed.
pub fn build_permutation_counted(
    spec: &GridSpec,
    u: &[f32],
    v: &[f32],
    mode: WindMean,
) -> Result<(SectorPermutation, u64)> {
    spec.validate()?;
    if u.len() != spec.cells() || v.len() != spec.cells() {
        return Err(Error::Shape(format!(
            "wind components of length {} / {} for a {}x{} grid",
            u.len(),
            v.len(),
            spec.height,
            spec.width
        )));
    }
    let m = spec.patches_per_sector();
    let p = spec.patch;
    let sector_h = spec.sector_rows * p;
    let sector_w = spec.sector_cols * p;
    let mut forward = Vec::with_capacity(spec.n_patches());
    let mut angles = Vec::with_capacity(spec.n_sectors());
    let mut comparisons = 0u64;
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);

    for s in 0..spec.n_sectors() {
        let (sr, sc) = (s / spec.sectors_across(), s % spec.sectors_across());
        let (r0, c0) = (sr * sector_h, sc * sector_w);
        let cells = (r0..r0 + sector_h).flat_map(|r| {
            (c0..c0 + sector_w).map(move |c| {
                let k = r * spec.width + c;
                (u[k] as f64, v[k] as f64)
            })
        });
        let (theta, calm) = wind_direction(cells, mode);
        angles.push(theta);
        let base = s * m;
        if calm {
            forward.extend(base..base + m);
            continue;
        }
        let (cos, sin) = (theta.cos(), theta.sin());
        keyed.clear();
        keyed.extend((0..m).map(|local| {
            let (x, y) = sector_coordinates(spec, local);
            (x * cos + y * sin, local)
        }));
        // Stable: equal projections keep ascending local raster index.
        keyed.sort_by(|a, b| {
            comparisons += 1;
            a.0.total_cmp(&b.0)
        });
        forward.extend(keyed.iter().map(|&(_, local)| base + local));
    }
    let inverse = invert(&forward)?;
    Ok((
        SectorPermutation {
            spec: *spec,
            forward,
            inverse,
            angles,
        },
        comparisons,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn wind_direction_examples() {
        assert_eq!(patch_wind_direction(&[1.0; 4], &[0.0; 4]), 0.0);
        assert!((patch_wind_direction(&[0.0; 4], &[2.0; 4]) - FRAC_PI_2).abs() < 1e-15);
        assert!((patch_wind_direction(&[1.0, 0.0], &[0.0, 1.0]) - FRAC_PI_4).abs() < 1e-15);
        assert_eq!(patch_wind_direction(&[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(projection(0.3, 0.9, 0.0), 0.3);
        assert!((projection(0.3, 0.9, FRAC_PI_2) - 0.9).abs() < 1e-15);
        let expected = 0.75 * 2f64.sqrt() / 2.0;
        assert!((projection(0.5, 0.25, FRAC_PI_4) - expected).abs() < 1e-15);
        assert!((projection(0.5, 0.25, FRAC_PI_4) - 0.5303).abs() < 1e-4);
    }

    #[test]
    fn eastward_wind_orders_columns_then_rows() {
        // One 2x2-patch sector, p = 1.
        let spec = GridSpec::new(2, 2, 1, 2, 2).unwrap();
        let perm = build_permutation(&spec, &[1.0; 4], &[0.0; 4], WindMean::Weighted).unwrap();
        // local raster: 0=(r0,c0) 1=(r0,c1) 2=(r1,c0) 3=(r1,c1)
        assert_eq!(perm.forward(), &[0, 2, 1, 3]);
    }

    #[test]
    fn westward_wind_reverses_columns() {
        let spec = GridSpec::new(2, 2, 1, 2, 2).unwrap();
        let perm = build_permutation(&spec, &[-1.0; 4], &[0.0; 4], WindMean::Weighted).unwrap();
        assert_eq!(perm.forward(), &[1, 3, 0, 2]);
    }

    #[test]
    fn calm_sectors_keep_raster_order() {
        let spec = GridSpec::new(8, 8, 2, 2, 2).unwrap();
        let z = vec![0.0f32; 64];
        let perm = build_permutation(&spec, &z, &z, WindMean::Weighted).unwrap();
        assert!(perm.is_identity());
        let perm = build_permutation(&spec, &z, &z, WindMean::Plain).unwrap();
        assert!(perm.is_identity());
    }

    #[test]
    fn apply_examples() {
        let spec = GridSpec::new(1, 2, 1, 2, 1).unwrap();
        let id = SectorPermutation::identity(spec);
        assert_eq!(id.apply(&["a", "b"]).unwrap(), vec!["a", "b"]);
        let swap = SectorPermutation::from_forward(spec, vec![1, 0]).unwrap();
        assert_eq!(swap.apply(&["a", "b"]).unwrap(), vec!["b", "a"]);
        assert_eq!(swap.unapply(&["b", "a"]).unwrap(), vec!["a", "b"]);
        assert!(matches!(swap.apply(&["a"]), Err(Error::Shape(_))));
        assert!(SectorPermutation::from_forward(spec, vec![0, 0]).is_err());
    }

    #[test]
    fn sort_work_scales_with_sector_size() {
        // Same grid, sectors of 4 vs 64 patches: K*M*log M shrinks with M.
        let small = GridSpec::new(32, 32, 2, 2, 2).unwrap();
        let large = GridSpec::new(32, 32, 2, 8, 8).unwrap();
        let u: Vec<f32> = (0..1024).map(|i| ((i * 37 % 17) as f32) - 8.0).collect();
        let v: Vec<f32> = (0..1024).map(|i| ((i * 11 % 13) as f32) - 6.0).collect();
        let (_, c_small) = build_permutation_counted(&small, &u, &v, WindMean::Weighted).unwrap();
        let (_, c_large) = build_permutation_counted(&large, &u, &v, WindMean::Weighted).unwrap();
        assert!(c_small < c_large, "{c_small} vs {c_large}");
        let bound = |s: &GridSpec| {
            let m = s.patches_per_sector() as f64;
            s.n_sectors() as f64 * m * m.log2()
        };
        assert!((c_large as f64) <= 2.0 * bound(&large));
        assert!((c_small as f64) <= 2.0 * bound(&small));
    }

    proptest! {
        #[test]
        fn forward_stays_inside_sectors(
            winds in prop::collection::vec(-10.0f32..10.0, 2 * 16 * 16),
        ) {
            let spec = GridSpec::new(16, 16, 2, 2, 4).unwrap();
            let (u, v) = winds.split_at(256);
            let perm = build_permutation(&spec, u, v, WindMean::Weighted).unwrap();
            let m = spec.patches_per_sector();
            for (a, &i) in perm.forward().iter().enumerate() {
                prop_assert_eq!(a / m, i / m);
                prop_assert_eq!(perm.inverse()[i], a);
            }
            let again = build_permutation(&spec, u, v, WindMean::Weighted).unwrap();
            prop_assert_eq!(again, perm);
        }

        #[test]
        fn unapply_inverts_apply(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let spec = GridSpec::new(6, 8, 2, 4, 3).unwrap();
            let mut fwd: Vec<usize> = (0..spec.n_patches()).collect();
            fwd.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let perm = SectorPermutation::from_forward(spec, fwd).unwrap();
            let tokens: Vec<u64> = (0..spec.n_patches() as u64).map(|i| i * 31 + 7).collect();
            prop_assert_eq!(perm.unapply(&perm.apply(&tokens).unwrap()).unwrap(), tokens);
        }
    }
}
