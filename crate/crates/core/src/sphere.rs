//! Gradient-direction sets on the unit sphere: generation by electrostatic
//! repulsion, random subsetting with a design-conditioning check, and
//! near-uniform grids for quadrature and amplitude constraints.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sh;

/// Minimum angular separation between distinct directions, in degrees.
const MIN_SEPARATION_DEG: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SphereError {
    #[error("direction {0} has norm {1}, not a unit vector")]
    NonUnitDirection(usize, f64),
    #[error("directions {0} and {1} are within {MIN_SEPARATION_DEG} degrees of each other")]
    DuplicateDirection(usize, usize),
    #[error("scheme generation needs at least 6 directions, got {0}")]
    TooFewDirections(usize),
    #[error("keep count {keep} is below the {floor}-direction floor for order-{order} fitting")]
    KeepBelowShMinimum { keep: usize, floor: usize, order: usize },
    #[error("keep count {keep} exceeds the {available} available directions")]
    KeepAboveAvailable { keep: usize, available: usize },
    #[error("no size-{keep} subset passed the uniformity check within {retries} retries")]
    UniformityUnattainable { keep: usize, retries: usize },
    #[error("subset of {n} directions cannot support {terms} order-{order} basis terms")]
    UnderdeterminedDesign { n: usize, order: usize, terms: usize },
}

/// A set of unit vectors on the sphere. With `antipodal_symmetric` set the
/// vectors are treated as axes: `d` and `-d` are the same direction.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    dirs: Vec<Vector3<f64>>,
    antipodal_symmetric: bool,
}

impl DirectionSet {
    /// Validates unit norms (within 1e-9) and pairwise separation of at
    /// least 0.1 degrees (axis-wise when `antipodal_symmetric`).
    pub fn new(dirs: Vec<Vector3<f64>>, antipodal_symmetric: bool) -> Result<Self, SphereError> {
        for (i, d) in dirs.iter().enumerate() {
            let n = d.norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(SphereError::NonUnitDirection(i, n));
            }
        }
        let cos_min = (MIN_SEPARATION_DEG.to_radians()).cos();
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                let c = dirs[i].dot(&dirs[j]);
                let close = if antipodal_symmetric { c.abs() > cos_min } else { c > cos_min };
                if close {
                    return Err(SphereError::DuplicateDirection(i, j));
                }
            }
        }
        Ok(Self { dirs, antipodal_symmetric })
    }

    pub fn dirs(&self) -> &[Vector3<f64>] {
        &self.dirs
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn antipodal_symmetric(&self) -> bool {
        self.antipodal_symmetric
    }
}

/// Electrostatic repulsion energy over axes: sum over pairs of
/// 1/|di - dj| + 1/|di + dj|.
pub fn repulsion_energy(dirs: &[Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let dm = (dirs[i] - dirs[j]).norm();
            let dp = (dirs[i] + dirs[j]).norm();
            e += 1.0 / dm + 1.0 / dp;
        }
    }
    e
}

fn repulsion_gradient(dirs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = dirs.len();
    let mut grad = vec![Vector3::zeros(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dm = dirs[i] - dirs[j];
            let dp = dirs[i] + dirs[j];
            let gm = -dm / dm.norm().powi(3);
            let gp = -dp / dp.norm().powi(3);
            grad[i] += gm + gp;
            grad[j] += -gm + gp;
        }
    }
    grad
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Projected gradient descent with backtracking from one random start.
/// Energy is non-increasing across accepted iterations.
fn descend(mut dirs: Vec<Vector3<f64>>, max_iter: usize) -> (Vec<Vector3<f64>>, f64) {
    let mut energy = repulsion_energy(&dirs);
    let mut step = 1e-2;
    for _ in 0..max_iter {
        let grad = repulsion_gradient(&dirs);
        // Tangential component only; radial motion is removed by the
        // sphere constraint.
        let tangent: Vec<Vector3<f64>> = dirs
            .iter()
            .zip(&grad)
            .map(|(d, g)| g - d * d.dot(g))
            .collect();
        let gmax = tangent.iter().map(|t| t.norm()).fold(0.0, f64::max);
        if gmax < 1e-12 {
            break;
        }
        let mut accepted = false;
        while step > 1e-16 {
            let trial: Vec<Vector3<f64>> = dirs
                .iter()
                .zip(&tangent)
                .map(|(d, t)| (d - t * (step / gmax)).normalize())
                .collect();
            let trial_energy = repulsion_energy(&trial);
            if trial_energy < energy {
                dirs = trial;
                energy = trial_energy;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (dirs, energy)
}

/// Generates `n` directions spread over the sphere by minimizing the
/// antipodal electrostatic repulsion energy, using seeded random restarts
/// followed by projected gradient descent. Deterministic in `(n, seed)`.
pub fn generate_scheme(n: usize, seed: u64) -> Result<DirectionSet, SphereError> {
    if n < 6 {
        return Err(SphereError::TooFewDirections(n));
    }
    let restarts = if n <= 16 { 6 } else { 3 };
    let mut best: Option<(Vec<Vector3<f64>>, f64)> = None;
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[n as u64, restart]));
        let init: Vec<Vector3<f64>> = (0..n).map(|_| random_unit_vector(&mut rng)).collect();
        let (dirs, energy) = descend(init, 2000);
        if best.as_ref().map_or(true, |(_, e)| energy < *e) {
            best = Some((dirs, energy));
        }
    }
    let (dirs, _) = best.expect("at least one restart");
    DirectionSet::new(dirs, true)
}

/// SplitMix64-style mixer used to derive independent RNG streams from a
/// global seed plus context words. One fixed convention across the crate
/// keeps parallel and serial runs bit-identical.
pub fn mix_seed(seed: u64, context: &[u64]) -> u64 {
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
    for &c in context {
        z ^= c.wrapping_mul(0xBF58476D1CE4E5B9);
        z = z.wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Order floor: a size-`keep` subset must at least determine the
/// (order+1)(order+2)/2 basis coefficients.
pub fn sh_coefficient_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Draws a uniformly random size-`keep` subset of `full` (returned as
/// indices into `full`) that passes [`uniformity_check`] against the full
/// set, retrying with fresh draws up to `max_retries` times.
pub fn drop_direction_indices(
    full: &DirectionSet,
    keep: usize,
    order: usize,
    seed: u64,
    max_retries: usize,
) -> Result<Vec<usize>, SphereError> {
    let floor = sh_coefficient_count(order);
    if keep < floor {
        return Err(SphereError::KeepBelowShMinimum { keep, floor, order });
    }
    if keep > full.len() {
        return Err(SphereError::KeepAboveAvailable { keep, available: full.len() });
    }
    if keep == full.len() {
        return Ok((0..full.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[keep as u64, full.len() as u64]));
    for _ in 0..=max_retries {
        let mut indices: Vec<usize> = (0..full.len()).collect();
        // Partial Fisher-Yates: the first `keep` entries are a uniform sample.
        for i in 0..keep {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(keep);
        indices.sort_unstable();
        let subset_dirs: Vec<Vector3<f64>> = indices.iter().map(|&i| full.dirs[i]).collect();
        let subset = DirectionSet::new(subset_dirs, full.antipodal_symmetric)?;
        if uniformity_check(&subset, full, order)? {
            return Ok(indices);
        }
    }
    Err(SphereError::UniformityUnattainable { keep, retries: max_retries })
}

/// Random direction dropout with a uniformity check, as used for
/// intra-subject augmentation. Returns the retained subset.
pub fn drop_directions(
    full: &DirectionSet,
    keep: usize,
    seed: u64,
    max_retries: usize,
) -> Result<DirectionSet, SphereError> {
    let indices = drop_direction_indices(full, keep, 8, seed, max_retries)?;
    let dirs = indices.iter().map(|&i| full.dirs()[i]).collect();
    DirectionSet::new(dirs, full.antipodal_symmetric)
}

/// Number of deterministic same-size reference subsets used to set the
/// conditioning baseline in [`uniformity_check`].
const BASELINE_DRAWS: usize = 20;

/// Conditioning baseline for size-`size` subsets of `reference`: the 90th
/// percentile of the design condition number over [`BASELINE_DRAWS`]
/// deterministic uniform draws. When `size` equals the reference size every
/// draw is the full set, so the baseline equals the reference conditioning.
fn subset_cond_baseline(reference: &DirectionSet, size: usize, order: usize) -> f64 {
    let n = reference.len();
    let mut conds: Vec<f64> = (0..BASELINE_DRAWS as u64)
        .map(|draw| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(0xB45E_11E0, &[draw, size as u64, n as u64]));
            let mut indices: Vec<usize> = (0..n).collect();
            for i in 0..size {
                let j = rng.gen_range(i..n);
                indices.swap(i, j);
            }
            let dirs: Vec<Vector3<f64>> =
                indices[..size].iter().map(|&i| reference.dirs[i]).collect();
            sh::design_condition_number(&dirs, order)
        })
        .collect();
    conds.sort_by(f64::total_cmp);
    conds[(BASELINE_DRAWS * 9 / 10).saturating_sub(1)]
}

/// True iff the order-`order` SH design matrix of `subset` is no worse
/// than twice as ill-conditioned as a typical same-size subset of
/// `reference`. This is the b-vector check that decides whether the
/// surviving directions are still well distributed for SH fitting:
/// geometrically degenerate sets (for example all directions crowded into
/// one octant) are orders of magnitude above the baseline, while ordinary
/// random subsets sit below it.
pub fn uniformity_check(
    subset: &DirectionSet,
    reference: &DirectionSet,
    order: usize,
) -> Result<bool, SphereError> {
    let terms = sh_coefficient_count(order);
    if subset.len() < terms {
        return Err(SphereError::UnderdeterminedDesign { n: subset.len(), order, terms });
    }
    let cond_subset = sh::design_condition_number(subset.dirs(), order);
    let baseline = subset_cond_baseline(reference, subset.len(), order);
    Ok(cond_subset <= 2.0 * baseline)
}

/// Deterministic near-uniform grid of `n` directions (Fibonacci spiral),
/// used for quadrature checks, amplitude constraints, and peak searches.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Six icosahedron axes: the analytic optimum for n = 6.
    fn icosahedron_axes() -> Vec<Vector3<f64>> {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let raw = [
            (1.0, phi, 0.0),
            (-1.0, phi, 0.0),
            (0.0, 1.0, phi),
            (0.0, -1.0, phi),
            (phi, 0.0, 1.0),
            (phi, 0.0, -1.0),
        ];
        raw.iter()
            .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
            .collect()
    }

    #[test]
    fn six_directions_reach_icosahedral_energy() {
        let optimum = repulsion_energy(&icosahedron_axes());
        let scheme = generate_scheme(6, 42).unwrap();
        let energy = repulsion_energy(scheme.dirs());
        assert!(energy >= optimum - 1e-9, "beat the analytic optimum: {energy} < {optimum}");
        assert!(energy <= optimum * 1.01, "energy {energy} more than 1% above {optimum}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scheme(96, 7).unwrap();
        let b = generate_scheme(96, 7).unwrap();
        for (da, db) in a.dirs().iter().zip(b.dirs()) {
            assert_eq!(da, db);
        }
    }

    #[test]
    fn too_few_directions_rejected() {
        assert!(matches!(generate_scheme(3, 0), Err(SphereError::TooFewDirections(3))));
    }

    #[test]
    fn descent_energy_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut dirs: Vec<Vector3<f64>> = (0..20).map(|_| random_unit_vector(&mut rng)).collect();
        let mut energies = vec![repulsion_energy(&dirs)];
        // Re-run single descent steps to observe the trajectory.
        for _ in 0..50 {
            let (next, e) = descend(dirs.clone(), 1);
            dirs = next;
            energies.push(e);
        }
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn duplicate_directions_rejected() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let err = DirectionSet::new(vec![d, d], false);
        assert!(matches!(err, Err(SphereError::DuplicateDirection(0, 1))));
        // Antipode counts as duplicate only with the axis flag set.
        assert!(DirectionSet::new(vec![d, -d], false).is_ok());
        assert!(matches!(
            DirectionSet::new(vec![d, -d], true),
            Err(SphereError::DuplicateDirection(0, 1))
        ));
    }

    #[test]
    fn drop_identity_when_keep_equals_full() {
        let full = generate_scheme(48, 3).unwrap();
        let sub = drop_directions(&full, 48, 9, 50).unwrap();
        assert_eq!(sub.len(), full.len());
        for (a, b) in sub.dirs().iter().zip(full.dirs()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn drop_below_order8_floor_rejected() {
        let full = generate_scheme(96, 3).unwrap();
        let err = drop_directions(&full, 44, 9, 50);
        assert!(matches!(err, Err(SphereError::KeepBelowShMinimum { keep: 44, floor: 45, .. })));
    }

    #[test]
    fn drop_output_is_subset_of_input() {
        let full = generate_scheme(96, 5).unwrap();
        let indices = drop_direction_indices(&full, 60, 8, 17, 50).unwrap();
        assert_eq!(indices.len(), 60);
        let mut sorted = indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
        assert!(indices.iter().all(|&i| i < full.len()));
    }

    #[test]
    fn keep_45_of_96_passes_uniformity_over_ten_seeds() {
        let full = generate_scheme(96, 21).unwrap();
        for seed in 0..10 {
            let sub = drop_directions(&full, 45, seed, 50).unwrap();
            assert!(uniformity_check(&sub, &full, 8).unwrap());
        }
    }

    #[test]
    fn uniformity_identity_and_octant_failure() {
        let full = generate_scheme(96, 13).unwrap();
        assert!(uniformity_check(&full, &full, 8).unwrap());

        // 45 directions crowded into one octant: the order-8 design is
        // catastrophically ill-conditioned.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut octant = Vec::new();
        while octant.len() < 45 {
            let v = random_unit_vector(&mut rng);
            let v = Vector3::new(v.x.abs(), v.y.abs(), v.z.abs()).normalize();
            if octant
                .iter()
                .all(|o: &Vector3<f64>| o.dot(&v).abs() < (0.2_f64.to_radians()).cos())
            {
                octant.push(v);
            }
        }
        let octant = DirectionSet::new(octant, true).unwrap();
        assert!(!uniformity_check(&octant, &full, 8).unwrap());
    }

    #[test]
    fn design_conditioning_is_invariant_under_duplication() {
        // Duplicating every row of the design only rescales the singular
        // values, so the conditioning that drives the verdict is unchanged.
        let full = generate_scheme(64, 2).unwrap();
        let mut doubled = full.dirs().to_vec();
        doubled.extend_from_slice(full.dirs());
        let single_cond = sh::design_condition_number(full.dirs(), 8);
        let doubled_cond = sh::design_condition_number(&doubled, 8);
        assert_relative_eq!(single_cond, doubled_cond, max_relative = 1e-9);
    }

    #[test]
    fn uniformity_verdict_stable_under_reference_densification() {
        // A valid stand-in for a duplicated reference: every axis appears
        // twice, the copy jittered by ~1 degree to satisfy the separation
        // floor. The verdict must not flip.
        let full = generate_scheme(64, 2).unwrap();
        let jitter = 1.0_f64.to_radians();
        let doubled: Vec<Vector3<f64>> = full
            .dirs()
            .iter()
            .cloned()
            .chain(full.dirs().iter().map(|d| {
                let axis = d.cross(&Vector3::new(0.3, -0.5, 0.8)).normalize();
                (d + axis * jitter).normalize()
            }))
            .collect();
        let doubled = DirectionSet::new(doubled, false).unwrap();
        for seed in 0..5 {
            let sub = drop_directions(&full, 50, seed, 50).unwrap();
            let vs_single = uniformity_check(&sub, &full, 8).unwrap();
            let vs_doubled = uniformity_check(&sub, &doubled, 8).unwrap();
            assert_eq!(vs_single, vs_doubled);
        }
    }

    #[test]
    fn fibonacci_grid_is_unit_norm_and_spread() {
        let grid = fibonacci_sphere(724);
        assert_eq!(grid.len(), 724);
        for d in &grid {
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        let mean: Vector3<f64> = grid.iter().sum::<Vector3<f64>>() / 724.0;
        assert!(mean.norm() < 1e-2);
    }
}
