//! Synthetic multi-tensor DWI phantoms with known fiber geometry,
//! including voxel-aligned scan/rescan pairs that share one noiseless
//! signal and differ only in seeded scanner effects (Rician noise, gain,
//! gradient-direction jitter).

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::io::{GradientScheme, Volume4D, VolumeKind};
use crate::sh::{self, ShCoeffs};
use crate::sphere::mix_seed;

/// SNR at or above this is treated as the noiseless limit and the noise
/// step is skipped entirely.
pub const NOISELESS_SNR: f64 = 1e6;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("compartment fractions sum to {0}, expected 1")]
    BadFractionSum(f64),
    #[error("diffusivities must satisfy ad >= rd >= 0, got ad {ad}, rd {rd}")]
    BadDiffusivities { ad: f64, rd: f64 },
    #[error("principal direction has norm {0}, expected 1")]
    NonUnitDirection(f64),
    #[error("snr must be positive, got {0}")]
    NonPositiveSnr(f64),
    #[error("phantom shape {0:?} too small: every axis needs at least 3 voxels")]
    ShapeTooSmall([usize; 3]),
    #[error("no stored noiseless signal at {0}: not a phantom output directory")]
    MissingNoiselessSource(String),
    #[error("noiseless volume has {channels} channels but the scheme has {measurements} measurements")]
    SchemeMismatch { channels: usize, measurements: usize },
    #[error("direction jitter needs an order-8 SH fit, but only {dirs} directions are available")]
    JitterUnderdetermined { dirs: usize },
}

/// One diffusion compartment: an axially symmetric tensor with principal
/// direction `principal_dir`, axial diffusivity `ad` and radial
/// diffusivity `rd` (mm^2/s).
#[derive(Debug, Clone)]
pub struct Compartment {
    pub fraction: f64,
    pub principal_dir: Vector3<f64>,
    pub ad: f64,
    pub rd: f64,
}

/// Mixture of compartments plus the non-diffusion-weighted signal level.
#[derive(Debug, Clone)]
pub struct VoxelModel {
    compartments: Vec<Compartment>,
    s0: f64,
}

impl VoxelModel {
    pub fn new(compartments: Vec<Compartment>, s0: f64) -> Result<Self, PhantomError> {
        let sum: f64 = compartments.iter().map(|c| c.fraction).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PhantomError::BadFractionSum(sum));
        }
        for c in &compartments {
            if !(c.ad >= c.rd && c.rd >= 0.0) {
                return Err(PhantomError::BadDiffusivities { ad: c.ad, rd: c.rd });
            }
            let n = c.principal_dir.norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(PhantomError::NonUnitDirection(n));
            }
        }
        Ok(Self { compartments, s0 })
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.compartments
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }
}

/// Seeded scanner effect applied to a noiseless phantom signal.
#[derive(Debug, Clone)]
pub struct ScanProfile {
    pub snr: f64,
    pub direction_jitter_deg: f64,
    pub gain: f64,
    pub seed: u64,
}

impl ScanProfile {
    pub fn new(snr: f64, direction_jitter_deg: f64, gain: f64, seed: u64) -> Result<Self, PhantomError> {
        if !(snr > 0.0) {
            return Err(PhantomError::NonPositiveSnr(snr));
        }
        Ok(Self { snr, direction_jitter_deg, gain, seed })
    }

    pub fn noiseless(seed: u64) -> Self {
        Self { snr: NOISELESS_SNR, direction_jitter_deg: 0.0, gain: 1.0, seed }
    }
}

/// Noiseless multi-tensor forward model:
/// S(b, g) = s0 * sum_i f_i * exp(-b * (rd_i + (ad_i - rd_i) (g . d_i)^2)).
/// b = 0 entries equal s0.
pub fn simulate_signal(m: &VoxelModel, scheme: &GradientScheme) -> Vec<f64> {
    scheme
        .bvals()
        .iter()
        .zip(scheme.bvecs())
        .map(|(&b, g)| {
            if b == 0.0 {
                m.s0
            } else {
                let att: f64 = m
                    .compartments
                    .iter()
                    .map(|c| {
                        let proj = g.dot(&c.principal_dir);
                        c.fraction * (-b * (c.rd + (c.ad - c.rd) * proj * proj)).exp()
                    })
                    .sum();
                m.s0 * att
            }
        })
        .collect()
}

/// Analytic fiber ODF of the model: a unit-mass symmetrized delta per
/// compartment, weighted by its fraction. Projecting a delta mixture onto
/// the even basis collapses the quadrature by the sifting property, so
/// coefficient j is exactly sum_i f_i Y_j(d_i).
pub fn ground_truth_fodf(m: &VoxelModel, order: usize) -> ShCoeffs {
    let n = sh::coefficient_count(order);
    let mut c = vec![0.0; n];
    let mut row = vec![0.0; n];
    for comp in &m.compartments {
        let b = sh::basis_matrix(std::slice::from_ref(&comp.principal_dir), order);
        for j in 0..n {
            row[j] = b[(0, j)];
        }
        for j in 0..n {
            c[j] += comp.fraction * row[j];
        }
    }
    ShCoeffs::new(order, c).expect("delta projection is finite")
}

/// Spatial arrangement of fiber-bearing voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Central z-slab of coherent single fibers in a smoothly rotating
    /// direction field; isotropic background.
    SingleFiberSlab,
    /// Central z-slab of two perpendicular fiber populations.
    CrossingSlab,
    /// One-voxel isotropic border; interior voxels are fiber-bearing and
    /// each is a crossing voxel with probability `crossing_fraction`.
    Mixed,
}

/// Geometry and tissue parameters of a phantom.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub layout: Layout,
    /// Probability that a mixed-layout interior voxel holds two crossing
    /// fibers instead of one.
    pub crossing_fraction: f64,
    /// Single-fiber axial/radial diffusivities, mm^2/s.
    pub ad: f64,
    pub rd: f64,
    /// Isotropic background diffusivity, mm^2/s.
    pub iso_diffusivity: f64,
    pub s0: f64,
    /// Geometry seed (mixed-layout crossing assignment).
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [16, 16, 16],
            layout: Layout::Mixed,
            crossing_fraction: 0.4,
            ad: 1.7e-3,
            rd: 0.2e-3,
            iso_diffusivity: 0.8e-3,
            s0: 1.0,
            seed: 0,
        }
    }
}

/// A generated phantom: the noisy scan, the fiber mask, per-voxel analytic
/// fODF truth, and the shared noiseless signal that rescans re-noise.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub dwi: Volume4D,
    pub mask: Volume4D,
    pub gt_fodf: Volume4D,
    pub noiseless: Volume4D,
    pub n_fiber_voxels: usize,
    pub n_crossing_voxels: usize,
}

/// Smoothly varying single-fiber direction at a normalized position.
fn fiber_direction(u: f64, v: f64, w: f64) -> Vector3<f64> {
    let alpha = 0.9 * u + 0.6 * v;
    let tau = 0.4 * (w - 0.5);
    Vector3::new(alpha.cos() * tau.cos(), alpha.sin() * tau.cos(), tau.sin())
}

/// In-plane direction perpendicular to [`fiber_direction`] at the same
/// position (exact: the dot product cancels).
fn crossing_direction(u: f64, v: f64) -> Vector3<f64> {
    let alpha = 0.9 * u + 0.6 * v;
    Vector3::new(-alpha.sin(), alpha.cos(), 0.0)
}

enum VoxelClass {
    Background,
    Single(Vector3<f64>),
    Crossing(Vector3<f64>, Vector3<f64>),
}

fn classify_voxel(cfg: &PhantomConfig, x: usize, y: usize, z: usize) -> VoxelClass {
    let [nx, ny, nz] = cfg.shape;
    let u = x as f64 / (nx - 1) as f64;
    let v = y as f64 / (ny - 1) as f64;
    let w = z as f64 / (nz - 1) as f64;
    match cfg.layout {
        Layout::SingleFiberSlab => {
            if z >= nz / 4 && z < nz - nz / 4 {
                VoxelClass::Single(fiber_direction(u, v, w))
            } else {
                VoxelClass::Background
            }
        }
        Layout::CrossingSlab => {
            if z >= nz / 4 && z < nz - nz / 4 {
                VoxelClass::Crossing(fiber_direction(u, v, w), crossing_direction(u, v))
            } else {
                VoxelClass::Background
            }
        }
        Layout::Mixed => {
            let interior =
                x >= 1 && x < nx - 1 && y >= 1 && y < ny - 1 && z >= 1 && z < nz - 1;
            if !interior {
                return VoxelClass::Background;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed,
                &[0xC1A5, x as u64, y as u64, z as u64],
            ));
            if rng.gen_range(0.0..1.0) < cfg.crossing_fraction {
                VoxelClass::Crossing(fiber_direction(u, v, w), crossing_direction(u, v))
            } else {
                VoxelClass::Single(fiber_direction(u, v, w))
            }
        }
    }
}

fn voxel_model(cfg: &PhantomConfig, class: &VoxelClass) -> VoxelModel {
    let fiber = |dir: Vector3<f64>, fraction: f64| Compartment {
        fraction,
        principal_dir: dir,
        ad: cfg.ad,
        rd: cfg.rd,
    };
    let compartments = match class {
        VoxelClass::Background => vec![Compartment {
            fraction: 1.0,
            principal_dir: Vector3::new(0.0, 0.0, 1.0),
            ad: cfg.iso_diffusivity,
            rd: cfg.iso_diffusivity,
        }],
        VoxelClass::Single(d) => vec![fiber(*d, 1.0)],
        VoxelClass::Crossing(d1, d2) => vec![fiber(*d1, 0.5), fiber(*d2, 0.5)],
    };
    VoxelModel::new(compartments, cfg.s0).expect("layout models are valid")
}

/// Builds the phantom: noiseless multi-tensor signals everywhere, analytic
/// fODF truth and mask over fiber voxels, and the scan produced by
/// applying `profile` to the noiseless signal. Deterministic for fixed
/// seeds; voxel noise streams are derived by hashing (seed, x, y, z), so
/// any evaluation order gives identical bytes.
pub fn generate_phantom(
    cfg: &PhantomConfig,
    scheme: &GradientScheme,
    profile: &ScanProfile,
) -> Result<Phantom, PhantomError> {
    let [nx, ny, nz] = cfg.shape;
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(PhantomError::ShapeTooSmall(cfg.shape));
    }
    let order = 8;
    let n_coef = sh::coefficient_count(order);
    let c = scheme.len();
    let vox = [1.0, 1.0, 1.0];
    let mut noiseless = Volume4D::zeros([nx, ny, nz, c], vox, VolumeKind::DwiSignal);
    let mut mask = Volume4D::zeros([nx, ny, nz, 1], vox, VolumeKind::Mask);
    let mut gt = Volume4D::zeros([nx, ny, nz, n_coef], vox, VolumeKind::ShFodf);
    let mut n_fiber = 0;
    let mut n_crossing = 0;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let class = classify_voxel(cfg, x, y, z);
                let model = voxel_model(cfg, &class);
                let signal = simulate_signal(&model, scheme);
                for (i, v) in signal.iter().enumerate() {
                    noiseless.channels_mut(x, y, z)[i] = *v as f32;
                }
                match class {
                    VoxelClass::Background => {}
                    ref cls => {
                        n_fiber += 1;
                        if matches!(cls, VoxelClass::Crossing(..)) {
                            n_crossing += 1;
                        }
                        mask.channels_mut(x, y, z)[0] = 1.0;
                        let truth = ground_truth_fodf(&model, order);
                        for (i, v) in truth.values().iter().enumerate() {
                            gt.channels_mut(x, y, z)[i] = *v as f32;
                        }
                    }
                }
            }
        }
    }
    let dwi = make_rescan(&noiseless, scheme, profile)?;
    Ok(Phantom {
        dwi,
        mask,
        gt_fodf: gt,
        noiseless,
        n_fiber_voxels: n_fiber,
        n_crossing_voxels: n_crossing,
    })
}

/// Rotates `dir` by `angle_rad` around a seeded random perpendicular axis.
fn tilt_direction(dir: &Vector3<f64>, angle_rad: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let helper = loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let c = dir.cross(&v);
        if c.norm() > 1e-6 {
            break c.normalize();
        }
    };
    (dir * angle_rad.cos() + helper * angle_rad.sin()).normalize()
}

/// Produces a new acquisition of the same tissue: starts from the stored
/// noiseless signal, applies direction jitter (by re-evaluating each
/// voxel's order-8 SH fit at the jittered directions) and gain, then adds
/// Rician noise S = sqrt((S + n1)^2 + n2^2) with per-voxel seeded streams
/// and sigma = gain * s0 / snr, where s0 is the mean noiseless b=0 level.
pub fn make_rescan(
    noiseless: &Volume4D,
    scheme: &GradientScheme,
    profile: &ScanProfile,
) -> Result<Volume4D, PhantomError> {
    let dims = noiseless.dims();
    if dims[3] != scheme.len() {
        return Err(PhantomError::SchemeMismatch {
            channels: dims[3],
            measurements: scheme.len(),
        });
    }
    let mut out = noiseless.clone();

    let dwi_idx = scheme.dwi_indices();
    if profile.direction_jitter_deg > 0.0 && !dwi_idx.is_empty() {
        // One jittered gradient table for the whole scan.
        let mut jrng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, &[0x7177E5]));
        let jitter = Normal::new(0.0, profile.direction_jitter_deg.to_radians()).unwrap();
        let jittered: Vec<Vector3<f64>> = dwi_idx
            .iter()
            .map(|&i| {
                let angle: f64 = jitter.sample(&mut jrng);
                tilt_direction(&scheme.bvecs()[i], angle.abs(), &mut jrng)
            })
            .collect();
        let original: Vec<Vector3<f64>> = dwi_idx.iter().map(|&i| scheme.bvecs()[i]).collect();
        let dm_orig = sh::basis_matrix(&original, 8);
        let design = sh::DesignFit::new(dm_orig, 8)
            .map_err(|_| PhantomError::JitterUnderdetermined { dirs: dwi_idx.len() })?;
        let basis_jit = sh::basis_matrix(&jittered, 8);
        for (x, y, z) in noiseless.voxel_coords() {
            let samples: Vec<f64> =
                dwi_idx.iter().map(|&i| noiseless.channels(x, y, z)[i] as f64).collect();
            let coeffs = design.solve(&samples);
            for (k, &i) in dwi_idx.iter().enumerate() {
                let mut v = 0.0;
                for j in 0..coeffs.len() {
                    v += basis_jit[(k, j)] * coeffs[j];
                }
                out.channels_mut(x, y, z)[i] = v as f32;
            }
        }
    }

    if profile.gain != 1.0 {
        for v in out.data_mut() {
            *v = (*v as f64 * profile.gain) as f32;
        }
    }

    if profile.snr < NOISELESS_SNR {
        let b0 = scheme.b0_indices();
        let mean_s0 = if b0.is_empty() {
            1.0
        } else {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (x, y, z) in noiseless.voxel_coords() {
                for &i in &b0 {
                    sum += noiseless.channels(x, y, z)[i] as f64;
                    count += 1;
                }
            }
            sum / count as f64
        };
        let sigma = profile.gain * mean_s0 / profile.snr;
        let normal = Normal::new(0.0, sigma).unwrap();
        for (x, y, z) in out.voxel_coords() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                profile.seed,
                &[x as u64, y as u64, z as u64],
            ));
            let chans = out.channels_mut(x, y, z);
            for v in chans.iter_mut() {
                let n1: f64 = normal.sample(&mut rng);
                let n2: f64 = normal.sample(&mut rng);
                let s = *v as f64;
                *v = ((s + n1).powi(2) + n2 * n2).sqrt() as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{fibonacci_sphere, generate_scheme};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn shell_scheme(n: usize, bval: f64, n_b0: usize, seed: u64) -> GradientScheme {
        let dirs = generate_scheme(n, seed).unwrap();
        let mut bvals = vec![0.0; n_b0];
        let mut bvecs = vec![Vector3::zeros(); n_b0];
        bvals.extend(std::iter::repeat(bval).take(n));
        bvecs.extend(dirs.dirs().iter().cloned());
        GradientScheme::new(bvals, bvecs).unwrap()
    }

    fn single_fiber(dir: Vector3<f64>) -> VoxelModel {
        VoxelModel::new(
            vec![Compartment { fraction: 1.0, principal_dir: dir, ad: 1.7e-3, rd: 0.2e-3 }],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn b0_signal_equals_s0() {
        let scheme = GradientScheme::new(vec![0.0; 4], vec![Vector3::zeros(); 4]).unwrap();
        let m = single_fiber(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(simulate_signal(&m, &scheme), vec![1.0; 4]);
    }

    #[test]
    fn isotropic_compartment_closed_form() {
        let scheme = shell_scheme(24, 1500.0, 2, 1);
        let d = 1.1e-3;
        let m = VoxelModel::new(
            vec![Compartment {
                fraction: 1.0,
                principal_dir: Vector3::new(0.0, 0.0, 1.0),
                ad: d,
                rd: d,
            }],
            2.0,
        )
        .unwrap();
        let signal = simulate_signal(&m, &scheme);
        for (i, &b) in scheme.bvals().iter().enumerate() {
            let want = if b == 0.0 { 2.0 } else { 2.0 * (-b * d).exp() };
            assert_relative_eq!(signal[i], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn crossing_signal_matches_tensor_exponential_oracle() {
        // Independent oracle: full 3x3 diffusion tensors built from outer
        // products, evaluated on a dense grid.
        let grid = fibonacci_sphere(2000);
        let bval = 2000.0;
        let bvals = vec![bval; grid.len()];
        let scheme = GradientScheme::new(bvals, grid.clone()).unwrap();
        let (ad, rd) = (1.7e-3, 0.2e-3);
        let dx = Vector3::new(1.0, 0.0, 0.0);
        let dy = Vector3::new(0.0, 1.0, 0.0);
        let m = VoxelModel::new(
            vec![
                Compartment { fraction: 0.5, principal_dir: dx, ad, rd },
                Compartment { fraction: 0.5, principal_dir: dy, ad, rd },
            ],
            1.0,
        )
        .unwrap();
        let signal = simulate_signal(&m, &scheme);

        let tensor = |d: &Vector3<f64>| {
            Matrix3::identity() * rd + (d * d.transpose()) * (ad - rd)
        };
        let (t1, t2) = (tensor(&dx), tensor(&dy));
        let mut min_idx = 0;
        for (i, g) in grid.iter().enumerate() {
            let oracle = 0.5 * (-bval * (g.transpose() * t1 * g)[(0, 0)]).exp()
                + 0.5 * (-bval * (g.transpose() * t2 * g)[(0, 0)]).exp();
            assert_relative_eq!(signal[i], oracle, epsilon = 1e-12);
            if signal[i] < signal[min_idx] {
                min_idx = i;
            }
        }
        // The grid-search oracle puts the crossing-voxel minimum at the
        // in-plane bisectors of the two axes, where both compartments
        // attenuate (along an axis the perpendicular compartment barely
        // attenuates and dominates the sum).
        let g = grid[min_idx];
        assert!(g.z.abs() < 0.05, "minimum {g:?} out of the fiber plane");
        assert!(
            (g.dot(&dx).abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05
                && (g.dot(&dy).abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05,
            "minimum {g:?} is not at a bisector"
        );

        // For a single fiber the minimum does sit on the fiber axis.
        let single = single_fiber(dx);
        let s = simulate_signal(&single, &scheme);
        let arg = (0..grid.len()).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert!(
            grid[arg].dot(&dx).abs() > (3.0_f64.to_radians()).cos(),
            "single-fiber minimum at {:?} is off-axis",
            grid[arg]
        );
    }

    #[test]
    fn ground_truth_single_fiber_along_z_is_zonal() {
        let m = single_fiber(Vector3::new(0.0, 0.0, 1.0));
        let truth = ground_truth_fodf(&m, 8);
        let ks = crate::sh::order_of_index(8);
        let mut j = 0;
        for k in (0..=8usize).step_by(2) {
            for mm in -(k as i64)..=(k as i64) {
                if mm != 0 {
                    assert!(
                        truth.values()[j].abs() < 1e-10,
                        "m != 0 coefficient {j} (k={k}, m={mm}) is {}",
                        truth.values()[j]
                    );
                }
                j += 1;
            }
        }
        assert_eq!(ks.len(), j);
        // And the axial coefficients are not all zero.
        assert!(truth.values().iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn ground_truth_crossing_peaks_on_both_axes() {
        let dx = Vector3::new(1.0, 0.0, 0.0);
        let dy = Vector3::new(0.0, 1.0, 0.0);
        let m = VoxelModel::new(
            vec![
                Compartment { fraction: 0.5, principal_dir: dx, ad: 1.7e-3, rd: 0.2e-3 },
                Compartment { fraction: 0.5, principal_dir: dy, ad: 1.7e-3, rd: 0.2e-3 },
            ],
            1.0,
        )
        .unwrap();
        let truth = ground_truth_fodf(&m, 8);
        let grid = fibonacci_sphere(8000);
        let values = crate::sh::eval_sh(&truth, &grid);
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        // Every grid point within 1% of the max amplitude must be near one
        // of the two fiber axes, and both axes must be represented.
        let (mut seen_x, mut seen_y) = (false, false);
        for (g, v) in grid.iter().zip(&values) {
            if *v > 0.99 * max {
                let on_x = g.dot(&dx).abs() > (6.0_f64.to_radians()).cos();
                let on_y = g.dot(&dy).abs() > (6.0_f64.to_radians()).cos();
                assert!(on_x || on_y, "near-max amplitude at {g:?} away from both axes");
                seen_x |= on_x;
                seen_y |= on_y;
            }
        }
        assert!(seen_x && seen_y);
    }

    #[test]
    fn degenerate_mixture_equals_single_compartment() {
        let d = Vector3::new(0.6, 0.8, 0.0);
        let one = single_fiber(d);
        let split = VoxelModel::new(
            vec![
                Compartment { fraction: 0.5, principal_dir: d, ad: 1.7e-3, rd: 0.2e-3 },
                Compartment { fraction: 0.5, principal_dir: d, ad: 1.7e-3, rd: 0.2e-3 },
            ],
            1.0,
        )
        .unwrap();
        let a = ground_truth_fodf(&one, 8);
        let b = ground_truth_fodf(&split, 8);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn model_invariants_enforced() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert!(matches!(
            VoxelModel::new(
                vec![Compartment { fraction: 0.7, principal_dir: d, ad: 1e-3, rd: 1e-4 }],
                1.0
            ),
            Err(PhantomError::BadFractionSum(_))
        ));
        assert!(matches!(
            VoxelModel::new(
                vec![Compartment { fraction: 1.0, principal_dir: d, ad: 1e-4, rd: 1e-3 }],
                1.0
            ),
            Err(PhantomError::BadDiffusivities { .. })
        ));
        assert!(matches!(ScanProfile::new(0.0, 0.0, 1.0, 1), Err(PhantomError::NonPositiveSnr(_))));
    }

    #[test]
    fn phantom_is_deterministic_and_noiseless_limit_exact() {
        let scheme = shell_scheme(32, 2000.0, 2, 3);
        let cfg = PhantomConfig { shape: [6, 6, 6], ..Default::default() };
        let noiseless_profile = ScanProfile::noiseless(9);
        let a = generate_phantom(&cfg, &scheme, &noiseless_profile).unwrap();
        let b = generate_phantom(&cfg, &scheme, &noiseless_profile).unwrap();
        assert_eq!(a.dwi.data(), b.dwi.data());
        assert_eq!(a.gt_fodf.data(), b.gt_fodf.data());
        // snr >= 1e6 skips the noise step entirely.
        assert_eq!(a.dwi.data(), a.noiseless.data());

        let noisy_profile = ScanProfile::new(20.0, 0.0, 1.0, 9).unwrap();
        let c = generate_phantom(&cfg, &scheme, &noisy_profile).unwrap();
        let d = generate_phantom(&cfg, &scheme, &noisy_profile).unwrap();
        assert_eq!(c.dwi.data(), d.dwi.data());
        assert_ne!(c.dwi.data(), a.noiseless.data());
    }

    #[test]
    fn shape_too_small_rejected() {
        let scheme = shell_scheme(12, 2000.0, 1, 4);
        let cfg = PhantomConfig { shape: [2, 6, 6], ..Default::default() };
        assert!(matches!(
            generate_phantom(&cfg, &scheme, &ScanProfile::noiseless(0)),
            Err(PhantomError::ShapeTooSmall(_))
        ));
    }

    #[test]
    fn mixed_layout_crossing_fraction_near_configured() {
        let scheme = shell_scheme(16, 2000.0, 1, 5);
        let cfg = PhantomConfig {
            shape: [16, 16, 16],
            layout: Layout::Mixed,
            crossing_fraction: 0.4,
            seed: 11,
            ..Default::default()
        };
        let p = generate_phantom(&cfg, &scheme, &ScanProfile::noiseless(1)).unwrap();
        assert_eq!(p.n_fiber_voxels, 14 * 14 * 14);
        let observed = p.n_crossing_voxels as f64 / p.n_fiber_voxels as f64;
        assert!((observed - 0.4).abs() < 0.05, "crossing fraction {observed}");
    }

    #[test]
    fn rescan_identity_and_gain() {
        let scheme = shell_scheme(32, 2000.0, 2, 6);
        let cfg = PhantomConfig { shape: [5, 5, 5], ..Default::default() };
        let profile = ScanProfile::new(20.0, 0.0, 1.0, 77).unwrap();
        let p = generate_phantom(&cfg, &scheme, &profile).unwrap();

        // Same profile, same seed: bit-identical to the original scan.
        let again = make_rescan(&p.noiseless, &scheme, &profile).unwrap();
        assert_eq!(again.data(), p.dwi.data());

        // Different seed decorrelates.
        let other = make_rescan(
            &p.noiseless,
            &scheme,
            &ScanProfile::new(20.0, 0.0, 1.0, 78).unwrap(),
        )
        .unwrap();
        assert_ne!(other.data(), p.dwi.data());

        // Pure gain on the noiseless limit scales raw signals exactly.
        let gained = make_rescan(
            &p.noiseless,
            &scheme,
            &ScanProfile::new(NOISELESS_SNR, 0.0, 1.1, 0).unwrap(),
        )
        .unwrap();
        for (a, b) in gained.data().iter().zip(p.noiseless.data()) {
            assert_relative_eq!(*a as f64, *b as f64 * 1.1, epsilon = 1e-6);
        }
    }

    #[test]
    fn rescan_jitter_perturbs_dwi_channels_only() {
        let scheme = shell_scheme(64, 2000.0, 2, 7);
        let cfg = PhantomConfig { shape: [4, 4, 4], ..Default::default() };
        let p = generate_phantom(&cfg, &scheme, &ScanProfile::noiseless(0)).unwrap();
        let jittered = make_rescan(
            &p.noiseless,
            &scheme,
            &ScanProfile::new(NOISELESS_SNR, 2.0, 1.0, 13).unwrap(),
        )
        .unwrap();
        let b0 = scheme.b0_indices();
        let mut changed = 0;
        for (x, y, z) in p.noiseless.voxel_coords() {
            for i in 0..scheme.len() {
                let a = p.noiseless.channels(x, y, z)[i];
                let b = jittered.channels(x, y, z)[i];
                if b0.contains(&i) {
                    assert_eq!(a, b, "b=0 channel {i} must be untouched by jitter");
                } else if a != b {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "jitter changed nothing");
    }

    #[test]
    fn rescan_scheme_mismatch_rejected() {
        let scheme = shell_scheme(16, 2000.0, 1, 8);
        let other = shell_scheme(12, 2000.0, 1, 8);
        let cfg = PhantomConfig { shape: [4, 4, 4], ..Default::default() };
        let p = generate_phantom(&cfg, &scheme, &ScanProfile::noiseless(0)).unwrap();
        assert!(matches!(
            make_rescan(&p.noiseless, &other, &ScanProfile::noiseless(1)),
            Err(PhantomError::SchemeMismatch { .. })
        ));
    }
}
