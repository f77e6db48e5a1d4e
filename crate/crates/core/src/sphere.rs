//! Charts, sampling and quadrature on the unit 2-sphere.
//!
//! The sphere is covered by two stereographic patches: the north patch
//! projects from the south pole and covers the northern hemisphere, the
//! south patch mirrors it. In patch coordinates the round metric is
//! conformal, `g0 = 4 / (1 + r^2)^2 * I`, which is the weight used by every
//! integral in this crate.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exclusion radius around the pole a chart cannot represent.
pub const POLE_EPS: f64 = 1e-9;

/// A point on the unit sphere in Cartesian coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitPoint {
    /// Builds a unit point, normalising the given vector.
    ///
    /// Panics if the vector is too short to normalise.
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        assert!(n > 1e-14, "cannot normalise a near-zero vector");
        Self {
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn dot(&self, other: &UnitPoint) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn antipode(&self) -> UnitPoint {
        UnitPoint {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Great-circle distance to another unit point.
    pub fn arc_to(&self, other: &UnitPoint) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }
}

/// Polar/azimuthal angles, theta in [0, pi], phi in [0, 2*pi).
#[derive(Debug, Clone, Copy)]
pub struct SphericalAngles {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalAngles {
    pub fn new(theta: f64, phi: f64) -> Self {
        assert!((0.0..=std::f64::consts::PI).contains(&theta), "theta out of range");
        let phi = phi.rem_euclid(2.0 * std::f64::consts::PI);
        Self { theta, phi }
    }
}

/// Which stereographic chart a point lives in.
///
/// `North` projects from the south pole and covers z > -1; `South` projects
/// from the north pole and covers z < 1. Points are assigned by hemisphere so
/// each chart only ever sees r^2 <= 1 (plus any configured radial offset).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Patch {
    North,
    South,
}

impl Patch {
    /// +1 for the north chart, -1 for the south chart: the sign of the
    /// z component reconstructed from disc coordinates.
    pub fn z_sign(&self) -> f64 {
        match self {
            Patch::North => 1.0,
            Patch::South => -1.0,
        }
    }
}

/// Planar disc coordinates of a point within one chart.
#[derive(Debug, Clone, Copy)]
pub struct PatchCoords {
    pub patch: Patch,
    pub p: f64,
    pub q: f64,
    pub r_sq: f64,
}

impl PatchCoords {
    pub fn new(patch: Patch, p: f64, q: f64) -> Self {
        Self {
            patch,
            p,
            q,
            r_sq: p * p + q * q,
        }
    }
}

/// Converts polar/azimuthal angles to Cartesian coordinates.
pub fn angles_to_cartesian(a: SphericalAngles) -> UnitPoint {
    let (st, ct) = (a.theta.sin(), a.theta.cos());
    let (sp, cp) = (a.phi.sin(), a.phi.cos());
    UnitPoint {
        x: st * cp,
        y: st * sp,
        z: ct,
    }
}

/// Stereographic projection of `pt` into the given chart.
///
/// North chart: (x, y, z) -> (x, y) / (1 + z); the south chart mirrors the
/// formula with 1 - z and keeps the (p, q) orientation identical.
pub fn stereographic_project(pt: &UnitPoint, patch: Patch) -> Result<PatchCoords> {
    let denom = match patch {
        Patch::North => 1.0 + pt.z,
        Patch::South => 1.0 - pt.z,
    };
    if denom < POLE_EPS {
        return Err(Error::ProjectionSingular { eps: POLE_EPS });
    }
    Ok(PatchCoords::new(patch, pt.x / denom, pt.y / denom))
}

/// Inverse stereographic map back to the sphere.
pub fn stereographic_unproject(c: &PatchCoords) -> UnitPoint {
    let r_sq = c.p * c.p + c.q * c.q;
    let denom = 1.0 + r_sq;
    UnitPoint {
        x: 2.0 * c.p / denom,
        y: 2.0 * c.q / denom,
        z: c.patch.z_sign() * (1.0 - r_sq) / denom,
    }
}

/// Conformal factor of the round metric in chart coordinates: 4 / (1 + r^2)^2.
pub fn round_conformal_factor(r_sq: f64) -> f64 {
    assert!(r_sq >= 0.0);
    4.0 / ((1.0 + r_sq) * (1.0 + r_sq))
}

/// Hemisphere containing the point, extended by a radial offset.
///
/// With offset 0 this is determined by the sign of z (ties go north). A
/// positive offset creates an overlap band; points inside it are assigned to
/// one of the two eligible charts by an extra coin flip so each chart still
/// receives half of the points in expectation.
fn assign_patch(pt: &UnitPoint, radial_offset: f64, rng: &mut ChaCha8Rng) -> Patch {
    let home = if pt.z >= 0.0 { Patch::North } else { Patch::South };
    if radial_offset <= 0.0 {
        return home;
    }
    let other = match home {
        Patch::North => Patch::South,
        Patch::South => Patch::North,
    };
    let r_max_sq = (1.0 + radial_offset) * (1.0 + radial_offset);
    let in_other = stereographic_project(pt, other)
        .map(|c| c.r_sq <= r_max_sq)
        .unwrap_or(false);
    if in_other && rng.gen::<bool>() {
        other
    } else {
        home
    }
}

/// Draws `n` points uniformly on the sphere, each tagged with its chart.
///
/// cos(theta) is uniform on [-1, 1] and phi uniform on [0, 2*pi). Point `i`
/// is generated from its own counter-indexed stream, so the output depends
/// only on `(n, seed)` and not on any shared generator state.
pub fn sample_uniform(n: usize, seed: u64, radial_offset: f64) -> Vec<(UnitPoint, Patch)> {
    assert!(n >= 1);
    assert!(radial_offset >= 0.0);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            let pt = UnitPoint {
                x: s * phi.cos(),
                y: s * phi.sin(),
                z,
            };
            let patch = assign_patch(&pt, radial_offset, &mut rng);
            (pt, patch)
        })
        .collect()
}

/// Quadrature rule for integrals over the sphere with the round area element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuadratureRule {
    /// Tensor rule: Gauss-Legendre in cos(theta) with `nodes` points and a
    /// uniform periodic rule in phi with `2 * nodes` points.
    GaussLegendre { nodes: usize },
    /// Plain Monte Carlo average over `samples` uniform points.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::GaussLegendre { nodes: 64 }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; good to ~1e-15 for the node
/// counts used here (n <= 256).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi-style initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    // The cosine guess enumerates roots in descending order; flip to ascending.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Quadrature nodes on the sphere: `(point, weight)` with weights summing to 4*pi.
pub fn sphere_nodes(rule: &QuadratureRule) -> Vec<(UnitPoint, f64)> {
    match rule {
        QuadratureRule::GaussLegendre { nodes } => {
            let n_theta = *nodes;
            let n_phi = 2 * n_theta;
            let (zs, wz) = gauss_legendre(n_theta);
            let wp = 2.0 * std::f64::consts::PI / n_phi as f64;
            let mut out = Vec::with_capacity(n_theta * n_phi);
            for (z, w) in zs.iter().zip(wz.iter()) {
                let s = (1.0 - z * z).max(0.0).sqrt();
                for j in 0..n_phi {
                    let phi = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
                    out.push((
                        UnitPoint {
                            x: s * phi.cos(),
                            y: s * phi.sin(),
                            z: *z,
                        },
                        w * wp,
                    ));
                }
            }
            out
        }
        QuadratureRule::MonteCarlo { samples, seed } => {
            let w = 4.0 * std::f64::consts::PI / *samples as f64;
            sample_uniform(*samples, *seed, 0.0)
                .into_iter()
                .map(|(pt, _)| (pt, w))
                .collect()
        }
    }
}

/// Integrates a scalar field over the sphere with the round area element.
pub fn integrate_sphere<F: Fn(&UnitPoint) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (pt, w)) in sphere_nodes(rule).iter().enumerate() {
        let v = f(pt);
        if !v.is_finite() {
            return Err(Error::QuadratureDiverged { node: i });
        }
        acc += w * v;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn angles_map_to_expected_cartesian_points() {
        let north = angles_to_cartesian(SphericalAngles::new(0.0, 0.7));
        assert_relative_eq!(north.z, 1.0, epsilon = 1e-15);
        assert!(north.x.abs() < 1e-15 && north.y.abs() < 1e-15);

        let eq_x = angles_to_cartesian(SphericalAngles::new(PI / 2.0, 0.0));
        assert_relative_eq!(eq_x.x, 1.0, epsilon = 1e-15);
        assert!(eq_x.z.abs() < 1e-15);

        let eq_y = angles_to_cartesian(SphericalAngles::new(PI / 2.0, PI / 2.0));
        assert_relative_eq!(eq_y.y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_examples() {
        let c = stereographic_project(&UnitPoint::new(1.0, 0.0, 0.0), Patch::North).unwrap();
        assert_relative_eq!(c.p, 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.q, 0.0, epsilon = 1e-15);

        let c = stereographic_project(&UnitPoint::new(0.0, 0.0, 1.0), Patch::North).unwrap();
        assert!(c.p.abs() < 1e-15 && c.q.abs() < 1e-15);

        assert!(matches!(
            stereographic_project(&UnitPoint::new(0.0, 0.0, -1.0), Patch::North),
            Err(Error::ProjectionSingular { .. })
        ));
    }

    #[test]
    fn unprojection_examples() {
        let n = stereographic_unproject(&PatchCoords::new(Patch::North, 0.0, 0.0));
        assert_relative_eq!(n.z, 1.0, epsilon = 1e-15);
        let e = stereographic_unproject(&PatchCoords::new(Patch::North, 1.0, 0.0));
        assert_relative_eq!(e.x, 1.0, epsilon = 1e-15);
        assert!(e.z.abs() < 1e-15);
        let s = stereographic_unproject(&PatchCoords::new(Patch::South, 0.0, 0.0));
        assert_relative_eq!(s.z, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_round_trips() {
        for (i, (pt, patch)) in sample_uniform(1000, 7, 0.0).into_iter().enumerate() {
            let c = stereographic_project(&pt, patch).unwrap();
            let back = stereographic_unproject(&c);
            let err = ((back.x - pt.x).powi(2) + (back.y - pt.y).powi(2) + (back.z - pt.z).powi(2))
                .sqrt();
            assert!(err < 1e-10, "round trip failed at sample {i}: err {err}");
            assert!(
                (back.x * back.x + back.y * back.y + back.z * back.z - 1.0).abs() < 1e-12
            );
        }
    }

    #[test]
    fn chart_compatibility_near_equator() {
        for (pt, _) in sample_uniform(2000, 3, 0.0) {
            if pt.z.abs() >= 0.5 {
                continue;
            }
            let a = stereographic_unproject(&stereographic_project(&pt, Patch::North).unwrap());
            let b = stereographic_unproject(&stereographic_project(&pt, Patch::South).unwrap());
            let err = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn conformal_factor_values() {
        assert_relative_eq!(round_conformal_factor(0.0), 4.0);
        assert_relative_eq!(round_conformal_factor(1.0), 1.0);
        assert_relative_eq!(round_conformal_factor(3.0), 0.25);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_uniform(500, 42, 0.0);
        let b = sample_uniform(500, 42, 0.0);
        for ((p, pa), (q, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.z.to_bits(), q.z.to_bits());
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn sampling_z_mean_is_near_zero() {
        let n = 100_000;
        let mean: f64 = sample_uniform(n, 1, 0.0).iter().map(|(p, _)| p.z).sum::<f64>() / n as f64;
        // std error of uniform[-1,1] is (1/sqrt(3))/sqrt(n)
        let bound = 3.0 * (1.0 / 3.0f64.sqrt()) / (n as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} exceeds {bound}");
    }

    #[test]
    fn sampling_z_is_uniform_ks() {
        let n = 100_000;
        let mut zs: Vec<f64> = sample_uniform(n, 9, 0.0).iter().map(|(p, _)| p.z).collect();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, z) in zs.iter().enumerate() {
            let cdf = (z + 1.0) / 2.0;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_hi).abs()).max((cdf - emp_lo).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn zero_offset_points_stay_in_unit_disc() {
        for (pt, patch) in sample_uniform(5000, 11, 0.0) {
            let c = stereographic_project(&pt, patch).unwrap();
            assert!(c.r_sq <= 1.0 + 1e-9, "r_sq {} in {:?}", c.r_sq, patch);
        }
    }

    #[test]
    fn patch_split_is_roughly_even() {
        let pts = sample_uniform(20_000, 5, 0.0);
        let north = pts.iter().filter(|(_, p)| *p == Patch::North).count();
        let frac = north as f64 / pts.len() as f64;
        assert!((frac - 0.5).abs() < 0.02);
    }

    #[test]
    fn gauss_legendre_weights_sum_to_two() {
        for n in [1, 2, 8, 64, 128] {
            let (_, w) = gauss_legendre(n);
            assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadrature_identities() {
        let rule = QuadratureRule::GaussLegendre { nodes: 32 };
        assert_relative_eq!(integrate_sphere(|_| 1.0, &rule).unwrap(), 4.0 * PI, epsilon = 1e-10);
        assert!(integrate_sphere(|p| p.z, &rule).unwrap().abs() < 1e-10);
        assert_relative_eq!(
            integrate_sphere(|p| p.z * p.z, &rule).unwrap(),
            4.0 * PI / 3.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn quadrature_flags_non_finite_fields() {
        let rule = QuadratureRule::GaussLegendre { nodes: 8 };
        let r = integrate_sphere(|p| 1.0 / (p.z - p.z), &rule);
        assert!(matches!(r, Err(Error::QuadratureDiverged { .. })));
    }

    #[test]
    fn monte_carlo_area_is_close() {
        let rule = QuadratureRule::MonteCarlo { samples: 200_000, seed: 4 };
        let area = integrate_sphere(|_| 1.0, &rule).unwrap();
        assert_relative_eq!(area, 4.0 * PI, epsilon = 1e-9);
        let z2 = integrate_sphere(|p| p.z * p.z, &rule).unwrap();
        assert!((z2 - 4.0 * PI / 3.0).abs() < 0.05);
    }

    /// Integrating in patch coordinates with the conformal area element must
    /// agree with the angle-parametrised integral.
    #[test]
    fn patch_integration_matches_angular_integration() {
        let f = |pt: &UnitPoint| 1.0 + pt.x + pt.z * pt.z;
        let rule = QuadratureRule::GaussLegendre { nodes: 64 };
        let angular = integrate_sphere(f, &rule).unwrap();

        // Integrate 4/(1+r^2)^2 f dp dq over each unit disc in polar
        // coordinates: Gauss-Legendre radially, uniform in the angle.
        let (ns, ws) = gauss_legendre(48);
        let n_alpha = 96;
        let w_alpha = 2.0 * PI / n_alpha as f64;
        let mut total = 0.0;
        for patch in [Patch::North, Patch::South] {
            for (t, wt) in ns.iter().zip(ws.iter()) {
                let rho = 0.5 * (t + 1.0); // [-1,1] -> [0,1]
                let wr = 0.5 * wt;
                for j in 0..n_alpha {
                    let alpha = w_alpha * j as f64;
                    let (p, q) = (rho * alpha.cos(), rho * alpha.sin());
                    let pt = stereographic_unproject(&PatchCoords::new(patch, p, q));
                    total += wr * w_alpha * rho * round_conformal_factor(rho * rho) * f(&pt);
                }
            }
        }
        assert!(
            (total - angular).abs() < 1e-8,
            "patch {total} vs angular {angular}"
        );
    }
}
