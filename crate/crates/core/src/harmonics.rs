//! Real spherical harmonics in two scalings.
//!
//! * [`Convention::Orthonormal`] satisfies `int Y_lm Y_l'm' dA = delta`,
//!   built from the reduced associated-Legendre recurrence (no
//!   Condon-Shortley sign) times `Re/Im (x + i y)^m`. Stable through l = 12.
//! * [`Convention::Unnormalised`] uses the integer-coefficient Cartesian
//!   polynomials (`z`, `3z^2 - 1`, `x^2 - y^2`, ...) for l <= 4, falling back
//!   to the plain associated-Legendre form above that. The exact-solution
//!   generator and the expansion reports use this scaling so that a unit
//!   `c_{2,0}` coefficient corresponds to the factor `3 cos^2(theta) - 1`.
//!
//! Everything is written against [`Real`], so each harmonic doubles as a
//! fast float evaluation and as a differentiable tape program.

use crate::autodiff::{with_cell, Real, Tape, TapeScalar, Var};
use crate::sphere::UnitPoint;
use serde::{Deserialize, Serialize};

/// Degree/order pair with `|m| <= ell`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HarmonicIndex {
    pub ell: u32,
    pub m: i32,
}

impl HarmonicIndex {
    pub fn new(ell: u32, m: i32) -> Self {
        assert!(m.unsigned_abs() <= ell, "|m| must not exceed ell");
        Self { ell, m }
    }

    /// Laplace-Beltrami eigenvalue magnitude l(l+1).
    pub fn eigenvalue(&self) -> f64 {
        (self.ell * (self.ell + 1)) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Convention {
    #[default]
    Orthonormal,
    Unnormalised,
}

/// Reduced associated Legendre polynomial `P_l^k(z) / (1 - z^2)^(k/2)`
/// (Condon-Shortley free), a polynomial in `z`.
fn reduced_legendre<T: Real>(ell: u32, k: u32, z: T) -> T {
    debug_assert!(k <= ell);
    // Q_k^k = (2k - 1)!!
    let mut dfact = 1.0;
    for j in 1..=k {
        dfact *= (2 * j - 1) as f64;
    }
    let mut q_prev = z.lit(dfact); // Q_k^k
    if ell == k {
        return q_prev;
    }
    // Q_{k+1}^k = (2k + 1) z Q_k^k
    let mut q = z.scale((2 * k + 1) as f64 * dfact);
    for l in (k + 2)..=ell {
        let lf = l as f64;
        let kf = k as f64;
        let next = (z * q).scale((2.0 * lf - 1.0) / (lf - kf))
            - q_prev.scale((lf + kf - 1.0) / (lf - kf));
        q_prev = q;
        q = next;
    }
    q
}

/// `Re (x + i y)^m` and `Im (x + i y)^m`; equals
/// `sin^m(theta) (cos, sin)(m phi)` on the sphere.
fn azimuthal_pair<T: Real>(m: u32, x: T, y: T) -> (T, T) {
    let mut c = x.lit(1.0);
    let mut s = x.lit(0.0);
    for _ in 0..m {
        let c2 = c * x - s * y;
        let s2 = c * y + s * x;
        c = c2;
        s = s2;
    }
    (c, s)
}

fn orthonormal_prefactor(ell: u32, k: u32) -> f64 {
    // sqrt((2l+1)/(4 pi) * (l-k)!/(l+k)!), ratio formed multiplicatively
    let mut ratio = 1.0;
    for j in (ell - k + 1)..=(ell + k) {
        ratio /= j as f64;
    }
    ((2 * ell + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// Integer-coefficient Cartesian harmonic for l <= 4, valid on the sphere.
fn cartesian_table<T: Real>(ell: u32, m: i32, x: T, y: T, z: T) -> Option<T> {
    let one = x.lit(1.0);
    let v = match (ell, m) {
        (0, 0) => one,
        (1, -1) => y,
        (1, 0) => z,
        (1, 1) => x,
        (2, -2) => x * y,
        (2, -1) => y * z,
        (2, 0) => (z * z).scale(3.0) - one,
        (2, 1) => x * z,
        (2, 2) => x * x - y * y,
        (3, -3) => y * ((x * x).scale(3.0) - y * y),
        (3, -2) => x * y * z,
        (3, -1) => y * ((z * z).scale(5.0) - one),
        (3, 0) => z * ((z * z).scale(5.0) - one.scale(3.0)),
        (3, 1) => x * ((z * z).scale(5.0) - one),
        (3, 2) => z * (x * x - y * y),
        (3, 3) => x * (x * x - (y * y).scale(3.0)),
        (4, -4) => x * y * (x * x - y * y),
        (4, -3) => y * z * ((x * x).scale(3.0) - y * y),
        (4, -2) => x * y * ((z * z).scale(7.0) - one),
        (4, -1) => y * z * ((z * z).scale(7.0) - one.scale(3.0)),
        (4, 0) => {
            let z2 = z * z;
            (z2 * z2).scale(35.0) - z2.scale(30.0) + one.scale(3.0)
        }
        (4, 1) => x * z * ((z * z).scale(7.0) - one.scale(3.0)),
        (4, 2) => (x * x - y * y) * ((z * z).scale(7.0) - one),
        (4, 3) => x * z * (x * x - (y * y).scale(3.0)),
        (4, 4) => {
            let (x2, y2) = (x * x, y * y);
            x2 * x2 - (x2 * y2).scale(6.0) + y2 * y2
        }
        _ => return None,
    };
    Some(v)
}

/// Evaluates a real harmonic in the chosen convention at Cartesian inputs.
pub fn harmonic_gen<T: Real>(conv: Convention, idx: HarmonicIndex, x: T, y: T, z: T) -> T {
    let k = idx.m.unsigned_abs();
    match conv {
        Convention::Unnormalised => {
            if let Some(v) = cartesian_table(idx.ell, idx.m, x, y, z) {
                return v;
            }
            let q = reduced_legendre(idx.ell, k, z);
            if idx.m == 0 {
                return q;
            }
            let (c, s) = azimuthal_pair(k, x, y);
            if idx.m > 0 {
                q * c
            } else {
                q * s
            }
        }
        Convention::Orthonormal => {
            let q = reduced_legendre(idx.ell, k, z);
            let n = orthonormal_prefactor(idx.ell, k);
            if idx.m == 0 {
                return q.scale(n);
            }
            let (c, s) = azimuthal_pair(k, x, y);
            let n = n * std::f64::consts::SQRT_2;
            if idx.m > 0 {
                (q * c).scale(n)
            } else {
                (q * s).scale(n)
            }
        }
    }
}

/// Orthonormal real harmonic at a sphere point.
pub fn real_harmonic(idx: HarmonicIndex, pt: &UnitPoint) -> f64 {
    harmonic_gen(Convention::Orthonormal, idx, pt.x, pt.y, pt.z)
}

pub fn real_harmonic_in(conv: Convention, idx: HarmonicIndex, pt: &UnitPoint) -> f64 {
    harmonic_gen(conv, idx, pt.x, pt.y, pt.z)
}

/// The same harmonic as a differentiable tape program over Cartesian nodes.
pub fn harmonic_var(tape: &mut Tape, conv: Convention, idx: HarmonicIndex, xyz: [Var; 3]) -> Var {
    with_cell(tape, |cell| {
        let x = TapeScalar::new(cell, xyz[0]);
        let y = TapeScalar::new(cell, xyz[1]);
        let z = TapeScalar::new(cell, xyz[2]);
        harmonic_gen(conv, idx, x, y, z).var
    })
}

/// All indices with `1 <= ell <= l_max` in `(ell, m)` order.
pub fn indices_up_to(l_max: u32) -> Vec<HarmonicIndex> {
    let mut out = Vec::new();
    for ell in 1..=l_max {
        for m in -(ell as i32)..=(ell as i32) {
            out.push(HarmonicIndex::new(ell, m));
        }
    }
    out
}
