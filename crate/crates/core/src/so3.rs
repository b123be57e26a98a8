//! Rotation representations, conversions between them, projection onto SO(3)
//! and the geodesic distance.
//!
//! All math runs in `f64`. Conventions:
//! - [`RotationMatrix`] is row-major.
//! - [`Quaternion`] is `(w, x, y, z)`, canonicalized to `w >= 0`.
//! - [`AngleAxis`] is the axis scaled by the angle, with the angle in `[0, π]`.
//! - [`EulerAngles`] are intrinsic X-Y-Z: `R = Rx(a) · Ry(b) · Rz(c)`.
//!
//! At exactly half a turn `q` and `-q` (and the two opposite axes) are tied;
//! the tie is broken by making the first nonzero vector component positive.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    #[error("quaternion norm {0} is too far from 1")]
    NonUnitQuaternion(f64),
    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    Degenerate(f64),
}

/// Quaternions this close to unit norm are silently renormalized.
const QUAT_NORM_SLACK: f64 = 1e-3;
/// Inputs already orthonormal to this precision pass through [`project_to_so3`] untouched.
const ORTHONORMAL_PASS_THROUGH: f64 = 1e-6;
const SVD_TOLERANCE: f64 = 1e-10;
const SVD_MAX_SWEEPS: usize = 30;
const SVD_MIN_SINGULAR: f64 = 1e-9;
const GIMBAL_LOCK: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub [f64; 9]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleAxis(pub [f64; 3]);

/// Intrinsic X-Y-Z angles, each in `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerAngles(pub [f64; 3]);

impl RotationMatrix {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn from_f32(m: &[f32]) -> Self {
        let mut out = [0.0; 9];
        for (o, &v) in out.iter_mut().zip(m) {
            *o = v as f64;
        }
        Self(out)
    }

    pub fn to_f32(&self) -> [f32; 9] {
        self.0.map(|v| v as f32)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0[r * 3 + c]
    }

    pub fn rot_x(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
    }

    pub fn rot_y(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
    }

    pub fn rot_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self(mat_mul(&self.0, &other.0))
    }

    pub fn transpose(&self) -> Self {
        Self(mat_transpose(&self.0))
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    pub fn det(&self) -> f64 {
        mat_det(&self.0)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[4] + self.0[8]
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&mat_transpose(&self.0), &self.0);
        let mut worst = 0.0f64;
        for (i, v) in rtr.iter().enumerate() {
            let id = if i % 4 == 0 { 1.0 } else { 0.0 };
            worst = worst.max((v - id).abs());
        }
        worst
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
            && (self.det() - 1.0).abs() <= tol
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn scaled(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Sign-canonical form: `w > 0`, or at `w == 0` the first nonzero vector
    /// component positive.
    pub fn canonical(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            first_nonzero_negative(&[self.x, self.y, self.z])
        };
        if flip {
            self.scaled(-1.0)
        } else {
            *self
        }
    }
}

/// Uniformly distributed rotation (Haar measure), from a normalized 4D Gaussian.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let g: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            let q = Quaternion::new(g[0] / n, g[1] / n, g[2] / n, g[3] / n);
            return rotmat_from_quat(&q).expect("unit quaternion");
        }
    }
}

fn first_nonzero_negative(v: &[f64]) -> bool {
    v.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
}

pub fn rotmat_from_quat(q: &Quaternion) -> Result<RotationMatrix, So3Error> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() >= QUAT_NORM_SLACK {
        return Err(So3Error::NonUnitQuaternion(n));
    }
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("renormalizing quaternion with norm {n}");
    }
    let Quaternion { w, x, y, z } = q.scaled(1.0 / n);
    Ok(RotationMatrix([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]))
}

/// Shepperd's method: pivot on the largest of the four squared components.
pub fn quat_from_rotmat(r: &RotationMatrix) -> Quaternion {
    let m = |i: usize, j: usize| r.at(i, j);
    let tr = r.trace();
    let candidates = [tr, m(0, 0), m(1, 1), m(2, 2)];
    let pivot = (0..4)
        .max_by(|&a, &b| candidates[a].total_cmp(&candidates[b]))
        .unwrap_or(0);
    let q = match pivot {
        0 => {
            let s = (1.0 + tr).max(0.0).sqrt() * 2.0;
            Quaternion::new(0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s)
        }
        1 => {
            let s = (1.0 + m(0, 0) - m(1, 1) - m(2, 2)).max(0.0).sqrt() * 2.0;
            Quaternion::new((m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s)
        }
        2 => {
            let s = (1.0 + m(1, 1) - m(0, 0) - m(2, 2)).max(0.0).sqrt() * 2.0;
            Quaternion::new((m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s)
        }
        _ => {
            let s = (1.0 + m(2, 2) - m(0, 0) - m(1, 1)).max(0.0).sqrt() * 2.0;
            Quaternion::new((m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s)
        }
    };
    q.scaled(1.0 / q.norm()).canonical()
}

/// Rodrigues' formula.
pub fn rotmat_from_angleaxis(a: &AngleAxis) -> RotationMatrix {
    let [x, y, z] = a.0;
    let theta = (x * x + y * y + z * z).sqrt();
    if theta < 1e-12 {
        // First-order expansion I + [a]×.
        return RotationMatrix([1.0, -z, y, z, 1.0, -x, -y, x, 1.0]);
    }
    let (kx, ky, kz) = (x / theta, y / theta, z / theta);
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    RotationMatrix([
        c + kx * kx * v,
        kx * ky * v - kz * s,
        kx * kz * v + ky * s,
        ky * kx * v + kz * s,
        c + ky * ky * v,
        ky * kz * v - kx * s,
        kz * kx * v - ky * s,
        kz * ky * v + kx * s,
        c + kz * kz * v,
    ])
}

/// Goes through the canonical quaternion, which is well conditioned at every angle.
pub fn angleaxis_from_rotmat(r: &RotationMatrix) -> AngleAxis {
    let q = quat_from_rotmat(r);
    let vn = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    if vn < 1e-15 {
        return AngleAxis([0.0; 3]);
    }
    let angle = 2.0 * vn.atan2(q.w);
    let mut axis = [q.x / vn, q.y / vn, q.z / vn];
    if (angle - PI).abs() < 1e-12 && first_nonzero_negative(&axis) {
        axis = axis.map(|c| -c);
    }
    AngleAxis(axis.map(|c| c * angle))
}

pub fn rotmat_from_euler(e: &EulerAngles) -> RotationMatrix {
    let [a, b, c] = e.0;
    RotationMatrix::rot_x(a)
        .mul(&RotationMatrix::rot_y(b))
        .mul(&RotationMatrix::rot_z(c))
}

/// Intrinsic X-Y-Z factorization; at gimbal lock the third angle is set to 0.
pub fn euler_from_rotmat(r: &RotationMatrix) -> EulerAngles {
    let sb = r.at(0, 2).clamp(-1.0, 1.0);
    let b = sb.asin();
    let (a, c) = if b.cos().abs() < GIMBAL_LOCK {
        // R = Rx(a) · Ry(±π/2): rows 1 and 2 of column 1 carry (cos a, sin a).
        (r.at(2, 1).atan2(r.at(1, 1)), 0.0)
    } else {
        ((-r.at(1, 2)).atan2(r.at(2, 2)), (-r.at(0, 1)).atan2(r.at(0, 0)))
    };
    EulerAngles([wrap_angle(a), wrap_angle(b), wrap_angle(c)])
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x % (2.0 * PI);
    if y <= -PI {
        y += 2.0 * PI;
    } else if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Nearest rotation in the Frobenius sense: `U · diag(1, 1, det(UVᵀ)) · Vᵀ`
/// from the SVD `A = UΣVᵀ`.
///
/// Matrices that are already orthonormal with positive determinant (to 1e-6)
/// are returned unchanged.
pub fn project_to_so3(a: &[f64; 9]) -> Result<RotationMatrix, So3Error> {
    let candidate = RotationMatrix(*a);
    if candidate.is_valid(ORTHONORMAL_PASS_THROUGH) {
        return Ok(candidate);
    }
    let (u, sigma, v) = svd3(a);
    if !(sigma[2] >= SVD_MIN_SINGULAR) {
        return Err(So3Error::Degenerate(sigma[2]));
    }
    let vt = mat_transpose(&v);
    let d = mat_det(&mat_mul(&u, &vt)).signum();
    let mut ud = u;
    for row in 0..3 {
        ud[row * 3 + 2] *= d;
    }
    Ok(RotationMatrix(mat_mul(&ud, &vt)))
}

/// Rotation angle of `R1ᵀR2`, in `[0, π]`.
///
/// Equal to `arccos((tr(R1ᵀR2) - 1) / 2)`; evaluated with `atan2` over the
/// skew and symmetric parts so small angles keep full precision.
pub fn geodesic_angle(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let rel = r1.transpose().mul(r2);
    let m = &rel.0;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sx = m[7] - m[5];
    let sy = m[2] - m[6];
    let sz = m[3] - m[1];
    let sin = 0.5 * (sx * sx + sy * sy + sz * sz).sqrt();
    sin.atan2(cos)
}

/// One-sided Jacobi SVD of a 3×3 matrix, singular values sorted descending.
/// Returns `(U, Σ, V)` with `A = U · diag(Σ) · Vᵀ`.
pub fn svd3(a: &[f64; 9]) -> ([f64; 9], [f64; 3], [f64; 9]) {
    let mut w = *a;
    let mut v = RotationMatrix::IDENTITY.0;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for k in 0..3 {
                let (wi, wj) = (w[k * 3 + i], w[k * 3 + j]);
                alpha += wi * wi;
                beta += wj * wj;
                gamma += wi * wj;
            }
            if gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for k in 0..3 {
                    let (mi, mj) = (m[k * 3 + i], m[k * 3 + j]);
                    m[k * 3 + i] = c * mi - s * mj;
                    m[k * 3 + j] = s * mi + c * mj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: [f64; 3] =
        std::array::from_fn(|c| (0..3).map(|k| w[k * 3 + c] * w[k * 3 + c]).sum::<f64>().sqrt());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = [0.0; 9];
    let mut vs = [0.0; 9];
    let mut sigma = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        for k in 0..3 {
            u[k * 3 + dst] = if norms[src] > 0.0 { w[k * 3 + src] / norms[src] } else { 0.0 };
            vs[k * 3 + dst] = v[k * 3 + src];
        }
    }
    if sigma[2] < SVD_MIN_SINGULAR {
        // Complete U with a unit vector orthogonal to the first two columns.
        let c0 = [u[0], u[3], u[6]];
        let c1 = [u[1], u[4], u[7]];
        let c2 = cross(c0, c1);
        for k in 0..3 {
            u[k * 3 + 2] = c2[k];
        }
    }
    (u, sigma, vs)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn mat_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|idx| {
        let (r, c) = (idx / 3, idx % 3);
        a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c]
    })
}

fn mat_transpose(a: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|idx| a[(idx % 3) * 3 + idx / 3])
}

fn mat_det(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
}
