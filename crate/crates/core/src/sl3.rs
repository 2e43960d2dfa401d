//! SL(3) homographies and their Lie-algebra chart.
//!
//! Homographies are represented as unit-determinant 3×3 matrices reached
//! through the exponential of an 8-coefficient traceless algebra element.
//! Points live in a per-image normalized frame `[-1, 1]²`.
//!
//! Composition is written in application order: `a.then(&b)` applies `a`
//! first and `b` second, which at matrix level is `B · A`.
//!
//! Generator ordering (`E_rc` has a single 1 at row `r`, column `c`):
//!
//! | k | generator                    | motion            |
//! |---|------------------------------|-------------------|
//! | 1 | `E_13`                       | x-translation     |
//! | 2 | `E_23`                       | y-translation     |
//! | 3 | `E_21 − E_12`                | rotation          |
//! | 4 | `diag(1, 1, −2) / √6`        | isotropic scale   |
//! | 5 | `diag(1, −1, 0)`             | anisotropic stretch |
//! | 6 | `E_12 + E_21`                | shear             |
//! | 7 | `E_31`                       | projective x      |
//! | 8 | `E_32`                       | projective y      |
//!
//! The basis is orthogonal under the Frobenius inner product, so algebra
//! coordinates are recovered by projection.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;

/// Homogeneous third coordinate below which a warped point is treated as
/// lying at infinity.
pub const W_EPSILON: f64 = 1e-12;

/// Relative determinant tolerance for membership in SL(3).
pub const DET_TOLERANCE: f64 = 1e-9;

const TAYLOR_DEGREE: usize = 12;
const INV_SQRT6: f64 = 0.408_248_290_463_863_f64;

/// A point in a normalized image frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Horizontal mirror `x → −x` about the frame center.
    pub fn mirrored(&self) -> Point2 {
        Point2::new(-self.x, self.y)
    }
}

/// Coordinates of an element of sl(3) in the fixed generator basis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sl3Vector(pub [f64; 8]);

impl Sl3Vector {
    pub const DIM: usize = 8;

    pub const fn zero() -> Self {
        Self([0.0; 8])
    }

    /// Checked constructor; rejects non-finite coefficients.
    pub fn new(coeffs: [f64; 8]) -> Result<Self> {
        let v = Self(coeffs);
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite sl(3) coefficients {coeffs:?}"
            )));
        }
        Ok(v)
    }

    /// `t · e_k` for the zero-based generator index `k`.
    pub fn basis(k: usize, t: f64) -> Self {
        let mut c = [0.0; 8];
        c[k] = t;
        Self(c)
    }

    pub fn coeffs(&self) -> &[f64; 8] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// The traceless matrix `Σ_k coeffs_k · G_k`.
    pub fn to_algebra(&self) -> Mat3 {
        let [t1, t2, rot, scale, stretch, shear, p1, p2] = self.0;
        let s = scale * INV_SQRT6;
        Mat3::new(
            s + stretch,
            -rot + shear,
            t1,
            rot + shear,
            s - stretch,
            t2,
            p1,
            p2,
            -2.0 * s,
        )
    }

    /// Orthogonal projection of an arbitrary 3×3 matrix onto sl(3), expressed
    /// in generator coordinates. Any trace component is discarded.
    pub fn from_algebra(a: &Mat3) -> Self {
        Self([
            a[(0, 2)],
            a[(1, 2)],
            0.5 * (a[(1, 0)] - a[(0, 1)]),
            (a[(0, 0)] + a[(1, 1)] - 2.0 * a[(2, 2)]) * INV_SQRT6,
            0.5 * (a[(0, 0)] - a[(1, 1)]),
            0.5 * (a[(1, 0)] + a[(0, 1)]),
            a[(2, 0)],
            a[(2, 1)],
        ])
    }

    /// Adjoint of [`to_algebra`](Self::to_algebra): maps a gradient with
    /// respect to the algebra matrix to a gradient with respect to the
    /// coefficients.
    pub fn algebra_adjoint(d: &Mat3) -> Self {
        Self([
            d[(0, 2)],
            d[(1, 2)],
            d[(1, 0)] - d[(0, 1)],
            (d[(0, 0)] + d[(1, 1)] - 2.0 * d[(2, 2)]) * INV_SQRT6,
            d[(0, 0)] - d[(1, 1)],
            d[(0, 1)] + d[(1, 0)],
            d[(2, 0)],
            d[(2, 1)],
        ])
    }

    /// Coordinates of `M·A·M` for the mirror `M = diag(−1, 1, 1)`.
    ///
    /// Mirroring every image of a collection and conjugating every warp this
    /// way leaves all relative warps unchanged.
    pub fn mirror_conjugate(&self) -> Self {
        let mut c = self.0;
        for k in [0, 2, 5, 6] {
            c[k] = -c[k];
        }
        Self(c)
    }
}

impl Neg for Sl3Vector {
    type Output = Sl3Vector;
    fn neg(self) -> Sl3Vector {
        Sl3Vector(self.0.map(|c| -c))
    }
}

impl Add for Sl3Vector {
    type Output = Sl3Vector;
    fn add(self, rhs: Sl3Vector) -> Sl3Vector {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a += b;
        }
        Sl3Vector(c)
    }
}

impl Sub for Sl3Vector {
    type Output = Sl3Vector;
    fn sub(self, rhs: Sl3Vector) -> Sl3Vector {
        self + (-rhs)
    }
}

impl Mul<f64> for Sl3Vector {
    type Output = Sl3Vector;
    fn mul(self, t: f64) -> Sl3Vector {
        Sl3Vector(self.0.map(|c| c * t))
    }
}

/// The ordered generator basis `G_1..G_8` of sl(3).
pub fn sl3_generators() -> [Mat3; 8] {
    std::array::from_fn(|k| Sl3Vector::basis(k, 1.0).to_algebra())
}

/// A projective transformation with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Mat3);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix whose determinant is already 1 within [`DET_TOLERANCE`].
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("homography has non-finite entries".into()));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > DET_TOLERANCE {
            return Err(Error::Validation(format!(
                "homography determinant {det} is not 1 (tolerance {DET_TOLERANCE:e})"
            )));
        }
        Ok(Self(m))
    }

    /// Rescales `m` by the real cube root of its determinant.
    pub fn normalized(m: Mat3) -> Result<Self> {
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::Numerical(format!(
                "cannot normalize matrix with determinant {det}"
            )));
        }
        // A negative determinant has a negative cube root, so the sign flip
        // lands on the same projective map with determinant +1.
        Ok(Self(m / det.cbrt()))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Homography {
        // det = 1 guarantees invertibility.
        let inv = self
            .0
            .try_inverse()
            .expect("unit-determinant matrix is invertible");
        Homography(inv)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Homography) -> Homography {
        hom_compose(self, next)
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        hom_apply(self, p)
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }
}

/// Perspective application of `h` to `p`.
pub fn hom_apply(h: &Homography, p: Point2) -> Result<Point2> {
    project(&h.0, p)
}

pub(crate) fn project(m: &Mat3, p: Point2) -> Result<Point2> {
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    if w.abs() <= W_EPSILON || !w.is_finite() {
        return Err(Error::PointAtInfinity { w });
    }
    Ok(Point2::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    ))
}

/// Apply `a` first, then `b`; renormalized to unit determinant.
pub fn hom_compose(a: &Homography, b: &Homography) -> Homography {
    let m = b.0 * a.0;
    let det = m.determinant();
    Homography(m / det.cbrt())
}

/// Matrix exponential of the algebra element `v`.
pub fn sl3_exp(v: &Sl3Vector) -> Result<Homography> {
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sl3_exp of non-finite vector {:?}",
            v.0
        )));
    }
    Ok(Homography(expm(&v.to_algebra())))
}

/// Number of squarings so that the scaled matrix has Frobenius norm ≤ 1/2.
fn squarings_for(a: &Mat3) -> u32 {
    let norm = a.norm();
    if norm <= 0.5 {
        0
    } else {
        ((norm.log2() + 1.0).ceil().max(0.0)) as u32
    }
}

/// Scaling-and-squaring exponential with a degree-12 Taylor polynomial.
pub fn expm(a: &Mat3) -> Mat3 {
    ExpTape::record(a).value()
}

/// Intermediate values of one exponential evaluation, kept for the
/// reverse-mode pass.
#[derive(Debug, Clone)]
pub(crate) struct ExpTape {
    scale: f64,
    scaled: Mat3,
    // horner[k] = Q_k with Q_12 = c_12 I and Q_k = c_k I + B Q_{k+1}.
    horner: [Mat3; TAYLOR_DEGREE + 1],
    // squares[0] = polynomial value, squares[t + 1] = squares[t]².
    squares: Vec<Mat3>,
}

impl ExpTape {
    pub(crate) fn record(a: &Mat3) -> Self {
        let s = squarings_for(a);
        let scale = 0.5f64.powi(s as i32);
        let b = a * scale;

        let mut coeffs = [1.0; TAYLOR_DEGREE + 1];
        for k in 1..=TAYLOR_DEGREE {
            coeffs[k] = coeffs[k - 1] / k as f64;
        }
        let mut horner = [Mat3::zeros(); TAYLOR_DEGREE + 1];
        horner[TAYLOR_DEGREE] = Mat3::identity() * coeffs[TAYLOR_DEGREE];
        for k in (0..TAYLOR_DEGREE).rev() {
            horner[k] = Mat3::identity() * coeffs[k] + b * horner[k + 1];
        }

        let mut squares = Vec::with_capacity(s as usize + 1);
        squares.push(horner[0]);
        for t in 0..s as usize {
            let x = squares[t];
            squares.push(x * x);
        }
        Self {
            scale,
            scaled: b,
            horner,
            squares,
        }
    }

    pub(crate) fn value(&self) -> Mat3 {
        *self.squares.last().expect("at least the polynomial value")
    }

    /// Pulls a gradient with respect to `exp(A)` back to `A`.
    pub(crate) fn backward(&self, d_out: &Mat3) -> Mat3 {
        let mut dx = *d_out;
        for t in (0..self.squares.len() - 1).rev() {
            let x = self.squares[t];
            dx = dx * x.transpose() + x.transpose() * dx;
        }
        let bt = self.scaled.transpose();
        let mut db = Mat3::zeros();
        let mut dq = dx;
        for k in 0..TAYLOR_DEGREE {
            db += dq * self.horner[k + 1].transpose();
            dq = bt * dq;
        }
        db * self.scale
    }
}

/// Principal logarithm of `h`, expressed in generator coordinates.
pub fn sl3_log(h: &Homography) -> Result<Sl3Vector> {
    Ok(Sl3Vector::from_algebra(&logm(&h.0)?))
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Square roots are taken with the Denman–Beavers iteration until the
/// argument is within 0.25 of the identity in Frobenius norm, then the
/// Mercator series is summed and the result rescaled.
pub fn logm(m: &Mat3) -> Result<Mat3> {
    check_principal_domain(m)?;

    let mut x = *m;
    let mut roots = 0u32;
    while (x - Mat3::identity()).norm() >= 0.25 {
        if roots >= 64 {
            return Err(Error::LogDomain(
                "inverse scaling did not approach the identity".into(),
            ));
        }
        x = sqrtm_denman_beavers(&x)?;
        roots += 1;
    }

    let e = x - Mat3::identity();
    let mut power = e;
    let mut sum = Mat3::zeros();
    for n in 1..=200 {
        let term = power / n as f64;
        if n % 2 == 1 {
            sum += term;
        } else {
            sum -= term;
        }
        if term.norm() < 1e-18 {
            break;
        }
        power *= e;
    }
    Ok(sum * 2f64.powi(roots as i32))
}

fn check_principal_domain(m: &Mat3) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::LogDomain("non-finite matrix".into()));
    }
    let scale = m.norm().max(1.0);
    for ev in m.complex_eigenvalues().iter() {
        if ev.im.abs() <= 1e-12 * scale && ev.re <= 1e-12 * scale {
            return Err(Error::LogDomain(format!(
                "eigenvalue {} + {}i on the closed negative real axis",
                ev.re, ev.im
            )));
        }
    }
    Ok(())
}

fn sqrtm_denman_beavers(m: &Mat3) -> Result<Mat3> {
    let mut y = *m;
    let mut z = Mat3::identity();
    for _ in 0..100 {
        let y_inv = y
            .try_inverse()
            .ok_or_else(|| Error::LogDomain("singular iterate in square root".into()))?;
        let z_inv = z
            .try_inverse()
            .ok_or_else(|| Error::LogDomain("singular iterate in square root".into()))?;
        let y_next = (y + z_inv) * 0.5;
        let z_next = (z + y_inv) * 0.5;
        let delta = (y_next - y).norm();
        y = y_next;
        z = z_next;
        if !delta.is_finite() {
            break;
        }
        if delta <= 1e-15 * y.norm() {
            return Ok(y);
        }
    }
    Err(Error::LogDomain("Denman–Beavers iteration did not converge".into()))
}

/// Warps `p` from image `i` into image `j` through the shared frame:
/// `exp(θ_i)` followed by `exp(−θ_j)`.
pub fn ic_warp(theta_i: &Sl3Vector, theta_j: &Sl3Vector, p: Point2) -> Result<Point2> {
    let forward = sl3_exp(theta_i)?;
    let inverse = sl3_exp(&-*theta_j)?;
    hom_apply(&forward.then(&inverse), p)
}

/// Outcome of the Karcher-mean fixed-point iteration.
#[derive(Debug, Clone)]
pub struct KarcherMean {
    pub mean: Homography,
    pub iterations: usize,
    pub converged: bool,
}

pub const KARCHER_TOLERANCE: f64 = 1e-10;
pub const KARCHER_MAX_ITERATIONS: usize = 100;

/// Group barycenter by iterating `μ ← μ · exp(mean_i log(μ⁻¹ · h_i))`.
///
/// A logarithm failure mid-iteration stops early and returns the current
/// iterate with `converged = false`.
pub fn karcher_mean(hs: &[Homography]) -> Result<KarcherMean> {
    let first = hs
        .first()
        .ok_or_else(|| Error::InvalidArgument("karcher_mean of an empty list".into()))?;
    let mut mu = *first;
    for it in 1..=KARCHER_MAX_ITERATIONS {
        let mu_inv = mu.inverse();
        let mut sum = Sl3Vector::zero();
        for h in hs {
            let rel = Homography(mu_inv.0 * h.0);
            match sl3_log(&rel) {
                Ok(v) => sum = sum + v,
                Err(_) => {
                    return Ok(KarcherMean {
                        mean: mu,
                        iterations: it,
                        converged: false,
                    })
                }
            }
        }
        let step = sum * (1.0 / hs.len() as f64);
        let update = Homography(expm(&step.to_algebra()));
        mu = Homography::normalized(mu.0 * update.0)?;
        if step.norm() < KARCHER_TOLERANCE {
            return Ok(KarcherMean {
                mean: mu,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(KarcherMean {
        mean: mu,
        iterations: KARCHER_MAX_ITERATIONS,
        converged: false,
    })
}

/// How the global gauge of a solution is fixed after optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GaugeMode {
    /// Right-compose every warp with the inverse Karcher mean.
    #[default]
    Karcher,
    /// Right-compose every warp with the inverse of the first image's warp.
    First,
    /// Raw exponentials.
    None,
}

impl std::str::FromStr for GaugeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "karcher" => Ok(GaugeMode::Karcher),
            "first" => Ok(GaugeMode::First),
            "none" => Ok(GaugeMode::None),
            other => Err(Error::InvalidArgument(format!("unknown gauge mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for GaugeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GaugeMode::Karcher => "karcher",
            GaugeMode::First => "first",
            GaugeMode::None => "none",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GaugeOutcome {
    pub homographies: Vec<Homography>,
    /// Mode actually applied (differs from the request after a fallback).
    pub mode: GaugeMode,
    /// Set when the Karcher mean failed to converge and `first` was used.
    pub fell_back: bool,
}

/// Fixes the global gauge of a set of per-image warps.
pub fn gauge_normalize(thetas: &[Sl3Vector], mode: GaugeMode) -> Result<GaugeOutcome> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("gauge_normalize of an empty list".into()));
    }
    let raw: Vec<Homography> = thetas.iter().map(sl3_exp).collect::<Result<_>>()?;
    let right_compose = |g: &Homography| raw.iter().map(|h| h.then(g)).collect::<Vec<_>>();
    match mode {
        GaugeMode::None => Ok(GaugeOutcome {
            homographies: raw,
            mode,
            fell_back: false,
        }),
        GaugeMode::First => Ok(GaugeOutcome {
            homographies: right_compose(&sl3_exp(&-thetas[0])?),
            mode,
            fell_back: false,
        }),
        GaugeMode::Karcher => {
            let km = karcher_mean(&raw)?;
            if km.converged {
                Ok(GaugeOutcome {
                    homographies: right_compose(&km.mean.inverse()),
                    mode,
                    fell_back: false,
                })
            } else {
                log::warn!("Karcher mean did not converge; falling back to first-image gauge");
                Ok(GaugeOutcome {
                    homographies: right_compose(&sl3_exp(&-thetas[0])?),
                    mode: GaugeMode::First,
                    fell_back: true,
                })
            }
        }
    }
}
