//! Small dense linear-algebra helpers.
//!
//! The per-cell plane fit runs hundreds of times per frame, so the symmetric
//! 3×3 eigensolver here is closed-form: eigenvalues from the trigonometric
//! solution of the characteristic cubic, the eigenvector of the best-isolated
//! eigenvalue from a cross product of two rows of `A − λI`, and the remaining
//! pair from an exact 2×2 rotation inside its orthogonal complement.

use nalgebra::{Matrix3, Vector3};

/// Eigen-decomposition of a symmetric 3×3 matrix, eigenvalues ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen3 {
    pub values: [f64; 3],
    /// Unit eigenvectors matching `values`.
    pub vectors: [Vector3<f64>; 3],
}

impl SymEigen3 {
    /// Decomposes the symmetric part of `a` (only the upper triangle is read).
    pub fn new(a: &Matrix3<f64>) -> Self {
        let a = symmetrize(a);
        let (a00, a01, a02) = (a[(0, 0)], a[(0, 1)], a[(0, 2)]);
        let (a11, a12, a22) = (a[(1, 1)], a[(1, 2)], a[(2, 2)]);
        let off = a01 * a01 + a02 * a02 + a12 * a12;
        let scale = a.abs().max();
        if scale == 0.0 || off <= (f64::EPSILON * scale).powi(2) {
            return Self::from_diagonal(&a);
        }

        let q = (a00 + a11 + a22) / 3.0;
        let (b00, b11, b22) = (a00 - q, a11 - q, a22 - q);
        let p = ((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off) / 6.0).sqrt();
        let det = b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)
            + a02 * (a01 * a12 - b11 * a02);
        let half_det = (det / (2.0 * p * p * p)).clamp(-1.0, 1.0);
        let phi = half_det.acos() / 3.0;
        let hi = q + 2.0 * p * phi.cos();
        let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        let mid = 3.0 * q - hi - lo;

        // Work from the eigenvalue that is farther from the middle one; its
        // eigenvector is the well-conditioned one.
        let isolated = if mid - lo >= hi - mid { lo } else { hi };
        let e = null_vector(&a, isolated);
        let (u, w) = orthonormal_complement(&e);
        let m00 = u.dot(&(a * u));
        let m01 = u.dot(&(a * w));
        let m11 = w.dot(&(a * w));
        let (l0, l1, v0, v1) = sym2_eigen(m00, m01, m11, &u, &w);
        let le = e.dot(&(a * e));

        let mut pairs = [(le, e), (l0, v0), (l1, v1)];
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        Self {
            values: [pairs[0].0, pairs[1].0, pairs[2].0],
            vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
        }
    }

    fn from_diagonal(a: &Matrix3<f64>) -> Self {
        let mut pairs = [
            (a[(0, 0)], Vector3::x()),
            (a[(1, 1)], Vector3::y()),
            (a[(2, 2)], Vector3::z()),
        ];
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        Self {
            values: [pairs[0].0, pairs[1].0, pairs[2].0],
            vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values[0]
    }

    pub fn max_value(&self) -> f64 {
        self.values[2]
    }

    pub fn min_vector(&self) -> Vector3<f64> {
        self.vectors[0]
    }
}

fn symmetrize(a: &Matrix3<f64>) -> Matrix3<f64> {
    let mut s = *a;
    s[(1, 0)] = a[(0, 1)];
    s[(2, 0)] = a[(0, 2)];
    s[(2, 1)] = a[(1, 2)];
    s
}

/// Unit vector spanning (approximately) the null space of `a − λI`.
fn null_vector(a: &Matrix3<f64>, lambda: f64) -> Vector3<f64> {
    let m = a - Matrix3::identity() * lambda;
    let r0 = m.row(0).transpose();
    let r1 = m.row(1).transpose();
    let r2 = m.row(2).transpose();
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
        .copied()
        .unwrap_or_else(Vector3::zeros);
    let n = best.norm();
    if n > 0.0 {
        best / n
    } else {
        // Rank ≤ 1: any vector orthogonal to the dominant row.
        let dominant = [r0, r1, r2]
            .into_iter()
            .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
            .unwrap_or_else(Vector3::zeros);
        if dominant.norm() > 0.0 {
            orthonormal_complement(&dominant.normalize()).0
        } else {
            Vector3::x()
        }
    }
}

/// Two unit vectors completing `n` (unit) to a right-handed orthonormal basis.
pub fn orthonormal_complement(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = n.cross(&helper).normalize();
    let w = n.cross(&u);
    (u, w)
}

fn sym2_eigen(
    m00: f64,
    m01: f64,
    m11: f64,
    u: &Vector3<f64>,
    w: &Vector3<f64>,
) -> (f64, f64, Vector3<f64>, Vector3<f64>) {
    if m01 == 0.0 {
        return (m00, m11, *u, *w);
    }
    // Jacobi rotation annihilating the off-diagonal element.
    let theta = 0.5 * (2.0 * m01).atan2(m00 - m11);
    let (s, c) = theta.sin_cos();
    let v0 = u * c + w * s;
    let v1 = w * c - u * s;
    let l0 = c * c * m00 + 2.0 * s * c * m01 + s * s * m11;
    let l1 = s * s * m00 - 2.0 * s * c * m01 + c * c * m11;
    (l0, l1, v0, v1)
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a × b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}
