//! Minimal fixed-size linear algebra for 3-vectors and 3×3 matrices.
//!
//! The crate only ever needs 3-D operations plus one 4×4 solve (affine normal
//! equations), so these are hand-rolled over the generic scalar instead of
//! pulling in a matrix library; everything stays deterministic and `Real`-generic.

use crate::scalar::{fcmp, Real};

pub type Vec3<F> = [F; 3];
pub type Mat3<F> = [[F; 3]; 3];

pub fn add<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<F: Real>(a: Vec3<F>, s: F) -> Vec3<F> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<F: Real>(a: Vec3<F>, b: Vec3<F>) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm_sq<F: Real>(a: Vec3<F>) -> F {
    dot(a, a)
}

pub fn norm<F: Real>(a: Vec3<F>) -> F {
    norm_sq(a).sqrt()
}

pub fn cross<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn identity<F: Real>() -> Mat3<F> {
    let o = F::one();
    let z = F::zero();
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_vec<F: Real>(m: &Mat3<F>, v: Vec3<F>) -> Vec3<F> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul<F: Real>(a: &Mat3<F>, b: &Mat3<F>) -> Mat3<F> {
    let mut out = [[F::zero(); 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for j in 0..3 {
            out[i][j] = row[0] * b[0][j] + row[1] * b[1][j] + row[2] * b[2][j];
        }
    }
    out
}

pub fn transpose<F: Real>(m: &Mat3<F>) -> Mat3<F> {
    let mut out = *m;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det3<F: Real>(m: &Mat3<F>) -> F {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate; `None` when |det| ≤ `tol`.
pub fn inverse3<F: Real>(m: &Mat3<F>, tol: F) -> Option<Mat3<F>> {
    let det = det3(m);
    if det.abs() <= tol {
        return None;
    }
    let inv_det = F::one() / det;
    let mut adj = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Cofactor of (j, i): adjugate is the transposed cofactor matrix.
            let r = [(j + 1) % 3, (j + 2) % 3];
            let c = [(i + 1) % 3, (i + 2) % 3];
            adj[i][j] = (m[r[0]][c[0]] * m[r[1]][c[1]] - m[r[0]][c[1]] * m[r[1]][c[0]]) * inv_det;
        }
    }
    Some(adj)
}

/// vᵀ M v for symmetric M.
pub fn quadratic_form<F: Real>(m: &Mat3<F>, v: Vec3<F>) -> F {
    dot(v, mat_vec(m, v))
}

/// Eigendecomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching eigenvectors as rows.
/// Each eigenvector's sign is canonicalized (largest-magnitude entry positive)
/// so downstream code sees a deterministic basis.
pub fn sym_eigen3<F: Real>(m: &Mat3<F>) -> ([F; 3], Mat3<F>) {
    let mut a = *m;
    let mut v = identity::<F>();
    let eps = F::cast(1e-30);
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= F::epsilon() * F::epsilon() * diag.max(F::one()) || off <= eps {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == F::zero() {
                continue;
            }
            // Classic Jacobi rotation zeroing a[p][q].
            let theta = (a[q][q] - a[p][p]) / (F::two() * a[p][q]);
            let t = {
                let abs = theta.abs();
                let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                sign / (abs + (theta * theta + F::one()).sqrt())
            };
            let c = F::one() / (t * t + F::one()).sqrt();
            let s = t * c;
            let app = a[p][p];
            let aqq = a[q][q];
            let apq = a[p][q];
            a[p][p] = c * c * app - F::two() * s * c * apq + s * s * aqq;
            a[q][q] = s * s * app + F::two() * s * c * apq + c * c * aqq;
            a[p][q] = F::zero();
            a[q][p] = F::zero();
            let r = 3 - p - q;
            let arp = a[r][p];
            let arq = a[r][q];
            a[r][p] = c * arp - s * arq;
            a[p][r] = a[r][p];
            a[r][q] = s * arp + c * arq;
            a[q][r] = a[r][q];
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    // Columns of v are eigenvectors; sort descending by eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| fcmp(&a[j][j], &a[i][i]));
    let mut vals = [F::zero(); 3];
    let mut vecs = [[F::zero(); 3]; 3];
    for (k, &idx) in order.iter().enumerate() {
        vals[k] = a[idx][idx];
        let mut e = [v[0][idx], v[1][idx], v[2][idx]];
        let lead = (0..3).max_by(|&i, &j| fcmp(&e[i].abs(), &e[j].abs())).unwrap();
        if e[lead] < F::zero() {
            e = scale(e, -F::one());
        }
        vecs[k] = e;
    }
    (vals, vecs)
}

/// Rotation matrix from a (not necessarily unit) axis and an angle, via Rodrigues.
pub fn rotation_from_axis_angle<F: Real>(axis: Vec3<F>, angle: F) -> Mat3<F> {
    let n = norm(axis);
    if n == F::zero() {
        return identity();
    }
    let [x, y, z] = scale(axis, F::one() / n);
    let (s, c) = (angle.sin(), angle.cos());
    let t = F::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Solve a 4×4 linear system by Gaussian elimination with partial pivoting.
/// `None` when a pivot falls below `tol`.
pub fn solve4<F: Real>(a: &[[F; 4]; 4], b: &[F; 4], tol: F) -> Option<[F; 4]> {
    let mut m = *a;
    let mut rhs = *b;
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| fcmp(&m[i][col].abs(), &m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() <= tol {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] = m[row][k] - f * m[col][k];
            }
            rhs[row] = rhs[row] - f * rhs[col];
        }
    }
    let mut x = [F::zero(); 4];
    for row in (0..4).rev() {
        let mut acc = rhs[row];
        for k in row + 1..4 {
            acc = acc - m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_recovers_diagonal() {
        let m = [[4.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 9.0]];
        let (vals, vecs) = sym_eigen3(&m);
        assert_relative_eq!(vals[0], 9.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 4.0, epsilon = 1e-12);
        assert_relative_eq!(vals[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vecs[0][2].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(vecs[1][0].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_reconstructs_symmetric_matrices() {
        // A = Vᵀ D V must match the input after decomposition.
        let cases = [
            [[2.0f64, 1.0, 0.5], [1.0, 3.0, -0.25], [0.5, -0.25, 1.5]],
            [[1e-3, 1e-4, 0.0], [1e-4, 5.0, 2.0], [0.0, 2.0, 5.0]],
        ];
        for m in cases {
            let (vals, vecs) = sym_eigen3(&m);
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += vecs[k][i] * vals[k] * vecs[k][j];
                    }
                    assert_relative_eq!(acc, m[i][j], epsilon = 1e-10);
                }
            }
            // Eigenvectors orthonormal.
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(dot(vecs[i], vecs[j]), expect, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn inverse_times_original_is_identity() {
        let m = [[2.0f64, 0.5, 0.0], [0.1, 1.5, 0.2], [0.0, -0.3, 3.0]];
        let inv = inverse3(&m, 1e-12).unwrap();
        let prod = mat_mul(&inv, &m);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(prod[i][j], expect, epsilon = 1e-12);
            }
        }
        assert!(inverse3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]], 1e-12).is_none());
    }

    #[test]
    fn solve4_matches_hand_solution() {
        let a = [
            [2.0f64, 1.0, 0.0, 0.0],
            [1.0, 3.0, 1.0, 0.0],
            [0.0, 1.0, 4.0, 1.0],
            [0.0, 0.0, 1.0, 5.0],
        ];
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let mut b = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                b[i] += a[i][j] * x_true[j];
            }
        }
        let x = solve4(&a, &b, 1e-12).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], x_true[i], epsilon = 1e-10);
        }
    }
}
