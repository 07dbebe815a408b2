//! Finite-element matrices and the spatio-temporal precision.
//!
//! The spatial field is the SPDE/Matern (nu = 1) discretisation on the
//! triangulated domain: piecewise-linear hat functions, lumped mass matrix C
//! (diagonal, so its inverse stays sparse) and stiffness matrix G. The
//! non-stationary precision is
//!
//! `Q_S = T (K^2 C K^2 + K^2 G + G' K^2 + G C^{-1} G) T`
//!
//! with T, K diagonal, `T_jj = tau(s_j)`, `K_jj = kappa(s_j)`, and
//! `log kappa = theta1 + x theta2`, `log tau = theta3 + x theta4` in the
//! vertex elevations x. Time is a standardized AR(1) over the twelve months
//! (inverse entries `a^|k-l|`), and the joint precision is the Kronecker
//! product `Q = Q_T (x) Q_S` in time-major layout.

use crate::mesh::TriangleMesh;
use crate::sparse::{cholesky, SparseSym};
use crate::{Error, Result};

/// Lumped mass diagonal and stiffness matrix of the hat basis.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// per-vertex integral of the hat function (area/3 per incident triangle)
    pub c_lumped: Vec<f64>,
    /// stiffness: integrals of grad(psi_i) . grad(psi_j)
    pub g: SparseSym,
}

/// Assemble C (lumped) and G for a triangle mesh.
pub fn assemble_fem(mesh: &TriangleMesh) -> Result<FemMatrices> {
    let n = mesh.n_vertices();
    let mut c = vec![0.0f64; n];
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(mesh.n_triangles() * 6);
    for t in 0..mesh.n_triangles() {
        let [i0, i1, i2] = mesh.triangles()[t];
        let v = [mesh.vertices()[i0], mesh.vertices()[i1], mesh.vertices()[i2]];
        let area = mesh.triangle_area(t);
        if area <= 0.0 || !area.is_finite() {
            return Err(Error::Mesh(format!("triangle {t} has non-positive area {area}")));
        }
        for &i in &[i0, i1, i2] {
            c[i] += area / 3.0;
        }
        // gradients of the hat functions: b_i = y_j - y_k, c_i = x_k - x_j
        let idx = [i0, i1, i2];
        let mut b = [0.0; 3];
        let mut cc = [0.0; 3];
        for i in 0..3 {
            let j = (i + 1) % 3;
            let k = (i + 2) % 3;
            b[i] = v[j][1] - v[k][1];
            cc[i] = v[k][0] - v[j][0];
        }
        for i in 0..3 {
            for j in 0..=i {
                let val = (b[i] * b[j] + cc[i] * cc[j]) / (4.0 * area);
                trips.push((idx[i], idx[j], val));
            }
        }
    }
    Ok(FemMatrices {
        c_lumped: c,
        g: SparseSym::from_triplets(n, trips),
    })
}

/// Spatially varying Matern parameters on the mesh vertices.
#[derive(Debug, Clone)]
pub struct NonStatParams {
    pub theta: [f64; 4],
    pub kappa_vec: Vec<f64>,
    pub tau_vec: Vec<f64>,
}

impl NonStatParams {
    /// `log kappa = theta1 + x theta2`, `log tau = theta3 + x theta4`.
    pub fn from_theta(theta: [f64; 4], elevation_km: &[f64]) -> Self {
        let kappa_vec = elevation_km
            .iter()
            .map(|&x| (theta[0] + x * theta[1]).exp())
            .collect();
        let tau_vec = elevation_km
            .iter()
            .map(|&x| (theta[2] + x * theta[3]).exp())
            .collect();
        NonStatParams {
            theta,
            kappa_vec,
            tau_vec,
        }
    }

    /// Stationary parameters (constant kappa, tau) on `n` vertices.
    pub fn stationary(kappa: f64, tau: f64, n: usize) -> Self {
        NonStatParams {
            theta: [kappa.ln(), 0.0, kappa.ln().mul_add(0.0, tau.ln()), 0.0],
            kappa_vec: vec![kappa; n],
            tau_vec: vec![tau; n],
        }
    }
}

/// Sparse symmetric product G diag(d) G (both triangles of G expanded).
fn sandwich(g: &SparseSym, d: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = g.n();
    let (rp, ci, vv) = g.to_full_csr();
    let mut acc = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        for p in rp[i]..rp[i + 1] {
            let m = ci[p];
            let w = vv[p] * d[m];
            for q in rp[m]..rp[m + 1] {
                let j = ci[q];
                if j <= i {
                    if acc[j] == 0.0 && !touched.contains(&j) {
                        touched.push(j);
                    }
                    acc[j] += w * vv[q];
                }
            }
        }
        for &j in &touched {
            if acc[j] != 0.0 {
                out.push((i, j, acc[j]));
                acc[j] = 0.0;
            }
        }
        touched.clear();
    }
    out
}

/// Assemble the non-stationary spatial precision `Q_S`.
pub fn spatial_precision(fem: &FemMatrices, p: &NonStatParams) -> Result<SparseSym> {
    let n = fem.c_lumped.len();
    if p.kappa_vec.len() != n || p.tau_vec.len() != n {
        return Err(Error::Dimension(format!(
            "parameter vectors ({}, {}) do not match {} vertices",
            p.kappa_vec.len(),
            p.tau_vec.len(),
            n
        )));
    }
    if p.kappa_vec.iter().chain(&p.tau_vec).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::invalid("kappa and tau must be positive and finite"));
    }
    let k2: Vec<f64> = p.kappa_vec.iter().map(|k| k * k).collect();
    let cinv: Vec<f64> = fem.c_lumped.iter().map(|c| 1.0 / c).collect();
    let tau = &p.tau_vec;
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    // K^2 C K^2 (diagonal)
    for i in 0..n {
        trips.push((i, i, tau[i] * tau[i] * k2[i] * k2[i] * fem.c_lumped[i]));
    }
    // K^2 G + G' K^2: entrywise G_ij (k2_i + k2_j)
    for c in 0..n {
        for pidx in fem.g.col_ptr()[c]..fem.g.col_ptr()[c + 1] {
            let r = fem.g.row_idx()[pidx];
            let gv = fem.g.values()[pidx];
            trips.push((r, c, tau[r] * tau[c] * gv * (k2[r] + k2[c])));
        }
    }
    // G C^{-1} G
    for (i, j, v) in sandwich(&fem.g, &cinv) {
        trips.push((i, j, tau[i] * tau[j] * v));
    }
    let q = SparseSym::from_triplets(n, trips);
    // PD by construction; factorize to surface a defective mesh immediately
    cholesky(&q)?;
    Ok(q)
}

/// AR(1) specification over `n_t` time points, |a| < 1.
#[derive(Debug, Clone, Copy)]
pub struct Ar1Spec {
    pub a: f64,
    pub n_t: usize,
}

/// Standardized AR(1) precision: tridiagonal with unit-variance margins, so
/// the inverse has entries `a^|k-l|`.
pub fn ar1_precision(spec: &Ar1Spec) -> Result<SparseSym> {
    if !(spec.a.abs() < 1.0) {
        return Err(Error::invalid(format!("AR(1) coefficient |a| must be < 1, got {}", spec.a)));
    }
    if spec.n_t == 0 {
        return Err(Error::invalid("AR(1) needs at least one time point"));
    }
    let n = spec.n_t;
    if n == 1 {
        return Ok(SparseSym::identity(1));
    }
    let a = spec.a;
    let s = 1.0 / (1.0 - a * a);
    let mut trips = Vec::with_capacity(2 * n - 1);
    for k in 0..n {
        let d = if k == 0 || k == n - 1 { 1.0 } else { 1.0 + a * a };
        trips.push((k, k, s * d));
        if k + 1 < n {
            trips.push((k + 1, k, -s * a));
        }
    }
    Ok(SparseSym::from_triplets(n, trips))
}

/// Stream the lower-triangle entries of `Q_T (x) Q_S` (time-major: index
/// (k, i) = k * n_s + i) in a fixed deterministic order.
pub fn kronecker_entries(qt: &SparseSym, qs: &SparseSym, mut f: impl FnMut(usize, usize, f64)) {
    let ns = qs.n();
    let (rp, ci, vv) = qs.to_full_csr();
    for l in 0..qt.n() {
        for p in qt.col_ptr()[l]..qt.col_ptr()[l + 1] {
            let k = qt.row_idx()[p]; // k >= l
            let tv = qt.values()[p];
            if k == l {
                // diagonal block: lower triangle of Q_S
                for c in 0..ns {
                    for q in qs.col_ptr()[c]..qs.col_ptr()[c + 1] {
                        let r = qs.row_idx()[q];
                        f(k * ns + r, l * ns + c, tv * qs.values()[q]);
                    }
                }
            } else {
                // strictly lower block: all of Q_S
                for i in 0..ns {
                    for q in rp[i]..rp[i + 1] {
                        f(k * ns + i, l * ns + ci[q], tv * vv[q]);
                    }
                }
            }
        }
    }
}

/// Kronecker product `Q_T (x) Q_S` as a sparse symmetric matrix.
pub fn kronecker(qt: &SparseSym, qs: &SparseSym) -> SparseSym {
    let mut trips = Vec::new();
    kronecker_entries(qt, qs, |i, j, v| trips.push((i, j, v)));
    SparseSym::from_triplets(qt.n() * qs.n(), trips)
}

/// Draw one sample with covariance `Q^{-1}`, deterministic under `seed`.
pub fn sample_gmrf(q: &SparseSym, seed: u64) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    let factor = cholesky(q)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(factor.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, MeshParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn right_triangle_mesh() -> TriangleMesh {
        // a single right triangle with unit legs, no refinement
        build_mesh(
            &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            &MeshParams {
                max_edge_inner: 10.0,
                max_edge_outer: 10.0,
                cutoff: 1e-9,
                extension: 0.0,
            },
        )
        .unwrap()
    }

    fn unit_square(max_edge: f64, extension: f64) -> TriangleMesh {
        build_mesh(
            &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            &MeshParams {
                max_edge_inner: max_edge,
                max_edge_outer: max_edge * 2.0,
                cutoff: 1e-9,
                extension,
            },
        )
        .unwrap()
    }

    #[test]
    fn right_triangle_lumped_mass() {
        let fem = assemble_fem(&right_triangle_mesh()).unwrap();
        for c in fem.c_lumped {
            assert_abs_diff_eq!(c, 1.0 / 6.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn right_triangle_stiffness() {
        let mesh = right_triangle_mesh();
        let fem = assemble_fem(&mesh).unwrap();
        // hand-computed stiffness for the unit right triangle, in the
        // vertex order (0,0), (1,0), (0,1)
        let pos = |p: [f64; 2]| {
            mesh.vertices()
                .iter()
                .position(|v| (v[0] - p[0]).abs() < 1e-12 && (v[1] - p[1]).abs() < 1e-12)
                .unwrap()
        };
        let o = pos([0.0, 0.0]);
        let x = pos([1.0, 0.0]);
        let y = pos([0.0, 1.0]);
        assert_abs_diff_eq!(fem.g.get(o, o), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fem.g.get(o, x), -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(fem.g.get(o, y), -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(fem.g.get(x, x), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(fem.g.get(x, y), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fem.g.get(y, y), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let mesh = unit_square(0.3, 0.4);
        let fem = assemble_fem(&mesh).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        let gy = fem.g.mul_vec(&ones);
        for v in gy {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-10);
        }
        // row sums zero is the same statement entrywise
        let dense = fem.g.to_dense();
        for i in 0..mesh.n_vertices() {
            assert_abs_diff_eq!(dense.row(i).sum(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn stiffness_is_positive_semidefinite() {
        let mesh = unit_square(0.4, 0.0);
        let fem = assemble_fem(&mesh).unwrap();
        let eig = fem.g.to_dense().symmetric_eigen();
        for l in eig.eigenvalues.iter() {
            assert!(*l > -1e-10, "negative stiffness eigenvalue {l}");
        }
    }

    #[test]
    fn stationary_precision_matches_scalar_formula() {
        let mesh = right_triangle_mesh();
        let fem = assemble_fem(&mesh).unwrap();
        let (kappa, tau) = (2.0, 0.7);
        let q = spatial_precision(
            &fem,
            &NonStatParams::stationary(kappa, tau, mesh.n_vertices()),
        )
        .unwrap();
        let n = mesh.n_vertices();
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(fem.c_lumped.clone()));
        let g = fem.g.to_dense();
        let cinv = c.clone().try_inverse().unwrap();
        let k2 = kappa * kappa;
        let expected = (c * k2 * k2 + &g * 2.0 * k2 + &g * cinv * &g) * tau * tau;
        let got = q.to_dense();
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(got[(i, j)], expected[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nonstationary_precision_matches_dense_formula() {
        // tiny mesh, elevation-driven kappa/tau, dense matrix-product oracle
        let mesh = unit_square(1.1, 0.0);
        let n = mesh.n_vertices();
        assert!(n <= 6);
        let fem = assemble_fem(&mesh).unwrap();
        let elev: Vec<f64> = (0..n).map(|i| 0.1 + 0.2 * i as f64).collect();
        let theta = [0.3, 0.5, -0.2, 0.4];
        let p = NonStatParams::from_theta(theta, &elev);
        let q = spatial_precision(&fem, &p).unwrap();
        let t = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p.tau_vec.clone()));
        let k2 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            p.kappa_vec.iter().map(|k| k * k),
        ));
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(fem.c_lumped.clone()));
        let cinv = c.clone().try_inverse().unwrap();
        let g = fem.g.to_dense();
        let inner = &k2 * &c * &k2 + &k2 * &g + g.transpose() * &k2 + &g * cinv * &g;
        let expected = &t * inner * &t;
        let got = q.to_dense();
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(got[(i, j)], expected[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tau_scaling_is_quadratic() {
        let mesh = unit_square(0.8, 0.0);
        let fem = assemble_fem(&mesh).unwrap();
        let n = mesh.n_vertices();
        let q1 = spatial_precision(&fem, &NonStatParams::stationary(1.5, 1.0, n)).unwrap();
        let q2 = spatial_precision(&fem, &NonStatParams::stationary(1.5, 3.0, n)).unwrap();
        for (&a, &b) in q1.values().iter().zip(q2.values()) {
            assert_abs_diff_eq!(b, 9.0 * a, epsilon = 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn increasing_kappa_increases_diagonal() {
        let mesh = unit_square(0.5, 0.0);
        let fem = assemble_fem(&mesh).unwrap();
        let n = mesh.n_vertices();
        let q1 = spatial_precision(&fem, &NonStatParams::stationary(1.0, 1.0, n)).unwrap();
        let q2 = spatial_precision(&fem, &NonStatParams::stationary(2.0, 1.0, n)).unwrap();
        for i in 0..n {
            assert!(q2.get(i, i) > q1.get(i, i));
        }
    }

    #[test]
    fn interior_marginal_variance_near_matern() {
        // sigma^2 = 1/(4 pi kappa^2 tau^2); interior vertices within 10%.
        // the lumped-mass discrete variance carries an O(h kappa) bias
        // (~10% at h = 0.1, ~4% at h = 0.05), so the mesh must resolve 1/kappa
        let mesh = unit_square(0.05, 0.6);
        let fem = assemble_fem(&mesh).unwrap();
        let (kappa, tau) = (10.0, 1.0);
        let q = spatial_precision(
            &fem,
            &NonStatParams::stationary(kappa, tau, mesh.n_vertices()),
        )
        .unwrap();
        let f = cholesky(&q).unwrap();
        let var = f.partial_inverse().diag();
        let expected = 1.0 / (4.0 * std::f64::consts::PI * kappa * kappa * tau * tau);
        let mut checked = 0;
        for (i, v) in mesh.vertices().iter().enumerate() {
            if v[0] > 0.25 && v[0] < 0.75 && v[1] > 0.25 && v[1] < 0.75 {
                assert!(
                    (var[i] - expected).abs() <= 0.10 * expected,
                    "variance {} vs {expected} at {v:?}",
                    var[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn ar1_zero_correlation_is_identity() {
        let q = ar1_precision(&Ar1Spec { a: 0.0, n_t: 3 }).unwrap();
        let d = q.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(d[(i, j)], f64::from(u8::from(i == j)), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn ar1_two_points_analytic() {
        let q = ar1_precision(&Ar1Spec { a: 0.5, n_t: 2 }).unwrap();
        assert_abs_diff_eq!(q.get(0, 0), 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.get(1, 0), -2.0 / 3.0, epsilon = 1e-14);
        let inv = q.to_dense().try_inverse().unwrap();
        assert_abs_diff_eq!(inv[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(inv[(0, 1)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ar1_inverse_entries_are_powers() {
        for &a in &[-0.8, -0.3, 0.2, 0.6, 0.95] {
            for n_t in 1..=6 {
                let q = ar1_precision(&Ar1Spec { a, n_t }).unwrap();
                let inv = q.to_dense().try_inverse().unwrap();
                for k in 0..n_t {
                    for l in 0..n_t {
                        let expected = a.powi((k as i32 - l as i32).abs());
                        assert_abs_diff_eq!(inv[(k, l)], expected, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ar1_rejects_unit_root() {
        assert!(ar1_precision(&Ar1Spec { a: 1.0, n_t: 3 }).is_err());
        assert!(ar1_precision(&Ar1Spec { a: -1.2, n_t: 3 }).is_err());
    }

    #[test]
    fn kronecker_identity_blocks() {
        let qs = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (1, 0, -0.5), (1, 1, 1.5)]);
        let id2 = SparseSym::identity(2);
        let q = kronecker(&id2, &qs);
        let d = q.to_dense();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(d[(2 * k + i, 2 * k + j)], qs.get(i, j), epsilon = 1e-15);
                }
            }
        }
        assert_abs_diff_eq!(d[(0, 2)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kronecker_matches_dense() {
        let qt = SparseSym::from_triplets(2, vec![(0, 0, 1.3), (1, 0, 0.4), (1, 1, 2.0)]);
        let qs = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (1, 0, -0.5), (1, 1, 1.5)]);
        let q = kronecker(&qt, &qs);
        let expected = qt.to_dense().kronecker(&qs.to_dense());
        let got = q.to_dense();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(got[(i, j)], expected[(i, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn kronecker_inverse_is_separable() {
        // inverse of Q_T (x) Q_S equals Sigma_T (x) Sigma_S
        let qt = ar1_precision(&Ar1Spec { a: 0.6, n_t: 4 }).unwrap();
        let mesh = unit_square(0.9, 0.0);
        let fem = assemble_fem(&mesh).unwrap();
        let qs =
            spatial_precision(&fem, &NonStatParams::stationary(1.5, 0.8, mesh.n_vertices()))
                .unwrap();
        let q = kronecker(&qt, &qs);
        let inv = q.to_dense().try_inverse().unwrap();
        let expected = qt
            .to_dense()
            .try_inverse()
            .unwrap()
            .kronecker(&qs.to_dense().try_inverse().unwrap());
        let n = q.n();
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(inv[(i, j)], expected[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn kronecker_action_identity() {
        // (A (x) B)(x (x) y) = (A x) (x) (B y)
        let qt = ar1_precision(&Ar1Spec { a: 0.3, n_t: 3 }).unwrap();
        let qs = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (1, 0, -0.5), (1, 1, 1.5)]);
        let q = kronecker(&qt, &qs);
        let x = [0.5, -1.0, 2.0];
        let y = [1.0, 3.0];
        let mut xy = vec![0.0; 6];
        for k in 0..3 {
            for i in 0..2 {
                xy[k * 2 + i] = x[k] * y[i];
            }
        }
        let lhs = q.mul_vec(&xy);
        let ax = qt.mul_vec(&x);
        let by = qs.mul_vec(&y);
        for k in 0..3 {
            for i in 0..2 {
                assert_abs_diff_eq!(lhs[k * 2 + i], ax[k] * by[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gmrf_sample_seed_determinism() {
        let q = SparseSym::from_triplets(3, vec![(0, 0, 2.0), (1, 1, 2.0), (2, 2, 2.0), (1, 0, 0.5)]);
        let a = sample_gmrf(&q, 7).unwrap();
        let b = sample_gmrf(&q, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_gmrf(&q, 8).unwrap();
        assert_ne!(a, c);
    }
}
