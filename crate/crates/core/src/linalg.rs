//! Small dense linear-algebra helpers: rotations, SVD rank, least squares.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::structure::Mat3;

/// Uniformly distributed rotation matrix from a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn to_dmatrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `tolerance` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, tolerance: f64) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        None => 0,
        Some(&top) if top == 0.0 => 0,
        Some(&top) => sv.iter().filter(|&&s| s > tolerance * top).count(),
    }
}

/// Right singular vectors sorted by decreasing singular value (rows of Vᵀ),
/// padded with an orthonormal completion so every column direction appears.
pub fn right_singular_vectors(m: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    // eigen-decomposition of MᵀM gives the full right basis even when rows < cols
    let gram = m.transpose() * m;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let svals = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let vecs = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (svals, vecs)
}

/// Ridge-regularized least squares `argmin ‖X w − y‖² + ridge ‖w‖²`.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let xt = x.transpose();
    let mut a = &xt * x;
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    a.cholesky().map(|c| c.solve(&(xt * y)))
}
