//! Central finite differences used as test oracles and for second-order
//! blocks (differences of exact reverse-mode gradients).

use super::params::{ParamCoord, ParameterStore};
use super::tape::Mat;

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of a scalar function of a flat vector.
pub fn gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let dn = f(&buf);
            buf[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Jacobian of a vector function: row `i` is `∂f/∂x_i`.
pub fn jacobian_rows<F: FnMut(&[f64]) -> Vec<f64>>(mut f: F, x: &[f64], h: f64) -> Mat {
    let mut buf = x.to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let dn = f(&buf);
        buf[i] = x[i];
        rows.push(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let cols = rows.first().map_or(0, Vec::len);
    Mat::from_shape_fn((x.len(), cols), |(i, j)| rows[i][j])
}

/// Rows indexed by parameter coordinates: `∂g(θ)/∂θ_c` for a vector-valued
/// `g` of the parameter store (typically the analytic position gradient).
pub fn parameter_jacobian<F>(store: &ParameterStore, coords: &[ParamCoord], h: f64, mut g: F) -> Mat
where
    F: FnMut(&ParameterStore) -> Vec<f64>,
{
    if coords.is_empty() {
        return Mat::zeros((0, 0));
    }
    let mut work = store.clone();
    let mut rows = Vec::with_capacity(coords.len());
    for c in coords {
        let v = store.read(c);
        work.write(c, v + h);
        let up = g(&work);
        work.write(c, v - h);
        let dn = g(&work);
        work.write(c, v);
        rows.push(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let cols = rows[0].len();
    Mat::from_shape_fn((coords.len(), cols), |(i, j)| rows[i][j])
}

/// Fourth-order variant of [`parameter_jacobian`]:
/// `(8(g(θ+h) − g(θ−h)) − (g(θ+2h) − g(θ−2h))) / 12h`.
pub fn parameter_jacobian4<F>(store: &ParameterStore, coords: &[ParamCoord], h: f64, mut g: F) -> Mat
where
    F: FnMut(&ParameterStore) -> Vec<f64>,
{
    if coords.is_empty() {
        return Mat::zeros((0, 0));
    }
    let mut work = store.clone();
    let mut rows = Vec::with_capacity(coords.len());
    for c in coords {
        let v = store.read(c);
        let mut at = |d: f64| {
            work.write(c, v + d);
            g(&work)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        work.write(c, v);
        rows.push(
            (0..p1.len())
                .map(|j| (8.0 * (p1[j] - m1[j]) - (p2[j] - m2[j])) / (12.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let cols = rows[0].len();
    Mat::from_shape_fn((coords.len(), cols), |(i, j)| rows[i][j])
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest entrywise relative error between two equally shaped slices.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic() {
        let g = gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let j = jacobian_rows(|x| vec![x[0] + 2.0 * x[1], -x[1]], &[0.3, 0.7], 1e-4);
        assert!((j[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((j[[1, 0]] - 2.0).abs() < 1e-9);
        assert!((j[[1, 1]] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn fourth_order_stencil_is_exact_on_quartics() {
        let mut store = ParameterStore::new(0);
        store.insert("w", Mat::from_elem((1, 1), 0.3));
        let c = ParamCoord {
            name: "w".into(),
            index: 0,
        };
        let j = parameter_jacobian4(&store, &[c], 0.1, |p| {
            let x = p.get("w").unwrap()[[0, 0]];
            vec![x.powi(4) - 2.0 * x.powi(3)]
        });
        let x: f64 = 0.3;
        assert!((j[[0, 0]] - (4.0 * x.powi(3) - 6.0 * x * x)).abs() < 1e-12);
    }

    #[test]
    fn empty_coordinate_set_gives_empty_block() {
        let store = ParameterStore::new(0);
        let m = parameter_jacobian(&store, &[], 1e-4, |_| vec![1.0]);
        assert_eq!(m.dim(), (0, 0));
    }
}
