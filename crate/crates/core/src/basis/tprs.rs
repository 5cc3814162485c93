//! Thin plate regression splines via truncated eigendecomposition of the
//! radial-basis matrix.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::{count_null, BasisEvaluator, BasisKind, BasisRealization, Standardizer};
use crate::error::{invalid_config, Error, Result};
use crate::linalg;

/// 2-D thin plate radial function `r^2 log r`, zero at the origin.
#[inline]
pub(crate) fn eta(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

pub(super) fn raw_row(z: &[f64; 2], knots: &[[f64; 2]], radial_map: &DMatrix<f64>) -> RowDVector<f64> {
    let m = radial_map.ncols();
    let mut row = RowDVector::zeros(m + 3);
    for (i, k) in knots.iter().enumerate() {
        let e = eta(((z[0] - k[0]).powi(2) + (z[1] - k[1]).powi(2)).sqrt());
        if e != 0.0 {
            for j in 0..m {
                row[j] += e * radial_map[(i, j)];
            }
        }
    }
    row[m] = 1.0;
    row[m + 1] = z[0];
    row[m + 2] = z[1];
    row
}

/// Rank-`rank` thin plate regression spline on `points`.
///
/// Columns are the `rank - 3` wiggly eigen-directions followed by the
/// unpenalized `[1, x1, x2]` null space, all in standardized coordinates
/// (centered, divided by a common scale so the radial basis stays
/// isotropic).
pub fn build_tprs(points: &[[f64; 2]], rank: usize) -> Result<BasisRealization> {
    let n = points.len();
    if rank < 3 {
        return invalid_config(format!("thin plate rank must be >= 3, got {rank}"));
    }
    if rank >= n {
        return invalid_config(format!("thin plate rank {rank} must be below the point count {n}"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite basis location".into()));
    }
    let center = [
        points.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        points.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    let var = points
        .iter()
        .map(|p| (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2))
        .sum::<f64>()
        / (2.0 * n as f64);
    let scale = var.sqrt();
    if scale <= 0.0 {
        return Err(Error::RankDeficient("basis locations are all identical".into()));
    }
    let standardizer = Standardizer { center: center.to_vec(), scale };
    let knots: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale])
        .collect();

    let t = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => knots[i][0],
        _ => knots[i][1],
    });
    let (tv, _) = linalg::sym_eigen_sorted(&(t.transpose() * &t));
    if tv[2] <= 1e-10 * tv[0] {
        return Err(Error::RankDeficient("basis locations are collinear".into()));
    }

    let e = DMatrix::from_fn(n, n, |i, j| {
        eta(((knots[i][0] - knots[j][0]).powi(2) + (knots[i][1] - knots[j][1]).powi(2)).sqrt())
    });
    let (values, vectors) = linalg::sym_eigen_sorted(&e);
    // truncate to the `rank` eigenvalues of largest magnitude
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let keep = &order[..rank];
    let uk = DMatrix::from_fn(n, rank, |i, j| vectors[(i, keep[j])]);
    let dk = DVector::from_iterator(rank, keep.iter().map(|&k| values[k]));

    // coefficients must satisfy T' U_k delta = 0
    let z = linalg::null_space(&(t.transpose() * &uk))?;
    let m = rank - 3;
    let radial_map = &uk * &z;
    let mut penalty = DMatrix::zeros(rank, rank);
    let s_pen = z.transpose() * DMatrix::from_diagonal(&dk) * &z;
    penalty.view_mut((0, 0), (m, m)).copy_from(&s_pen);
    linalg::symmetrize(&mut penalty);

    let wiggly = &e * &radial_map;
    let mut design = DMatrix::zeros(n, rank);
    design.view_mut((0, 0), (n, m)).copy_from(&wiggly);
    design.view_mut((0, m), (n, 3)).copy_from(&t);

    let null_dim = count_null(&penalty);
    Ok(BasisRealization {
        kind: BasisKind::ThinPlate2d,
        design,
        penalty,
        null_dim,
        evaluator: BasisEvaluator::ThinPlate2d { standardizer, knots, radial_map },
    })
}
