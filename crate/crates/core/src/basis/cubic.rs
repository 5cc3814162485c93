//! Cubic regression splines parameterized by function values at knots,
//! with the integrated squared second-derivative penalty.

use nalgebra::{DMatrix, RowDVector};

use super::{BasisEvaluator, BasisKind, BasisRealization, Standardizer};
use crate::error::{invalid_config, Error, Result};

pub(super) fn raw_row(z: f64, knots: &[f64], fmap: &DMatrix<f64>) -> RowDVector<f64> {
    let k = knots.len();
    let mut row = RowDVector::zeros(k);
    let last = k - 1;
    if z < knots[0] {
        // linear extrapolation with the left-end slope
        let h = knots[1] - knots[0];
        let dx = z - knots[0];
        row[0] += 1.0 - dx / h;
        row[1] += dx / h;
        for c in 0..k {
            row[c] -= dx * h * (2.0 * fmap[(0, c)] + fmap[(1, c)]) / 6.0;
        }
        return row;
    }
    if z > knots[last] {
        let h = knots[last] - knots[last - 1];
        let dx = z - knots[last];
        row[last] += 1.0 + dx / h;
        row[last - 1] -= dx / h;
        for c in 0..k {
            row[c] += dx * h * (fmap[(last - 1, c)] + 2.0 * fmap[(last, c)]) / 6.0;
        }
        return row;
    }
    let j = match knots.iter().rposition(|kn| *kn <= z) {
        Some(j) if j < last => j,
        _ => last - 1,
    };
    let h = knots[j + 1] - knots[j];
    let am = (knots[j + 1] - z) / h;
    let ap = (z - knots[j]) / h;
    let cm = ((knots[j + 1] - z).powi(3) / h - h * (knots[j + 1] - z)) / 6.0;
    let cp = ((z - knots[j]).powi(3) / h - h * (z - knots[j])) / 6.0;
    row[j] += am;
    row[j + 1] += ap;
    for c in 0..k {
        row[c] += cm * fmap[(j, c)] + cp * fmap[(j + 1, c)];
    }
    row
}

/// `rank` knots spread evenly through the sorted distinct values.
fn place_knots(sorted_unique: &[f64], rank: usize) -> Vec<f64> {
    let nu = sorted_unique.len();
    (0..rank)
        .map(|k| {
            let pos = k as f64 * (nu - 1) as f64 / (rank - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(nu - 1);
            let frac = pos - lo as f64;
            sorted_unique[lo] * (1.0 - frac) + sorted_unique[hi] * frac
        })
        .collect()
}

/// Cubic regression spline with `rank` knots at quantiles of the distinct
/// values. The penalty null space is the linear functions.
pub fn build_cubic_1d(values: &[f64], rank: usize) -> Result<BasisRealization> {
    let n = values.len();
    if rank < 2 {
        return invalid_config(format!("cubic spline rank must be >= 2, got {rank}"));
    }
    if rank >= n {
        return invalid_config(format!("cubic spline rank {rank} must be below the data count {n}"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite covariate value".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd <= 0.0 {
        return Err(Error::InvalidConfig("knot placement needs distinct covariate values".into()));
    }
    let standardizer = Standardizer { center: vec![mean], scale: sd };
    let mut uniq: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    if uniq.len() < rank {
        return Err(Error::InvalidConfig(format!(
            "knot placement needs {rank} distinct values, found {}",
            uniq.len()
        )));
    }
    let knots = place_knots(&uniq, rank);

    let k = rank;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut fmap = DMatrix::zeros(k, k);
    let mut penalty = DMatrix::zeros(k, k);
    if k > 2 {
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let chol = b
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("cubic spline band matrix is singular".into()))?;
        let f = chol.solve(&d);
        fmap.view_mut((1, 0), (k - 2, k)).copy_from(&f);
        penalty = d.transpose() * &f;
        crate::linalg::symmetrize(&mut penalty);
    }
    let evaluator = BasisEvaluator::Cubic1d { standardizer, knots, second_derivative_map: fmap };
    let design = evaluator.design_for(&values.iter().map(|v| [*v]).collect::<Vec<_>>())?;
    Ok(BasisRealization { kind: BasisKind::Cubic1d, design, penalty, null_dim: 2, evaluator })
}
