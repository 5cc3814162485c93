//! Triangular tilings of the study domain and fold penalties.
//!
//! A warp folds when it reverses the orientation of some tiling triangles.
//! Orientation is measured by the clockwise area: positive when the warped
//! vertices keep the reference clockwise order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};

pub type Point2 = [f64; 2];

/// Three vertices in clockwise order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub vertices: [Point2; 3],
}

impl Triangle {
    pub fn new(vertices: [Point2; 3]) -> Result<Self> {
        let area = clockwise_area(&vertices)?;
        if area <= 0.0 {
            return invalid_input(format!(
                "reference triangle must have positive clockwise area, got {area}"
            ));
        }
        Ok(Self { vertices })
    }

    pub fn area(&self) -> f64 {
        raw_clockwise_area(&self.vertices)
    }
}

/// Signed clockwise area of three points.
///
/// With vertex `i` written `(x_i1, x_i2)` the value is
/// `(x21 x12 + x31 x22 + x11 x32 - x11 x22 - x21 x32 - x31 x12) / 2`.
pub fn clockwise_area(v: &[Point2; 3]) -> Result<f64> {
    if v.iter().flatten().any(|c| !c.is_finite()) {
        return invalid_input("triangle has non-finite coordinates");
    }
    Ok(raw_clockwise_area(v))
}

#[inline]
pub(crate) fn raw_clockwise_area(v: &[Point2; 3]) -> f64 {
    let [x11, x12] = v[0];
    let [x21, x22] = v[1];
    let [x31, x32] = v[2];
    (x21 * x12 + x31 * x22 + x11 * x32 - x11 * x22 - x21 * x32 - x31 * x12) / 2.0
}

/// Partial derivatives of the clockwise area with respect to each vertex
/// coordinate.
#[inline]
pub fn clockwise_area_gradient(v: &[Point2; 3]) -> [Point2; 3] {
    let [x11, x12] = v[0];
    let [x21, x22] = v[1];
    let [x31, x32] = v[2];
    [
        [(x32 - x22) / 2.0, (x21 - x31) / 2.0],
        [(x12 - x32) / 2.0, (x31 - x11) / 2.0],
        [(x22 - x12) / 2.0, (x11 - x21) / 2.0],
    ]
}

/// Rectangular grid a tiling was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn point(&self, i: usize, j: usize) -> Point2 {
        [self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dy]
    }

    /// Grid vertices in row-major order (x fastest).
    pub fn points(&self) -> Vec<Point2> {
        let mut pts = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                pts.push(self.point(i, j));
            }
        }
        pts
    }
}

/// Axis-aligned rectangle `[xmin, xmax] x [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn bounding(points: &[Point2]) -> Result<Self> {
        if points.is_empty() {
            return invalid_input("cannot bound an empty point set");
        }
        let mut r = Rect {
            xmin: f64::INFINITY,
            xmax: f64::NEG_INFINITY,
            ymin: f64::INFINITY,
            ymax: f64::NEG_INFINITY,
        };
        for p in points {
            r.xmin = r.xmin.min(p[0]);
            r.xmax = r.xmax.max(p[0]);
            r.ymin = r.ymin.min(p[1]);
            r.ymax = r.ymax.max(p[1]);
        }
        Ok(r)
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }
}

/// A triangular tiling stored as shared vertices plus index triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tiling {
    pub grid: Option<GridSpec>,
    pub vertices: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
}

/// Split each grid cell along its lower-left to upper-right diagonal into
/// two clockwise triangles. Produces `2 (nx - 1)(ny - 1)` triangles.
pub fn make_grid_tiling(domain: Rect, nx: usize, ny: usize) -> Result<Tiling> {
    if nx < 2 || ny < 2 {
        return invalid_input(format!("grid tiling needs nx, ny >= 2 (got {nx}, {ny})"));
    }
    let w = domain.xmax - domain.xmin;
    let h = domain.ymax - domain.ymin;
    if !(w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
        return invalid_input("degenerate tiling rectangle");
    }
    let grid = GridSpec {
        x0: domain.xmin,
        y0: domain.ymin,
        dx: w / (nx - 1) as f64,
        dy: h / (ny - 1) as f64,
        nx,
        ny,
    };
    let idx = |i: usize, j: usize| j * nx + i;
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let ll = idx(i, j);
            let lr = idx(i + 1, j);
            let ul = idx(i, j + 1);
            let ur = idx(i + 1, j + 1);
            triangles.push([ll, ul, ur]);
            triangles.push([ll, ur, lr]);
        }
    }
    let tiling = Tiling { grid: Some(grid), vertices: grid.points(), triangles };
    tiling.check_cover(domain.area())?;
    Ok(tiling)
}

impl Tiling {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, l: usize) -> Triangle {
        let [a, b, c] = self.triangles[l];
        Triangle { vertices: [self.vertices[a], self.vertices[b], self.vertices[c]] }
    }

    /// Reference clockwise areas of every triangle.
    pub fn areas(&self) -> Vec<f64> {
        (0..self.len()).map(|l| self.triangle(l).area()).collect()
    }

    /// Clockwise areas after moving the vertices to `warped` (aligned with
    /// `self.vertices`), using the reference vertex ordering.
    pub fn warped_areas(&self, warped: &[Point2]) -> Result<Vec<f64>> {
        if warped.len() != self.vertices.len() {
            return invalid_input(format!(
                "expected {} warped vertices, got {}",
                self.vertices.len(),
                warped.len()
            ));
        }
        self.triangles
            .iter()
            .map(|&[a, b, c]| clockwise_area(&[warped[a], warped[b], warped[c]]))
            .collect()
    }

    // positive areas summing to the domain area imply no overlap for grid tilings
    fn check_cover(&self, domain_area: f64) -> Result<()> {
        let areas = self.areas();
        if areas.iter().any(|a| *a <= 0.0) {
            return invalid_input("tiling contains a triangle with non-positive area");
        }
        let total: f64 = areas.iter().sum();
        if (total - domain_area).abs() > 1e-9 * domain_area.abs().max(1.0) {
            return invalid_input(format!(
                "tiling area {total} does not match domain area {domain_area}"
            ));
        }
        Ok(())
    }
}

/// Number of triangles whose warped clockwise area is negative.
pub fn fold_count(tiling: &Tiling, warped: &[Point2]) -> Result<usize> {
    Ok(tiling.warped_areas(warped)?.iter().filter(|a| **a < 0.0).count())
}

/// Strict no-fold indicator: 1 when any area is negative, else 0.
pub fn penalty_h1(areas: &[f64]) -> Result<f64> {
    check_finite(areas)?;
    Ok(if areas.iter().any(|w| *w < 0.0) { 1.0 } else { 0.0 })
}

/// Near-fold penalty `[log(1 + sum_l max(eps - w_l, 0) / eps)]^2`.
pub fn penalty_h2(areas: &[f64], epsilon: f64) -> Result<f64> {
    Ok(penalty_h2_with_gradient(areas, epsilon)?.0)
}

/// Near-fold penalty and its gradient with respect to each area.
pub fn penalty_h2_with_gradient(areas: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return invalid_config(format!("near-fold epsilon must be positive, got {epsilon}"));
    }
    check_finite(areas)?;
    let shortfall: f64 = areas.iter().map(|w| (epsilon - w).max(0.0)).sum();
    let log_term = (shortfall / epsilon).ln_1p();
    let value = log_term * log_term;
    // d/dw_l = -2 log(1 + s/eps) / (eps + s) for w_l < eps
    let slope = -2.0 * log_term / (epsilon + shortfall);
    let grad = areas.iter().map(|w| if *w < epsilon { slope } else { 0.0 }).collect();
    Ok((value, grad))
}

/// Inverse-area penalty `sum_l max(1/w_l - 1/eps, 0)`, defined only for
/// positive areas (infinite otherwise).
pub fn penalty_inverse_area(areas: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return invalid_config(format!("inverse-area epsilon must be positive, got {epsilon}"));
    }
    check_finite(areas)?;
    if areas.iter().any(|w| *w <= 0.0) {
        return Ok((f64::INFINITY, vec![0.0; areas.len()]));
    }
    let mut value = 0.0;
    let grad = areas
        .iter()
        .map(|w| {
            if *w < epsilon {
                value += 1.0 / w - 1.0 / epsilon;
                -1.0 / (w * w)
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

fn check_finite(areas: &[f64]) -> Result<()> {
    if areas.iter().any(|w| !w.is_finite()) {
        return invalid_input("areas must be finite");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldPenaltyKind {
    Strict,
    Near,
    InverseArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldPenaltyConfig {
    pub kind: FoldPenaltyKind,
    pub delta: f64,
    pub epsilon: f64,
}

impl FoldPenaltyConfig {
    pub fn new(kind: FoldPenaltyKind, delta: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { kind, delta, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return invalid_config(format!("fold penalty delta must be positive, got {}", self.delta));
        }
        if self.kind != FoldPenaltyKind::Strict && !(self.epsilon > 0.0 && self.epsilon.is_finite())
        {
            return invalid_config(format!(
                "fold penalty epsilon must be positive, got {}",
                self.epsilon
            ));
        }
        Ok(())
    }

    pub fn is_differentiable(&self) -> bool {
        self.kind != FoldPenaltyKind::Strict
    }
}

/// `delta * h(areas)`; `differentiable` is false for the strict indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPenaltyTerm {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub differentiable: bool,
}

pub fn fold_penalty_term(config: &FoldPenaltyConfig, areas: &[f64]) -> Result<FoldPenaltyTerm> {
    config.validate()?;
    let d = config.delta;
    let (h, grad, differentiable) = match config.kind {
        FoldPenaltyKind::Strict => (penalty_h1(areas)?, vec![0.0; areas.len()], false),
        FoldPenaltyKind::Near => {
            let (h, g) = penalty_h2_with_gradient(areas, config.epsilon)?;
            (h, g, true)
        }
        FoldPenaltyKind::InverseArea => {
            let (h, g) = penalty_inverse_area(areas, config.epsilon)?;
            (h, g, true)
        }
    };
    Ok(FoldPenaltyTerm {
        value: d * h,
        gradient: grad.into_iter().map(|g| d * g).collect(),
        differentiable,
    })
}

/// Second derivatives of `delta * h` with respect to the areas below
/// epsilon: the active indices and the dense block over them. Empty for the
/// strict indicator, whose curvature is zero wherever it is defined.
pub fn fold_penalty_area_hessian(config: &FoldPenaltyConfig, areas: &[f64]) -> Result<(Vec<usize>, DMatrix<f64>)> {
    config.validate()?;
    check_finite(areas)?;
    let eps = config.epsilon;
    let active: Vec<usize> = (0..areas.len()).filter(|&l| areas[l] < eps).collect();
    let k = active.len();
    let block = match config.kind {
        FoldPenaltyKind::Strict => return Ok((Vec::new(), DMatrix::zeros(0, 0))),
        FoldPenaltyKind::Near => {
            // d2h / dw_l dw_m = 2 (1 - log(1 + s/eps)) / (eps + s)^2 on the active set
            let shortfall: f64 = active.iter().map(|&l| eps - areas[l]).sum();
            let log_term = (shortfall / eps).ln_1p();
            let c = config.delta * 2.0 * (1.0 - log_term) / (eps + shortfall).powi(2);
            DMatrix::from_element(k, k, c)
        }
        FoldPenaltyKind::InverseArea => {
            let d = active.iter().map(|&l| config.delta * 2.0 / areas[l].powi(3));
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, d))
        }
    };
    Ok((active, block))
}

/// JSON document form: `{grid: {...}, triangles: [[[x, y] x 3] x L]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilingDocument {
    pub grid: Option<GridSpec>,
    pub triangles: Vec<[Point2; 3]>,
}

impl From<&Tiling> for TilingDocument {
    fn from(t: &Tiling) -> Self {
        Self { grid: t.grid, triangles: (0..t.len()).map(|l| t.triangle(l).vertices).collect() }
    }
}

impl TryFrom<TilingDocument> for Tiling {
    type Error = crate::error::Error;

    fn try_from(doc: TilingDocument) -> Result<Self> {
        if let Some(g) = doc.grid {
            let rect = Rect {
                xmin: g.x0,
                xmax: g.x0 + g.dx * (g.nx.max(1) - 1) as f64,
                ymin: g.y0,
                ymax: g.y0 + g.dy * (g.ny.max(1) - 1) as f64,
            };
            let rebuilt = make_grid_tiling(rect, g.nx, g.ny)?;
            let same = rebuilt.len() == doc.triangles.len()
                && doc.triangles.iter().enumerate().all(|(l, tri)| {
                    let r = rebuilt.triangle(l).vertices;
                    tri.iter().flatten().zip(r.iter().flatten()).all(|(a, b)| (a - b).abs() < 1e-9)
                });
            if same {
                return Ok(rebuilt);
            }
            return invalid_input("tiling triangles disagree with the declared grid");
        }
        // irregular tiling: every triangle gets its own vertices
        let mut vertices = Vec::with_capacity(3 * doc.triangles.len());
        let mut triangles = Vec::with_capacity(doc.triangles.len());
        for tri in doc.triangles {
            Triangle::new(tri)?;
            let base = vertices.len();
            vertices.extend_from_slice(&tri);
            triangles.push([base, base + 1, base + 2]);
        }
        if triangles.is_empty() {
            return invalid_input("tiling must contain at least one triangle");
        }
        Ok(Tiling { grid: None, vertices, triangles })
    }
}

impl Tiling {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TilingDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TilingDocument = serde_json::from_str(s)?;
        doc.try_into()
    }
}
