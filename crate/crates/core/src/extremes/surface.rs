//! Parameter surfaces `intercept + f_tp(x) + f_cr(covariate)` on station
//! locations, each smooth centred to sum to zero over the stations.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_cubic_1d, build_tprs, BasisEvaluator};
use crate::error::{invalid_config, invalid_input, Result};
use crate::linalg;
use crate::reml::PenaltyBlock;
use crate::tiling::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Self::Identity => eta,
            Self::Log => eta.exp(),
        }
    }
}

/// Which smooths a surface carries. `None` ranks drop the term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub spatial_rank: Option<usize>,
    pub covariate_rank: Option<usize>,
}

impl SurfaceSpec {
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn spatial(rank: usize) -> Self {
        Self { spatial_rank: Some(rank), covariate_rank: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermInput {
    Location,
    Covariate,
}

/// One centred smooth: `row(x) = raw(x) * map - offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub input: TermInput,
    pub evaluator: BasisEvaluator,
    pub map: DMatrix<f64>,
    pub offset: RowDVector<f64>,
    pub penalty: DMatrix<f64>,
}

impl SmoothTerm {
    fn new(input: TermInput, evaluator: BasisEvaluator, design: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Self> {
        // drop the direction of the constant function and centre the rest
        let n = design.nrows() as f64;
        let means = RowDVector::from_iterator(design.ncols(), design.column_iter().map(|c| c.sum() / n));
        let map = linalg::null_space(&DMatrix::from_row_slice(1, means.len(), means.as_slice()))?;
        let offset = &means * &map;
        let mut penalty = map.transpose() * penalty * &map;
        linalg::symmetrize(&mut penalty);
        Ok(Self { input, evaluator, map, offset, penalty })
    }

    pub fn ncols(&self) -> usize {
        self.map.ncols()
    }

    fn row(&self, x: &Point2, covariate: Option<f64>) -> Result<RowDVector<f64>> {
        let raw = match self.input {
            TermInput::Location => self.evaluator.row(x)?,
            TermInput::Covariate => match covariate {
                Some(c) => self.evaluator.row(&[c])?,
                None => return invalid_input("surface needs a covariate value"),
            },
        };
        Ok(raw * &self.map - &self.offset)
    }
}

/// Column layout of one surface: intercept first, then each term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceBasis {
    pub terms: Vec<SmoothTerm>,
}

impl SurfaceBasis {
    pub fn build(spec: &SurfaceSpec, stations: &[Point2], covariate: Option<&[f64]>) -> Result<Self> {
        let mut terms = Vec::new();
        if let Some(rank) = spec.spatial_rank {
            let b = build_tprs(stations, rank)?;
            terms.push(SmoothTerm::new(TermInput::Location, b.evaluator, &b.design, &b.penalty)?);
        }
        if let Some(rank) = spec.covariate_rank {
            let Some(values) = covariate else {
                return invalid_config("a covariate smooth was requested but no covariate was supplied");
            };
            if values.len() != stations.len() {
                return invalid_input("one covariate value per station is required");
            }
            let b = build_cubic_1d(values, rank)?;
            terms.push(SmoothTerm::new(TermInput::Covariate, b.evaluator, &b.design, &b.penalty)?);
        }
        Ok(Self { terms })
    }

    pub fn n_coef(&self) -> usize {
        1 + self.terms.iter().map(SmoothTerm::ncols).sum::<usize>()
    }

    pub fn uses_covariate(&self) -> bool {
        self.terms.iter().any(|t| t.input == TermInput::Covariate)
    }

    pub fn row(&self, x: &Point2, covariate: Option<f64>) -> Result<RowDVector<f64>> {
        let mut row = RowDVector::zeros(self.n_coef());
        row[0] = 1.0;
        let mut at = 1;
        for t in &self.terms {
            row.columns_mut(at, t.ncols()).copy_from(&t.row(x, covariate)?);
            at += t.ncols();
        }
        Ok(row)
    }

    pub fn design(&self, points: &[Point2], covariate: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(points.len(), self.n_coef());
        for (i, p) in points.iter().enumerate() {
            m.set_row(i, &self.row(p, covariate.map(|c| c[i]))?);
        }
        Ok(m)
    }

    /// One penalty block per term, shifted by `offset` in the full vector.
    pub fn penalties(&self, offset: usize) -> Vec<PenaltyBlock> {
        let mut at = offset + 1;
        self.terms
            .iter()
            .map(|t| {
                let b = PenaltyBlock { offset: at, matrix: t.penalty.clone() };
                at += t.ncols();
                b
            })
            .collect()
    }
}

/// A fitted surface: basis, link and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub link: Link,
    pub basis: SurfaceBasis,
    pub coef: DVector<f64>,
    pub lambda: Vec<f64>,
}

impl Surface {
    pub fn constant(link: Link, value: f64) -> Self {
        let eta = match link {
            Link::Identity => value,
            Link::Log => value.ln(),
        };
        Self { link, basis: SurfaceBasis { terms: Vec::new() }, coef: DVector::from_element(1, eta), lambda: Vec::new() }
    }

    pub fn linear_predictor(&self, x: &Point2, covariate: Option<f64>) -> Result<f64> {
        Ok((self.basis.row(x, covariate)? * &self.coef)[0])
    }

    pub fn value(&self, x: &Point2, covariate: Option<f64>) -> Result<f64> {
        Ok(self.link.inverse(self.linear_predictor(x, covariate)?))
    }
}
