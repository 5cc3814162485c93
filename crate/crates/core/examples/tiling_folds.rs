//! Clockwise areas on a grid tiling, fold counting and the three fold
//! penalties for a warp that folds part of the domain over.
//!
//! ```bash
//! cargo run --release -p warpcov --example tiling_folds
//! ```

use warpcov::synthetic::folded_warp;
use warpcov::tiling::{
    fold_count, fold_penalty_term, make_grid_tiling, penalty_h1, FoldPenaltyConfig, FoldPenaltyKind, Point2, Rect,
};

fn main() -> warpcov::Result<()> {
    let tiling = make_grid_tiling(Rect { xmin: 0.0, xmax: 1.0, ymin: 0.0, ymax: 1.0 }, 15, 15)?;
    let reference = tiling.areas();
    let eps = 0.1 * reference.iter().sum::<f64>() / reference.len() as f64;
    println!("{} triangles, epsilon = {eps:.3e}", tiling.len());

    for (name, warp) in [("identity", (|x: &Point2| *x) as fn(&Point2) -> Point2), ("folded", |x: &Point2| folded_warp(x))] {
        let warped: Vec<Point2> = tiling.vertices.iter().map(warp).collect();
        let areas = tiling.warped_areas(&warped)?;
        let min = areas.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("{name:>8}: folds {:3}  min area {min:+.2e}  h1 {}", fold_count(&tiling, &warped)?, penalty_h1(&areas)?);
        for kind in [FoldPenaltyKind::Strict, FoldPenaltyKind::Near, FoldPenaltyKind::InverseArea] {
            let term = fold_penalty_term(&FoldPenaltyConfig::new(kind, 1e6, eps)?, &areas)?;
            println!("          {kind:?} penalty {:.3e}", term.value);
        }
    }
    Ok(())
}
