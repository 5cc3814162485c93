//! A rank-K thin plate regression spline smoothing a noisy surface at a
//! range of penalty weights.
//!
//! ```bash
//! cargo run --release -p warpcov --example thin_plate
//! ```

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpcov::basis::{build_tprs, penalized_lsq};

fn surface(x: &[f64; 2]) -> f64 {
    (3.0 * x[0]).sin() * (2.0 * x[1]).cos()
}

fn main() -> warpcov::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<[f64; 2]> = (0..150).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| surface(p) + 0.2 * rng.random_range(-1.0..1.0)));
    let basis = build_tprs(&pts, 20)?;
    println!("rank {} with {} unpenalized columns", basis.rank(), basis.null_dim);

    let test: Vec<[f64; 2]> = (0..21).flat_map(|i| (0..21).map(move |j| [i as f64 / 20.0, j as f64 / 20.0])).collect();
    let x_test = basis.evaluator.design_for(&test)?;
    for log10_lambda in [-6.0, -3.0, -1.0, 1.0, 3.0] {
        let beta = penalized_lsq(&basis.design, &basis.penalty, 10f64.powf(log10_lambda), &y)?;
        let fit = &x_test * &beta;
        let rmse = (test.iter().zip(fit.iter()).map(|(p, f)| (surface(p) - f).powi(2)).sum::<f64>() / test.len() as f64).sqrt();
        println!("log10 lambda {log10_lambda:5.1}: grid RMSE against the true surface {rmse:.4}");
    }
    Ok(())
}
