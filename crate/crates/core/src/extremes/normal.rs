//! Univariate and bivariate standard normal functions.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / TWO_PI.sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `Phi^-1(p)`, accurate in both tails.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < 0.5 {
        -norm_upper_quantile(p)
    } else {
        norm_upper_quantile(1.0 - p)
    }
}

/// `Phi^-1(1 - q)` without forming `1 - q`.
pub fn norm_upper_quantile(q: f64) -> f64 {
    if q <= 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let mut x = SQRT_2 * erfc_inv(2.0 * q);
    // one Halley step on the upper tail probability
    let pdf = norm_pdf(x);
    if pdf > 0.0 {
        let r = (norm_cdf(-x) - q) / pdf;
        x += r / (1.0 + 0.5 * x * r);
    }
    x
}

pub fn bvn_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let s = 1.0 - rho * rho;
    (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s)).exp() / (TWO_PI * s.sqrt())
}

const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// `P(X > h, Y > k)` for standard bivariate normal with correlation `r`
/// (Genz's Gauss-Legendre scheme, absolute error near 1e-15).
fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let nodes: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let mut hk = h * k;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        let mut bvn = 0.0;
        for &(w, x) in nodes {
            for sign in [1.0, -1.0] {
                let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return bvn * asr / (2.0 * TWO_PI) + norm_cdf(-h) * norm_cdf(-k);
    }
    let mut k = k;
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a * (-(bs / a_s + hk) / 2.0).exp() * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp() * TWO_PI.sqrt() * norm_cdf(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in nodes {
            let xs = (a * (x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            bvn += a * w * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
            let xs = a_s * (1.0 - x).powi(2) / 4.0;
            let rs = (1.0 - xs).sqrt();
            bvn += a * w * (-(bs / xs + hk) / 2.0).exp() * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn + norm_cdf(-h.max(k))
    } else {
        let mut out = -bvn;
        if k > h {
            out += if h < 0.0 { norm_cdf(k) - norm_cdf(h) } else { norm_cdf(-h) - norm_cdf(-k) };
        }
        out
    }
}

/// `Phi_2(x, y; rho) = P(X <= x, Y <= y)`.
pub fn bvn_cdf(x: f64, y: f64, rho: f64) -> f64 {
    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return norm_cdf(y);
    }
    if y == f64::INFINITY {
        return norm_cdf(x);
    }
    upper_orthant(-x, -y, rho).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// `Phi(x) Phi(y) + int_0^rho phi_2(x, y; r) dr` by composite Simpson.
    fn plackett(x: f64, y: f64, rho: f64) -> f64 {
        let n = 4000;
        let h = rho / n as f64;
        let mut s = bvn_pdf(x, y, 0.0) + bvn_pdf(x, y, rho);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * bvn_pdf(x, y, i as f64 * h);
        }
        norm_cdf(x) * norm_cdf(y) + s * h / 3.0
    }

    #[test]
    fn univariate_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.96) - 0.9750021048517795).abs() < 1e-15);
        assert!((norm_quantile(0.97) - 1.880793608151251).abs() < 1e-12);
        assert!((norm_upper_quantile(1e-20) - 9.262340089798408).abs() < 1e-9);
        for p in [1e-300, 1e-10, 0.01, 0.3, 0.5, 0.8, 0.999] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-14 * p.max(1e-300) + 1e-16, "{p}");
        }
    }

    #[test]
    fn bivariate_matches_plackett_integral() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..300 {
            let x = rng.random_range(-4.0..4.0);
            let y = rng.random_range(-4.0..4.0);
            let rho: f64 = rng.random_range(-0.995..0.995);
            let got = bvn_cdf(x, y, rho);
            let want = plackett(x, y, rho);
            assert!((got - want).abs() < 1e-9, "x={x} y={y} rho={rho}: {got} vs {want}");
        }
    }

    #[test]
    fn bivariate_special_cases() {
        assert!((bvn_cdf(0.0, 0.0, 0.5) - (0.25 + 0.5f64.asin() / TWO_PI)).abs() < 1e-15);
        assert!((bvn_cdf(1.3, -0.4, 0.0) - norm_cdf(1.3) * norm_cdf(-0.4)).abs() < 1e-15);
        // near the perfectly correlated limits
        assert!((bvn_cdf(0.3, 0.7, 0.999999) - norm_cdf(0.3)).abs() < 1e-3);
        assert!(bvn_cdf(-0.3, -0.7, -0.999999) < 1e-6);
        assert_eq!(bvn_cdf(f64::INFINITY, 0.2, 0.4), norm_cdf(0.2));
        assert_eq!(bvn_cdf(f64::NEG_INFINITY, 0.2, 0.4), 0.0);
    }

    #[test]
    fn bivariate_matches_monte_carlo_rectangles() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 1_000_000;
        for (x, y, rho) in [(1.88, 1.88, 0.7), (0.5, -1.0, -0.6), (-0.2, 0.9, 0.95)] {
            let s = (1.0f64 - rho * rho).sqrt();
            let mut hits = 0usize;
            for _ in 0..n {
                let a: f64 = rng.sample(rand_distr::StandardNormal);
                let b: f64 = rng.sample(rand_distr::StandardNormal);
                if a <= x && rho * a + s * b <= y {
                    hits += 1;
                }
            }
            let mc = hits as f64 / n as f64;
            assert!((bvn_cdf(x, y, rho) - mc).abs() < 5e-4, "{x} {y} {rho}");
        }
    }
}
