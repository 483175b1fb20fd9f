use statrs::function::erf::erfc;

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn d1_d2(t: f64, x: f64, strike: f64, sigma: f64, horizon: f64) -> (f64, f64) {
    let sd = sigma * (horizon - t).sqrt();
    let d1 = ((x / strike).ln() + 0.5 * sd * sd) / sd;
    (d1, d1 - sd)
}

/// Put price in numeraire units (zero rate): `C N(-d2) - x N(-d1)`.
/// Returns the payoff at or after the horizon.
pub fn bs_put_closed_form(t: f64, x: f64, strike: f64, sigma: f64, horizon: f64) -> f64 {
    if t >= horizon || sigma <= 0.0 {
        return (strike - x).max(0.0);
    }
    if x <= 0.0 {
        return strike;
    }
    let (d1, d2) = d1_d2(t, x, strike, sigma, horizon);
    strike * norm_cdf(-d2) - x * norm_cdf(-d1)
}

/// `d/dx` of [`bs_put_closed_form`], i.e. `N(d1) - 1`.
pub fn bs_put_delta(t: f64, x: f64, strike: f64, sigma: f64, horizon: f64) -> f64 {
    if t >= horizon || sigma <= 0.0 {
        return if x < strike { -1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return -1.0;
    }
    let (d1, _) = d1_d2(t, x, strike, sigma, horizon);
    norm_cdf(d1) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_payoff() {
        assert_eq!(bs_put_closed_form(1.0, 80.0, 100.0, 0.2, 1.0), 20.0);
    }

    #[test]
    fn deep_in_the_money_limit() {
        let p = bs_put_closed_form(0.0, 1e-8, 100.0, 0.2, 1.0);
        assert!((p - 100.0).abs() < 1e-7);
    }

    #[test]
    fn at_the_money_value() {
        // 100 (2 N(0.1) - 1)
        let p = bs_put_closed_form(0.0, 100.0, 100.0, 0.2, 1.0);
        assert!((p - 100.0 * (2.0 * norm_cdf(0.1) - 1.0)).abs() < 1e-12);
        assert!((p - 7.965_567_455_405_798).abs() < 1e-9);
    }

    #[test]
    fn delta_matches_central_difference() {
        let h = 1e-4;
        for &x in &[60.0, 95.0, 100.0, 130.0] {
            let fd = (bs_put_closed_form(0.3, x + h, 100.0, 0.25, 1.0) - bs_put_closed_form(0.3, x - h, 100.0, 0.25, 1.0))
                / (2.0 * h);
            assert!((fd - bs_put_delta(0.3, x, 100.0, 0.25, 1.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        let q = norm_cdf(1.959_963_984_540_054);
        assert!((q - 0.975).abs() < 1e-10, "{q:e}");
        assert!((norm_cdf(-3.0) / 0.001_349_898_031_630_093_3 - 1.0).abs() < 1e-10);
    }
}
