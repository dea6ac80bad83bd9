/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy `−(y·ln ŷ + (1−y)·ln(1−ŷ))` with ŷ clamped to `[ε, 1−ε]`.
pub fn bce(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to `y_hat`; zero inside the clamped region.
pub fn bce_grad(y_hat: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat) {
        return 0.0;
    }
    -y / y_hat + (1.0 - y) / (1.0 - y_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(1.0, 1.0) <= 1e-6);
        assert!((bce(0.9, 0.0) - std::f64::consts::LN_10).abs() < 1e-9);
        assert!(bce(0.0, 1.0).is_finite());
        assert!(bce(1.0, 0.0).is_finite());
    }

    #[test]
    fn gradient_matches_central_difference() {
        for &(p, y) in &[(0.3, 1.0), (0.7, 0.0), (0.55, 1.0), (0.01, 0.0)] {
            let h = 1e-6;
            let fd = (bce(p + h, y) - bce(p - h, y)) / (2.0 * h);
            assert!((fd - bce_grad(p, y)).abs() < 1e-6 * fd.abs().max(1.0));
        }
        assert_eq!(bce_grad(0.0, 1.0), 0.0);
    }
}
