//! Small shared numeric helpers.

pub(crate) const LN_SQRT_2PI: f64 = 0.9189385332046727;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + exp(z)) without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Log-density of N(x; 0, var).
pub(crate) fn log_normal_pdf(x: f64, var: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * var.ln() - x * x / (2.0 * var)
}
