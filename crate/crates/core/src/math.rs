//! Scalar helpers over `libm` so the crate stays `no_std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn log1p(x: f64) -> f64 {
    libm::log1p(x)
}

/// `ln Σ exp(xᵢ)` as `max + ln(1 + Σ_{i≠argmax} exp(xᵢ − max))`.
///
/// The `log1p` form keeps the log-probability of a dominant entry strictly
/// negative until the other terms underflow, so `1 − p` stays positive for
/// near one-hot distributions.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let (max, tail) = lse_parts(xs);
    max + tail
}

/// `(max, ln(1 + Σ_{i≠argmax} exp(xᵢ − max)))`.
fn lse_parts(xs: &[f64]) -> (f64, f64) {
    let mut arg = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[arg] {
            arg = i;
        }
    }
    let max = xs[arg];
    if !max.is_finite() {
        return (max, 0.0);
    }
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| exp(x - max))
        .sum();
    (max, log1p(rest))
}

/// `p(1 − p)` for `p = exp(log_p)`, with `1 − p` taken as `−expm1(log_p)`.
pub fn p_one_minus_p(log_p: f64) -> f64 {
    exp(log_p) * -expm1(log_p)
}

/// Writes `log softmax(xs)` into `out`.
pub fn log_softmax_into(xs: &[f64], out: &mut [f64]) {
    // shift first, so the dominant entry comes out as exactly `−tail`
    let (max, tail) = lse_parts(xs);
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max) - tail;
    }
}

/// Shannon entropy (nats) of a log-probability vector, with `0·ln 0 = 0`.
pub fn entropy_from_log_probs(log_probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in log_probs {
        let p = exp(lp);
        if p > 0.0 {
            h -= p * lp;
        }
    }
    h.max(0.0)
}
