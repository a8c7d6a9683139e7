//! Float helpers routed through `libm` so the crate builds without `std`.

pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

/// Quantization rounds half *up*, which keeps packet counts stable under
/// ties.
pub fn round_half_up(x: f64) -> f64 {
    libm::floor(x + 0.5)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}
