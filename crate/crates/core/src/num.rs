//! Float scalar abstraction for the numeric kernels.

/// Float scalar the math modules are generic over: `f32` or `f64`.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + 'static
{
    /// Round to nearest, ties to even (banker's rounding).
    fn round_ties_even(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to Real")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real converts to f64")
    }
}

impl Real for f32 {
    fn round_ties_even(self) -> Self {
        f32::round_ties_even(self)
    }
}

impl Real for f64 {
    fn round_ties_even(self) -> Self {
        f64::round_ties_even(self)
    }
}
