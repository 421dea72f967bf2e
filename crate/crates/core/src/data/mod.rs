//! Field series storage, synthetic generators and mesh-to-mesh resampling.

mod lowpass;
mod resample;
mod series;
mod synthetic;

pub use lowpass::{
    analytic_lowpass_oracle, gen_lowpass_signals, lowpass_demo, lowpass_kernel, signal, trapezoid_weights_1d,
    LowpassDemo, LowpassSignals, Sampling,
};
pub use resample::{apply_operator, resample_operator, resample_roundtrip_error, resample_series};
pub use series::{FieldSeries, SERIES_MAGIC};
pub use synthetic::{gen_pulse2d, gen_wake2d, wake_at, PulseParams, PulseRealization, WakeParams};
