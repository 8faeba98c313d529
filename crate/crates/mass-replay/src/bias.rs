//! Upload/download fairness bias between intended and measured throughput.

use crate::ReplayError;

/// `intended_up/intended_down - measured_up/measured_down`. Positive values
/// mean download got more than its intended share (download bias), negative
/// values mean upload did (upload bias). All four throughputs must be
/// positive for the ratios to make sense.
pub fn bias(intended: (f64, f64), measured: (f64, f64)) -> Result<f64, ReplayError> {
    let (iu, id) = intended;
    let (mu, md) = measured;
    if !(iu > 0.0 && id > 0.0 && mu > 0.0 && md > 0.0) {
        return Err(ReplayError::NonPositiveThroughput(iu, id, mu, md));
    }
    Ok(iu / id - mu / md)
}
