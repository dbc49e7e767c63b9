use crate::error::{Error, Result};

/// Linear-interpolation resampling. Output length is
/// `round(len * to_rate / from_rate)`; samples past the last input are held.
pub fn resample(x: &[f64], from_rate: u32, to_rate: u32) -> Result<Vec<f64>> {
    if from_rate == 0 || to_rate == 0 {
        return Err(Error::invalid("resample", "rates must be positive"));
    }
    if from_rate == to_rate || x.is_empty() {
        return Ok(x.to_vec());
    }
    let out_len = ((x.len() as u64 * to_rate as u64 + from_rate as u64 / 2) / from_rate as u64).max(1) as usize;
    let ratio = from_rate as f64 / to_rate as f64;
    let last = x.len() - 1;
    Ok((0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let t = pos - i0 as f64;
            x[i0] + t.min(1.0) * (x[i1] - x[i0])
        })
        .collect())
}
