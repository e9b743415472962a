use std::path::Path;

use nimbus_core::data::read_tensor_file;
use nimbus_core::{Error, Result, Tensor};

/// Min-max scales one `(frame, channel)` plane to 8-bit gray. A constant
/// plane maps to 128 everywhere.
pub fn plane_to_gray(t: &Tensor<f32>, frame: usize, channel: usize) -> Result<Vec<u8>> {
    let [n, c, _, _] = t.dims();
    if frame >= n || channel >= c {
        return Err(Error::Validation(format!(
            "frame {frame} / channel {channel} out of range for tensor {:?}",
            t.dims()
        )));
    }
    let plane = t.plane(frame, channel);
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Ok(vec![128; plane.len()]);
    }
    Ok(plane
        .iter()
        .map(|&v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect())
}

/// Binary portable graymap (P5) bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes plane `(frame, channel)` of a W4CL tensor file as a P5 graymap.
pub fn dump_image(tensor: &Path, channel: usize, frame: usize, out: &Path) -> Result<()> {
    let t: Tensor<f32> = read_tensor_file(tensor)?;
    let gray = plane_to_gray(&t, frame, channel)?;
    std::fs::write(out, encode_pgm(t.w(), t.h(), &gray)).map_err(|e| Error::io(out, e))
}
