use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Fixed display ranges of chlorophyll, carotenoid and anthocyanin maps.
pub const HEAT_RANGES: [(f64, f64); 3] = [(0.0, 50.0), (0.0, 14.0), (0.0, 5.0)];

/// Viridis key colors, interpolated linearly.
const RAMP: [(f64, [u8; 3]); 5] = [
    (0.0, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.5, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.0, [253, 231, 37]),
];

/// Color of `t` in [0, 1] on the ramp; values outside are clamped.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    for w in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return std::array::from_fn(|i| {
                (c0[i] as f64 + f * (c1[i] as f64 - c0[i] as f64)).round() as u8
            });
        }
    }
    RAMP[RAMP.len() - 1].1
}

/// Heat map of one feature; pixels not classified as tree are black.
pub fn heat_map(
    width: usize,
    height: usize,
    values: &[f64],
    is_tree: &[bool],
    range: (f64, f64),
) -> Result<RgbImage> {
    if values.len() != width * height || is_tree.len() != values.len() {
        return Err(Error::Dimension(
            "heat map input does not match the image size".into(),
        ));
    }
    let (lo, hi) = range;
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = if is_tree[i] {
            Rgb(ramp_color((values[i] - lo) / (hi - lo)))
        } else {
            Rgb([0, 0, 0])
        };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamping() {
        assert_eq!(ramp_color(0.0), [68, 1, 84]);
        assert_eq!(ramp_color(1.0), [253, 231, 37]);
        assert_eq!(ramp_color(-3.0), ramp_color(0.0));
        assert_eq!(ramp_color(7.0), ramp_color(1.0));
        assert_eq!(ramp_color(0.5), [33, 145, 140]);
    }

    #[test]
    fn background_is_black() {
        let img = heat_map(2, 1, &[25.0, 25.0], &[true, false], HEAT_RANGES[0]).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [33, 145, 140]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
        assert!(heat_map(2, 2, &[0.0], &[true], HEAT_RANGES[0]).is_err());
    }
}
