//! Frame resizing. Scale inputs are produced by corner-aligned bilinear
//! interpolation; this is preprocessing and is never differentiated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resize a [C, H, W] frame to [C, size, size] with corner-aligned bilinear
/// sampling: output corner pixels coincide with input corner pixels, and the
/// source coordinate of output x is x * (W-1)/(size-1).
pub fn resize_bilinear(frame: &Tensor, size: usize) -> Result<Tensor> {
    if frame.rank() != 3 {
        return Err(Error::Shape(format!(
            "resize_bilinear wants [C, H, W], got {:?}",
            frame.shape()
        )));
    }
    if size == 0 {
        return Err(Error::InvalidArg("resize target must be at least 1".into()));
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let src = frame.data();
    let mut out = Tensor::zeros(vec![c, size, size]);
    // With a single output sample the corner convention degenerates; sample
    // the source's top-left corner.
    let step_y = if size > 1 { (h - 1) as f64 / (size - 1) as f64 } else { 0.0 };
    let step_x = if size > 1 { (w - 1) as f64 / (size - 1) as f64 } else { 0.0 };
    let od = out.data_mut();
    for oy in 0..size {
        let sy = oy as f64 * step_y;
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..size {
            let sx = ox as f64 * step_x;
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let base = ch * h * w;
                let tl = src[base + y0 * w + x0];
                let tr = src[base + y0 * w + x1];
                let bl = src[base + y1 * w + x0];
                let br = src[base + y1 * w + x1];
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                od[(ch * size + oy) * size + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let frame = Tensor::new(
            vec![1, 3, 3],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        )
        .unwrap();
        let out = resize_bilinear(&frame, 3).unwrap();
        for (a, b) in out.data().iter().zip(frame.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn one_pixel_source_fills_constant() {
        let frame = Tensor::new(vec![2, 1, 1], vec![0.25, 0.75]).unwrap();
        let out = resize_bilinear(&frame, 4).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        assert!(out.data()[..16].iter().all(|&v| v == 0.25));
        assert!(out.data()[16..].iter().all(|&v| v == 0.75));
    }

    #[test]
    fn checkerboard_center_is_corner_mean() {
        let frame = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&frame, 3).unwrap();
        // corners preserved, center is the bilinear blend of all four
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[2], 0.0);
        assert_eq!(out.data()[6], 0.0);
        assert_eq!(out.data()[8], 1.0);
        assert!((out.data()[4] - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn upscale_preserves_corner_pixels() {
        let frame = Tensor::new(vec![1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let out = resize_bilinear(&frame, 7).unwrap();
        let d = out.data();
        assert!((d[0] - 0.2).abs() <= 1e-6);
        assert!((d[6] - 0.4).abs() <= 1e-6);
        assert!((d[42] - 0.6).abs() <= 1e-6);
        assert!((d[48] - 0.8).abs() <= 1e-6);
    }

    #[test]
    fn rejects_bad_shapes() {
        let v = Tensor::vector(vec![1.0]);
        assert!(resize_bilinear(&v, 3).is_err());
        let frame = Tensor::zeros(vec![1, 2, 2]);
        assert!(resize_bilinear(&frame, 0).is_err());
    }
}
