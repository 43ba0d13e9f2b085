//! Eigen-CAM saliency maps for a backbone.

use std::io::Write;
use std::path::Path;

use autograd::Tape;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView3};

use crate::data::{StackedObservation, FRAME_SIDE};
use crate::model::EncoderStack;
use crate::nn::Binding;
use crate::{Error, Result};

/// Projection of a `(C, H, W)` activation onto its first principal
/// direction, oriented to have non-negative mean and scaled to `[0, 1]`.
/// A constant projection maps to all zeros.
pub fn eigen_cam_map(features: ArrayView3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = features.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty activation {c}x{h}x{w}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation".into()));
    }
    let a = DMatrix::from_fn(h * w, c, |r, ch| features[[ch, r / w, r % w]]);
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Shape("singular value decomposition failed".into()))?;
    let (best, _) = svd.singular_values.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let proj = &a * v_t.row(best).transpose();
    let mut map = Array2::from_shape_fn((h, w), |(y, x)| proj[y * w + x]);
    if map.mean().unwrap_or(0.0) < 0.0 {
        map.mapv_inplace(|v| -v);
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 1e-12 * (1.0 + hi.abs()) {
        map.fill(0.0);
    } else {
        map.mapv_inplace(|v| (v - lo) / span);
    }
    Ok(map)
}

/// Bilinear resize with pixel centers aligned at half-pixel offsets.
pub fn resize_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |o: usize, out: usize, n: usize| {
        let src = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(n - 1), src - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Saliency of `obs` at backbone output `stage` (0 is the stem; `None`
/// takes the final stage), upsampled to the frame size.
pub fn eigen_cam(stack: &EncoderStack, obs: &StackedObservation, stage: Option<usize>) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &stack.params);
    let stages = stack.backbone_stages(&b, EncoderStack::input(&tape, &[obs])?);
    let idx = stage.unwrap_or(stages.len() - 1);
    let act = stages
        .get(idx)
        .ok_or_else(|| Error::InvalidArgument(format!("stage {idx} out of range, backbone has {} outputs", stages.len())))?
        .value();
    let act = act.view().into_dimensionality::<ndarray::Ix4>().map_err(|e| Error::Shape(e.to_string()))?;
    let map = eigen_cam_map(act.index_axis(ndarray::Axis(0), 0))?;
    Ok(resize_bilinear(&map, FRAME_SIDE, FRAME_SIDE))
}

/// Writes a `[0, 1]` map as an 8-bit binary PGM image.
pub fn write_pgm(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn rank_one(spatial: &[f64], h: usize, w: usize, channels: &[f64]) -> Array3<f64> {
        Array3::from_shape_fn((channels.len(), h, w), |(c, y, x)| channels[c] * spatial[y * w + x])
    }

    #[test]
    fn rank_one_activation_recovers_spatial_pattern() {
        let spatial = [0.0, 1.0, 2.0, 3.0, 4.0, 8.0];
        let feats = rank_one(&spatial, 2, 3, &[0.5, -1.0, 2.0]);
        let map = eigen_cam_map(feats.view()).unwrap();
        for (m, s) in map.iter().zip(spatial) {
            assert!((m - s / 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_projection_is_zero() {
        let feats = Array3::from_elem((4, 3, 3), 2.5);
        assert!(eigen_cam_map(feats.view()).unwrap().iter().all(|&v| v == 0.0));
        let zeros = Array3::zeros((2, 5, 5));
        assert!(eigen_cam_map(zeros.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_preserves_constants_and_range() {
        let flat = Array2::from_elem((6, 6), 0.3);
        assert!(resize_bilinear(&flat, 84, 84).iter().all(|v| (v - 0.3).abs() < 1e-12));
        let ramp = Array2::from_shape_fn((2, 2), |(y, x)| (y * 2 + x) as f64 / 3.0);
        let up = resize_bilinear(&ramp, 84, 84);
        assert_eq!(up.dim(), (84, 84));
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[83, 83]], 1.0);
    }

    #[test]
    fn stack_saliency_has_frame_shape() {
        let ckpt = crate::finetune::tiny_checkpoint(4);
        let stack = EncoderStack::from_checkpoint(&ckpt).unwrap();
        let obs = StackedObservation::from_values((0..4 * 84 * 84).map(|i| ((i * 37) % 256) as f32).collect()).unwrap();
        let map = eigen_cam(&stack, &obs, None).unwrap();
        assert_eq!(map.dim(), (84, 84));
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(eigen_cam(&stack, &obs, Some(0)).is_ok());
        assert!(matches!(eigen_cam(&stack, &obs, Some(99)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.pgm");
        write_pgm(&Array2::from_elem((2, 3), 1.0), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }

    proptest! {
        #[test]
        fn map_is_scale_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 3 * 4 * 4), s in prop_oneof![0.01f64..100.0, -100.0f64..-0.01]) {
            let feats = Array3::from_shape_vec((3, 4, 4), vals).unwrap();
            let a = eigen_cam_map(feats.view()).unwrap();
            let b = eigen_cam_map(feats.mapv(|v| v * s).view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
