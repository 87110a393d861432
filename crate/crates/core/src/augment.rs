//! Geometric training augmentations: rotation, scale and shear, each applied
//! with probability 0.5 around the image center. Images are warped with
//! bilinear sampling, masks with nearest-neighbor so they stay binary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation: bool,
    pub scale: bool,
    pub shear: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation: true, scale: true, shear: true }
    }
}

const ROTATION_MAX_DEG: f64 = 15.0;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
const SHEAR_MAX: f64 = 0.1;
const APPLY_PROB: f64 = 0.5;

/// 2x2 forward transform; sampling uses its inverse.
fn compose<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Option<[f64; 4]> {
    let mut m = [1.0, 0.0, 0.0, 1.0];
    let mut touched = false;
    if cfg.rotation && rng.random::<f64>() < APPLY_PROB {
        let deg = rng.random_range(-ROTATION_MAX_DEG..ROTATION_MAX_DEG);
        let (s, c) = deg.to_radians().sin_cos();
        m = mat_mul(m, [c, -s, s, c]);
        touched = true;
    }
    if cfg.scale && rng.random::<f64>() < APPLY_PROB {
        let k = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
        m = mat_mul(m, [k, 0.0, 0.0, k]);
        touched = true;
    }
    if cfg.shear && rng.random::<f64>() < APPLY_PROB {
        let s = rng.random_range(-SHEAR_MAX..SHEAR_MAX);
        m = mat_mul(m, [1.0, s, 0.0, 1.0]);
        touched = true;
    }
    touched.then_some(m)
}

fn mat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn invert(m: [f64; 4]) -> [f64; 4] {
    let det = m[0] * m[3] - m[1] * m[2];
    [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
}

/// Warp an image [C, H, W] and its mask [H, W] by the same random affine
/// transform. When no transform fires, the originals are returned verbatim.
pub fn augment_subject<R: Rng>(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Tensor, Tensor) {
    let Some(m) = compose(cfg, rng) else {
        return (image.clone(), mask.clone());
    };
    let inv = invert(m);
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let mut out_img = vec![0.0; c * h * w];
    let mut out_mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = inv[0] * dy + inv[1] * dx + cy;
            let sx = inv[2] * dy + inv[3] * dx + cx;
            for ch in 0..c {
                out_img[ch * h * w + i * w + j] =
                    bilinear(&image.data()[ch * h * w..(ch + 1) * h * w], h, w, sy, sx);
            }
            out_mask[i * w + j] = nearest(mask.data(), h, w, sy, sx);
        }
    }
    (
        Tensor::new(vec![c, h, w], out_img).expect("image shape"),
        Tensor::new(vec![h, w], out_mask).expect("mask shape"),
    )
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || x < -1.0 || y > h as f64 || x > w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

fn nearest(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let yy = y.round();
    let xx = x.round();
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0.0
    } else {
        plane[yy as usize * w + xx as usize]
    }
}
