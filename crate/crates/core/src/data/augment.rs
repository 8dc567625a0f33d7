use rand::Rng;

use super::SegPair;
use crate::eval::Mask;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Random horizontal flip and a small rotation about the image centre.
/// Images are resampled bilinearly with edge clamping, masks by nearest neighbour.
/// Stored CDR labels are carried over unchanged.
pub fn augment<R: Rng + ?Sized>(pair: &SegPair, rng: &mut R) -> SegPair {
    let flip = rng.random_bool(0.5);
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let (h, w) = (pair.height(), pair.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    // output pixel -> source coordinates
    let source = |y: usize, x: usize| {
        let x = if flip { w - 1 - x } else { x };
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    };
    let nearest = |m: &Mask| {
        Mask::from_fn(h, w, |y, x| {
            let (sy, sx) = source(y, x);
            let (ry, rx) = (sy.round(), sx.round());
            ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && m.get(ry as usize, rx as usize)
        })
    };
    let src = pair.image.data();
    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                img[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let disc = nearest(&pair.disc);
    let cup = nearest(&pair.cup);
    SegPair {
        id: pair.id.clone(),
        image: Tensor::from_parts(vec![3, h, w], img),
        disc,
        cup,
        cdr: pair.cdr,
        grade: pair.grade,
    }
}
