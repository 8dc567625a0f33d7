use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::SegPair;
use crate::config::SynthConfig;
use crate::error::Result;
use crate::eval::{compute_cdr, Mask};
use crate::tensor::Tensor;

/// Construction parameters of one synthetic sample.
///
/// Ellipses are centred on a pixel and their vertical semi-axes sit a quarter
/// pixel above an integer, so the rasterized vertical diameters are exactly
/// `d_disc = 2B + 1` and `d_cup = 2k + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthGeometry {
    pub center: (usize, usize),
    pub disc_axes: (f64, f64),
    pub cup_axes: (f64, f64),
    pub d_disc: usize,
    pub d_cup: usize,
    /// Ratio drawn before rasterization.
    pub target_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub pair: SegPair,
    pub geometry: SynthGeometry,
}

const BACKGROUND: [f32; 3] = [0.45, 0.18, 0.08];
const DISC: [f32; 3] = [0.85, 0.55, 0.30];
const CUP: [f32; 3] = [0.97, 0.88, 0.65];

fn geometry(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthGeometry {
    let s = cfg.size;
    let max_b = (s.saturating_sub(6) / 2).max(1);
    let frac = rng.random_range(cfg.disc_axis[0]..=cfg.disc_axis[1]);
    let big_b = ((frac * s as f64).round() as usize).clamp(1, max_b);
    let aspect = rng.random_range(0.85..=1.0);
    let b = big_b as f64 + 0.25;
    let a = b * aspect;
    let ratio = rng.random_range(cfg.ratio[0]..=cfg.ratio[1]);
    let d_disc = 2 * big_b + 1;
    let k = (((ratio * d_disc as f64 - 1.0) / 2.0).round().max(0.0) as usize).min(big_b - 1);
    let scale = (k as f64 + 0.25) / b;
    let margin_y = big_b + 2;
    let margin_x = a.ceil() as usize + 2;
    let cy = rng.random_range(margin_y..=(s - 1 - margin_y).max(margin_y));
    let cx = rng.random_range(margin_x..=(s - 1 - margin_x).max(margin_x));
    SynthGeometry {
        center: (cy, cx),
        disc_axes: (b, a),
        cup_axes: (b * scale, a * scale),
        d_disc,
        d_cup: 2 * k + 1,
        target_ratio: ratio,
    }
}

fn ellipse(size: usize, center: (usize, usize), (b, a): (f64, f64)) -> Mask {
    let (cy, cx) = (center.0 as f64, center.1 as f64);
    Mask::from_fn(size, size, |y, x| {
        let (dy, dx) = ((y as f64 - cy) / b, (x as f64 - cx) / a);
        dy * dy + dx * dx <= 1.0
    })
}

/// Fundus-like images: textured background, bright disc ellipse, brighter
/// concentric cup. Geometry and pixel noise come from separate streams of one
/// seed, so changing only the noise level leaves the masks untouched.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Synthetic>> {
    cfg.validate()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let s = cfg.size;
    let half = (s as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let g = geometry(cfg, &mut geo_rng);
        let disc = ellipse(s, g.center, g.disc_axes);
        let cup = ellipse(s, g.center, g.cup_axes);
        let mut img = vec![0.0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let r2 = ((y as f64 - half).powi(2) + (x as f64 - half).powi(2)) / (2.0 * half * half);
                let base = if cup.get(y, x) {
                    CUP
                } else if disc.get(y, x) {
                    DISC
                } else {
                    BACKGROUND.map(|v| v * (1.0 - 0.35 * r2 as f32))
                };
                for c in 0..3 {
                    let n: f64 = noise_rng.sample(StandardNormal);
                    img[(c * s + y) * s + x] = (base[c] + (cfg.noise * n) as f32).clamp(0.0, 1.0);
                }
            }
        }
        let r = compute_cdr(&disc, &cup)?;
        out.push(Synthetic {
            pair: SegPair {
                id: format!("synth_{i:03}"),
                image: Tensor::from_parts(vec![3, s, s], img),
                disc,
                cup,
                cdr: Some(r.cdr),
                grade: Some(r.grade),
            },
            geometry: g,
        });
    }
    Ok(out)
}
