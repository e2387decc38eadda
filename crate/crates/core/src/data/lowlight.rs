//! Low-light video synthesis: inverse gamma, exposure scaling, shot and read
//! noise in linear space, then gamma and 8-bit quantisation.

use rand_distr::{Distribution, StandardNormal};

use super::VideoFrames;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

const GAMMA: f64 = 2.2;

/// Darken `frames` to `light_level` ∈ (0, 1]. Shot noise is Gaussian with
/// variance `shot_strength × linear value`; read noise has std `read_sigma`.
pub fn degrade_low_light(
    frames: &VideoFrames,
    light_level: f64,
    shot_strength: f64,
    read_sigma: f64,
    seed: u64,
) -> Result<VideoFrames> {
    if !(light_level > 0.0 && light_level <= 1.0) {
        return Err(Error::InvalidParam(format!("light_level {light_level} outside (0, 1]")));
    }
    if !(shot_strength >= 0.0) || !(read_sigma >= 0.0) {
        return Err(Error::InvalidParam("noise parameters must be non-negative".into()));
    }
    let noisy = shot_strength > 0.0 || read_sigma > 0.0;
    let mut rng = rng_for(seed, &[stream::LOW_LIGHT]);
    let mut out = frames.clone();
    for p in out.data.iter_mut() {
        let mut linear = (*p as f64 / 255.0).powf(GAMMA) * light_level;
        if noisy {
            let z_shot: f64 = StandardNormal.sample(&mut rng);
            let z_read: f64 = StandardNormal.sample(&mut rng);
            linear += (shot_strength * linear).sqrt() * z_shot + read_sigma * z_read;
        }
        *p = (linear.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> VideoFrames {
        let mut v = VideoFrames::new(2, 16, 16);
        for (i, p) in v.data.iter_mut().enumerate() {
            *p = ((i * 37) % 256) as u8;
        }
        v
    }

    fn psnr(a: &VideoFrames, b: &VideoFrames) -> f64 {
        let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }

    #[test]
    fn full_light_without_noise_is_identity() {
        let v = ramp();
        assert_eq!(degrade_low_light(&v, 1.0, 0.0, 0.0, 1).unwrap(), v);
    }

    #[test]
    fn noiseless_scaling_matches_closed_form() {
        let v = ramp();
        let out = degrade_low_light(&v, 0.25, 0.0, 0.0, 1).unwrap();
        for (&src, &dst) in v.data.iter().zip(&out.data) {
            let expect = ((src as f64 / 255.0).powf(2.2) * 0.25).powf(1.0 / 2.2) * 255.0;
            assert_eq!(dst, expect.round() as u8);
        }
    }

    #[test]
    fn psnr_falls_as_light_drops() {
        let v = ramp();
        let levels = [1.0, 0.5, 0.25, 0.1];
        let scores: Vec<f64> =
            levels.iter().map(|&l| psnr(&v, &degrade_low_light(&v, l, 0.01, 0.01, 4).unwrap())).collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
    }

    #[test]
    fn noiseless_output_is_monotone_in_light() {
        let v = ramp();
        let dim = degrade_low_light(&v, 0.3, 0.0, 0.0, 0).unwrap();
        let dimmer = degrade_low_light(&v, 0.2, 0.0, 0.0, 0).unwrap();
        assert!(dim.data.iter().zip(&dimmer.data).all(|(a, b)| a >= b));
    }

    #[test]
    fn rejects_bad_light_level() {
        let v = ramp();
        assert!(degrade_low_light(&v, 0.0, 0.0, 0.0, 0).is_err());
        assert!(degrade_low_light(&v, 1.5, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let v = ramp();
        let a = degrade_low_light(&v, 0.2, 0.05, 0.02, 9).unwrap();
        assert_eq!(a, degrade_low_light(&v, 0.2, 0.05, 0.02, 9).unwrap());
        assert_ne!(a, degrade_low_light(&v, 0.2, 0.05, 0.02, 10).unwrap());
    }
}
