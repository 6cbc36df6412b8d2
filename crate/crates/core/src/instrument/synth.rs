//! Detector stand-in: deterministic synthetic frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::types::{Frame, ProbeCoordinates, ScanParameters, SpecimenModel};
use crate::time::SimTime;

/// Half-width of the bright spot left by a parked probe.
const PROBE_SPOT_WIDTH: f64 = 0.05;
const PROBE_SPOT_GAIN: f64 = 0.5;

/// Everything a frame depends on. Two equal inputs give bit-identical frames.
#[derive(Debug, Clone, Copy)]
pub struct FrameInputs<'a> {
    pub specimen: &'a SpecimenModel,
    pub params: &'a ScanParameters,
    pub probe: Option<ProbeCoordinates>,
    pub rng_seed: u64,
    pub channel: u32,
    pub frame_index: u64,
    pub acquired_at: SimTime,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the noise stream of one (seed, channel, frame) triple.
pub fn noise_stream_seed(rng_seed: u64, channel: u32, frame_index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(rng_seed) ^ channel as u64) ^ frame_index)
}

pub fn synthesize(inputs: FrameInputs<'_>) -> Frame {
    let FrameInputs {
        specimen,
        params,
        probe,
        rng_seed,
        channel,
        frame_index,
        acquired_at,
    } = inputs;
    let (w, h) = (params.width as usize, params.height as usize);
    let gain = 1.0 / (1.0 + channel as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(noise_stream_seed(rng_seed, channel, frame_index));
    let noise = (specimen.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, specimen.noise_sigma).expect("sigma is positive and finite"));

    let mut pixels = Vec::with_capacity(w * h);
    for row in 0..h {
        let v = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let u = (col as f64 + 0.5) / w as f64;
            let mut value: f64 = specimen
                .features
                .iter()
                .map(|f| {
                    let d2 = (u - f.x).powi(2) + (v - f.y).powi(2);
                    f.amplitude * (-d2 / (2.0 * f.width * f.width)).exp()
                })
                .sum();
            value *= gain;
            if let Some(p) = probe {
                let d2 = (u - p.x).powi(2) + (v - p.y).powi(2);
                value *= 1.0 + PROBE_SPOT_GAIN * (-d2 / (2.0 * PROBE_SPOT_WIDTH.powi(2))).exp();
            }
            if let Some(n) = &noise {
                value += n.sample(&mut rng);
            }
            let px = value as f32;
            pixels.push(if px.is_finite() && px > 0.0 { px } else { 0.0 });
        }
    }

    Frame {
        channel,
        frame_index,
        width: params.width,
        height: params.height,
        pixels,
        acquired_at,
        probe_at_acquisition: probe,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(s: &'a SpecimenModel, p: &'a ScanParameters) -> FrameInputs<'a> {
        FrameInputs {
            specimen: s,
            params: p,
            probe: None,
            rng_seed: 42,
            channel: 0,
            frame_index: 0,
            acquired_at: SimTime::ZERO,
        }
    }

    #[test]
    fn empty_specimen_without_noise_is_black() {
        let s = SpecimenModel::empty();
        let p = ScanParameters::new(16, 8, 1.0).unwrap();
        let f = synthesize(inputs(&s, &p));
        assert_eq!(f.pixels.len(), 128);
        assert!(f.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_key_same_bits() {
        let s = SpecimenModel::reference();
        let p = ScanParameters::new(32, 32, 1.0).unwrap();
        let a = synthesize(inputs(&s, &p));
        let b = synthesize(inputs(&s, &p));
        let bits = |f: &Frame| f.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn noise_stream_differs_per_frame_and_channel() {
        let s = SpecimenModel::reference();
        let p = ScanParameters::new(16, 16, 1.0).unwrap();
        let a = synthesize(inputs(&s, &p));
        let b = synthesize(FrameInputs {
            frame_index: 1,
            ..inputs(&s, &p)
        });
        let c = synthesize(FrameInputs {
            channel: 1,
            ..inputs(&s, &p)
        });
        assert_ne!(a.pixels, b.pixels);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn probe_brightens_its_neighbourhood() {
        let s = SpecimenModel {
            noise_sigma: 0.0,
            ..SpecimenModel::reference()
        };
        let p = ScanParameters::new(64, 64, 1.0).unwrap();
        let plain = synthesize(inputs(&s, &p));
        let probed = synthesize(FrameInputs {
            probe: Some(ProbeCoordinates { x: 0.25, y: 0.25 }),
            ..inputs(&s, &p)
        });
        let idx = 16 * 64 + 16;
        assert!(probed.pixels[idx] > plain.pixels[idx] * 1.4);
        // far corner untouched to f32 precision
        assert_eq!(probed.pixels[63 * 64 + 63], plain.pixels[63 * 64 + 63]);
    }
}
