//! Band-limited rational resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.6;
/// Kernel support per output sample, in input samples.
pub const TAPS_PER_PHASE: usize = 64;

const MAX_PHASES: u64 = 1 << 16;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rates expressed in millihertz must be integral.
fn millihertz(rate: f64) -> Result<u64> {
    let m = rate * 1000.0;
    let r = m.round();
    if !(rate > 0.0) || !rate.is_finite() || (m - r).abs() > 1e-6 * m.max(1.0) {
        return Err(Error::arg(format!("unsupported sampling rate {rate}")));
    }
    Ok(r as u64)
}

/// Polyphase resampler from `from_hz` to `to_hz`.
///
/// Output sample `j` sits at input position `j * down / up`; each of the `up`
/// phases owns a precomputed set of [`TAPS_PER_PHASE`] taps normalised to unit
/// DC gain. Cut-off is the lower of the two Nyquist rates.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: u64,
    down: u64,
    phases: Vec<[f64; TAPS_PER_PHASE]>,
}

impl Resampler {
    pub fn new(from_hz: f64, to_hz: f64) -> Result<Self> {
        if !(to_hz > 0.0) {
            return Err(Error::arg(format!("target rate must be positive, got {to_hz}")));
        }
        let (f, t) = (millihertz(from_hz)?, millihertz(to_hz)?);
        let g = gcd(f, t);
        let (up, down) = (t / g, f / g);
        if up > MAX_PHASES {
            return Err(Error::arg(format!(
                "rate ratio {to_hz}/{from_hz} needs {up} phases"
            )));
        }
        let fc = (up as f64 / down as f64).min(1.0);
        let half = (TAPS_PER_PHASE / 2) as f64;
        let i0b = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps = [0.0; TAPS_PER_PHASE];
                for (i, tap) in taps.iter_mut().enumerate() {
                    // tap i reads input base + i - (half - 1)
                    let u = frac + half - 1.0 - i as f64;
                    let r = u / half;
                    if r.abs() >= 1.0 {
                        continue;
                    }
                    let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0b;
                    let a = PI * fc * u;
                    let sinc = if a.abs() < 1e-12 { 1.0 } else { a.sin() / a };
                    *tap = fc * sinc * w;
                }
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= s);
                taps
            })
            .collect();
        Ok(Resampler { up, down, phases })
    }

    pub fn output_len(&self, n: usize) -> usize {
        ((n as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn is_identity(&self) -> bool {
        self.up == self.down
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.is_identity() || x.is_empty() {
            return x.to_vec();
        }
        let n = x.len() as i64;
        let reflect = |mut k: i64| -> f64 {
            if n == 1 {
                return x[0];
            }
            let period = 2 * (n - 1);
            k = k.rem_euclid(period);
            if k >= n {
                k = period - k;
            }
            x[k as usize]
        };
        let offset = (TAPS_PER_PHASE / 2) as i64 - 1;
        (0..self.output_len(x.len()))
            .map(|j| {
                let pos = j as u64 * self.down;
                let base = (pos / self.up) as i64;
                let taps = &self.phases[(pos % self.up) as usize];
                let start = base - offset;
                if start >= 0 && start + TAPS_PER_PHASE as i64 <= n {
                    let s = start as usize;
                    taps.iter().zip(&x[s..s + TAPS_PER_PHASE]).map(|(t, v)| t * v).sum()
                } else {
                    taps.iter()
                        .enumerate()
                        .map(|(i, t)| t * reflect(start + i as i64))
                        .sum()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-14);
    }

    #[test]
    fn length_arithmetic() {
        let r = Resampler::new(256.0, 128.0).unwrap();
        assert_eq!(r.output_len(1024), 512);
        let r = Resampler::new(250.0, 256.0).unwrap();
        assert_eq!(r.output_len(1000), 1024);
    }

    #[test]
    fn constant_is_preserved() {
        let r = Resampler::new(160.0, 256.0).unwrap();
        let y = r.apply(&[2.5; 300]);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bad_rates() {
        assert!(Resampler::new(256.0, 0.0).is_err());
        assert!(Resampler::new(256.0, -1.0).is_err());
    }
}
