//! Butterworth band-pass design and forward-backward (zero-phase) filtering.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + zi * (self.b[1] + zi * self.b[2]);
        let den = self.a[0] + zi * (self.a[1] + zi * self.a[2]);
        num / den
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// A cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Digital Butterworth band-pass built from an analog low-pass prototype of
    /// `order` poles via the band-pass transform and the bilinear transform
    /// with pre-warping. The cascade has `order` sections.
    pub fn butterworth_bandpass(order: usize, lo_hz: f64, hi_hz: f64, rate_hz: f64) -> Result<Sos> {
        if order == 0 {
            return Err(Error::arg("filter order must be positive"));
        }
        if !(0.0 < lo_hz && lo_hz < hi_hz && hi_hz < rate_hz / 2.0) {
            return Err(Error::arg(format!(
                "band edges {lo_hz}-{hi_hz} Hz violate Nyquist at {rate_hz} Hz"
            )));
        }
        let fs2 = 2.0 * rate_hz;
        let w1 = fs2 * (PI * lo_hz / rate_hz).tan();
        let w2 = fs2 * (PI * hi_hz / rate_hz).tan();
        let bw = w2 - w1;
        let w0sq = w1 * w2;

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let pb = p * bw;
            let disc = (pb * pb - 4.0 * w0sq).sqrt();
            for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
                poles.push((fs2 + s) / (fs2 - s));
            }
        }

        let tol = 1e-12;
        let mut sections = Vec::with_capacity(order);
        let mut reals = Vec::new();
        for z in &poles {
            if z.im > tol {
                sections.push(Biquad {
                    b: [1.0, 0.0, -1.0],
                    a: [1.0, -2.0 * z.re, z.norm_sqr()],
                });
            } else if z.im.abs() <= tol {
                reals.push(z.re);
            }
        }
        for pair in reals.chunks(2) {
            let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -(r1 + r2), r1 * r2],
            });
        }
        if sections.len() != order {
            return Err(Error::numeric(format!(
                "pole pairing produced {} sections for order {order}",
                sections.len()
            )));
        }

        // unit gain at the band centre
        let centre = 2.0 * (w0sq.sqrt() / fs2).atan();
        let z = Complex64::from_polar(1.0, centre);
        let mag: f64 = sections.iter().map(|s| s.response(z)).product::<Complex64>().norm();
        let per = mag.powf(-1.0 / order as f64);
        for s in &mut sections {
            for b in &mut s.b {
                *b *= per;
            }
        }
        Ok(Sos { sections })
    }

    /// Magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / rate_hz);
        self.sections
            .iter()
            .map(|s| s.response(z))
            .product::<Complex64>()
            .norm()
    }

    /// Steady-state section states for a unit step input.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = s.dc_gain();
                let zi = [
                    scale * (g - s.b[0]),
                    scale * (s.b[2] - s.a[2] * g),
                ];
                scale *= g;
                zi
            })
            .collect()
    }

    /// Direct-form II transposed cascade, states initialised to `zi * x[0]`.
    fn run(&self, x: &mut [f64], zi: &[[f64; 2]]) {
        let x0 = x.first().copied().unwrap_or(0.0);
        for (s, z) in self.sections.iter().zip(zi) {
            let (mut z1, mut z2) = (z[0] * x0, z[1] * x0);
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Zero-phase filtering: odd-reflection padding of `padlen` samples per side,
    /// forward pass, reverse pass, trim.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Result<Vec<f64>> {
        let n = x.len();
        if n <= padlen {
            return Err(Error::arg(format!(
                "trial of {n} samples is too short for {padlen}-sample reflection padding"
            )));
        }
        let mut ext = Vec::with_capacity(n + 2 * padlen);
        ext.extend((1..=padlen).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=padlen).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        self.run(&mut ext, &zi);
        ext.reverse();
        self.run(&mut ext, &zi);
        ext.reverse();
        Ok(ext[padlen..padlen + n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gain_in_band_and_rejection_outside() {
        let sos = Sos::butterworth_bandpass(4, 4.0, 30.0, 256.0).unwrap();
        assert_eq!(sos.sections.len(), 4);
        assert!((sos.magnitude(11.0, 256.0) - 1.0).abs() < 1e-3);
        // -3 dB at both edges, as for any Butterworth design
        let edge = 1.0 / 2f64.sqrt();
        assert!((sos.magnitude(4.0, 256.0) - edge).abs() < 1e-9);
        assert!((sos.magnitude(30.0, 256.0) - edge).abs() < 1e-9);
        assert!(sos.magnitude(0.0, 256.0) < 1e-12);
        assert!(sos.magnitude(60.0, 256.0) < 0.05);
    }

    #[test]
    fn stable_poles() {
        for &(lo, hi, fs) in &[(4.0, 30.0, 256.0), (1.0, 30.0, 256.0), (4.0, 30.0, 1000.0)] {
            let sos = Sos::butterworth_bandpass(4, lo, hi, fs).unwrap();
            for s in &sos.sections {
                // |p|^2 = a2 < 1 for a complex pair
                assert!(s.a[2] < 1.0 && s.a[2] > 0.0);
            }
        }
    }

    #[test]
    fn nyquist_violation() {
        assert!(Sos::butterworth_bandpass(4, 4.0, 130.0, 256.0).is_err());
        assert!(Sos::butterworth_bandpass(4, 30.0, 4.0, 256.0).is_err());
    }

    #[test]
    fn too_short_for_padding() {
        let sos = Sos::butterworth_bandpass(4, 4.0, 30.0, 256.0).unwrap();
        assert!(sos.filtfilt(&[0.0; 15], 15).is_err());
        assert!(sos.filtfilt(&[0.0; 16], 15).is_ok());
    }
}
