//! Real FFT front-end for the frequency branch and spectrum augmentation.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through Bluestein's chirp-z reformulation on a padded
//! power-of-two grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

/// In-place unnormalized DFT (`inverse` flips the exponent sign).
pub fn fft(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, step * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp[k] = exp(sign * i*pi*k^2/n); k^2 reduced mod 2n keeps the angle exact
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, sign * PI * k2 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// Half spectrum (`S/2 + 1` bins) of a real signal; bin 0 is the plain sum.
pub fn rfft(signal: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf, false);
    buf.truncate(signal.len() / 2 + 1);
    buf
}

/// Inverse of [`rfft`] for a signal of length `len`.
///
/// The imaginary parts of bin 0 (and of the Nyquist bin for even `len`)
/// are ignored, as no real signal produces them.
pub fn irfft(spectrum: &[Complex64], len: usize) -> Result<Vec<f64>> {
    if spectrum.len() != len / 2 + 1 || len == 0 {
        return Err(Error::shape(
            "irfft",
            format!("{} bins cannot describe a length-{len} signal", spectrum.len()),
        ));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    full[..spectrum.len()].copy_from_slice(spectrum);
    full[0].im = 0.0;
    if len % 2 == 0 {
        full[len / 2].im = 0.0;
    }
    for k in 1..len.div_ceil(2) {
        full[len - k] = full[k].conj();
    }
    fft(&mut full, true);
    Ok(full.iter().map(|c| c.re / len as f64).collect())
}

/// Per-channel half spectrum of a `channels x len` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    channels: usize,
    original_length: usize,
    magnitudes: Vec<f64>,
    phases: Option<Vec<f64>>,
}

impl Spectrum {
    /// Spectrum of a channel-major sample.
    pub fn of_sample(sample: &[f64], channels: usize) -> Result<Self> {
        if channels == 0 || sample.len() % channels != 0 || sample.is_empty() {
            return Err(Error::shape(
                "spectrum",
                format!("{} values do not split into {channels} channels", sample.len()),
            ));
        }
        let len = sample.len() / channels;
        let mut magnitudes = Vec::with_capacity(channels * (len / 2 + 1));
        let mut phases = Vec::with_capacity(channels * (len / 2 + 1));
        for ch in sample.chunks(len) {
            for c in rfft(ch) {
                magnitudes.push(c.norm());
                phases.push(c.arg());
            }
        }
        Ok(Self {
            channels,
            original_length: len,
            magnitudes,
            phases: Some(phases),
        })
    }

    /// Magnitude-only spectrum from raw bins.
    pub fn from_magnitudes(magnitudes: Vec<f64>, channels: usize, original_length: usize) -> Result<Self> {
        let bins = original_length / 2 + 1;
        if magnitudes.len() != channels * bins {
            return Err(Error::shape(
                "spectrum",
                format!("{} magnitudes != {channels} x {bins}", magnitudes.len()),
            ));
        }
        if magnitudes.iter().any(|m| *m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidArgument("magnitudes must be finite and >= 0".into()));
        }
        Ok(Self {
            channels,
            original_length,
            magnitudes,
            phases: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.original_length / 2 + 1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// Channel-major `channels x bins` magnitudes.
    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn phases(&self) -> Option<&[f64]> {
        self.phases.as_deref()
    }

    pub fn into_magnitudes(self) -> Vec<f64> {
        self.magnitudes
    }

    /// Time-domain reconstruction; requires phases.
    pub fn to_signal(&self) -> Result<Vec<f64>> {
        let phases = self
            .phases
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("spectrum has no phases".into()))?;
        let bins = self.bins();
        let mut out = Vec::with_capacity(self.channels * self.original_length);
        for c in 0..self.channels {
            let spec: Vec<Complex64> = (c * bins..(c + 1) * bins)
                .map(|i| Complex64::from_polar(self.magnitudes[i], phases[i]))
                .collect();
            out.extend(irfft(&spec, self.original_length)?);
        }
        Ok(out)
    }
}

/// Magnitude spectrum of every sample in a `batch x channels x len` buffer,
/// laid out `batch x channels x (len/2 + 1)`.
pub fn magnitude_batch(samples: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let bins = len / 2 + 1;
    let mut out = Vec::with_capacity(batch * channels * bins);
    for row in samples.chunks(len).take(batch * channels) {
        out.extend(rfft(row).iter().map(|c| c.norm()));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqAugMode {
    /// Zero `count` uniformly chosen bins.
    Remove,
    /// Inject `count` components at zero-magnitude bins.
    Add,
}

/// Perturbs a spectrum by removing or adding frequency components.
///
/// Bins are chosen per channel; `count` is clamped to the number of
/// eligible bins. Added components get magnitude `amplitude_scale` times
/// the channel's current maximum and phase 0.
pub fn freq_augment(
    spectrum: &Spectrum,
    mode: FreqAugMode,
    count: usize,
    amplitude_scale: f64,
    seed: u64,
) -> Spectrum {
    let mut out = spectrum.clone();
    if count == 0 {
        return out;
    }
    let bins = spectrum.bins();
    let mut rng = stream(&[seed, 0x5eed_f4e9]);
    for c in 0..spectrum.channels {
        let mags = &mut out.magnitudes[c * bins..(c + 1) * bins];
        let eligible: Vec<usize> = match mode {
            FreqAugMode::Remove => (0..bins).collect(),
            FreqAugMode::Add => (0..bins).filter(|&k| mags[k] == 0.0).collect(),
        };
        let take = count.min(eligible.len());
        if take == 0 {
            continue;
        }
        let picks = index::sample(&mut rng, eligible.len(), take);
        match mode {
            FreqAugMode::Remove => {
                for p in picks.iter() {
                    mags[eligible[p]] = 0.0;
                }
            }
            FreqAugMode::Add => {
                let peak = mags.iter().copied().fold(0.0, f64::max);
                let amp = (amplitude_scale * peak).max(0.0);
                for p in picks.iter() {
                    let k = eligible[p];
                    mags[k] = amp;
                    if let Some(ph) = out.phases.as_mut() {
                        ph[c * bins + k] = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Random add-or-remove perturbation used for contrastive frequency views:
/// `count` bins are removed, then a coin flip decides whether `count` new
/// components are injected into the emptied bins.
pub fn random_freq_view(spectrum: &Spectrum, count: usize, amplitude_scale: f64, seed: u64) -> Spectrum {
    let removed = freq_augment(spectrum, FreqAugMode::Remove, count, amplitude_scale, seed);
    let add = stream(&[seed, 0xadd]).random_bool(0.5);
    if add {
        freq_augment(&removed, FreqAugMode::Add, count, amplitude_scale, seed ^ 0x9e37)
    } else {
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                        Complex64::from_polar(v, ang)
                    })
                    .sum()
            })
            .collect()
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = stream(&[seed]);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let s = rfft(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.len(), 3);
        assert!((s[0] - Complex64::new(4.0, 0.0)).norm() < 1e-15);
        assert!(s[1].norm() < 1e-15 && s[2].norm() < 1e-15);
        let back = irfft(&s, 4).unwrap();
        for v in back {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_lands_in_bin_one() {
        let x: Vec<f64> = (0..8).map(|n| (2.0 * PI * n as f64 / 8.0).cos()).collect();
        let s = rfft(&x);
        for (k, c) in s.iter().enumerate() {
            let want = if k == 1 { 4.0 } else { 0.0 };
            assert!((c.norm() - want).abs() < 1e-12, "bin {k}: {c}");
        }
        let back = irfft(&s, 8).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_for_awkward_lengths() {
        for n in [1, 2, 3, 5, 7, 12, 17, 100, 127] {
            let x = signal(n, n as u64);
            let fast = rfft(&x);
            let slow = naive_dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9 * n as f64, "n={n}");
            }
        }
    }

    #[test]
    fn round_trip_1000() {
        let x = signal(1000, 9);
        let back = irfft(&rfft(&x), 1000).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn spectrum_round_trip_from_random_bins() {
        let n = 30;
        let mut r = stream(&[77]);
        let mut spec: Vec<Complex64> = (0..n / 2 + 1)
            .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
            .collect();
        spec[0].im = 0.0;
        spec[n / 2].im = 0.0;
        let back = rfft(&irfft(&spec, n).unwrap());
        for (a, b) in back.iter().zip(&spec) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn irfft_rejects_bad_length() {
        assert!(irfft(&[Complex64::new(1.0, 0.0); 3], 8).is_err());
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        for n in [8, 100, 128, 1000] {
            let s = rfft(&signal(n, 3));
            assert!(s[0].im.abs() <= 1e-9);
            assert!(s[n / 2].im.abs() <= 1e-9);
        }
    }

    fn sample_spectrum(bins_len: usize, seed: u64) -> Spectrum {
        Spectrum::of_sample(&signal(bins_len, seed), 1).unwrap()
    }

    #[test]
    fn augment_count_zero_is_identity() {
        let s = sample_spectrum(126, 1);
        assert_eq!(freq_augment(&s, FreqAugMode::Remove, 0, 0.1, 5), s);
        assert_eq!(freq_augment(&s, FreqAugMode::Add, 0, 0.1, 5), s);
    }

    #[test]
    fn remove_all_zeroes_everything() {
        let s = sample_spectrum(126, 2);
        let r = freq_augment(&s, FreqAugMode::Remove, 1000, 0.1, 5);
        assert!(r.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn add_targets_empty_bins_and_clamps() {
        let s = sample_spectrum(126, 3);
        // no zero-magnitude bins: nothing to add
        assert_eq!(freq_augment(&s, FreqAugMode::Add, 5, 0.1, 1), s);
        let removed = freq_augment(&s, FreqAugMode::Remove, 10, 0.1, 1);
        let peak = removed.magnitudes().iter().copied().fold(0.0, f64::max);
        let added = freq_augment(&removed, FreqAugMode::Add, 4, 0.1, 2);
        let changed: Vec<usize> = (0..s.bins())
            .filter(|&k| added.magnitudes()[k] != removed.magnitudes()[k])
            .collect();
        assert_eq!(changed.len(), 4);
        for k in changed {
            assert_eq!(removed.magnitudes()[k], 0.0);
            assert!((added.magnitudes()[k] - 0.1 * peak).abs() < 1e-15);
        }
        assert!(added.magnitudes().iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn augment_is_seeded() {
        let s = sample_spectrum(126, 4);
        assert_eq!(s.bins(), 64);
        let a = freq_augment(&s, FreqAugMode::Remove, 8, 0.1, 11);
        let b = freq_augment(&s, FreqAugMode::Remove, 8, 0.1, 11);
        assert_eq!(a, b);
        let differ = (0..200u64)
            .filter(|&k| freq_augment(&s, FreqAugMode::Remove, 8, 0.1, 1000 + 2 * k)
                != freq_augment(&s, FreqAugMode::Remove, 8, 0.1, 1001 + 2 * k))
            .count();
        assert!(differ >= 198, "{differ}");
    }

    #[test]
    fn spectrum_reconstructs_signal() {
        let x = signal(2 * 50, 5);
        let s = Spectrum::of_sample(&x, 2).unwrap();
        assert_eq!(s.bins(), 26);
        let back = s.to_signal().unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
