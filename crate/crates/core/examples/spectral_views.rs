//! Real FFT round trip, Parseval, and the frequency-domain augmentation.

use std::f64::consts::PI;

use tfda::spectral::{irfft, random_freq_view, rfft, Spectrum};

fn main() -> tfda::Result<()> {
    let n = 100;
    let x: Vec<f64> = (0..n)
        .map(|t| (2.0 * PI * 5.0 * t as f64 / n as f64).sin() + 0.3 * (t as f64).cos())
        .collect();
    let spec = rfft(&x);
    let back = irfft(&spec, n)?;
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} bins, round-trip max error {err:.2e}", spec.len());

    let time_energy: f64 = x.iter().map(|v| v * v).sum();
    let freq_energy: f64 = (0..spec.len())
        .map(|k| {
            let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            w * spec[k].norm_sqr()
        })
        .sum::<f64>()
        / n as f64;
    println!("Parseval: {time_energy:.6} vs {freq_energy:.6}");

    let s = Spectrum::of_sample(&x, 1)?;
    let view = random_freq_view(&s, 2, 0.1, 42);
    let changed = s
        .magnitudes()
        .iter()
        .zip(view.magnitudes())
        .filter(|(a, b)| a != b)
        .count();
    println!("frequency view changed {changed} of {} bins", s.bins());
    Ok(())
}
