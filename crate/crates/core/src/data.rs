//! Synthetic domain-shift generator, the on-disk dataset format, and batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{mix, stream};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Meta {
    pub channels: usize,
    pub classes: usize,
    pub length: usize,
    pub domain_id: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Meta,
    /// `N x Ch x S`, sample-major.
    samples: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(meta: Meta, samples: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let per = meta.channels * meta.length;
        if per == 0 || samples.is_empty() || samples.len() % per != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form samples of {}x{}",
                samples.len(),
                meta.channels,
                meta.length
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample value".into()));
        }
        let n = samples.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidArgument(format!("{} labels for {n} samples", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= meta.classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} outside [0, {})",
                    meta.classes
                )));
            }
        }
        Ok(Self { meta, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / (self.meta.channels * self.meta.length)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.meta.channels * self.meta.length
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// The same samples with labels dropped.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.clone(),
            labels: None,
        }
    }

    /// `[idx.len(), Ch, S]` tensor of the selected samples.
    pub fn batch_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(vec![idx.len(), self.meta.channels, self.meta.length], data).expect("sized")
    }
}

/// Domain shift applied by the generator. The identity is all zeros with
/// `amplitude_scale = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    /// Offset added to every class frequency, in cycles per window.
    pub frequency_shift: f64,
    pub amplitude_scale: f64,
    /// Extra additive noise standard deviation.
    pub noise_sigma: f64,
    /// Strength of a smooth sinusoidal time warp, in `[0, 1)`.
    pub time_warp: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            frequency_shift: 0.0,
            amplitude_scale: 1.0,
            noise_sigma: 0.0,
            time_warp: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale.is_finite()) {
            return Err(Error::InvalidArgument("amplitude_scale must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.time_warp) {
            return Err(Error::InvalidArgument("time_warp must lie in [0, 1)".into()));
        }
        if !self.frequency_shift.is_finite() {
            return Err(Error::InvalidArgument("frequency_shift must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ShiftSpec {
    /// The benchmark's target-domain shift.
    fn default() -> Self {
        Self {
            frequency_shift: 1.5,
            amplitude_scale: 1.6,
            noise_sigma: 0.3,
            time_warp: 0.15,
        }
    }
}

const BASE_FREQ: f64 = 2.0;
const FREQ_STEP: f64 = 2.5;
const BASE_NOISE: f64 = 0.2;

fn class_freq(c: usize) -> f64 {
    BASE_FREQ + FREQ_STEP * c as f64
}

/// Class `c` is a tone at a class-specific frequency plus its second
/// harmonic with class- and channel-specific weight, per-sample random
/// phase, frequency jitter, amplitude, and Gaussian noise. Samples cycle
/// through classes so every class gets exactly `n_per_class` samples.
pub fn generate_synthetic(
    classes: usize,
    channels: usize,
    length: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if channels == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument("channels and n_per_class must be >= 1".into()));
    }
    shift.validate()?;
    let top = 2.0 * (class_freq(classes - 1) + shift.frequency_shift.max(0.0) + 0.5);
    if length < 8 || top * 4.0 > length as f64 {
        return Err(Error::InvalidArgument(format!(
            "length {length} cannot resolve {classes} classes (need at least {} samples)",
            (top * 4.0).ceil()
        )));
    }
    let n = classes * n_per_class;
    let mut samples = Vec::with_capacity(n * channels * length);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = BASE_NOISE + shift.noise_sigma;
    for i in 0..n {
        let c = i % classes;
        let mut rng = stream(&[seed, i as u64]);
        let f = class_freq(c) + shift.frequency_shift + rng.random_range(-0.3..0.3);
        let amp = rng.random_range(0.8..1.2) * shift.amplitude_scale;
        let phase = rng.random_range(0.0..2.0 * PI);
        for ch in 0..channels {
            let harmonic = 0.2 + 0.3 * ((c + ch) % 3) as f64;
            let offset = ch as f64 * PI / 4.0 * (1 + c) as f64;
            for t in 0..length {
                let s = t as f64 / length as f64;
                let u = s + shift.time_warp / (2.0 * PI) * (2.0 * PI * s).sin();
                let w = 2.0 * PI * f * u + phase + offset;
                let clean = w.sin() + harmonic * (2.0 * w).sin();
                samples.push(amp * clean + sigma * noise.sample(&mut rng));
            }
        }
        labels.push(c);
    }
    let meta = Meta {
        channels,
        classes,
        length,
        domain_id: u32::from(!shift.is_identity()),
        seed,
    };
    Dataset::new(meta, samples, Some(labels))
}

/// Writes `meta.txt`, `samples.bin`, and `labels.bin` (labeled only).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &ds.meta;
    let meta = format!(
        "channels={}\nclasses={}\nlength={}\ncount={}\nlabeled={}\ndomain_id={}\nseed={}\n",
        m.channels,
        m.classes,
        m.length,
        ds.len(),
        u8::from(ds.is_labeled()),
        m.domain_id,
        m.seed
    );
    let p = dir.join("meta.txt");
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))?;
    let bytes: Vec<u8> = ds.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join("samples.bin");
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("labels.bin");
    match &ds.labels {
        Some(l) => {
            let bytes: Vec<u8> = l.iter().flat_map(|&y| (y as u16).to_le_bytes()).collect();
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        None if p.exists() => fs::remove_file(&p).map_err(|e| Error::io(&p, e))?,
        None => {}
    }
    Ok(())
}

fn parse_meta(path: &Path, text: &str) -> Result<(Meta, usize, bool)> {
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line `{line}` is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn get<T: std::str::FromStr>(
        kv: &std::collections::BTreeMap<String, String>,
        path: &Path,
        key: &str,
    ) -> Result<T> {
        kv.get(key)
            .ok_or_else(|| Error::format(path, format!("missing key `{key}`")))?
            .parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`")))
    }
    let meta = Meta {
        channels: get(&kv, path, "channels")?,
        classes: get(&kv, path, "classes")?,
        length: get(&kv, path, "length")?,
        domain_id: get(&kv, path, "domain_id")?,
        seed: get(&kv, path, "seed")?,
    };
    let count: usize = get(&kv, path, "count")?;
    let labeled: u8 = get(&kv, path, "labeled")?;
    if meta.channels == 0 || meta.length == 0 || meta.classes == 0 || count == 0 {
        return Err(Error::format(path, "channels, classes, length and count must be >= 1"));
    }
    Ok((meta, count, labeled != 0))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join("meta.txt");
    let text = String::from_utf8(read(&mp)?).map_err(|_| Error::format(&mp, "not UTF-8"))?;
    let (meta, count, labeled) = parse_meta(&mp, &text)?;

    let sp = dir.join("samples.bin");
    let raw = read(&sp)?;
    let expected = count * meta.channels * meta.length * 8;
    if raw.len() != expected {
        return Err(Error::format(
            &sp,
            format!("size {} bytes, expected {expected}", raw.len()),
        ));
    }
    let samples: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&sp, "non-finite value"));
    }

    let labels = if labeled {
        let lp = dir.join("labels.bin");
        let raw = read(&lp)?;
        if raw.len() != count * 2 {
            return Err(Error::format(
                &lp,
                format!("size {} bytes, expected {}", raw.len(), count * 2),
            ));
        }
        let l: Vec<usize> = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        if let Some(bad) = l.iter().find(|&&y| y >= meta.classes) {
            return Err(Error::format(
                &lp,
                format!("label {bad} outside [0, {})", meta.classes),
            ));
        }
        Some(l)
    } else {
        None
    };
    Dataset::new(meta, samples, labels)
}

/// Train and test splits of a source and a shifted target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Size and shift of a synthetic source/target benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shift: ShiftSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            channels: 2,
            length: 128,
            train_per_class: 200,
            test_per_class: 100,
            shift: ShiftSpec::default(),
        }
    }
}

/// Four independently seeded splits; the source ones use the identity shift.
pub fn synthetic_pair(bench: &BenchmarkSpec, seed: u64) -> Result<DomainPair> {
    let gen = |per: usize, shift: &ShiftSpec, k: u64| {
        generate_synthetic(bench.classes, bench.channels, bench.length, per, shift, mix(&[seed, k]))
    };
    let id = ShiftSpec::identity();
    Ok(DomainPair {
        source_train: gen(bench.train_per_class, &id, 0)?,
        source_test: gen(bench.test_per_class, &id, 1)?,
        target_train: gen(bench.train_per_class, &bench.shift, 2)?,
        target_test: gen(bench.test_per_class, &bench.shift, 3)?,
    })
}

/// One epoch of sample indices: a seeded permutation cut into batches, the
/// last one possibly partial.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(&[shuffle_seed, epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: &ShiftSpec, seed: u64) -> Dataset {
        generate_synthetic(3, 2, 128, 4, shift, seed).unwrap()
    }

    #[test]
    fn identity_shift_reproduces_source() {
        assert_eq!(small(&ShiftSpec::identity(), 5), small(&ShiftSpec::identity(), 5));
        assert_ne!(small(&ShiftSpec::identity(), 5), small(&ShiftSpec::default(), 5));
    }

    #[test]
    fn pair_splits_are_distinct_domains() {
        let bench = BenchmarkSpec {
            train_per_class: 3,
            test_per_class: 2,
            ..BenchmarkSpec::default()
        };
        let p = synthetic_pair(&bench, 9).unwrap();
        assert_eq!((p.source_train.len(), p.source_test.len()), (9, 6));
        assert_eq!((p.source_train.meta.domain_id, p.target_train.meta.domain_id), (0, 1));
        assert_ne!(p.source_train.sample(0), p.target_train.sample(0));
        assert_eq!(p, synthetic_pair(&bench, 9).unwrap());
    }

    #[test]
    fn balanced_labels() {
        let d = small(&ShiftSpec::default(), 1);
        let l = d.labels().unwrap();
        for c in 0..3 {
            assert_eq!(l.iter().filter(|&&y| y == c).count(), 4);
        }
    }

    #[test]
    fn rejects_unresolvable_length() {
        assert!(generate_synthetic(3, 1, 16, 2, &ShiftSpec::identity(), 0).is_err());
        assert!(generate_synthetic(1, 1, 128, 2, &ShiftSpec::identity(), 0).is_err());
    }

    #[test]
    fn round_trip_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let d = small(&ShiftSpec::default(), 2);
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(
            fs::metadata(dir.path().join("samples.bin")).unwrap().len(),
            (d.len() * 2 * 128 * 8) as u64
        );
        assert_eq!(load_dataset(dir.path()).unwrap(), d);

        let u = d.without_labels();
        save_dataset(&u, dir.path()).unwrap();
        assert!(!dir.path().join("labels.bin").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), u);
    }

    #[test]
    fn corruption_is_reported_per_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = small(&ShiftSpec::identity(), 3);
        save_dataset(&d, dir.path()).unwrap();
        let sp = dir.path().join("samples.bin");
        let mut raw = fs::read(&sp).unwrap();
        raw.truncate(raw.len() - 8);
        fs::write(&sp, &raw).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("samples.bin") && err.contains("size"), "{err}");

        save_dataset(&d, dir.path()).unwrap();
        let lp = dir.path().join("labels.bin");
        let mut raw = fs::read(&lp).unwrap();
        raw[0..2].copy_from_slice(&3u16.to_le_bytes());
        fs::write(&lp, &raw).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels.bin") && err.contains("outside"), "{err}");

        fs::remove_file(dir.path().join("meta.txt")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta.txt"), "{err}");
    }

    #[test]
    fn batch_partition() {
        let b = batches(10, 4, 7, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(10, 4, 7, 0));
        assert_ne!(b, batches(10, 4, 7, 1));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
