//! Command-line front end. `run_cli` parses arguments, applies the optional
//! `key=value` config file, and dispatches to one subcommand.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or contract error
//! (including a failed gradient check).

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::data::{load_dataset, save_dataset, synthetic_pair};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, TOLERANCE};
use crate::model::{build_model, load_model, predict_dataset, pretrain_source, save_model, Arch, Fusion};
use crate::pipeline::DeskConfig;
use crate::rng::mix;
use crate::trainer::{bench_complexity, evaluate, run_adaptation, AdaptConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tfda", about = "Source-free time-series domain adaptation")]
struct Cli {
    /// Flat key=value file overriding the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source/target train and test splits under OUT.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches on labeled source data.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained model to unlabeled target data.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Labeled dataset scored after each epoch.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Print the macro-F1 of a model on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check analytic gradients of every op and loss.
    Gradcheck,
    /// Time adaptation over target sizes.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write teacher features, predicted label, and domain per sample.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub desk: DeskConfig,
    pub bench_sizes: Vec<usize>,
    pub gradcheck_instances: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            bench_sizes: vec![150, 600],
            gradcheck_instances: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Settings {
    /// Keys accepted by [`Settings::set`].
    pub const KEYS: [&'static str; 48] = [
        "epochs", "batch_size", "bank_capacity", "queue_capacity", "history_len", "neighbors", "views",
        "temperature", "lr", "ema_alpha", "freq_aug_count", "freq_aug_scale", "alpha1", "alpha2", "tsallis_a",
        "use_freq", "bn_momentum", "timing", "mu_r", "mu_c", "mu_cons", "mu_u", "alpha_r", "beta_decay",
        "weak_jitter_sigma", "weak_scale_low", "weak_scale_high", "strong_jitter_sigma", "strong_max_segments",
        "pretrain_epochs", "pretrain_lr", "pretrain_batch_size", "widths", "kernel", "proj_hidden", "proj_dim",
        "dropout", "classes", "channels", "length", "train_per_class", "test_per_class", "frequency_shift",
        "amplitude_scale", "noise_sigma", "time_warp", "bench_sizes", "gradcheck_instances",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.desk.adapt;
        let c = &mut a.curriculum;
        let p = &mut self.desk.pretrain;
        let arch = &mut self.desk.arch;
        let b = &mut self.desk.bench;
        let v = value;
        match key {
            "epochs" => a.epochs = parse(key, v)?,
            "batch_size" => a.batch_size = parse(key, v)?,
            "bank_capacity" => a.bank_capacity = if v == "auto" { None } else { Some(parse(key, v)?) },
            "queue_capacity" => a.queue_capacity = parse(key, v)?,
            "history_len" => a.history_len = parse(key, v)?,
            "neighbors" => a.neighbors = parse(key, v)?,
            "views" => a.views = parse(key, v)?,
            "temperature" => a.temperature = parse(key, v)?,
            "lr" => a.lr = parse(key, v)?,
            "ema_alpha" => a.ema_alpha = parse(key, v)?,
            "freq_aug_count" => a.freq_aug_count = parse(key, v)?,
            "freq_aug_scale" => a.freq_aug_scale = parse(key, v)?,
            "alpha1" => a.alpha1 = parse(key, v)?,
            "alpha2" => a.alpha2 = parse(key, v)?,
            "tsallis_a" => a.tsallis_a = parse(key, v)?,
            "use_freq" => a.use_freq = parse(key, v)?,
            "bn_momentum" => a.bn_momentum = parse(key, v)?,
            "timing" => a.timing = parse(key, v)?,
            "mu_r" => c.mu_r = parse(key, v)?,
            "mu_c" => c.mu_c = parse(key, v)?,
            "mu_cons" => c.mu_cons = parse(key, v)?,
            "mu_u" => c.mu_u = parse(key, v)?,
            "alpha_r" => c.alpha_r = parse(key, v)?,
            "beta_decay" => c.beta_decay = parse(key, v)?,
            "weak_jitter_sigma" => a.weak.jitter_sigma = parse(key, v)?,
            "weak_scale_low" => a.weak.scale_low = parse(key, v)?,
            "weak_scale_high" => a.weak.scale_high = parse(key, v)?,
            "strong_jitter_sigma" => a.strong.jitter_sigma = parse(key, v)?,
            "strong_max_segments" => a.strong.max_segments = parse(key, v)?,
            "pretrain_epochs" => p.epochs = parse(key, v)?,
            "pretrain_lr" => p.lr = parse(key, v)?,
            "pretrain_batch_size" => p.batch_size = parse(key, v)?,
            "widths" => {
                let w = parse_list(key, v)?;
                arch.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("`widths` takes three comma-separated values".into()))?;
            }
            "kernel" => arch.kernel = parse(key, v)?,
            "proj_hidden" => arch.proj_hidden = parse(key, v)?,
            "proj_dim" => arch.proj_dim = parse(key, v)?,
            "dropout" => arch.dropout = parse(key, v)?,
            "classes" => (b.classes, arch.classes) = (parse(key, v)?, parse(key, v)?),
            "channels" => (b.channels, arch.channels) = (parse(key, v)?, parse(key, v)?),
            "length" => (b.length, arch.length) = (parse(key, v)?, parse(key, v)?),
            "train_per_class" => b.train_per_class = parse(key, v)?,
            "test_per_class" => b.test_per_class = parse(key, v)?,
            "frequency_shift" => b.shift.frequency_shift = parse(key, v)?,
            "amplitude_scale" => b.shift.amplitude_scale = parse(key, v)?,
            "noise_sigma" => b.shift.noise_sigma = parse(key, v)?,
            "time_warp" => b.shift.time_warp = parse(key, v)?,
            "bench_sizes" => self.bench_sizes = parse_list(key, v)?,
            "gradcheck_instances" => self.gradcheck_instances = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Architecture for data with the given shape, keeping the configured
    /// widths and projector sizes.
    fn arch_for(&self, channels: usize, length: usize, classes: usize) -> Arch {
        Arch {
            channels,
            length,
            classes,
            ..self.desk.arch.clone()
        }
    }

    fn adapt_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            seed: mix(&[seed, 12]),
            ..self.desk.adapt.clone()
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fusion_of(s: &Settings) -> Fusion {
    if s.desk.adapt.use_freq {
        Fusion::Confidence
    } else {
        Fusion::TimeOnly
    }
}

/// Runs a parsed command; `Ok(false)` means a check failed.
fn dispatch(cli: Cli, s: &Settings, out: &mut dyn Write) -> Result<bool> {
    let seed = cli.seed;
    let put = |out: &mut dyn Write, text: &str| -> Result<()> {
        out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match cli.command {
        Command::Synth { out: dir } => {
            let pair = synthetic_pair(&s.desk.bench, seed)?;
            save_dataset(&pair.source_train, &dir.join("source_train"))?;
            save_dataset(&pair.source_test, &dir.join("source_test"))?;
            save_dataset(&pair.target_train.without_labels(), &dir.join("target_train"))?;
            save_dataset(&pair.target_test, &dir.join("target_test"))?;
            put(out, &format!("wrote {}\n", dir.display()))?;
        }
        Command::Pretrain { data, out: path } => {
            let ds = load_dataset(&data)?;
            let m = &ds.meta;
            let arch = s.arch_for(m.channels, m.length, m.classes);
            let init = build_model(&arch, mix(&[seed, 10]))?;
            let pcfg = crate::model::PretrainConfig {
                seed: mix(&[seed, 11]),
                ..s.desk.pretrain.clone()
            };
            let (model, losses) = pretrain_source(&init, &ds, &pcfg)?;
            save_model(&model, &path)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            put(out, &format!("steps {} final loss {last:.6}\n", losses.len()))?;
        }
        Command::Adapt {
            model,
            target,
            out: path,
            report,
            eval,
        } => {
            let m = load_model(&model)?;
            let t = load_dataset(&target)?.without_labels();
            let e = eval.as_deref().map(load_dataset).transpose()?;
            let (ts, rep) = run_adaptation(&m, &t, &s.adapt_config(seed), e.as_ref())?;
            save_model(&ts.teacher, &path)?;
            rep.write_csv(&report)?;
            put(out, &format!("adapted {} epochs\n", rep.epochs.len()))?;
        }
        Command::Eval { model, data } => {
            let m = load_model(&model)?;
            let ds = load_dataset(&data)?;
            put(out, &format!("{:.6}\n", evaluate(&m, &ds, fusion_of(s))?))?;
        }
        Command::Gradcheck => {
            let results = run_suite(s.gradcheck_instances, seed)?;
            let mut ok = true;
            let mut text = String::new();
            for r in &results {
                let pass = r.pass(TOLERANCE);
                ok &= pass;
                let _ = writeln!(text, "{} {:.3e} {}", r.name, r.max_rel_err, if pass { "ok" } else { "FAIL" });
            }
            put(out, &text)?;
            return Ok(ok);
        }
        Command::Bench { out: path } => {
            let b = &s.desk.bench;
            let arch = s.arch_for(b.channels, b.length, b.classes);
            let table = bench_complexity(&arch, &s.bench_sizes, &s.adapt_config(seed))?;
            let csv = table.to_csv();
            match path {
                Some(p) => write_file(&p, &csv)?,
                None => put(out, &csv)?,
            }
            if table.nonlinear {
                put(out, "warning: per-sample time grows with N by more than 25%\n")?;
            }
        }
        Command::ExportEmbeddings { model, data, out: path } => {
            let m = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let pred = predict_dataset(&m, &ds, fusion_of(s))?;
            let d = m.arch.feature_dim();
            let mut csv = String::new();
            for k in 0..d {
                let _ = write!(csv, "f{k},");
            }
            csv.push_str("predicted,domain\n");
            for i in 0..ds.len() {
                for v in pred.time_features.row(i) {
                    let _ = write!(csv, "{v},");
                }
                let _ = writeln!(csv, "{},{}", crate::model::argmax(pred.fused.row(i)), ds.meta.domain_id);
            }
            write_file(&path, &csv)?;
        }
    }
    Ok(true)
}

/// Entry point with explicit output streams; returns the exit code.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        let applied = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))
            .and_then(|text| settings.apply_overrides(&text));
        if let Err(e) = applied {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    }
    match dispatch(cli, &settings, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_DATA,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs with the process's standard streams.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_cli_with(std::iter::once("tfda").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
        let (code, _, err) = run(&["eval", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!err.is_empty());
        assert_eq!(run(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut s = Settings::default();
        s.apply_overrides("# comment\nepochs = 3\nwidths=4,8,8\nbank_capacity=auto\nuse_freq=false\n")
            .unwrap();
        assert_eq!(s.desk.adapt.epochs, 3);
        assert_eq!(s.desk.arch.widths, [4, 8, 8]);
        assert_eq!(s.desk.adapt.bank_capacity, None);
        assert!(!s.desk.adapt.use_freq);
        assert!(matches!(s.apply_overrides("epocs=3"), Err(Error::Config(_))));
        assert!(s.apply_overrides("epochs=x").is_err());
        assert!(s.apply_overrides("epochs").is_err());
        assert!(s.apply_overrides("widths=1,2").is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for k in Settings::KEYS {
            let v = match k {
                "widths" => "4,8,8",
                "bench_sizes" => "10,20",
                "use_freq" | "timing" => "true",
                _ => "2",
            };
            Settings::default().set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn unknown_config_key_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "nope=1\n").unwrap();
        let (code, _, err) = run(&["gradcheck", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("nope"));
    }

    #[test]
    fn missing_data_exits_two() {
        let (code, _, err) = run(&["eval", "--model", "/nonexistent/m.bin", "--data", "/nonexistent"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("/nonexistent"));
    }
}
