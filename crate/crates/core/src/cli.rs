//! Experiment driver behind the `dropattn` binary: train / eval / analyze /
//! mask-stats over one config format, plus a synthetic-data generator.
//!
//! Every subcommand is deterministic given (config, seed); the config echo
//! written into the output directory is sufficient to re-run an experiment
//! bit-identically. `DROPATTN_OUT_DIR` overrides the configured out_dir.

use std::path::{Path, PathBuf};

use crate::analysis;
use crate::config::{self, ExperimentConfig, Task};
use crate::data::{self, LabelMap, Vocab};
use crate::dropattn::{self, DropSpec, Mode, Rescale, Variant};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{self, TrainData};

pub const OUT_DIR_ENV: &str = "DROPATTN_OUT_DIR";

const VOCAB_MAX: usize = 50_000;
const VOCAB_MIN_FREQ: u64 = 1;

/// Map an error to the process exit code: 2 for config/input problems,
/// 3 for numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::NanGradient { .. } => 3,
        _ => 2,
    }
}

fn load_task_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    match cfg.task {
        Task::Cls => {
            let train = data::load_tsv_classification(&cfg.train_path)?;
            let dev = data::load_tsv_classification(&cfg.dev_path)?;
            let test = data::load_tsv_classification(&cfg.test_path)?;
            let vocab = Vocab::build(
                train.iter().flat_map(|r| r.tokens.iter().map(|s| s.as_str())),
                VOCAB_MAX,
                VOCAB_MIN_FREQ,
            );
            let labels = LabelMap::build(train.iter().map(|r| r.label.as_str()));
            Ok(TrainData {
                train: data::encode_cls(&train, &vocab, &labels, cfg.max_len)?,
                dev: data::encode_cls(&dev, &vocab, &labels, cfg.max_len)?,
                test: data::encode_cls(&test, &vocab, &labels, cfg.max_len)?,
                vocab,
                labels,
            })
        }
        Task::Tag => {
            let train = data::load_conll(&cfg.train_path)?;
            let dev = data::load_conll(&cfg.dev_path)?;
            let test = data::load_conll(&cfg.test_path)?;
            let vocab = Vocab::build(
                train.iter().flat_map(|r| r.tokens.iter().map(|s| s.as_str())),
                VOCAB_MAX,
                VOCAB_MIN_FREQ,
            );
            let labels = LabelMap::build(train.iter().flat_map(|r| r.tags.iter().map(|s| s.as_str())));
            Ok(TrainData {
                train: data::encode_tag(&train, &vocab, &labels, cfg.max_len)?,
                dev: data::encode_tag(&dev, &vocab, &labels, cfg.max_len)?,
                test: data::encode_tag(&test, &vocab, &labels, cfg.max_len)?,
                vocab,
                labels,
            })
        }
        Task::Nli => {
            let train = data::load_pair_tsv(&cfg.train_path)?;
            let dev = data::load_pair_tsv(&cfg.dev_path)?;
            let test = data::load_pair_tsv(&cfg.test_path)?;
            let vocab = Vocab::build(
                train.iter().flat_map(|r| {
                    r.premise.iter().chain(r.hypothesis.iter()).map(|s| s.as_str())
                }),
                VOCAB_MAX,
                VOCAB_MIN_FREQ,
            );
            let labels = LabelMap::build(train.iter().map(|r| r.label.as_str()));
            Ok(TrainData {
                train: data::encode_pair(&train, &vocab, &labels, cfg.max_len)?,
                dev: data::encode_pair(&dev, &vocab, &labels, cfg.max_len)?,
                test: data::encode_pair(&test, &vocab, &labels, cfg.max_len)?,
                vocab,
                labels,
            })
        }
    }
}

fn resolve_out_dir(cfg: &mut ExperimentConfig) {
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = dir;
        }
    }
}

/// Train from a config file plus `--key=value` overrides. Writes
/// checkpoint.json/checkpoint.bin, report.jsonl and config.txt into out_dir.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<PathBuf> {
    let text = std::fs::read_to_string(config_path)?;
    let mut cfg = config::parse_with_overrides(&text, overrides)?;
    resolve_out_dir(&mut cfg);
    let data = load_task_data(&cfg)?;

    let started = std::time::Instant::now();
    let outcome = train::train(&cfg, &data)?;
    let wall = started.elapsed().as_secs_f64();

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    train::save_checkpoint(&out_dir, &outcome.model, &data.vocab, &data.labels)?;
    std::fs::write(out_dir.join("report.jsonl"), outcome.report.to_jsonl()?)?;
    std::fs::write(out_dir.join("config.txt"), cfg.echo())?;

    println!(
        "trained {} epochs (best dev {:.4} at epoch {}) in {:.1}s -> {}",
        outcome.report.epochs.len(),
        outcome.report.best_dev,
        outcome.report.best_epoch,
        wall,
        out_dir.display()
    );
    Ok(out_dir)
}

/// Evaluate a checkpoint on a dataset file; returns the metrics JSON that is
/// also printed by the binary.
pub fn cmd_eval(checkpoint_dir: &Path, data_path: &Path) -> Result<String> {
    let (model, vocab, labels) = train::load_checkpoint(checkpoint_dir)?;
    let max_len = model.encoder().dims.max_len;
    let examples = match model.task() {
        Task::Cls => {
            let records = data::load_tsv_classification(data_path)?;
            data::encode_cls(&records, &vocab, &labels, max_len)?
        }
        Task::Tag => {
            let records = data::load_conll(data_path)?;
            data::encode_tag(&records, &vocab, &labels, max_len)?
        }
        Task::Nli => {
            let records = data::load_pair_tsv(data_path)?;
            data::encode_pair(&records, &vocab, &labels, max_len)?
        }
    };
    let metric = train::evaluate(&model, &examples, &labels)?;
    let name = match model.task() {
        Task::Tag => "span_f1",
        _ => "accuracy",
    };
    Ok(format!(
        "{{\"metric\":\"{}\",\"value\":{:.6},\"examples\":{}}}",
        name,
        metric,
        examples.len()
    ))
}

/// Capture attention on a dataset and write metrics.csv + histogram.csv.
pub fn cmd_analyze(
    checkpoint_dir: &Path,
    data_path: &Path,
    out_dir: &Path,
    bins: usize,
) -> Result<()> {
    let (model, vocab, labels) = train::load_checkpoint(checkpoint_dir)?;
    let max_len = model.encoder().dims.max_len;
    let examples = match model.task() {
        Task::Cls => {
            let records = data::load_tsv_classification(data_path)?;
            data::encode_cls(&records, &vocab, &labels, max_len)?
        }
        Task::Tag => {
            let records = data::load_conll(data_path)?;
            data::encode_tag(&records, &vocab, &labels, max_len)?
        }
        Task::Nli => {
            let records = data::load_pair_tsv(data_path)?;
            data::encode_pair(&records, &vocab, &labels, max_len)?
        }
    };
    if examples.is_empty() {
        return Err(Error::Contract { op: "cmd_analyze", msg: "empty dataset".into() });
    }
    let captures = analysis::capture_attention(&model, &examples)?;
    let rows = analysis::summarize_metrics(&captures)?;
    let hist = analysis::max_weight_histogram(&captures, bins)?;
    std::fs::create_dir_all(out_dir)?;
    analysis::write_metrics_csv(out_dir.join("metrics.csv"), &rows)?;
    analysis::write_histogram_csv(out_dir.join("histogram.csv"), &hist)?;
    Ok(())
}

/// Monte-Carlo mask statistics: empirical drop fraction, per-column drop
/// frequency and mean zero-run length, next to the closed-form interior
/// coverage 1−(1−p/w)^w. Validates the coverage story without training.
pub fn cmd_mask_stats(
    l: usize,
    p: f32,
    w: usize,
    variant: Variant,
    samples: usize,
    seed: u64,
) -> Result<String> {
    if l == 0 {
        return Err(Error::Config { field: "len".into(), msg: "sequence length must be >= 1".into() });
    }
    if samples == 0 {
        return Err(Error::Config { field: "samples".into(), msg: "need at least one sample".into() });
    }
    let spec = DropSpec::new(variant, p, w, Rescale::Normalized, Mode::Training)?;
    let mut r = rng::stream(seed);

    let mut dropped_total = 0u64;
    let mut col_dropped = vec![0u64; l];
    let mut run_count = 0u64;
    let mut run_length_sum = 0u64;
    let mut interior_dropped = 0u64;
    let mut interior_total = 0u64;
    for _ in 0..samples {
        let mask = dropattn::sample_mask(l, l, &spec, &mut r)?;
        for i in 0..l {
            let mut j = 0;
            while j < l {
                if mask.is_kept(i, j) {
                    j += 1;
                    continue;
                }
                let start = j;
                while j < l && !mask.is_kept(i, j) {
                    j += 1;
                }
                run_count += 1;
                run_length_sum += (j - start) as u64;
            }
            for j in 0..l {
                let dropped = !mask.is_kept(i, j);
                if dropped {
                    dropped_total += 1;
                    col_dropped[j] += 1;
                }
                if j + 1 >= w {
                    interior_total += 1;
                    if dropped {
                        interior_dropped += 1;
                    }
                }
            }
        }
    }

    let cells = (samples * l * l) as f64;
    let mut out = String::from("stat,column,value\n");
    out.push_str(&format!("drop_fraction,,{:.6}\n", dropped_total as f64 / cells));
    out.push_str(&format!(
        "interior_drop_freq,,{:.6}\n",
        if interior_total == 0 { 0.0 } else { interior_dropped as f64 / interior_total as f64 }
    ));
    out.push_str(&format!(
        "expected_interior_freq,,{:.6}\n",
        dropattn::interior_drop_probability(&spec)
    ));
    out.push_str(&format!(
        "mean_zero_run,,{:.6}\n",
        if run_count == 0 { 0.0 } else { run_length_sum as f64 / run_count as f64 }
    ));
    let per_mask_rows = (samples * l) as f64;
    for (j, &count) in col_dropped.iter().enumerate() {
        out.push_str(&format!("col_drop_freq,{},{:.6}\n", j, count as f64 / per_mask_rows));
    }
    Ok(out)
}

/// Generate the synthetic shortcut dataset as train/dev/test TSVs.
pub fn cmd_gen_data(
    out_dir: &Path,
    n: usize,
    l: usize,
    vocab_size: usize,
    reliability: f64,
    seed: u64,
) -> Result<()> {
    let synth = data::synth_shortcut_dataset(n, l, vocab_size, reliability, seed)?;
    std::fs::create_dir_all(out_dir)?;
    data::save_tsv_classification(out_dir.join("train.tsv"), &synth.train)?;
    data::save_tsv_classification(out_dir.join("dev.tsv"), &synth.dev)?;
    data::save_tsv_classification(out_dir.join("test.tsv"), &synth.test)?;
    Ok(())
}
