//! Experiment configuration: a flat `key = value` text format with dotted
//! section names, diff-friendly and unambiguous. Every key can also be
//! overridden on the command line with `--key=value`. The canonical echo
//! written next to training artifacts re-parses to an identical config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dropattn::{DropSpec, Mode, Rescale, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Cls,
    Tag,
    Nli,
}

impl Task {
    fn parse(value: &str) -> Result<Task> {
        match value {
            "cls" => Ok(Task::Cls),
            "tag" => Ok(Task::Tag),
            "nli" => Ok(Task::Nli),
            other => Err(Error::Config {
                field: "task".into(),
                msg: format!("expected cls, tag or nli, got {other:?}"),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Tag => "tag",
            Task::Nli => "nli",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub train_path: String,
    pub dev_path: String,
    pub test_path: String,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub p: f32,
    pub w: usize,
    pub rescale: Rescale,
    /// Standard dropout rate for FC activations.
    pub dropout: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl ExperimentConfig {
    /// DropAttention spec in the requested mode; `None` when p = 0.
    pub fn drop_spec(&self, mode: Mode) -> Option<DropSpec> {
        if self.p == 0.0 {
            return None;
        }
        Some(DropSpec { variant: self.variant, p: self.p, w: self.w, rescale: self.rescale, mode })
    }

    pub fn validate(&self) -> Result<()> {
        fn field_err(field: &str, msg: String) -> Error {
            Error::Config { field: field.into(), msg }
        }
        if self.d == 0 || self.d % 2 != 0 {
            return Err(field_err("model.d", format!("model width must be even and positive, got {}", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(field_err(
                "model.heads",
                format!("head count {} must divide model width {}", self.heads, self.d),
            ));
        }
        if self.d_ff == 0 {
            return Err(field_err("model.d_ff", "feed-forward width must be positive".into()));
        }
        if self.layers == 0 {
            return Err(field_err("model.layers", "layer count must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(field_err("model.max_len", "max length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(field_err("drop.p", format!("drop rate must be in [0, 1), got {}", self.p)));
        }
        if self.w == 0 {
            return Err(field_err("drop.w", "window size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field_err(
                "drop.dropout",
                format!("dropout rate must be in [0, 1), got {}", self.dropout),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(field_err("optim.lr", format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(field_err("optim.beta1", format!("beta1 must be in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(field_err("optim.beta2", format!("beta2 must be in [0, 1), got {}", self.beta2)));
        }
        if self.batch == 0 {
            return Err(field_err("optim.batch", "batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(field_err("optim.epochs", "epoch count must be positive".into()));
        }
        if self.train_path.is_empty() {
            return Err(field_err("data.train", "missing training data path".into()));
        }
        if self.dev_path.is_empty() {
            return Err(field_err("data.dev", "missing dev data path".into()));
        }
        if self.test_path.is_empty() {
            return Err(field_err("data.test", "missing test data path".into()));
        }
        if self.out_dir.is_empty() {
            return Err(field_err("out_dir", "missing output directory".into()));
        }
        Ok(())
    }

    /// Canonical flat-text echo; `parse_str(echo())` reproduces this config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task.as_str());
        let _ = writeln!(s, "data.train = {}", self.train_path);
        let _ = writeln!(s, "data.dev = {}", self.dev_path);
        let _ = writeln!(s, "data.test = {}", self.test_path);
        let _ = writeln!(s, "model.d = {}", self.d);
        let _ = writeln!(s, "model.d_ff = {}", self.d_ff);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.layers = {}", self.layers);
        let _ = writeln!(s, "model.max_len = {}", self.max_len);
        let _ = writeln!(s, "drop.variant = {}", variant_str(self.variant));
        let _ = writeln!(s, "drop.p = {}", self.p);
        let _ = writeln!(s, "drop.w = {}", self.w);
        let _ = writeln!(s, "drop.rescale = {}", rescale_str(self.rescale));
        let _ = writeln!(s, "drop.dropout = {}", self.dropout);
        let _ = writeln!(s, "optim.lr = {}", self.lr);
        let _ = writeln!(s, "optim.beta1 = {}", self.beta1);
        let _ = writeln!(s, "optim.beta2 = {}", self.beta2);
        let _ = writeln!(s, "optim.batch = {}", self.batch);
        let _ = writeln!(s, "optim.epochs = {}", self.epochs);
        let _ = writeln!(s, "optim.patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        s
    }
}

fn variant_str(v: Variant) -> &'static str {
    match v {
        Variant::Column => "column",
        Variant::Element => "element",
    }
}

fn rescale_str(r: Rescale) -> &'static str {
    match r {
        Rescale::Normalized => "normalized",
        Rescale::Inverse => "inverse",
    }
}

fn parse_variant(value: &str) -> Result<Variant> {
    match value {
        "column" | "c" => Ok(Variant::Column),
        "element" | "e" => Ok(Variant::Element),
        other => Err(Error::Config {
            field: "drop.variant".into(),
            msg: format!("expected column or element, got {other:?}"),
        }),
    }
}

fn parse_rescale(value: &str) -> Result<Rescale> {
    match value {
        "normalized" => Ok(Rescale::Normalized),
        "inverse" => Ok(Rescale::Inverse),
        other => Err(Error::Config {
            field: "drop.rescale".into(),
            msg: format!("expected normalized or inverse, got {other:?}"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        field: field.into(),
        msg: format!("cannot parse {value:?}"),
    })
}

/// Parse flat `key = value` text. Blank lines and `#` comments are ignored.
/// Unknown keys are rejected by name.
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                field: format!("line {}", idx + 1),
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    from_map(map)
}

pub fn parse_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text)
}

/// Apply `key=value` override strings (leading `--` accepted) on top of a
/// parsed file.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut combined = text.to_string();
    for o in overrides {
        let stripped = o.strip_prefix("--").unwrap_or(o);
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(Error::Config {
                field: stripped.to_string(),
                msg: "override must be key=value".into(),
            });
        };
        combined.push_str(&format!("\n{} = {}", key.trim(), value.trim()));
    }
    parse_str(&combined)
}

fn from_map(mut map: BTreeMap<String, String>) -> Result<ExperimentConfig> {
    fn take(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
        map.remove(key)
    }
    fn require(map: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
        take(map, key).ok_or_else(|| Error::Config {
            field: key.into(),
            msg: "missing required key".into(),
        })
    }

    let task = Task::parse(&require(&mut map, "task")?)?;
    let train_path = require(&mut map, "data.train")?;
    let dev_path = require(&mut map, "data.dev")?;
    let test_path = require(&mut map, "data.test")?;
    let out_dir = require(&mut map, "out_dir")?;

    let mut cfg = ExperimentConfig {
        task,
        train_path,
        dev_path,
        test_path,
        d: 64,
        d_ff: 128,
        heads: 4,
        layers: 2,
        max_len: 128,
        variant: Variant::Column,
        p: 0.0,
        w: 1,
        rescale: Rescale::Normalized,
        dropout: 0.0,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        batch: 32,
        epochs: 10,
        patience: 5,
        seed: 1,
        out_dir,
    };

    if let Some(v) = take(&mut map, "model.d") {
        cfg.d = parse_num("model.d", &v)?;
    }
    if let Some(v) = take(&mut map, "model.d_ff") {
        cfg.d_ff = parse_num("model.d_ff", &v)?;
    }
    if let Some(v) = take(&mut map, "model.heads") {
        cfg.heads = parse_num("model.heads", &v)?;
    }
    if let Some(v) = take(&mut map, "model.layers") {
        cfg.layers = parse_num("model.layers", &v)?;
    }
    if let Some(v) = take(&mut map, "model.max_len") {
        cfg.max_len = parse_num("model.max_len", &v)?;
    }
    if let Some(v) = take(&mut map, "drop.variant") {
        cfg.variant = parse_variant(&v)?;
    }
    if let Some(v) = take(&mut map, "drop.p") {
        cfg.p = parse_num("drop.p", &v)?;
    }
    if let Some(v) = take(&mut map, "drop.w") {
        cfg.w = parse_num("drop.w", &v)?;
    }
    if let Some(v) = take(&mut map, "drop.rescale") {
        cfg.rescale = parse_rescale(&v)?;
    }
    if let Some(v) = take(&mut map, "drop.dropout") {
        cfg.dropout = parse_num("drop.dropout", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.lr") {
        cfg.lr = parse_num("optim.lr", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.beta1") {
        cfg.beta1 = parse_num("optim.beta1", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.beta2") {
        cfg.beta2 = parse_num("optim.beta2", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.batch") {
        cfg.batch = parse_num("optim.batch", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.epochs") {
        cfg.epochs = parse_num("optim.epochs", &v)?;
    }
    if let Some(v) = take(&mut map, "optim.patience") {
        cfg.patience = parse_num("optim.patience", &v)?;
    }
    if let Some(v) = take(&mut map, "seed") {
        cfg.seed = parse_num("seed", &v)?;
    }

    if let Some((key, _)) = map.into_iter().next() {
        return Err(Error::Config { field: key, msg: "unknown key".into() });
    }
    cfg.validate()?;
    Ok(cfg)
}
