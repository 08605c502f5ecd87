//! Run specification files.
//!
//! The format is sectioned `key = value` text:
//!
//! ```text
//! # comment
//! [architecture]
//! kind = block_mlp
//! width = 16
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Section and
//! key names are lowercase identifiers. A key may appear once per section.
//! Recognised sections are `architecture`, `dataset`, `train` and `policy`;
//! every other section or key is an error. Input and output widths of the
//! architecture come from the dataset and cannot be set.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use mat_core::{
    Architecture, DataShape, DatasetKind, LossKind, MultirateConfig, Patience, PolicyConfig, PolicyKind,
    Scalarization, SharedRule, TrainConfig,
};

use crate::CliError;

pub const SECTIONS: [&str; 4] = ["architecture", "dataset", "train", "policy"];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    /// 0 for values supplied on the command line.
    line: usize,
}

/// Parsed but unresolved specification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawSpec {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RawSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut spec = RawSpec::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') || content.starts_with(';') {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::spec(line, format!("malformed section header `{content}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::spec(line, format!("unknown section `{name}`")));
                }
                if spec.sections.contains_key(name) {
                    return Err(CliError::spec(line, format!("section `{name}` appears twice")));
                }
                spec.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::spec(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                return Err(CliError::spec(line, format!("invalid key `{key}`")));
            }
            let section = current
                .as_ref()
                .ok_or_else(|| CliError::spec(line, format!("key `{key}` outside any section")))?;
            let entries = spec.sections.get_mut(section).expect("section registered");
            if entries.contains_key(key) {
                return Err(CliError::spec(line, format!("duplicate key `{key}` in [{section}]")));
            }
            entries.insert(key.to_string(), Entry { value: value.to_string(), line });
        }
        Ok(spec)
    }

    /// Replaces or adds a value, as a command-line flag does.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), Entry { value: value.into(), line: 0 });
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|e| e.value.as_str())
    }
}

/// Reads keys out of one section and reports whatever is left over.
struct Section<'a> {
    name: &'static str,
    entries: BTreeMap<&'a str, &'a Entry>,
}

impl<'a> Section<'a> {
    fn new(spec: &'a RawSpec, name: &'static str) -> Self {
        let entries = spec
            .sections
            .get(name)
            .map(|m| m.iter().map(|(k, v)| (k.as_str(), v)).collect())
            .unwrap_or_default();
        Section { name, entries }
    }

    fn take_raw(&mut self, key: &str) -> Option<&'a Entry> {
        self.entries.remove(key)
    }

    fn parse<T: FromStr>(&self, key: &str, e: &Entry) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        e.value
            .parse()
            .map_err(|err| CliError::spec(e.line, format!("[{}] {key} = `{}`: {err}", self.name, e.value)))
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.take_raw(key).map(|e| self.parse(key, e)).transpose()
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::spec(0, format!("[{}] requires `{key}`", self.name)))
    }

    fn switch(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        Ok(self.opt::<Switch>(key)?.map_or(default, |s| s.0))
    }

    fn finish(self) -> Result<(), CliError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, e)) => Err(CliError::spec(e.line, format!("unknown key `{key}` in [{}]", self.name))),
        }
    }
}

/// `on`/`off` (also `true`/`false`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switch(pub bool);

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" => Ok(Switch(true)),
            "off" | "false" => Ok(Switch(false)),
            _ => Err("expected on or off".into()),
        }
    }
}

fn policy_kind(s: &str) -> Result<PolicyKind, String> {
    match s {
        "vanilla" => Ok(PolicyKind::Vanilla),
        "rand" => Ok(PolicyKind::Rand),
        "multirate" => Ok(PolicyKind::Multirate),
        "mat" => Ok(PolicyKind::Mat),
        _ => Err("expected vanilla, rand, multirate or mat".into()),
    }
}

/// Wraps an enum parser so [`Section::parse`] can use it.
struct Parsed<T>(T);

macro_rules! parsed {
    ($t:ty, $f:expr) => {
        impl FromStr for Parsed<$t> {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                $f(s).map(Parsed)
            }
        }
    };
}

parsed!(PolicyKind, policy_kind);
parsed!(LossKind, |s| match s {
    "squared_error" => Ok(LossKind::SquaredError),
    "softmax_cross_entropy" => Ok(LossKind::SoftmaxCrossEntropy),
    _ => Err("expected squared_error or softmax_cross_entropy".to_string()),
});
parsed!(Scalarization, |s| match s {
    "sum_of_logits" => Ok(Scalarization::SumOfLogits),
    "full_output" => Ok(Scalarization::FullOutput),
    _ => Err("expected sum_of_logits or full_output".to_string()),
});
parsed!(SharedRule, |s| match s {
    "always_active" => Ok(SharedRule::AlwaysActive),
    "frozen" => Ok(SharedRule::Frozen),
    _ => Err("expected always_active or frozen".to_string()),
});

pub fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    policy_kind(s)
}

/// Everything a run needs, with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub architecture: Architecture,
    pub dataset: DatasetKind,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        resolve(&RawSpec::parse(text)?)
    }

    /// The resolved specification in the input format. Parsing the echo gives
    /// back an equal spec.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        section("architecture", architecture_pairs(&self.architecture));
        section("dataset", dataset_pairs(&self.dataset));
        let t = &self.train;
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        section(
            "train",
            vec![
                ("policy", t.policy_kind.name().to_string()),
                ("seed", t.seed.to_string()),
                ("epochs", t.epochs.to_string()),
                ("lr", t.lr.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("loss", loss_name(t.loss_kind).to_string()),
                ("scalarization", scalarization_name(t.scalarization).to_string()),
                ("shared", shared_name(t.shared_rule).to_string()),
                ("track_spectrum", onoff(t.track_spectrum)),
                ("patience", t.patience.map_or("off".to_string(), |p| p.epochs.to_string())),
                ("patience_tol", t.patience.map_or(Patience::default().rel_tol, |p| p.rel_tol).to_string()),
                ("rand_fraction", t.rand_fraction.to_string()),
                ("multirate_slow_fraction", t.multirate.fraction_slow.to_string()),
                ("multirate_k", t.multirate.k.to_string()),
            ],
        );
        let p = &t.policy;
        section(
            "policy",
            vec![
                ("alpha", p.alpha.to_string()),
                ("beta", p.beta.to_string()),
                ("samples", p.samples.to_string()),
                ("warmup", p.warmup.to_string()),
                ("cadence", p.cadence.to_string()),
                ("sticky", onoff(p.sticky)),
                ("protect", onoff(p.protect_per_layer)),
                ("temporal", onoff(p.temporal_enabled)),
            ],
        );
        out.pop();
        out
    }
}

fn loss_name(k: LossKind) -> &'static str {
    match k {
        LossKind::SquaredError => "squared_error",
        LossKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
    }
}

fn scalarization_name(s: Scalarization) -> &'static str {
    match s {
        Scalarization::SumOfLogits => "sum_of_logits",
        Scalarization::FullOutput => "full_output",
    }
}

fn shared_name(s: SharedRule) -> &'static str {
    match s {
        SharedRule::AlwaysActive => "always_active",
        SharedRule::Frozen => "frozen",
    }
}

fn architecture_pairs(a: &Architecture) -> Vec<(&'static str, String)> {
    let s = |v: usize| v.to_string();
    match *a {
        Architecture::Linear { groups, .. } => vec![("kind", "linear".into()), ("groups", s(groups))],
        Architecture::BlockMlp {
            width,
            blocks_per_layer,
            layers,
            bias,
            ..
        } => vec![
            ("kind", "block_mlp".into()),
            ("width", s(width)),
            ("blocks_per_layer", s(blocks_per_layer)),
            ("layers", s(layers)),
            ("bias", if bias { "on" } else { "off" }.into()),
        ],
        Architecture::TinyAttention {
            d_model, heads, layers, d_ff, ..
        } => vec![
            ("kind", "tiny_attention".into()),
            ("d_model", s(d_model)),
            ("heads", s(heads)),
            ("layers", s(layers)),
            ("d_ff", s(d_ff)),
        ],
        Architecture::TinyConv {
            length,
            filters,
            groups,
            layers,
            kernel,
            ..
        } => vec![
            ("kind", "tiny_conv".into()),
            ("length", s(length)),
            ("filters", s(filters)),
            ("groups", s(groups)),
            ("layers", s(layers)),
            ("kernel", s(kernel)),
        ],
    }
}

fn dataset_pairs(d: &DatasetKind) -> Vec<(&'static str, String)> {
    let s = |v: usize| v.to_string();
    let mut pairs = vec![("kind", d.name().to_string())];
    match *d {
        DatasetKind::TeacherStudent {
            n_train,
            n_val,
            d_in,
            teacher_width,
            noise,
        } => pairs.extend([
            ("n_train", s(n_train)),
            ("n_val", s(n_val)),
            ("d_in", s(d_in)),
            ("teacher_width", s(teacher_width)),
            ("noise", noise.to_string()),
        ]),
        DatasetKind::LinearTeacher { n_train, n_val, d_in, noise } => pairs.extend([
            ("n_train", s(n_train)),
            ("n_val", s(n_val)),
            ("d_in", s(d_in)),
            ("noise", noise.to_string()),
        ]),
        DatasetKind::SpiralClassify {
            n_train,
            n_val,
            turns,
            noise,
        } => pairs.extend([
            ("n_train", s(n_train)),
            ("n_val", s(n_val)),
            ("turns", turns.to_string()),
            ("noise", noise.to_string()),
        ]),
        DatasetKind::TinyTokenMask {
            n_train,
            n_val,
            seq_len,
            vocab,
            period,
            mask_rate,
        } => pairs.extend([
            ("n_train", s(n_train)),
            ("n_val", s(n_val)),
            ("seq_len", s(seq_len)),
            ("vocab", s(vocab)),
            ("period", s(period)),
            ("mask_rate", mask_rate.to_string()),
        ]),
    }
    pairs
}

fn resolve_dataset(mut sec: Section<'_>) -> Result<DatasetKind, CliError> {
    let kind: String = sec.required("kind")?;
    let n_train = sec.or("n_train", 64)?;
    let n_val = sec.or("n_val", 64)?;
    let d = match kind.as_str() {
        "teacher_student" => DatasetKind::TeacherStudent {
            n_train,
            n_val,
            d_in: sec.or("d_in", 4)?,
            teacher_width: sec.or("teacher_width", 8)?,
            noise: sec.or("noise", 0.0)?,
        },
        "linear_teacher" => DatasetKind::LinearTeacher {
            n_train,
            n_val,
            d_in: sec.or("d_in", 4)?,
            noise: sec.or("noise", 0.0)?,
        },
        "spiral_classify" => DatasetKind::SpiralClassify {
            n_train,
            n_val,
            turns: sec.or("turns", 1.5)?,
            noise: sec.or("noise", 0.05)?,
        },
        "tiny_token_mask" => DatasetKind::TinyTokenMask {
            n_train,
            n_val,
            seq_len: sec.or("seq_len", 8)?,
            vocab: sec.or("vocab", 8)?,
            period: sec.or("period", 3)?,
            mask_rate: sec.or("mask_rate", 0.15)?,
        },
        other => return Err(CliError::spec(0, format!("unknown dataset kind `{other}`"))),
    };
    sec.finish()?;
    d.validate().map_err(|e| CliError::spec(0, e.to_string()))?;
    Ok(d)
}

fn resolve_architecture(mut sec: Section<'_>, shape: DataShape) -> Result<Architecture, CliError> {
    let kind: String = sec.required("kind")?;
    let flat = |what: &str| match shape {
        DataShape::Flat { d_in, d_out } => Ok((d_in, d_out)),
        DataShape::Sequence { .. } => Err(CliError::spec(0, format!("{what} needs a flat dataset"))),
    };
    let arch = match kind.as_str() {
        "linear" => {
            let (d_in, d_out) = flat("linear")?;
            Architecture::Linear {
                d_in,
                d_out,
                groups: sec.or("groups", d_out)?,
            }
        }
        "block_mlp" => {
            let (d_in, d_out) = flat("block_mlp")?;
            Architecture::BlockMlp {
                d_in,
                width: sec.or("width", 16)?,
                blocks_per_layer: sec.or("blocks_per_layer", 4)?,
                layers: sec.or("layers", 2)?,
                d_out,
                bias: sec.switch("bias", true)?,
            }
        }
        "tiny_attention" => {
            let DataShape::Sequence { seq_len, d_token, d_out } = shape else {
                return Err(CliError::spec(0, "tiny_attention needs a sequence dataset".into()));
            };
            let d_model = sec.or("d_model", 16)?;
            Architecture::TinyAttention {
                seq_len,
                d_token,
                d_model,
                heads: sec.or("heads", 4)?,
                layers: sec.or("layers", 2)?,
                d_ff: sec.or("d_ff", 2 * d_model)?,
                d_out,
            }
        }
        "tiny_conv" => {
            let (d_in, d_out) = flat("tiny_conv")?;
            let length = sec.or("length", d_in)?;
            if length == 0 || d_in % length != 0 {
                return Err(CliError::spec(0, format!("tiny_conv length {length} does not divide input width {d_in}")));
            }
            Architecture::TinyConv {
                length,
                channels_in: d_in / length,
                filters: sec.or("filters", 8)?,
                groups: sec.or("groups", 4)?,
                layers: sec.or("layers", 2)?,
                kernel: sec.or("kernel", 3)?,
                d_out,
            }
        }
        other => return Err(CliError::spec(0, format!("unknown architecture kind `{other}`"))),
    };
    sec.finish()?;
    Ok(arch)
}

pub fn resolve(spec: &RawSpec) -> Result<RunSpec, CliError> {
    let dataset = resolve_dataset(Section::new(spec, "dataset"))?;
    let architecture = resolve_architecture(Section::new(spec, "architecture"), dataset.shape())?;
    mat_core::build_network::<f64>(&architecture, 0).map_err(|e| CliError::spec(0, e.to_string()))?;

    let mut t = Section::new(spec, "train");
    let defaults = TrainConfig::default();
    let default_loss = match dataset {
        DatasetKind::TinyTokenMask { .. } => LossKind::SoftmaxCrossEntropy,
        _ => LossKind::SquaredError,
    };
    let patience = match t.take_raw("patience") {
        Some(e) if e.value == "off" => None,
        Some(e) => Some(t.parse::<usize>("patience", e)?),
        None => defaults.patience.map(|p| p.epochs),
    };
    let patience_tol = t.or("patience_tol", Patience::default().rel_tol)?;
    let mut train = TrainConfig {
        policy_kind: t.or("policy", Parsed(defaults.policy_kind))?.0,
        seed: t.or("seed", defaults.seed)?,
        epochs: t.or("epochs", defaults.epochs)?,
        lr: t.or("lr", defaults.lr)?,
        batch_size: t.or("batch_size", defaults.batch_size)?,
        loss_kind: t.or("loss", Parsed(default_loss))?.0,
        scalarization: t.or("scalarization", Parsed(defaults.scalarization))?.0,
        shared_rule: t.or("shared", Parsed(defaults.shared_rule))?.0,
        track_spectrum: t.switch("track_spectrum", defaults.track_spectrum)?,
        patience: patience.map(|epochs| Patience { epochs, rel_tol: patience_tol }),
        rand_fraction: t.or("rand_fraction", defaults.rand_fraction)?,
        multirate: MultirateConfig {
            fraction_slow: t.or("multirate_slow_fraction", defaults.multirate.fraction_slow)?,
            k: t.or("multirate_k", defaults.multirate.k)?,
        },
        policy: PolicyConfig::default(),
    };
    t.finish()?;

    let mut p = Section::new(spec, "policy");
    let d = PolicyConfig::default();
    train.policy = PolicyConfig {
        alpha: p.or("alpha", d.alpha)?,
        beta: p.or("beta", d.beta)?,
        samples: p.or("samples", d.samples)?,
        warmup: p.or("warmup", d.warmup)?,
        cadence: p.or("cadence", d.cadence)?,
        sticky: p.switch("sticky", d.sticky)?,
        protect_per_layer: p.switch("protect", d.protect_per_layer)?,
        temporal_enabled: p.switch("temporal", d.temporal_enabled)?,
        families: BTreeMap::new(),
    };
    p.finish()?;
    train.validate().map_err(|e| CliError::spec(0, e.to_string()))?;
    Ok(RunSpec {
        architecture,
        dataset,
        train,
    })
}
