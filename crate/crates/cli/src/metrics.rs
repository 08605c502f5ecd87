//! `metrics.csv`: one row per module per snapshot epoch plus one global row
//! per epoch. Global rows carry `module_layer = -1` and an empty slot.
//! Missing values are empty fields; an infinite condition number is `inf`.

use std::io::{Read, Write};

use mat_core::{MetricRow, ModuleId, RowScope};

use crate::CliError;

pub const METRIC_COLUMNS: [&str; 14] = [
    "epoch",
    "module_layer",
    "module_slot",
    "lambda_max",
    "lambda_min",
    "eff_rank",
    "cond_number",
    "in_info",
    "train_loss",
    "val_loss",
    "weight_dist",
    "flops_fwd",
    "flops_bwd",
    "flops_ntk",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    /// `None` for global rows.
    pub module: Option<ModuleId>,
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    pub eff_rank: Option<f64>,
    pub cond_number: Option<f64>,
    pub in_info: Option<bool>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub weight_dist: f64,
    pub flops_fwd: u64,
    pub flops_bwd: u64,
    pub flops_ntk: u64,
}

impl From<&MetricRow> for MetricRecord {
    fn from(r: &MetricRow) -> Self {
        MetricRecord {
            epoch: r.epoch,
            module: match r.scope {
                RowScope::Global => None,
                RowScope::Module(id) => Some(id),
            },
            lambda_max: r.lambda_max,
            lambda_min: r.lambda_min,
            eff_rank: r.effective_rank,
            cond_number: r.condition_number,
            in_info: r.in_information,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            weight_dist: r.weight_distance,
            flops_fwd: r.flops_forward,
            flops_bwd: r.flops_backward,
            flops_ntk: r.flops_ntk,
        }
    }
}

/// Shortest round-trip text, switching to exponent form outside
/// `[1e-4, 1e15)` so tiny eigenvalues stay short.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else if v == 0.0 || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

impl MetricRecord {
    pub fn is_global(&self) -> bool {
        self.module.is_none()
    }

    pub fn fields(&self) -> [String; 14] {
        [
            self.epoch.to_string(),
            self.module.map_or("-1".into(), |m| m.layer.to_string()),
            self.module.map(|m| m.slot.to_string()).unwrap_or_default(),
            opt_f64(self.lambda_max),
            opt_f64(self.lambda_min),
            opt_f64(self.eff_rank),
            opt_f64(self.cond_number),
            self.in_info.map(|b| u8::from(b).to_string()).unwrap_or_default(),
            opt_f64(self.train_loss),
            opt_f64(self.val_loss),
            format_f64(self.weight_dist),
            self.flops_fwd.to_string(),
            self.flops_bwd.to_string(),
            self.flops_ntk.to_string(),
        ]
    }

    fn from_fields(f: &csv::StringRecord, row: usize) -> Result<Self, CliError> {
        let bad = |col: usize, why: String| {
            CliError::Compatibility(format!("metrics row {row}, column {}: {why}", METRIC_COLUMNS[col]))
        };
        let get = |col: usize| f.get(col).unwrap_or("");
        fn num<T: std::str::FromStr>(s: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            s.parse().map_err(|e: T::Err| format!("`{s}`: {e}"))
        }
        let required = |col: usize| num::<f64>(get(col)).map_err(|e| bad(col, e));
        let optional = |col: usize| match get(col) {
            "" => Ok(None),
            s => num::<f64>(s).map(Some).map_err(|e| bad(col, e)),
        };
        let count = |col: usize| num::<u64>(get(col)).map_err(|e| bad(col, e));
        if f.len() != METRIC_COLUMNS.len() {
            return Err(CliError::Compatibility(format!("metrics row {row} has {} fields", f.len())));
        }
        let layer: i64 = num(get(1)).map_err(|e| bad(1, e))?;
        let module = if layer < 0 {
            None
        } else {
            Some(ModuleId::new(layer as usize, num(get(2)).map_err(|e| bad(2, e))?))
        };
        Ok(MetricRecord {
            epoch: num(get(0)).map_err(|e| bad(0, e))?,
            module,
            lambda_max: optional(3)?,
            lambda_min: optional(4)?,
            eff_rank: optional(5)?,
            cond_number: optional(6)?,
            in_info: match get(7) {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                s => return Err(bad(7, format!("`{s}` is not 0 or 1"))),
            },
            train_loss: optional(8)?,
            val_loss: optional(9)?,
            weight_dist: required(10)?,
            flops_fwd: count(11)?,
            flops_bwd: count(12)?,
            flops_ntk: count(13)?,
        })
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricRecord]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let fail = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record(METRIC_COLUMNS).map_err(fail)?;
    for r in rows {
        w.write_record(r.fields()).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Format(e.to_string()))
}

/// Parses a metrics file, rejecting any header other than [`METRIC_COLUMNS`].
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricRecord>, CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| CliError::Compatibility(e.to_string()))?;
    if header.iter().ne(METRIC_COLUMNS) {
        return Err(CliError::Compatibility(format!(
            "metrics header `{}` does not match `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            METRIC_COLUMNS.join(",")
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| CliError::Compatibility(e.to_string()))?;
            MetricRecord::from_fields(&rec, i + 1)
        })
        .collect()
}
