//! File formats: CSV traces with `#` comment headers, JSON metadata, and
//! summary documents validated against an embedded schema.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCHEMA_VERSION: u32 = 1;

/// Seventeen significant digits; empty for `None` or non-finite values.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Writes `# key: value` comment lines followed by a CSV table.
pub fn write_csv(
    path: &Path,
    comments: &[(String, String)],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut file = File::create(path)?;
    for (k, v) in comments {
        writeln!(file, "# {k}: {v}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`], skipping comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = vec![];
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut file = File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    Ok(())
}

/// Schema of `summary.json`. `results` is checked against
/// `definitions.<kind>`.
pub const SUMMARY_SCHEMA: &str = r#"{
  "type": "object",
  "required": ["schema_version", "kind", "library_version", "spec", "seeds", "results"],
  "properties": {
    "schema_version": {"type": "integer", "minimum": 1},
    "kind": {"type": "string", "enum": ["convergence", "scaling", "bias_probe", "variance_probe"]},
    "library_version": {"type": "string"},
    "spec": {"type": "object"},
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "results": {"type": "object"}
  },
  "definitions": {
    "convergence": {
      "type": "object",
      "required": ["dim", "runs", "final_loss_table"],
      "properties": {
        "dim": {"type": "integer", "minimum": 1},
        "runs": {"type": "array", "items": {
          "type": "object",
          "required": ["method", "seed", "f_initial", "f_final", "f_reference", "iterations",
                       "oracle_calls", "wall_s", "trace_file", "error"],
          "properties": {
            "method": {"type": "string", "enum": ["f2csa", "implicit_baseline"]},
            "seed": {"type": "integer", "minimum": 0},
            "f_initial": {"type": ["number", "null"]},
            "f_final": {"type": ["number", "null"]},
            "f_reference": {"type": ["number", "null"]},
            "final_smoothed_gap": {"type": ["number", "null"]},
            "first_smoothed_gap": {"type": ["number", "null"]},
            "iterations": {"type": "integer", "minimum": 0},
            "oracle_calls": {"type": "integer", "minimum": 0},
            "wall_s": {"type": "number", "minimum": 0},
            "trace_file": {"type": "string"},
            "error": {"type": ["string", "null"]}
          }
        }},
        "final_loss_table": {"type": "array", "items": {
          "type": "object",
          "required": ["seed"],
          "properties": {
            "seed": {"type": "integer", "minimum": 0},
            "f2csa": {"type": ["number", "null"]},
            "implicit_baseline": {"type": ["number", "null"]}
          }
        }}
      }
    },
    "scaling": {
      "type": "object",
      "required": ["rows", "medians", "exponents"],
      "properties": {
        "rows": {"type": "array", "items": {
          "type": "object",
          "required": ["dim", "method", "seed", "iterations", "per_iter_s", "total_s", "f_final", "error"],
          "properties": {
            "dim": {"type": "integer", "minimum": 1},
            "method": {"type": "string", "enum": ["f2csa", "implicit_baseline"]},
            "seed": {"type": "integer", "minimum": 0},
            "iterations": {"type": "integer", "minimum": 0},
            "per_iter_s": {"type": ["number", "null"]},
            "total_s": {"type": ["number", "null"]},
            "f_final": {"type": ["number", "null"]},
            "error": {"type": ["string", "null"]}
          }
        }},
        "medians": {"type": "array", "items": {
          "type": "object",
          "required": ["dim", "method", "median_per_iter_s"],
          "properties": {
            "dim": {"type": "integer", "minimum": 1},
            "method": {"type": "string"},
            "median_per_iter_s": {"type": "number", "minimum": 0}
          }
        }},
        "exponents": {"type": "object"}
      }
    },
    "bias_probe": {
      "type": "object",
      "required": ["reports", "mse_check"],
      "properties": {
        "reports": {"type": "array", "items": {"type": "object", "required": ["seed", "dim", "report"]}},
        "mse_check": {"type": "object", "required": ["pass", "c_hat", "sigma2_hat", "cells"]}
      }
    },
    "variance_probe": {
      "type": "object",
      "required": ["reports", "mse_check"],
      "properties": {
        "reports": {"type": "array", "items": {"type": "object", "required": ["seed", "dim", "report"]}},
        "mse_check": {"type": "object", "required": ["pass", "c_hat", "sigma2_hat", "cells"]}
      }
    }
  }
}"#;

/// Validates `value` against the subset of JSON Schema used by
/// [`SUMMARY_SCHEMA`]: `type`, `required`, `properties`, `items`, `enum` and
/// `minimum`.
pub fn validate_against(schema: &Value, value: &Value, path: &str) -> Result<()> {
    let fail = |msg: String| Err(Error::Schema(format!("{path}: {msg}")));
    if let Some(t) = schema.get("type") {
        let allowed: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        if !allowed.iter().any(|t| type_matches(t, value)) {
            return fail(format!("expected {allowed:?}, found {}", type_name(value)));
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(value) {
            return fail(format!("{value} not in {options:?}"));
        }
    }
    if let (Some(min), Some(v)) = (schema.get("minimum").and_then(Value::as_f64), value.as_f64()) {
        if v < min {
            return fail(format!("{v} below minimum {min}"));
        }
    }
    if let Value::Object(obj) = value {
        if let Some(Value::Array(req)) = schema.get("required") {
            for key in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return fail(format!("missing required field {key:?}"));
                }
            }
        }
        if let Some(Value::Object(props)) = schema.get("properties") {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    validate_against(sub, v, &format!("{path}.{key}"))?;
                }
            }
        }
    }
    if let (Value::Array(items), Some(sub)) = (value, schema.get("items")) {
        for (i, v) in items.iter().enumerate() {
            validate_against(sub, v, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        _ => false,
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Validates a summary document, including its kind-specific `results`.
pub fn validate_summary(summary: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(SUMMARY_SCHEMA)?;
    validate_against(&schema, summary, "$")?;
    let kind = summary["kind"].as_str().unwrap_or_default();
    let sub = &schema["definitions"][kind];
    validate_against(sub, &summary["results"], "$.results")
}
