//! JSON persistence for [`FittedModel`].
//!
//! Every float is written with 17 significant digits, enough for an exact
//! round trip of any f64 (and therefore of any f32 widened to f64).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter, Serializer};

use crate::classifier::{FittedModel, ModelParts};
use crate::error::{MgqdaError, Result};
use crate::linalg::SymMatrix;
use crate::scalar::Scalar;
use crate::stats::CovMode;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    p_full: usize,
    g_count: usize,
    labels: Vec<String>,
    priors: Vec<f64>,
    support: Vec<usize>,
    group_supports: Vec<Vec<usize>>,
    omega_s: Vec<f64>,
    means_s: Vec<Vec<f64>>,
    cov_s: Vec<Vec<f64>>,
    alpha: f64,
    lambda: f64,
    cov_mode: CovMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_names: Option<Vec<String>>,
}

/// Writes floats as `d.dddddddddddddddde±x` and defers everything else.
struct FullPrecision<F>(F);

impl<F: Formatter> Formatter for FullPrecision<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn end_object_key<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_key(writer)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

fn to_doc<T: Scalar>(model: &FittedModel<T>) -> ModelDocument {
    let p = model.parts();
    let f = |v: &T| v.as_f64();
    ModelDocument {
        format_version: FORMAT_VERSION,
        p_full: p.p_full,
        g_count: p.g_count,
        labels: p.labels.clone(),
        priors: p.priors.iter().map(f).collect(),
        support: p.support.clone(),
        group_supports: p.group_supports.clone(),
        omega_s: p.omega_s.iter().map(f).collect(),
        means_s: p.means_s.outer_iter().map(|r| r.iter().map(f).collect()).collect(),
        cov_s: p.cov_s.iter().map(|c| c.packed_lower().iter().map(f).collect()).collect(),
        alpha: p.alpha.as_f64(),
        lambda: p.lambda.as_f64(),
        cov_mode: p.cov_mode,
        feature_names: p.feature_names.clone(),
    }
}

fn from_doc<T: Scalar>(doc: ModelDocument) -> Result<FittedModel<T>> {
    if doc.format_version != FORMAT_VERSION {
        return Err(MgqdaError::Format(format!("unsupported format_version {}", doc.format_version)));
    }
    let bad = |msg: String| MgqdaError::Format(msg);
    let g = doc.g_count;
    let s = doc.support.len();
    let k = g * g.saturating_sub(1);
    if doc.omega_s.len() != s * k {
        return Err(bad(format!("omega_s has {} entries, expected {}", doc.omega_s.len(), s * k)));
    }
    let omega_s = Array2::from_shape_vec((s, k), doc.omega_s.into_iter().map(T::of).collect())
        .map_err(|e| bad(e.to_string()))?;
    if doc.means_s.len() != g || doc.means_s.iter().any(|m| m.len() != s) {
        return Err(bad("means_s must be G vectors of the support length".into()));
    }
    let means_s = Array2::from_shape_fn((g, s), |(gi, j)| T::of(doc.means_s[gi][j]));
    let cov_s = doc
        .cov_s
        .iter()
        .map(|packed| {
            let vals: Vec<T> = packed.iter().copied().map(T::of).collect();
            if s == 0 && vals.is_empty() {
                return Ok(SymMatrix::zeros(0));
            }
            SymMatrix::from_packed_lower(s, &vals)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| bad(e.to_string()))?;
    let parts = ModelParts {
        p_full: doc.p_full,
        g_count: g,
        labels: doc.labels,
        priors: doc.priors.into_iter().map(T::of).collect(),
        support: doc.support,
        group_supports: doc.group_supports,
        omega_s,
        means_s,
        cov_s,
        alpha: T::of(doc.alpha),
        lambda: T::of(doc.lambda),
        cov_mode: doc.cov_mode,
        feature_names: doc.feature_names,
    };
    FittedModel::from_parts(parts).map_err(|e| match e {
        MgqdaError::InvalidInput(msg) => bad(msg),
        other => other,
    })
}

/// Serializes to pretty-printed JSON.
pub fn to_json<T: Scalar>(model: &FittedModel<T>) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FullPrecision(PrettyFormatter::new()));
    to_doc(model).serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| MgqdaError::Format(e.to_string()))
}

/// Serializes to single-line JSON.
pub fn to_json_compact<T: Scalar>(model: &FittedModel<T>) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FullPrecision(CompactFormatter));
    to_doc(model).serialize(&mut ser)?;
    String::from_utf8(buf).map_err(|e| MgqdaError::Format(e.to_string()))
}

pub fn from_json<T: Scalar>(text: &str) -> Result<FittedModel<T>> {
    from_doc(serde_json::from_str(text)?)
}

pub fn save<T: Scalar>(model: &FittedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<FittedModel<T>> {
    from_json(&fs::read_to_string(path)?)
}
