//! Error metrics, gap recovery, W4A8 simulation and method comparison.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grids::round_e4m3;
use crate::learn::{effective_importance, learn, weighted_error, AaacConfig, ImportanceVector};
use crate::pack::{unpack, PackedModel};
use crate::quant::{if4_layer, rtn_layer, Method, QuantizedLayer};
use crate::tensor::{ActivationMatrix, LayerBundle, WeightMatrix};

/// Largest finite E4M3 magnitude; the per-tensor activation scale maps absmax here.
const FP8_MAX: f64 = 448.0;

fn check_shapes(w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<()> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() {
        return Err(Error::validation(format!(
            "shape mismatch: W {}x{}, W_hat {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    Ok(())
}

/// Mean squared elementwise reconstruction error.
pub fn mse(w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<f64> {
    check_shapes(w, w_hat)?;
    let sum: f64 = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| {
            let d = *b as f64 - *a as f64;
            d * d
        })
        .sum();
    Ok(sum / w.data().len() as f64)
}

/// `(1/T) * sum_t || X_t (W_hat - W)^T ||^2`, accumulated in f64.
pub fn layer_output_mse(
    w: &WeightMatrix,
    w_hat: &WeightMatrix,
    x: &ActivationMatrix,
) -> Result<f64> {
    check_shapes(w, w_hat)?;
    if x.cols() != w.cols() {
        return Err(Error::validation(format!(
            "activations have {} columns, weights have {}",
            x.cols(),
            w.cols()
        )));
    }
    let delta: Vec<f64> = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| *b as f64 - *a as f64)
        .collect();
    let k = w.cols();
    let mut total = 0.0f64;
    for t in 0..x.rows() {
        let xt = x.row(t);
        for drow in delta.chunks_exact(k) {
            let y: f64 = xt.iter().zip(drow).map(|(xv, d)| *xv as f64 * d).sum();
            total += y * y;
        }
    }
    Ok(total / x.rows() as f64)
}

/// Output error when the quantized layer also sees quantized activations:
/// `(1/T) * sum_t || X_q,t W_hat^T - X_t W^T ||^2`.
pub fn mixed_output_mse(
    w: &WeightMatrix,
    w_hat: &WeightMatrix,
    x: &ActivationMatrix,
    x_q: &ActivationMatrix,
) -> Result<f64> {
    check_shapes(w, w_hat)?;
    if x.rows() != x_q.rows() || x.cols() != x_q.cols() || x.cols() != w.cols() {
        return Err(Error::validation(
            "activation shapes do not match the layer",
        ));
    }
    let k = w.cols();
    let mut total = 0.0f64;
    for t in 0..x.rows() {
        let (xt, qt) = (x.row(t), x_q.row(t));
        for (wrow, hrow) in w.data().chunks_exact(k).zip(w_hat.data().chunks_exact(k)) {
            let mut y = 0.0f64;
            for c in 0..k {
                y += qt[c] as f64 * hrow[c] as f64 - xt[c] as f64 * wrow[c] as f64;
            }
            total += y * y;
        }
    }
    Ok(total / x.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

/// Share of the RTN-induced degradation that `method` removes, in percent.
/// May exceed 100 or go negative.
pub fn gap_recovery(full: f64, rtn: f64, method: f64, direction: Direction) -> Result<f64> {
    if rtn == full {
        return Err(Error::UndefinedGap(rtn));
    }
    Ok(match direction {
        Direction::LowerBetter => (rtn - method) / (rtn - full) * 100.0,
        Direction::HigherBetter => (method - rtn) / (full - rtn) * 100.0,
    })
}

/// Gap recovery of the column means of per-model rows (no intermediate rounding).
pub fn gap_recovery_of_means(
    full: &[f64],
    rtn: &[f64],
    method: &[f64],
    direction: Direction,
) -> Result<f64> {
    if full.is_empty() || full.len() != rtn.len() || full.len() != method.len() {
        return Err(Error::validation(format!(
            "row counts differ or are empty: full {}, rtn {}, method {}",
            full.len(),
            rtn.len(),
            method.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    gap_recovery(mean(full), mean(rtn), mean(method), direction)
}

/// Per-tensor FP8 E4M3 fake-quantization with an absmax scale.
pub fn simulate_w4a8(x: &ActivationMatrix) -> ActivationMatrix {
    let absmax = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return x.clone();
    }
    let scale = absmax as f64 / FP8_MAX;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let q = round_e4m3((v.abs() as f64 / scale) as f32) as f64 * scale;
            (q as f32).copysign(v)
        })
        .collect();
    ActivationMatrix::new(x.rows(), x.cols(), data).expect("fake-quantized activations stay finite")
}

/// Bits per weight, itemized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bpw {
    pub codes: f64,
    /// BF16 scale per `g` weights: `16/g`.
    pub scales: f64,
    /// `1/S` when a separate bitset is needed (`S < g`), else 0.
    pub selection: f64,
    /// Learned table bits over the layer; fixed base tables cost nothing.
    pub codebooks: f64,
    pub total: f64,
}

impl Bpw {
    pub fn of(layer: &QuantizedLayer) -> Self {
        let (g, s) = (layer.scale_group() as f64, layer.selection_group() as f64);
        let n = (layer.rows() * layer.cols()) as f64;
        let codes = 4.0;
        let scales = 16.0 / g;
        let selection = if s < g { 1.0 / s } else { 0.0 };
        let codebooks = match layer.method {
            Method::Aaac => (2 * layer.m() * 16) as f64 / n,
            Method::Rtn | Method::If4 => 0.0,
        };
        Self {
            codes,
            scales,
            selection,
            codebooks,
            total: codes + scales + selection + codebooks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub method: Method,
    pub layer: String,
    pub mse: f64,
    /// Importance-weighted squared error in weight units.
    pub weighted_error: f64,
    /// Absent when the layer has no calibration activations.
    pub output_mse: Option<f64>,
    pub bpw: Bpw,
}

/// Quantizes one layer with `method`. RTN and IF4 use `cfg.format`, `cfg.g`
/// and `cfg.scale_mode`; IF4 always mixes FP4 and INT4.
pub fn quantize_layer(
    bundle: &LayerBundle,
    method: Method,
    cfg: &AaacConfig,
) -> Result<QuantizedLayer> {
    match method {
        Method::Rtn => rtn_layer(&bundle.weights, cfg.format, cfg.g, cfg.scale_mode),
        Method::If4 => if4_layer(&bundle.weights, cfg.g),
        Method::Aaac => Ok(learn(bundle, cfg)?.layer),
    }
}

/// Metrics of `q` against its source layer. With `w4a8`, the output error
/// feeds FP8-simulated activations to the quantized weights only.
pub fn evaluate_layer(
    bundle: &LayerBundle,
    q: &QuantizedLayer,
    imp: &ImportanceVector,
    w4a8: bool,
) -> Result<LayerMetrics> {
    let w = &bundle.weights;
    let w_hat = q.dequantize()?;
    let output_mse = match &bundle.activations {
        Some(x) if w4a8 => Some(mixed_output_mse(w, &w_hat, x, &simulate_w4a8(x))?),
        Some(x) => Some(layer_output_mse(w, &w_hat, x)?),
        None => None,
    };
    Ok(LayerMetrics {
        method: q.method,
        layer: bundle.name.clone(),
        mse: mse(w, &w_hat)?,
        weighted_error: weighted_error(w, &w_hat, imp)?,
        output_mse,
        bpw: Bpw::of(q),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub layers: usize,
    pub mse: f64,
    pub weighted_error: f64,
    /// Mean over layers that have activations; absent if none do.
    pub output_mse: Option<f64>,
    pub bpw: f64,
}

/// Recovery of each aggregate metric relative to RTN, with zero error as the
/// full-precision anchor. `None` where RTN itself has zero error.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Recovery {
    pub method: Method,
    pub mse: Option<f64>,
    pub weighted_error: Option<f64>,
    pub output_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub w4a8: bool,
    /// Sorted by method, then layer name.
    pub rows: Vec<LayerMetrics>,
    /// Arithmetic means over layers, one entry per method present.
    pub aggregates: Vec<MethodAggregate>,
    /// Present when RTN and at least one other method were run.
    pub recovery: Option<Vec<Recovery>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<LayerMetrics>, w4a8: bool) -> Self {
        rows.sort_by(|a, b| a.method.cmp(&b.method).then_with(|| a.layer.cmp(&b.layer)));
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.dedup();

        let aggregates: Vec<MethodAggregate> = methods
            .iter()
            .map(|&m| {
                let of = || rows.iter().filter(move |r| r.method == m);
                MethodAggregate {
                    method: m,
                    layers: of().count(),
                    mse: mean(of().map(|r| r.mse)).unwrap_or(0.0),
                    weighted_error: mean(of().map(|r| r.weighted_error)).unwrap_or(0.0),
                    output_mse: mean(of().filter_map(|r| r.output_mse)),
                    bpw: mean(of().map(|r| r.bpw.total)).unwrap_or(0.0),
                }
            })
            .collect();

        let recovery = aggregates
            .iter()
            .find(|a| a.method == Method::Rtn)
            .and_then(|rtn| {
                let entries: Vec<Recovery> = aggregates
                    .iter()
                    .filter(|a| a.method != Method::Rtn)
                    .map(|a| {
                        let rec =
                            |r: f64, m: f64| gap_recovery(0.0, r, m, Direction::LowerBetter).ok();
                        Recovery {
                            method: a.method,
                            mse: rec(rtn.mse, a.mse),
                            weighted_error: rec(rtn.weighted_error, a.weighted_error),
                            output_mse: rtn
                                .output_mse
                                .zip(a.output_mse)
                                .and_then(|(r, m)| rec(r, m)),
                        }
                    })
                    .collect();
                (!entries.is_empty()).then_some(entries)
            });

        Self {
            w4a8,
            rows,
            aggregates,
            recovery,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per (method, layer).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,layer,mse,weighted_error,output_mse,bpw_codes,bpw_scales,bpw_selection,bpw_codebooks,bpw_total\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.method,
                csv_field(&r.layer),
                r.mse,
                r.weighted_error,
                r.output_mse.map_or(String::new(), |v| format!("{v:.9e}")),
                r.bpw.codes,
                r.bpw.scales,
                r.bpw.selection,
                r.bpw.codebooks,
                r.bpw.total
            );
        }
        out
    }

    /// Aligned-column table followed by aggregates and recovery.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let mut table: Vec<[String; 6]> = vec![[
            "method".into(),
            "layer".into(),
            "mse".into(),
            "weighted_err".into(),
            "output_mse".into(),
            "bpw".into(),
        ]];
        for r in &self.rows {
            table.push([
                r.method.to_string(),
                r.layer.clone(),
                format!("{:.6e}", r.mse),
                format!("{:.6e}", r.weighted_error),
                fmt_opt(r.output_mse),
                format!("{:.4}", r.bpw.total),
            ]);
        }
        for a in &self.aggregates {
            table.push([
                a.method.to_string(),
                format!("<mean of {}>", a.layers),
                format!("{:.6e}", a.mse),
                format!("{:.6e}", a.weighted_error),
                fmt_opt(a.output_mse),
                format!("{:.4}", a.bpw),
            ]);
        }
        let mut out = render_columns(&table);
        if let Some(rec) = &self.recovery {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}%"));
            let mut t: Vec<[String; 4]> = vec![[
                "recovery vs rtn".into(),
                "mse".into(),
                "weighted_err".into(),
                "output_mse".into(),
            ]];
            for r in rec {
                t.push([
                    r.method.to_string(),
                    pct(r.mse),
                    pct(r.weighted_error),
                    pct(r.output_mse),
                ]);
            }
            out.push('\n');
            out.push_str(&render_columns(&t));
        }
        if self.w4a8 {
            out.push_str("\noutput_mse uses FP8 (E4M3) per-tensor activations\n");
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_columns<const C: usize>(rows: &[[String; C]]) -> String {
    let mut widths = [0usize; C];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i < 2 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Runs every method on every layer. Layers run in parallel on the current
/// rayon pool; the report does not depend on scheduling.
pub fn compare(
    bundles: &[LayerBundle],
    methods: &[Method],
    cfg: &AaacConfig,
    w4a8: bool,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::validation(
            "no methods requested (supported: rtn, if4, aaac)",
        ));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    for b in bundles {
        cfg.validate(b.weights.cols())
            .map_err(|e| annotate(&b.name, e))?;
    }
    let per_layer: Vec<Vec<LayerMetrics>> = bundles
        .par_iter()
        .map(|b| {
            let imp = effective_importance(b);
            methods
                .iter()
                .map(|&m| {
                    let q = quantize_layer(b, m, cfg)?;
                    evaluate_layer(b, &q, &imp, w4a8)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| annotate(&b.name, e))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_rows(
        per_layer.into_iter().flatten().collect(),
        w4a8,
    ))
}

/// Evaluates a packed model against the archive it was quantized from.
/// Layer names must match exactly in both directions.
pub fn evaluate_packed(
    model: &PackedModel,
    bundles: &[LayerBundle],
    w4a8: bool,
) -> Result<EvalReport> {
    for b in bundles {
        if model.get(&b.name).is_none() {
            return Err(Error::Pairing {
                layer: b.name.clone(),
                message: "present in the archive but not in the packed model".into(),
            });
        }
    }
    let rows = model
        .layers
        .par_iter()
        .map(|(name, p)| {
            let b = bundles
                .iter()
                .find(|b| &b.name == name)
                .ok_or_else(|| Error::Pairing {
                    layer: name.clone(),
                    message: "present in the packed model but not in the archive".into(),
                })?;
            let q = unpack(p).map_err(|e| annotate(name, e))?;
            if q.rows() != b.weights.rows() || q.cols() != b.weights.cols() {
                return Err(Error::Pairing {
                    layer: name.clone(),
                    message: format!(
                        "packed shape {}x{} differs from archive {}x{}",
                        q.rows(),
                        q.cols(),
                        b.weights.rows(),
                        b.weights.cols()
                    ),
                });
            }
            evaluate_layer(b, &q, &effective_importance(b), w4a8)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, w4a8))
}

fn annotate(layer: &str, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("layer `{layer}`: {m}")),
        Error::Layout(m) => Error::Layout(format!("layer `{layer}`: {m}")),
        Error::UnsupportedConfig(m) => Error::UnsupportedConfig(format!("layer `{layer}`: {m}")),
        Error::Corruption(m) => Error::Corruption(format!("layer `{layer}`: {m}")),
        other => other,
    }
}
