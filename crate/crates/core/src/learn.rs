//! Activation-aware learning of two per-layer scalar codebooks.
//!
//! For one layer the learner:
//!
//! 1. computes BF16 absmax scales per group of `g` weights and normalizes `w~ = w / s`;
//! 2. computes per-column importance `I_k = sum_t X[t,k]^2`;
//! 3. initializes table 0 from evenly spaced quantiles of all normalized
//!    weights and table 1 from the same quantiles shifted by half a step;
//! 4. alternates `n_outer` times between assigning every selection group of
//!    `S` weights to the table with the lower importance-weighted error and
//!    refining each table with `n_inner` importance-weighted Lloyd iterations
//!    over the weights assigned to it;
//! 5. rounds both tables to BF16, re-selects, and emits nearest-entry codes.
//!
//! The objective tracked throughout is `sum I_k (w~ - recon(w~))^2` in
//! normalized units. Every assignment step and every Lloyd iteration is
//! recorded so that monotonicity can be checked step by step.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grids::{check_group_layout, compute_scales, BaseFormat, ScaleMode, ScaleVector};
use crate::quant::{sq_err, CodeMatrix, Codebook, Method, QuantizedLayer, SelectionMap};
use crate::tensor::{ActivationMatrix, LayerBundle, WeightMatrix};

/// Non-negative per-input-column importance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation(format!(
                "importance {i} must be finite and non-negative, got {}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    /// Unit importance: the unweighted objective.
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

/// `I_k = sum_t X[t,k]^2`, accumulated in f64.
pub fn importance(x: &ActivationMatrix) -> ImportanceVector {
    let mut acc = vec![0.0f64; x.cols()];
    for t in 0..x.rows() {
        for (a, &v) in acc.iter_mut().zip(x.row(t)) {
            let v = v as f64;
            *a += v * v;
        }
    }
    ImportanceVector(acc)
}

/// Importance used by the learner: from activations when present, unit
/// importance when absent or identically zero.
pub fn effective_importance(layer: &LayerBundle) -> ImportanceVector {
    match &layer.activations {
        Some(x) => {
            let imp = importance(x);
            if imp.is_all_zero() {
                ImportanceVector::ones(x.cols())
            } else {
                imp
            }
        }
        None => ImportanceVector::ones(layer.weights.cols()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AaacConfig {
    pub format: BaseFormat,
    /// Scale group size `g`.
    pub g: usize,
    /// Selection group size `S`; must divide `g`.
    pub s: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    pub scale_mode: ScaleMode,
}

impl AaacConfig {
    pub const DEFAULT_OUTER: usize = 3;
    pub const DEFAULT_INNER: usize = 10;

    /// Format defaults: `g = S = 16` for NVFP4, `g = S = 128` for INT4.
    pub fn for_format(format: BaseFormat) -> Self {
        let g = format.default_group_size();
        Self {
            format,
            g,
            s: g,
            n_outer: Self::DEFAULT_OUTER,
            n_inner: Self::DEFAULT_INNER,
            scale_mode: ScaleMode::ExactBf16,
        }
    }

    pub fn with_groups(mut self, g: usize, s: usize) -> Self {
        self.g = g;
        self.s = s;
        self
    }

    pub fn with_iterations(mut self, n_outer: usize, n_inner: usize) -> Self {
        self.n_outer = n_outer;
        self.n_inner = n_inner;
        self
    }

    /// Checks the configuration alone (no layer shape).
    pub fn check(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(Error::validation(format!(
                "iteration counts must be >= 1 (outer={}, inner={})",
                self.n_outer, self.n_inner
            )));
        }
        if self.g == 0 || self.s == 0 {
            return Err(Error::validation("group sizes must be >= 1"));
        }
        if self.s > self.g {
            return Err(Error::UnsupportedConfig(format!(
                "selection group S={} larger than scale group g={}",
                self.s, self.g
            )));
        }
        if !self.g.is_multiple_of(self.s) {
            return Err(Error::UnsupportedConfig(format!(
                "selection group S={} does not divide scale group g={}",
                self.s, self.g
            )));
        }
        Ok(())
    }

    /// Checks the configuration against a layer with `k` input columns.
    pub fn validate(&self, k: usize) -> Result<()> {
        self.check()?;
        check_group_layout(k, self.g, "scale group size g")?;
        check_group_layout(k, self.s, "selection group size S")
    }
}

/// Divides every weight by its group's scale.
pub fn normalize(w: &WeightMatrix, scales: &ScaleVector) -> Result<WeightMatrix> {
    let mut out = Vec::with_capacity(w.data().len());
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            out.push(v / scales.for_element(r, c));
        }
    }
    WeightMatrix::new(w.rows(), w.cols(), out)
}

/// `q`-quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f32], q: f64) -> f32 {
    let n = sorted.len();
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[lo + 1] as f64);
    (a + frac * (b - a)) as f32
}

/// Quantile initialization of both tables from the normalized weights.
///
/// Table 0 takes quantiles `i / (M-1)`; table 1 takes `d + (1-d) i / (M-1)`
/// with `d = 1 / (2(M-1))`, ending at the maximum.
pub fn init_tables(w_norm: &[f32], m: usize) -> Result<(Codebook, Codebook)> {
    if w_norm.is_empty() {
        return Err(Error::validation(
            "cannot initialize tables from an empty weight set",
        ));
    }
    if m < 2 {
        return Err(Error::validation(format!(
            "tables need at least 2 entries, got {m}"
        )));
    }
    let mut sorted = w_norm.to_vec();
    sorted.sort_by(f32::total_cmp);
    let span = (m - 1) as f64;
    let delta = 1.0 / (2.0 * span);
    let t0 = (0..m).map(|i| quantile(&sorted, i as f64 / span)).collect();
    let t1 = (0..m)
        .map(|i| {
            let q = if i == m - 1 {
                1.0
            } else {
                delta + (1.0 - delta) * i as f64 / span
            };
            quantile(&sorted, q)
        })
        .collect();
    Ok((Codebook::new(t0)?, Codebook::new(t1)?))
}

/// Importance-weighted and unweighted error of one group under `table`.
fn group_error(vals: &[f32], imp: &[f64], table: &Codebook) -> (f64, f64) {
    let (mut weighted, mut plain) = (0.0, 0.0);
    for (&v, &i) in vals.iter().zip(imp) {
        let e = sq_err(v, table.recon(v).1);
        weighted += i * e;
        plain += e;
    }
    (weighted, plain)
}

struct Assignment {
    bits: Vec<bool>,
    /// Weighted error of the groups assigned to each table.
    sse: [f64; 2],
}

fn assign_groups(
    w_norm: &WeightMatrix,
    imp: &[f64],
    tables: [&Codebook; 2],
    s: usize,
) -> Assignment {
    let mut bits = Vec::with_capacity(w_norm.data().len() / s);
    let mut sse = [0.0f64; 2];
    for r in 0..w_norm.rows() {
        for (vals, gi) in w_norm.row(r).chunks_exact(s).zip(imp.chunks_exact(s)) {
            let (w0, p0) = group_error(vals, gi, tables[0]);
            let (w1, p1) = group_error(vals, gi, tables[1]);
            let total_importance: f64 = gi.iter().sum();
            let pick_one = if total_importance == 0.0 {
                p1 < p0
            } else {
                w1 < w0
            };
            bits.push(pick_one);
            if pick_one {
                sse[1] += w1;
            } else {
                sse[0] += w0;
            }
        }
    }
    Assignment { bits, sse }
}

/// Table choice per selection group: the table with the lower
/// importance-weighted error, table 0 on ties. Groups whose importance is all
/// zero are decided by unweighted error.
pub fn select_tables(
    w_norm: &WeightMatrix,
    imp: &ImportanceVector,
    t0: &Codebook,
    t1: &Codebook,
    s: usize,
) -> Result<SelectionMap> {
    check_group_layout(w_norm.cols(), s, "selection group size S")?;
    if imp.len() != w_norm.cols() {
        return Err(Error::validation(format!(
            "importance has {} entries, weights have {} columns",
            imp.len(),
            w_norm.cols()
        )));
    }
    let a = assign_groups(w_norm, imp.values(), [t0, t1], s);
    SelectionMap::new(w_norm.rows(), w_norm.cols() / s, s, a.bits)
}

/// Nearest entry of a possibly unsorted table, lowest index on ties.
struct NearestLookup {
    /// `(value, original index)` sorted by value, then index.
    sorted: Vec<(f32, usize)>,
}

impl NearestLookup {
    fn new(table: &[f32]) -> Self {
        let mut sorted: Vec<(f32, usize)> = table.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self { sorted }
    }

    fn nearest(&self, x: f32) -> usize {
        let t = &self.sorted;
        let p = t.partition_point(|e| e.0 < x);
        let above = (p < t.len()).then(|| (t[p].0 as f64 - x as f64, t[p].1));
        let below = (p > 0).then(|| {
            let v = t[p - 1].0;
            let first = t.partition_point(|e| e.0 < v);
            (x as f64 - v as f64, t[first].1)
        });
        match (below, above) {
            (Some((db, ib)), Some((da, ia))) => {
                if da < db {
                    ia
                } else if db < da {
                    ib
                } else {
                    ib.min(ia)
                }
            }
            (Some((_, i)), None) | (None, Some((_, i))) => i,
            (None, None) => unreachable!("tables are never empty"),
        }
    }
}

/// One Lloyd assignment pass: weighted SSE under `table` and per-cell sums.
fn lloyd_pass(table: &[f32], members: &[(f32, f64)]) -> (f64, Vec<f64>, Vec<f64>) {
    let lookup = NearestLookup::new(table);
    let mut num = vec![0.0f64; table.len()];
    let mut den = vec![0.0f64; table.len()];
    let mut sse = 0.0;
    for &(w, i) in members {
        let c = lookup.nearest(w);
        sse += i * sq_err(w, table[c]);
        num[c] += i * w as f64;
        den[c] += i;
    }
    (sse, num, den)
}

/// Runs `n_inner` Lloyd iterations in place and returns the weighted SSE
/// after each one. Cells with zero total importance keep their entry.
/// The table is left unsorted.
fn lloyd(table: &mut [f32], members: &[(f32, f64)], n_inner: usize) -> Vec<f64> {
    let (_, mut num, mut den) = lloyd_pass(table, members);
    let mut history = Vec::with_capacity(n_inner);
    for _ in 0..n_inner {
        for ((t, n), d) in table.iter_mut().zip(&num).zip(&den) {
            if *d > 0.0 {
                *t = (n / d) as f32;
            }
        }
        let (sse, n2, d2) = lloyd_pass(table, members);
        history.push(sse);
        num = n2;
        den = d2;
    }
    history
}

/// `n_inner` importance-weighted Lloyd iterations over `(w~, I)` members,
/// then sorted ascending.
pub fn kmeans_update(table: &Codebook, members: &[(f32, f64)], n_inner: usize) -> Codebook {
    let mut entries = table.entries().to_vec();
    lloyd(&mut entries, members, n_inner);
    entries.sort_by(f32::total_cmp);
    Codebook::new(entries).expect("centroids of finite members are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum TraceStep {
    Assignment {
        outer: usize,
    },
    Update {
        outer: usize,
        table: usize,
        iteration: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    #[serde(flatten)]
    pub step: TraceStep,
    /// Weighted objective in normalized units, before BF16 rounding.
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct LearnOutput {
    pub layer: QuantizedLayer,
    pub trace: Vec<TracePoint>,
    pub importance: ImportanceVector,
    pub initial_tables: [Codebook; 2],
    /// Objective with every group on the initial quantile table 0.
    pub initial_t0_objective: f64,
    /// Learned tables before BF16 rounding.
    pub unrounded_tables: [Codebook; 2],
}

impl LearnOutput {
    /// Last recorded objective (pre-rounding).
    pub fn final_objective(&self) -> f64 {
        self.trace
            .last()
            .map_or(self.initial_t0_objective, |p| p.objective)
    }
}

/// Learns two codebooks for one layer and encodes it.
pub fn learn(layer: &LayerBundle, cfg: &AaacConfig) -> Result<LearnOutput> {
    let w = &layer.weights;
    cfg.validate(w.cols())?;
    let imp = effective_importance(layer);
    learn_with_importance(w, &imp, cfg)
}

/// [`learn`] with an explicit importance vector (all-zero falls back to unit).
pub fn learn_with_importance(
    w: &WeightMatrix,
    imp: &ImportanceVector,
    cfg: &AaacConfig,
) -> Result<LearnOutput> {
    cfg.validate(w.cols())?;
    if imp.len() != w.cols() {
        return Err(Error::validation(format!(
            "importance has {} entries, weights have {} columns",
            imp.len(),
            w.cols()
        )));
    }
    let imp = if imp.is_all_zero() {
        ImportanceVector::ones(w.cols())
    } else {
        imp.clone()
    };

    let scales = compute_scales(w, cfg.format, cfg.g, cfg.scale_mode)?.to_bf16();
    let w_norm = normalize(w, &scales)?;
    let m = cfg.format.table_len();
    let (init0, init1) = init_tables(w_norm.data(), m)?;

    let initial_t0_objective = {
        let a = assign_groups(&w_norm, imp.values(), [&init0, &init0], cfg.s);
        a.sse[0] + a.sse[1]
    };

    let mut tables = [init0.entries().to_vec(), init1.entries().to_vec()];
    let mut trace = Vec::with_capacity(cfg.n_outer * (1 + 2 * cfg.n_inner));
    let imp_row = imp.values();

    for outer in 0..cfg.n_outer {
        let books = [
            Codebook::new(tables[0].clone())?,
            Codebook::new(tables[1].clone())?,
        ];
        let a = assign_groups(&w_norm, imp_row, [&books[0], &books[1]], cfg.s);
        trace.push(TracePoint {
            step: TraceStep::Assignment { outer },
            objective: a.sse[0] + a.sse[1],
        });

        let mut members: [Vec<(f32, f64)>; 2] = [Vec::new(), Vec::new()];
        let groups_per_row = w.cols() / cfg.s;
        for r in 0..w_norm.rows() {
            let row = w_norm.row(r);
            for j in 0..groups_per_row {
                let bucket = &mut members[a.bits[r * groups_per_row + j] as usize];
                let cols = j * cfg.s..(j + 1) * cfg.s;
                bucket.extend(
                    row[cols.clone()]
                        .iter()
                        .copied()
                        .zip(imp_row[cols].iter().copied()),
                );
            }
        }

        let mut sse = a.sse;
        for (r, table) in tables.iter_mut().enumerate() {
            for (iteration, value) in lloyd(table, &members[r], cfg.n_inner)
                .into_iter()
                .enumerate()
            {
                sse[r] = value;
                trace.push(TracePoint {
                    step: TraceStep::Update {
                        outer,
                        table: r,
                        iteration,
                    },
                    objective: sse[0] + sse[1],
                });
            }
            table.sort_by(f32::total_cmp);
        }
    }

    let unrounded = [
        Codebook::new(tables[0].clone())?,
        Codebook::new(tables[1].clone())?,
    ];
    let rounded = [unrounded[0].to_bf16(), unrounded[1].to_bf16()];
    let selection = select_tables(&w_norm, &imp, &rounded[0], &rounded[1], cfg.s)?;

    let mut codes = Vec::with_capacity(w_norm.data().len());
    for r in 0..w_norm.rows() {
        for (c, &v) in w_norm.row(r).iter().enumerate() {
            codes.push(rounded[selection.for_element(r, c) as usize].recon(v).0);
        }
    }
    let codes = CodeMatrix::new(w.rows(), w.cols(), codes)?;
    let layer = QuantizedLayer::new(Method::Aaac, cfg.format, rounded, selection, codes, scales)?;

    Ok(LearnOutput {
        layer,
        trace,
        importance: imp,
        initial_tables: [init0, init1],
        initial_t0_objective,
        unrounded_tables: unrounded,
    })
}

/// `sum_{n,k} I_k (W[n,k] - W_hat[n,k])^2` in de-normalized units.
pub fn weighted_error(
    w: &WeightMatrix,
    w_hat: &WeightMatrix,
    imp: &ImportanceVector,
) -> Result<f64> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || imp.len() != w.cols() {
        return Err(Error::validation(format!(
            "shape mismatch: W {}x{}, W_hat {}x{}, importance {}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols(),
            imp.len()
        )));
    }
    let mut total = 0.0f64;
    for r in 0..w.rows() {
        for ((&a, &b), &i) in w.row(r).iter().zip(w_hat.row(r)).zip(imp.values()) {
            total += i * sq_err(a, b);
        }
    }
    Ok(total)
}
