//! Nearest-entry reconstruction, the RTN and IF4 baselines, and dequantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{
    base_table, check_group_layout, compute_scales, BaseFormat, ScaleMode, ScaleVector,
};
use crate::tensor::WeightMatrix;

pub const MAX_CODEBOOK_LEN: usize = 16;

/// Sorted (non-decreasing) scalar reconstruction table in normalized units.
///
/// Duplicates are allowed: BF16 rounding of a learned table can merge
/// neighbouring entries. Lookups always resolve ties to the lowest index.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(entries: Vec<f32>) -> Result<Self> {
        if entries.is_empty() || entries.len() > MAX_CODEBOOK_LEN {
            return Err(Error::validation(format!(
                "codebook needs 1..={MAX_CODEBOOK_LEN} entries, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("codebook entries must be finite"));
        }
        if entries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("codebook entries must be non-decreasing"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: usize) -> Option<f32> {
        self.entries.get(code).copied()
    }

    /// Index of the entry nearest to `x`, lowest index on ties. Binary search.
    pub fn nearest_index(&self, x: f32) -> usize {
        let t = &self.entries;
        let p = t.partition_point(|&v| v < x);
        if p == 0 {
            return 0;
        }
        let below = t[p - 1];
        let below_first = t.partition_point(|&v| v < below);
        if p == t.len() {
            return below_first;
        }
        let d_below = x as f64 - below as f64;
        let d_above = t[p] as f64 - x as f64;
        if d_above < d_below {
            p
        } else {
            below_first
        }
    }

    /// Nearest-entry reconstruction: `(code, table[code])`.
    pub fn recon(&self, x: f32) -> (u8, f32) {
        let i = self.nearest_index(x);
        (i as u8, self.entries[i])
    }

    /// Every entry rounded to BF16. Rounding is monotone, so order is kept.
    pub fn to_bf16(&self) -> Codebook {
        Codebook {
            entries: self
                .entries
                .iter()
                .map(|&v| crate::grids::round_bf16(v))
                .collect(),
        }
    }
}

/// Nearest-entry reconstruction operator.
pub fn recon(table: &Codebook, w_norm: f32) -> (u8, f32) {
    table.recon(w_norm)
}

/// `(w - r)^2` evaluated in f64.
#[inline]
pub(crate) fn sq_err(w: f32, r: f32) -> f64 {
    let d = w as f64 - r as f64;
    d * d
}

/// N x K grid of 4-bit codes, one byte per code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::validation(format!(
                "code matrix has {} codes, expected {rows}x{cols}",
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c >= 16) {
            return Err(Error::validation(format!(
                "code {c} does not fit in 4 bits"
            )));
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.codes[r * self.cols + c]
    }
}

/// One table-choice bit per selection group of `group_size` contiguous in-row weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMap {
    rows: usize,
    groups_per_row: usize,
    group_size: usize,
    bits: Vec<bool>,
}

impl SelectionMap {
    pub fn new(
        rows: usize,
        groups_per_row: usize,
        group_size: usize,
        bits: Vec<bool>,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::validation("selection group size must be >= 1"));
        }
        if bits.len() != rows * groups_per_row {
            return Err(Error::validation(format!(
                "selection map has {} bits, expected {rows}x{groups_per_row}",
                bits.len()
            )));
        }
        Ok(Self {
            rows,
            groups_per_row,
            group_size,
            bits,
        })
    }

    /// All-zero map (every group uses table 0).
    pub fn zeros(rows: usize, cols: usize, group_size: usize) -> Result<Self> {
        check_group_layout(cols, group_size, "selection group size S")?;
        let groups_per_row = cols / group_size;
        Self::new(
            rows,
            groups_per_row,
            group_size,
            vec![false; rows * groups_per_row],
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups_per_row(&self) -> usize {
        self.groups_per_row
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, row: usize, group: usize) -> bool {
        self.bits[row * self.groups_per_row + group]
    }

    pub fn for_element(&self, row: usize, col: usize) -> bool {
        self.get(row, col / self.group_size)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Quantization method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    If4,
    Aaac,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rtn, Method::If4, Method::Aaac];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::If4 => "if4",
            Method::Aaac => "aaac",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Method::Rtn => 0,
            Method::If4 => 1,
            Method::Aaac => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| {
                Error::validation(format!("unknown method `{s}` (supported: rtn, if4, aaac)"))
            })
    }
}

/// A quantized layer in its logical (unpacked) form.
///
/// RTN layers use the base table twice with an all-zero selection. IF4
/// layers use the FP4 table (padded to 16 entries) as table 0 and the INT4
/// table as table 1, with the per-group format bit as the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub method: Method,
    pub format: BaseFormat,
    pub tables: [Codebook; 2],
    pub selection: SelectionMap,
    pub codes: CodeMatrix,
    pub scales: ScaleVector,
}

impl QuantizedLayer {
    pub fn new(
        method: Method,
        format: BaseFormat,
        tables: [Codebook; 2],
        selection: SelectionMap,
        codes: CodeMatrix,
        scales: ScaleVector,
    ) -> Result<Self> {
        let layer = Self {
            method,
            format,
            tables,
            selection,
            codes,
            scales,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.codes.rows(), self.codes.cols());
        let g = self.scales.group_size();
        let s = self.selection.group_size();
        if self.tables[0].len() != self.tables[1].len() {
            return Err(Error::validation(
                "both tables must have the same number of entries",
            ));
        }
        if self.scales.rows() != n || self.scales.groups_per_row() * g != k {
            return Err(Error::validation(format!(
                "scales cover {}x{} groups of {g}, codes are {n}x{k}",
                self.scales.rows(),
                self.scales.groups_per_row()
            )));
        }
        if self.selection.rows() != n || self.selection.groups_per_row() * s != k {
            return Err(Error::validation(format!(
                "selection covers {}x{} groups of {s}, codes are {n}x{k}",
                self.selection.rows(),
                self.selection.groups_per_row()
            )));
        }
        let m = self.m();
        if let Some(c) = self.codes.codes().iter().find(|&&c| c as usize >= m) {
            return Err(Error::corruption(format!(
                "code {c} out of range for {m}-entry tables"
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.codes.rows()
    }

    pub fn cols(&self) -> usize {
        self.codes.cols()
    }

    pub fn m(&self) -> usize {
        self.tables[0].len()
    }

    pub fn scale_group(&self) -> usize {
        self.scales.group_size()
    }

    pub fn selection_group(&self) -> usize {
        self.selection.group_size()
    }

    pub fn dequantize(&self) -> Result<WeightMatrix> {
        dequantize(
            &self.codes,
            &self.scales,
            [&self.tables[0], &self.tables[1]],
            &self.selection,
        )
    }
}

/// `W_hat[n,k] = table_{sigma(n,k)}[code] * s(n,k)`.
pub fn dequantize(
    codes: &CodeMatrix,
    scales: &ScaleVector,
    tables: [&Codebook; 2],
    selection: &SelectionMap,
) -> Result<WeightMatrix> {
    let (n, k) = (codes.rows(), codes.cols());
    if scales.rows() != n || scales.groups_per_row() * scales.group_size() != k {
        return Err(Error::validation("scale layout does not match code matrix"));
    }
    if selection.rows() != n || selection.groups_per_row() * selection.group_size() != k {
        return Err(Error::validation(
            "selection layout does not match code matrix",
        ));
    }
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        for c in 0..k {
            let table = tables[selection.for_element(r, c) as usize];
            let code = codes.get(r, c);
            let v = table.get(code as usize).ok_or_else(|| {
                Error::corruption(format!(
                    "code {code} at ({r}, {c}) exceeds {}-entry table",
                    table.len()
                ))
            })?;
            out.push(v * scales.for_element(r, c));
        }
    }
    WeightMatrix::new(n, k, out)
}

/// Round-to-nearest under the base table with BF16-stored absmax scales.
pub fn rtn_quantize(
    w: &WeightMatrix,
    format: BaseFormat,
    g: usize,
    mode: ScaleMode,
) -> Result<(CodeMatrix, ScaleVector)> {
    let scales = compute_scales(w, format, g, mode)?.to_bf16();
    let table = base_table(format);
    let mut codes = Vec::with_capacity(w.data().len());
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            codes.push(table.recon(v / scales.for_element(r, c)).0);
        }
    }
    Ok((CodeMatrix::new(w.rows(), w.cols(), codes)?, scales))
}

/// RTN wrapped as a [`QuantizedLayer`] (both tables = base table, S = g).
pub fn rtn_layer(
    w: &WeightMatrix,
    format: BaseFormat,
    g: usize,
    mode: ScaleMode,
) -> Result<QuantizedLayer> {
    let (codes, scales) = rtn_quantize(w, format, g, mode)?;
    let table = base_table(format);
    let selection = SelectionMap::zeros(w.rows(), w.cols(), g)?;
    QuantizedLayer::new(
        Method::Rtn,
        format,
        [table.clone(), table],
        selection,
        codes,
        scales,
    )
}

/// Table 0 of an IF4 layer: the FP4 grid padded with a repeated maximum so
/// both tables share 16 entries. The pad is never produced by lookups.
pub fn if4_fp4_table() -> Codebook {
    let mut entries = base_table(BaseFormat::Nvfp4).entries().to_vec();
    entries.push(*entries.last().unwrap());
    Codebook::new(entries).expect("padded FP4 table is valid")
}

/// Per-group choice between FP4 (absmax/6 scale) and INT4 (absmax/8 scale).
///
/// Errors are compared in de-normalized units; ties keep FP4. Returns the
/// codes, the scale of the chosen option for each group, and one bit per
/// group (`true` = INT4).
pub fn if4_quantize(w: &WeightMatrix, g: usize) -> Result<(CodeMatrix, ScaleVector, Vec<bool>)> {
    let fp4_scales = compute_scales(w, BaseFormat::Nvfp4, g, ScaleMode::ExactBf16)?.to_bf16();
    let int4_scales = compute_scales(w, BaseFormat::Int4, g, ScaleMode::ExactBf16)?.to_bf16();
    let fp4 = if4_fp4_table();
    let int4 = base_table(BaseFormat::Int4);

    let groups_per_row = w.cols() / g;
    let mut codes = Vec::with_capacity(w.data().len());
    let mut scales = Vec::with_capacity(w.rows() * groups_per_row);
    let mut bits = Vec::with_capacity(w.rows() * groups_per_row);
    let mut fp4_codes = Vec::with_capacity(g);
    let mut int4_codes = Vec::with_capacity(g);

    for r in 0..w.rows() {
        for (j, group) in w.row(r).chunks_exact(g).enumerate() {
            let (s_fp, s_int) = (fp4_scales.get(r, j), int4_scales.get(r, j));
            fp4_codes.clear();
            int4_codes.clear();
            let (mut err_fp, mut err_int) = (0.0f64, 0.0f64);
            for &v in group {
                let (cf, tf) = fp4.recon(v / s_fp);
                let (ci, ti) = int4.recon(v / s_int);
                err_fp += sq_err(v, tf * s_fp);
                err_int += sq_err(v, ti * s_int);
                fp4_codes.push(cf);
                int4_codes.push(ci);
            }
            let use_int4 = err_int < err_fp;
            bits.push(use_int4);
            if use_int4 {
                scales.push(s_int);
                codes.extend_from_slice(&int4_codes);
            } else {
                scales.push(s_fp);
                codes.extend_from_slice(&fp4_codes);
            }
        }
    }
    Ok((
        CodeMatrix::new(w.rows(), w.cols(), codes)?,
        ScaleVector::new(w.rows(), groups_per_row, g, scales)?,
        bits,
    ))
}

/// IF4 wrapped as a [`QuantizedLayer`]; the format bit is the selection (S = g).
pub fn if4_layer(w: &WeightMatrix, g: usize) -> Result<QuantizedLayer> {
    let (codes, scales, bits) = if4_quantize(w, g)?;
    let selection = SelectionMap::new(w.rows(), w.cols() / g, g, bits)?;
    QuantizedLayer::new(
        Method::If4,
        BaseFormat::Nvfp4,
        [if4_fp4_table(), base_table(BaseFormat::Int4)],
        selection,
        codes,
        scales,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nearest(t: &[f32], x: f32) -> usize {
        let mut best = 0;
        for (i, &v) in t.iter().enumerate() {
            if sq_err(x, v) < sq_err(x, t[best]) {
                best = i;
            }
        }
        best
    }

    #[test]
    fn recon_examples() {
        let t = base_table(BaseFormat::Nvfp4);
        assert_eq!(recon(&t, 0.7).1, 0.5);
        assert_eq!(brute_nearest(t.entries(), 0.7), t.nearest_index(0.7));
        assert_eq!(recon(&t, 0.75).1, 0.5);
        for (k, &v) in t.entries().iter().enumerate() {
            assert_eq!(recon(&t, v), (k as u8, v));
        }
        assert_eq!(recon(&t, 100.0).1, 6.0);
        assert_eq!(recon(&t, -100.0).1, -6.0);
    }

    #[test]
    fn recon_prefers_first_duplicate() {
        let t = Codebook::new(vec![0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.nearest_index(0.9), 1);
        assert_eq!(t.nearest_index(1.2), 1);
        assert_eq!(t.nearest_index(1.5), 1);
        let t = Codebook::new(vec![3.0, 3.0]).unwrap();
        assert_eq!(t.nearest_index(9.0), 0);
        assert_eq!(t.nearest_index(-9.0), 0);
    }

    #[test]
    fn codebook_validation() {
        assert!(Codebook::new(vec![]).is_err());
        assert!(Codebook::new(vec![0.0; 17]).is_err());
        assert!(Codebook::new(vec![1.0, 0.0]).is_err());
        assert!(Codebook::new(vec![f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn binary_search_matches_exhaustive(
            mut entries in prop::collection::vec(-8.0f32..8.0, 1..=16),
            x in -10.0f32..10.0,
            pick in 0usize..16,
        ) {
            entries.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = Codebook::new(entries.clone()).unwrap();
            prop_assert_eq!(t.nearest_index(x), brute_nearest(&entries, x));
            let i = pick % entries.len();
            if i + 1 < entries.len() {
                let mid = (entries[i] + entries[i + 1]) / 2.0;
                prop_assert_eq!(t.nearest_index(mid), brute_nearest(&entries, mid));
            }
        }
    }

    #[test]
    fn rtn_hand_trace() {
        let mut row = vec![0.0f32; 16];
        row[..3].copy_from_slice(&[3.0, 1.4, -0.1]);
        let w = WeightMatrix::new(1, 16, row).unwrap();
        let layer = rtn_layer(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16).unwrap();
        assert_eq!(layer.scales.values(), &[0.5]);
        let d = layer.dequantize().unwrap();
        assert_eq!(&d.data()[..4], &[3.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn rtn_on_grid_is_exact() {
        let t = base_table(BaseFormat::Nvfp4);
        let mut row: Vec<f32> = t.entries().iter().map(|v| v * 0.25).collect();
        row.push(0.0);
        let w = WeightMatrix::new(1, 16, row.clone()).unwrap();
        let layer = rtn_layer(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16).unwrap();
        assert_eq!(layer.dequantize().unwrap().data(), &row[..]);
    }

    #[test]
    fn rtn_all_zero() {
        let w = WeightMatrix::new(2, 32, vec![0.0; 64]).unwrap();
        for fmt in [BaseFormat::Nvfp4, BaseFormat::Int4] {
            let (codes, _) = rtn_quantize(&w, fmt, 16, ScaleMode::ExactBf16).unwrap();
            let zero = base_table(fmt)
                .entries()
                .iter()
                .position(|v| *v == 0.0)
                .unwrap() as u8;
            assert!(codes.codes().iter().all(|&c| c == zero));
            let layer = rtn_layer(&w, fmt, 16, ScaleMode::ExactBf16).unwrap();
            assert!(layer.dequantize().unwrap().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn dequantize_max_entry() {
        let t = base_table(BaseFormat::Int4);
        let codes = CodeMatrix::new(1, 4, vec![15; 4]).unwrap();
        let scales = ScaleVector::new(1, 1, 4, vec![1.0]).unwrap();
        let sel = SelectionMap::zeros(1, 4, 4).unwrap();
        let d = dequantize(&codes, &scales, [&t, &t], &sel).unwrap();
        assert_eq!(d.data(), &[7.0; 4]);
        let nv = base_table(BaseFormat::Nvfp4);
        assert!(matches!(
            dequantize(&codes, &scales, [&nv, &nv], &sel),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn dequantize_error_matches_scalar_loop() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..8 * 64)
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect();
        let w = WeightMatrix::new(8, 64, data).unwrap();
        let layer = rtn_layer(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16).unwrap();
        let d = layer.dequantize().unwrap();
        let got: f64 = w
            .data()
            .iter()
            .zip(d.data())
            .map(|(a, b)| sq_err(*a, *b))
            .sum();

        let table = [
            -6.0f32, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
        ];
        let mut want = 0.0f64;
        for r in 0..8 {
            for j in 0..4 {
                let grp = &w.row(r)[j * 16..(j + 1) * 16];
                let amax = grp.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let s = crate::grids::round_bf16(amax / 6.0);
                for &v in grp {
                    let x = v / s;
                    let mut best = table[0];
                    for &t in &table {
                        if (x - t).abs() < (x - best).abs() {
                            best = t;
                        }
                    }
                    want += ((v - best * s) as f64).powi(2);
                }
            }
        }
        assert!(
            (got - want).abs() <= 1e-9 * want.max(1e-30),
            "{got} vs {want}"
        );
    }

    #[test]
    fn if4_on_fp4_grid_selects_fp4() {
        let row: Vec<f32> = [
            -6.0f32, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
            6.0,
        ]
        .to_vec();
        let w = WeightMatrix::new(1, 16, row.clone()).unwrap();
        let (_, _, bits) = if4_quantize(&w, 16).unwrap();
        assert_eq!(bits, vec![false]);
        let layer = if4_layer(&w, 16).unwrap();
        assert_eq!(layer.dequantize().unwrap().data(), &row[..]);
    }

    fn group_mse(vals: &[f32], table: &[f32], s: f32) -> f64 {
        vals.iter()
            .map(|&v| {
                let x = v / s;
                let best =
                    table.iter().fold(
                        table[0],
                        |b, &t| if (x - t).abs() < (x - b).abs() { t } else { b },
                    );
                sq_err(v, best * s)
            })
            .sum()
    }

    #[test]
    fn if4_uniform_spacing_selects_int4() {
        let row: Vec<f32> = (0..16).map(|i| -1.0 + 2.0 * i as f32 / 15.0).collect();
        let fp4: Vec<f32> = base_table(BaseFormat::Nvfp4).entries().to_vec();
        let int4: Vec<f32> = (-8..=7).map(|v| v as f32).collect();
        let e_fp = group_mse(&row, &fp4, crate::grids::round_bf16(1.0 / 6.0));
        let e_int = group_mse(&row, &int4, crate::grids::round_bf16(1.0 / 8.0));
        assert!(e_int < e_fp);
        let w = WeightMatrix::new(1, 16, row).unwrap();
        assert_eq!(if4_quantize(&w, 16).unwrap().2, vec![true]);
    }

    #[test]
    fn if4_tie_prefers_fp4() {
        // absmax 24: FP4 scale 4, INT4 scale 3, both exact in BF16; {-24, 0, 12}
        // lands on {-6, 0, 3} and {-8, 0, 4}, so both options are lossless
        let mut row = vec![0.0f32; 16];
        row[..2].copy_from_slice(&[-24.0, 12.0]);
        let w = WeightMatrix::new(1, 16, row).unwrap();
        let fp4: Vec<f32> = base_table(BaseFormat::Nvfp4).entries().to_vec();
        let int4: Vec<f32> = (-8..=7).map(|v| v as f32).collect();
        assert_eq!(group_mse(w.data(), &fp4, 4.0), 0.0);
        assert_eq!(group_mse(w.data(), &int4, 3.0), 0.0);
        assert_eq!(if4_quantize(&w, 16).unwrap().2, vec![false]);

        let w = WeightMatrix::new(1, 16, vec![0.0; 16]).unwrap();
        assert_eq!(if4_quantize(&w, 16).unwrap().2, vec![false]);
    }

    #[test]
    fn if4_never_worse_than_rtn_fp4() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..16 * 128)
            .map(|_| rng.random_range(-1.0f32..1.0).powi(3))
            .collect();
        let w = WeightMatrix::new(16, 128, data).unwrap();
        let rtn = rtn_layer(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16)
            .unwrap()
            .dequantize()
            .unwrap();
        let if4 = if4_layer(&w, 16).unwrap().dequantize().unwrap();
        for (gi, (a, b)) in rtn.data().chunks(16).zip(if4.data().chunks(16)).enumerate() {
            let orig = &w.data()[gi * 16..(gi + 1) * 16];
            let e_rtn: f64 = orig.iter().zip(a).map(|(x, y)| sq_err(*x, *y)).sum();
            let e_if4: f64 = orig.iter().zip(b).map(|(x, y)| sq_err(*x, *y)).sum();
            assert!(e_if4 <= e_rtn);
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("AAAC".parse::<Method>().unwrap(), Method::Aaac);
        let err = "gptq".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("rtn, if4, aaac"));
    }
}
