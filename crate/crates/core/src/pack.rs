//! Bit-exact `.aaacq` container for quantized layers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! file     := "AAACQ\0" u16:version u32:layer_count  pad16
//!             layer*
//! layer    := u16:name_len name[name_len]
//!             u8:format u32:N u32:K u16:g u16:S u8:M u8:flags
//!             u32:crc32(sections)                     pad16
//! sections := codebooks  pad16       2*M BF16 words (table 0 then table 1)
//!             scales     pad16       one BF16 word per scale group, row-major
//!             codes      pad16       ceil(N*K/2) bytes, low nibble = even flat index
//!             [bitset    pad16]      ceil(N*K/S/8) bytes, LSB-first, iff S < g
//! ```
//!
//! `flags` bit 0 marks the bitset, bits 1..=2 hold the method. When `S == g`
//! the sign bit of each scale word carries that group's table choice. Every
//! layer record starts on a 16-byte boundary, so every section does too.

use half::bf16;

use crate::error::{Error, Result};
use crate::grids::{BaseFormat, ScaleVector};
use crate::quant::{CodeMatrix, Codebook, Method, QuantizedLayer, SelectionMap};

pub const MAGIC: &[u8; 6] = b"AAACQ\0";
pub const VERSION: u16 = 1;
pub const ALIGN: usize = 16;

const FLAG_BITSET: u8 = 0b001;
const METHOD_SHIFT: u8 = 1;
const METHOD_MASK: u8 = 0b110;
const SIGN_BIT: u16 = 0x8000;
/// format + N + K + g + S + M + flags
const HEADER_LEN: usize = 1 + 4 + 4 + 2 + 2 + 1 + 1;
const CRC_LEN: usize = 4;
const FILE_HEADER_LEN: usize = 6 + 2 + 4;

fn pad(len: usize) -> usize {
    len.div_ceil(ALIGN) * ALIGN
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedHeader {
    pub format: BaseFormat,
    pub method: Method,
    pub rows: u32,
    pub cols: u32,
    pub g: u16,
    pub s: u16,
    pub m: u8,
}

impl PackedHeader {
    pub fn elements(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn scale_groups(&self) -> usize {
        self.elements() / self.g as usize
    }

    pub fn selection_groups(&self) -> usize {
        self.elements() / self.s as usize
    }

    pub fn has_bitset(&self) -> bool {
        self.s < self.g
    }

    fn flags(&self) -> u8 {
        let mut f = self.method.code() << METHOD_SHIFT;
        if self.has_bitset() {
            f |= FLAG_BITSET;
        }
        f
    }

    fn check(&self) -> Result<()> {
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
                "selection group S={} does not divide g={}",
                self.s, self.g
            )));
        }
        if self.rows == 0 || self.cols == 0 || !self.cols.is_multiple_of(self.g as u32) {
            return Err(Error::layout(format!(
                "K={} must be a positive multiple of g={} (N={})",
                self.cols, self.g, self.rows
            )));
        }
        if self.m == 0 || self.m > 16 {
            return Err(Error::validation(format!("M={} outside 1..=16", self.m)));
        }
        Ok(())
    }
}

/// Byte accounting for one packed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedSize {
    /// Fixed header plus CRC (name excluded).
    pub header: usize,
    pub codebooks: usize,
    pub scales: usize,
    pub codes: usize,
    pub bitset: usize,
}

impl PackedSize {
    /// `header + 4M + 2*(scale groups) + ceil(NK/2) + bitset`.
    pub fn payload(&self) -> usize {
        self.header + self.codebooks + self.scales + self.codes + self.bitset
    }

    /// On-disk length of the layer record including its name and alignment padding.
    pub fn record_len(&self, name_len: usize) -> usize {
        let sections = pad(self.codebooks) + pad(self.scales) + pad(self.codes);
        let bitset = if self.bitset > 0 { pad(self.bitset) } else { 0 };
        pad(2 + name_len + self.header) + sections + bitset
    }

    /// Selection overhead in bits per weight: `1/S` with a bitset, else 0.
    pub fn selection_bpw(header: &PackedHeader) -> f64 {
        if header.has_bitset() {
            1.0 / header.s as f64
        } else {
            0.0
        }
    }
}

pub fn packed_size(header: &PackedHeader) -> PackedSize {
    let n = header.elements();
    PackedSize {
        header: HEADER_LEN + CRC_LEN,
        codebooks: 2 * header.m as usize * 2,
        scales: 2 * header.scale_groups(),
        codes: n.div_ceil(2),
        bitset: if header.has_bitset() {
            header.selection_groups().div_ceil(8)
        } else {
            0
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedLayer {
    pub header: PackedHeader,
    /// BF16 bit patterns of table 0 and table 1.
    pub codebooks: [Vec<u16>; 2],
    /// BF16 bit patterns; the sign bit is the selection when `S == g`.
    pub scales: Vec<u16>,
    pub codes: Vec<u8>,
    pub bitset: Option<Vec<u8>>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{what}={v} exceeds u32")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::validation(format!("{what}={v} exceeds u16")))
}

/// Packs a quantized layer. Scales are rounded to BF16 before the selection
/// bit is written into their sign.
pub fn pack(layer: &QuantizedLayer) -> Result<PackedLayer> {
    let (g, s) = (layer.scale_group(), layer.selection_group());
    if s > g {
        return Err(Error::UnsupportedConfig(format!(
            "selection group S={s} larger than scale group g={g}"
        )));
    }
    layer.validate()?;
    let header = PackedHeader {
        format: layer.format,
        method: layer.method,
        rows: to_u32(layer.rows(), "N")?,
        cols: to_u32(layer.cols(), "K")?,
        g: to_u16(g, "g")?,
        s: to_u16(s, "S")?,
        m: layer.m() as u8,
    };
    header.check()?;

    let codebooks = [0, 1].map(|t| {
        layer.tables[t]
            .entries()
            .iter()
            .map(|v| bf16::from_f32(*v).to_bits())
            .collect::<Vec<_>>()
    });

    let sign_in_scale = !header.has_bitset();
    let groups_per_row = layer.scales.groups_per_row();
    let mut scales = Vec::with_capacity(layer.scales.values().len());
    for r in 0..layer.rows() {
        for j in 0..groups_per_row {
            let magnitude = bf16::from_f32(layer.scales.get(r, j)).to_bits() & !SIGN_BIT;
            if magnitude == 0 || magnitude >= 0x7f80 {
                return Err(Error::validation(format!(
                    "scale ({r}, {j}) = {} is not representable as a positive finite BF16",
                    layer.scales.get(r, j)
                )));
            }
            let sign = if sign_in_scale && layer.selection.get(r, j) {
                SIGN_BIT
            } else {
                0
            };
            scales.push(magnitude | sign);
        }
    }

    let codes = layer
        .codes
        .codes()
        .chunks(2)
        .map(|pair| pair[0] | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect();

    let bitset = header.has_bitset().then(|| {
        let mut bytes = vec![0u8; header.selection_groups().div_ceil(8)];
        for (j, &bit) in layer.selection.bits().iter().enumerate() {
            if bit {
                bytes[j / 8] |= 1 << (j % 8);
            }
        }
        bytes
    });

    Ok(PackedLayer {
        header,
        codebooks,
        scales,
        codes,
        bitset,
    })
}

/// Recovers the logical layer. Scale magnitudes come back as their BF16 values.
pub fn unpack(p: &PackedLayer) -> Result<QuantizedLayer> {
    let h = &p.header;
    h.check()
        .map_err(|e| Error::corruption(format!("bad header: {e}")))?;
    let (n, k, g, s, m) = (
        h.rows as usize,
        h.cols as usize,
        h.g as usize,
        h.s as usize,
        h.m as usize,
    );
    let size = packed_size(h);

    let tables = [0, 1].map(|t| -> Result<Codebook> {
        let bits = &p.codebooks[t];
        if bits.len() != m {
            return Err(Error::corruption(format!(
                "table {t} has {} entries, header says {m}",
                bits.len()
            )));
        }
        Codebook::new(bits.iter().map(|b| bf16::from_bits(*b).to_f32()).collect())
            .map_err(|e| Error::corruption(format!("table {t}: {e}")))
    });
    let [t0, t1] = tables;
    let tables = [t0?, t1?];

    if p.scales.len() != h.scale_groups() {
        return Err(Error::corruption(format!(
            "{} scales stored, header implies {}",
            p.scales.len(),
            h.scale_groups()
        )));
    }
    let sign_in_scale = !h.has_bitset();
    let mut scales = Vec::with_capacity(p.scales.len());
    let mut sign_bits = Vec::with_capacity(p.scales.len());
    for (j, &word) in p.scales.iter().enumerate() {
        let magnitude = bf16::from_bits(word & !SIGN_BIT).to_f32();
        if !(magnitude.is_finite() && magnitude > 0.0) {
            return Err(Error::corruption(format!(
                "scale {j} has magnitude {magnitude}"
            )));
        }
        let negative = word & SIGN_BIT != 0;
        if negative && !sign_in_scale {
            return Err(Error::corruption(format!(
                "scale {j} is negative but selection uses a bitset"
            )));
        }
        scales.push(magnitude);
        sign_bits.push(negative);
    }
    let scales = ScaleVector::new(n, k / g, g, scales)?;

    if p.codes.len() != size.codes {
        return Err(Error::corruption(format!(
            "{} code bytes stored, header implies {}",
            p.codes.len(),
            size.codes
        )));
    }
    let mut codes = Vec::with_capacity(n * k);
    for (i, byte) in p.codes.iter().enumerate() {
        codes.push(byte & 0x0f);
        if 2 * i + 1 < n * k {
            codes.push(byte >> 4);
        }
    }
    if let Some(pos) = codes.iter().position(|&c| c as usize >= m) {
        return Err(Error::corruption(format!(
            "code {} at flat index {pos} is out of range for {m}-entry tables",
            codes[pos]
        )));
    }
    let codes = CodeMatrix::new(n, k, codes)?;

    let bits = match (&p.bitset, h.has_bitset()) {
        (Some(bytes), true) => {
            if bytes.len() != size.bitset {
                return Err(Error::corruption(format!(
                    "bitset has {} bytes, header implies {}",
                    bytes.len(),
                    size.bitset
                )));
            }
            (0..h.selection_groups())
                .map(|j| bytes[j / 8] >> (j % 8) & 1 == 1)
                .collect()
        }
        (None, false) => sign_bits,
        _ => return Err(Error::corruption("bitset presence disagrees with S and g")),
    };
    let selection = SelectionMap::new(n, k / s, s, bits)?;

    QuantizedLayer::new(h.method, h.format, tables, selection, codes, scales)
}

impl PackedLayer {
    fn section_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for table in &self.codebooks {
            for w in table {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        pad_to(&mut out, ALIGN);
        for w in &self.scales {
            out.extend_from_slice(&w.to_le_bytes());
        }
        pad_to(&mut out, ALIGN);
        out.extend_from_slice(&self.codes);
        pad_to(&mut out, ALIGN);
        if let Some(bits) = &self.bitset {
            out.extend_from_slice(bits);
            pad_to(&mut out, ALIGN);
        }
        out
    }

    /// Serializes one layer record (name included). Starts 16-byte aligned.
    pub fn write_record(&self, name: &str, out: &mut Vec<u8>) -> Result<()> {
        let start = out.len();
        debug_assert_eq!(start % ALIGN, 0);
        let name_len = to_u16(name.len(), "layer name length")?;
        let h = &self.header;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(h.format.code());
        out.extend_from_slice(&h.rows.to_le_bytes());
        out.extend_from_slice(&h.cols.to_le_bytes());
        out.extend_from_slice(&h.g.to_le_bytes());
        out.extend_from_slice(&h.s.to_le_bytes());
        out.push(h.m);
        out.push(h.flags());
        let sections = self.section_bytes();
        out.extend_from_slice(&crc32fast::hash(&sections).to_le_bytes());
        let pad_len = pad(out.len() - start) - (out.len() - start);
        out.extend(std::iter::repeat_n(0u8, pad_len));
        out.extend_from_slice(&sections);
        Ok(())
    }

    /// Reads one layer record starting at an aligned reader position.
    fn read_record(r: &mut Reader<'_>) -> Result<(String, PackedLayer)> {
        let start = r.pos;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::corruption(format!("layer name at byte {start} is not UTF-8")))?
            .to_string();
        let format_code = r.u8()?;
        let format = BaseFormat::from_code(format_code).ok_or_else(|| {
            Error::corruption(format!(
                "unknown format kind {format_code} in layer `{name}`"
            ))
        })?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let g = r.u16()?;
        let s = r.u16()?;
        let m = r.u8()?;
        let flags = r.u8()?;
        if flags & !(FLAG_BITSET | METHOD_MASK) != 0 {
            return Err(Error::corruption(format!(
                "unknown flag bits {flags:#04x} in layer `{name}`"
            )));
        }
        let method = Method::from_code((flags & METHOD_MASK) >> METHOD_SHIFT)
            .ok_or_else(|| Error::corruption(format!("unknown method in layer `{name}`")))?;
        let header = PackedHeader {
            format,
            method,
            rows,
            cols,
            g,
            s,
            m,
        };
        header
            .check()
            .map_err(|e| Error::corruption(format!("layer `{name}` header: {e}")))?;
        if (flags & FLAG_BITSET != 0) != header.has_bitset() {
            return Err(Error::corruption(format!(
                "layer `{name}` bitset flag disagrees with S and g"
            )));
        }
        let crc = r.u32()?;
        r.skip_to_alignment(start)?;

        let size = packed_size(&header);
        let sections_start = r.pos;
        let read_words = |count: usize, r: &mut Reader<'_>| -> Result<Vec<u16>> {
            let bytes = r.take(2 * count)?;
            Ok(bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect())
        };
        let t0 = read_words(m as usize, r)?;
        let t1 = read_words(m as usize, r)?;
        r.skip_to_alignment(sections_start)?;
        let scales = read_words(header.scale_groups(), r)?;
        r.skip_to_alignment(sections_start)?;
        let codes = r.take(size.codes)?.to_vec();
        r.skip_to_alignment(sections_start)?;
        let bitset = if header.has_bitset() {
            let b = r.take(size.bitset)?.to_vec();
            r.skip_to_alignment(sections_start)?;
            Some(b)
        } else {
            None
        };
        let actual = crc32fast::hash(&r.buf[sections_start..r.pos]);
        if actual != crc {
            return Err(Error::corruption(format!(
                "CRC mismatch in layer `{name}`: stored {crc:#010x}, computed {actual:#010x}"
            )));
        }
        Ok((
            name,
            PackedLayer {
                header,
                codebooks: [t0, t1],
                scales,
                codes,
                bitset,
            },
        ))
    }
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let target = buf.len().div_ceil(align) * align;
    buf.resize(target, 0);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::corruption(format!(
                    "truncated stream: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Skips zero padding up to the next multiple of 16 past `base`.
    fn skip_to_alignment(&mut self, base: usize) -> Result<()> {
        let rel = self.pos - base;
        let pad_len = pad(rel) - rel;
        let at = self.pos;
        if self.take(pad_len)?.iter().any(|b| *b != 0) {
            return Err(Error::corruption(format!("non-zero padding at byte {at}")));
        }
        Ok(())
    }
}

/// Ordered collection of named packed layers; the `.aaacq` file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedModel {
    pub layers: Vec<(String, PackedLayer)>,
}

impl PackedModel {
    pub fn new(layers: Vec<(String, PackedLayer)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &layers {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate layer name `{name}`")));
            }
        }
        Ok(Self { layers })
    }

    pub fn get(&self, name: &str) -> Option<&PackedLayer> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    /// Exact serialized length.
    pub fn byte_len(&self) -> usize {
        pad(FILE_HEADER_LEN)
            + self
                .layers
                .iter()
                .map(|(name, l)| packed_size(&l.header).record_len(name.len()))
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.layers.len(), "layer count")?.to_le_bytes());
        pad_to(&mut out, ALIGN);
        for (name, layer) in &self.layers {
            layer.write_record(name, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::corruption("bad magic, not an .aaacq stream"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::corruption(format!(
                "unsupported container version {version}"
            )));
        }
        let count = r.u32()? as usize;
        r.skip_to_alignment(0)?;
        let mut layers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            layers.push(PackedLayer::read_record(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::corruption(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        Self::new(layers).map_err(|e| Error::corruption(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
