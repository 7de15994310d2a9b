//! Binary layer records.
//!
//! A checkpoint file is a sequence of records, one per layer, in layer
//! order. Each record is
//!
//! ```text
//! magic       4 bytes  "FMPQ"
//! version     u16 LE
//! layer index u16 LE
//! rows        u32 LE
//! cols        u32 LE
//! bit width   u8
//! zero point  u8
//! scale       f64 LE (IEEE-754)
//! planes      bit_width × ceil(rows·cols / 8) bytes, LSB plane first
//! ```
//!
//! Planes are packed row-major with bit 0 of each byte holding the first
//! entry.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::weighted_average_bits;
use crate::quant::{levels, packed_len, plane_density, zero_point, BitPlane, QuantizedLayer};

pub const MAGIC: &[u8; 4] = b"FMPQ";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 1 + 1 + 8;

pub fn encode_layer(index: u16, layer: &QuantizedLayer, out: &mut Vec<u8>) -> Result<()> {
    let rows = u32::try_from(layer.rows()).map_err(|_| Error::contract("encode_layer", "rows exceed u32"))?;
    let cols = u32::try_from(layer.cols()).map_err(|_| Error::contract("encode_layer", "cols exceed u32"))?;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&index.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.push(layer.bit_width());
    out.push(layer.zero_point() as u8);
    out.extend_from_slice(&layer.scale().to_le_bytes());
    for plane in layer.planes() {
        out.extend_from_slice(plane.as_bytes());
    }
    Ok(())
}

pub fn encode(layers: &[QuantizedLayer]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let index = u16::try_from(i).map_err(|_| Error::contract("encode", "more than 65535 layers"))?;
        encode_layer(index, layer, &mut out)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Decodes one record starting at `bytes[*pos]`.
pub fn decode_layer(bytes: &[u8], pos: &mut usize) -> Result<(u16, QuantizedLayer)> {
    let mut r = Reader { bytes, pos: *pos };
    if bytes.len() - *pos < HEADER_LEN {
        r.take(HEADER_LEN, "record header")?;
    }
    let magic = r.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(Error::Corrupt(format!("bad magic {magic:02x?} at byte {}", *pos)));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let index = u16::from_le_bytes(r.array("layer index")?);
    let rows = u32::from_le_bytes(r.array("rows")?) as usize;
    let cols = u32::from_le_bytes(r.array("cols")?) as usize;
    let [bit_width] = r.array::<1>("bit width")?;
    let [zp] = r.array::<1>("zero point")?;
    let scale = f64::from_le_bytes(r.array("scale")?);
    if !(1..=8).contains(&bit_width) {
        return Err(Error::Corrupt(format!("layer {index}: bit width {bit_width} outside [1, 8]")));
    }
    if u32::from(zp) != zero_point(bit_width) {
        return Err(Error::Corrupt(format!(
            "layer {index}: zero point {zp} does not match {bit_width}-bit layout"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Corrupt(format!("layer {index}: invalid scale {scale}")));
    }
    let entries = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Corrupt(format!("layer {index}: {rows}x{cols} overflows")))?;
    let plane_bytes = packed_len(entries);
    let mut planes = Vec::with_capacity(usize::from(bit_width));
    for p in 0..bit_width {
        let raw = r.take(plane_bytes, &format!("plane {p} of layer {index}"))?;
        planes.push(BitPlane::from_bytes(entries, raw.to_vec())?);
    }
    let layer = QuantizedLayer::from_planes(rows, cols, scale, planes)
        .map_err(|e| Error::Corrupt(format!("layer {index}: {e}")))?;
    debug_assert!(layer.levels() == levels(bit_width));
    *pos = r.pos;
    Ok((index, layer))
}

/// Decodes a whole checkpoint; layer indices must run 0, 1, 2, ...
pub fn decode(bytes: &[u8]) -> Result<Vec<QuantizedLayer>> {
    let mut pos = 0;
    let mut layers = Vec::new();
    while pos < bytes.len() {
        let (index, layer) = decode_layer(bytes, &mut pos)?;
        if usize::from(index) != layers.len() {
            return Err(Error::Corrupt(format!(
                "expected layer index {}, found {index}",
                layers.len()
            )));
        }
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(Error::Corrupt("checkpoint holds no layers".into()));
    }
    Ok(layers)
}

pub fn write_checkpoint(path: &Path, layers: &[QuantizedLayer]) -> Result<()> {
    fs::write(path, encode(layers)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<QuantizedLayer>> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub bit_width: u8,
    pub scale: f64,
    pub zero_point: u32,
    /// Plane densities, LSB first.
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointReport {
    pub layers: Vec<LayerReport>,
    /// Parameter-weighted mean bit-width.
    pub average_bit_width: f64,
}

pub fn inspect(layers: &[QuantizedLayer]) -> CheckpointReport {
    let reports = layers
        .iter()
        .enumerate()
        .map(|(index, l)| LayerReport {
            index,
            rows: l.rows(),
            cols: l.cols(),
            bit_width: l.bit_width(),
            scale: l.scale(),
            zero_point: l.zero_point(),
            densities: plane_density(l).densities(),
        })
        .collect();
    let bits: Vec<u8> = layers.iter().map(QuantizedLayer::bit_width).collect();
    let params: Vec<u64> = layers.iter().map(|l| l.len() as u64).collect();
    CheckpointReport {
        layers: reports,
        average_bit_width: weighted_average_bits(&bits, &params),
    }
}

impl fmt::Display for CheckpointReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>11}  {:>4}  {:>12}  {:>4}  densities (LSB..MSB)", "layer", "shape", "bits", "scale", "zp")?;
        for l in &self.layers {
            let densities: Vec<String> = l.densities.iter().map(|d| format!("{d:.4}")).collect();
            writeln!(
                f,
                "{:>5}  {:>11}  {:>4}  {:>12.6e}  {:>4}  {}",
                l.index,
                format!("{}x{}", l.rows, l.cols),
                l.bit_width,
                l.scale,
                l.zero_point,
                densities.join(" ")
            )?;
        }
        write!(f, "average bit-width: {:.3}", self.average_bit_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<QuantizedLayer> {
        vec![
            QuantizedLayer::from_codes(2, 5, 4, 0.75, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 15]).unwrap(),
            QuantizedLayer::from_codes(1, 3, 1, 2.0, &[1, 0, 1]).unwrap(),
        ]
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample()[1..]).unwrap();
        assert_eq!(&bytes[..4], b"FMPQ");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(bytes[16], 1);
        assert_eq!(bytes[17], 1);
        assert_eq!(&bytes[18..26], &2.0f64.to_le_bytes());
        assert_eq!(&bytes[26..], &[0b101]);
    }

    #[test]
    fn decode_inverts_encode() {
        let layers = sample();
        let bytes = encode(&layers).unwrap();
        assert_eq!(decode(&bytes).unwrap(), layers);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&sample()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Corrupt(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&[]), Err(Error::Corrupt(_))));
        let mut bad_zp = bytes.clone();
        bad_zp[17] = 3;
        assert!(matches!(decode(&bad_zp), Err(Error::Corrupt(_))));
    }

    #[test]
    fn uniform_four_bit_report() {
        let layers = vec![
            QuantizedLayer::from_codes(3, 3, 4, 1.0, &[8; 9]).unwrap(),
            QuantizedLayer::from_codes(2, 2, 4, 1.0, &[8; 4]).unwrap(),
        ];
        let report = inspect(&layers);
        assert_eq!(format!("{:.3}", report.average_bit_width), "4.000");
        assert_eq!(report.layers[0].densities, vec![0.0, 0.0, 0.0, 1.0]);
        assert!(report.to_string().contains("average bit-width: 4.000"));
    }
}
