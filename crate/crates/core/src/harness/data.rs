//! `PADG1` dataset and `ANCH1` anchor-embedding files.
//!
//! ```text
//! PADG1: "PADG1\n" | u32 N, L_tok, C_in, N_c, N_s
//!        | N × (u32 class, u32 domain, L_tok·C_in × f32)
//! ANCH1: "ANCH1\n" | u32 N_c, N_s, d | N_c rows | N_s rows   (f32)
//! ```
//!
//! All integers and floats are little-endian; arrays are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{normalize_in_place, DenseArray};

pub const DATASET_MAGIC: &[u8; 6] = b"PADG1\n";
pub const ANCHOR_MAGIC: &[u8; 6] = b"ANCH1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub domain: usize,
    /// `L_tok × C_in` raw tokens.
    pub tokens: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tokens: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the tokens of `ids` into a `[B, L_tok, C_in]` batch.
    pub fn batch_tokens(&self, ids: &[usize]) -> DenseArray {
        let per = self.tokens * self.in_channels;
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            data.extend_from_slice(self.samples[i].tokens.data());
        }
        DenseArray::new(vec![ids.len(), self.tokens, self.in_channels], data)
            .expect("sample shapes validated on construction")
    }

    pub fn ids_in_domains(&self, domains: &[usize]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| domains.contains(&self.samples[i].domain))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.class >= self.n_classes {
                return Err(Error::invalid(format!(
                    "sample {i}: class {} ≥ N_c = {}",
                    s.class, self.n_classes
                )));
            }
            if s.domain >= self.n_domains {
                return Err(Error::invalid(format!(
                    "sample {i}: domain {} ≥ N_s = {}",
                    s.domain, self.n_domains
                )));
            }
            if s.tokens.shape() != [self.tokens, self.in_channels] {
                return Err(Error::invalid(format!(
                    "sample {i}: tokens {:?}, expected [{}, {}]",
                    s.tokens.shape(),
                    self.tokens,
                    self.in_channels
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let per = self.tokens * self.in_channels;
        let mut out = Vec::with_capacity(26 + self.samples.len() * (8 + 4 * per));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            self.samples.len(),
            self.tokens,
            self.in_channels,
            self.n_classes,
            self.n_domains,
        ] {
            put_u32(&mut out, v)?;
        }
        for s in &self.samples {
            put_u32(&mut out, s.class)?;
            put_u32(&mut out, s.domain)?;
            for &v in s.tokens.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let n = r.u32()?;
        let tokens = r.u32()?;
        let in_channels = r.u32()?;
        let n_classes = r.u32()?;
        let n_domains = r.u32()?;
        let per = tokens
            .checked_mul(in_channels)
            .ok_or_else(|| Error::format(10, "token dimensions overflow"))?;
        let expected = n
            .checked_mul(8 + 4 * per)
            .and_then(|b| b.checked_add(r.pos))
            .ok_or_else(|| Error::format(6, "sample count overflows"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("file is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let at = r.pos;
            let class = r.u32()?;
            let domain = r.u32()?;
            if class >= n_classes {
                return Err(Error::format(
                    at,
                    format!("sample {i}: class {class} ≥ N_c = {n_classes}"),
                ));
            }
            if domain >= n_domains {
                return Err(Error::format(
                    at + 4,
                    format!("sample {i}: domain {domain} ≥ N_s = {n_domains}"),
                ));
            }
            let data = r.f32_vec(per)?;
            samples.push(Sample {
                class,
                domain,
                tokens: DenseArray::new(vec![tokens, in_channels], data)?,
            });
        }
        Ok(Self {
            tokens,
            in_channels,
            n_classes,
            n_domains,
            samples,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Stand-ins for the text-encoder embeddings of domain-invariant class
/// descriptions and of domain descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEmbeddings {
    /// `N_c × d` unit rows.
    pub class_anchors: DenseArray,
    /// `N_s × d` unit rows.
    pub domain_anchors: DenseArray,
}

impl AnchorEmbeddings {
    pub fn dim(&self) -> usize {
        self.class_anchors.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.class_anchors.cols();
        if self.domain_anchors.cols() != d {
            return Err(Error::shape(
                "anchors",
                "class and domain anchors differ in width",
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(ANCHOR_MAGIC);
        put_u32(&mut out, self.class_anchors.rows())?;
        put_u32(&mut out, self.domain_anchors.rows())?;
        put_u32(&mut out, d)?;
        for &v in self
            .class_anchors
            .data()
            .iter()
            .chain(self.domain_anchors.data())
        {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Parses an anchor file; rows whose norm drifts from 1 by more than
    /// 1e-6 are renormalized. `expected_dim`, when given, must match `d`.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ANCHOR_MAGIC)?;
        let nc = r.u32()?;
        let ns = r.u32()?;
        let d = r.u32()?;
        if let Some(want) = expected_dim {
            if want != d {
                return Err(Error::format(
                    14,
                    format!("anchor width {d}, config expects {want}"),
                ));
            }
        }
        let expected = r.pos + 4 * (nc + ns) * d;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("file is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut class_anchors = DenseArray::new(vec![nc, d], r.f32_vec(nc * d)?)?;
        let mut domain_anchors = DenseArray::new(vec![ns, d], r.f32_vec(ns * d)?)?;
        for a in [&mut class_anchors, &mut domain_anchors] {
            for i in 0..a.rows() {
                let row = a.row_mut(i);
                let n = crate::numerics::l2_norm(row);
                if n == 0.0 {
                    return Err(Error::invalid(format!("anchor row {i} is zero")));
                }
                if (n - 1.0).abs() > 1e-6 {
                    normalize_in_place(row);
                }
            }
        }
        Ok(Self {
            class_anchors,
            domain_anchors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected_dim)
    }

    /// Anchors restricted to the given (global) domain ids, in that order.
    pub fn for_domains(&self, domains: &[usize]) -> Result<Self> {
        if let Some(&d) = domains.iter().find(|&&d| d >= self.domain_anchors.rows()) {
            return Err(Error::invalid(format!("no anchor for domain {d}")));
        }
        Ok(Self {
            class_anchors: self.class_anchors.clone(),
            domain_anchors: self.domain_anchors.select_rows(domains),
        })
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated: need {n} more bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self
            .take(magic.len())
            .map_err(|_| Error::format(0, "file too short for magic"))?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let b = self.take(4 * n)?;
        let v: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(at + 4 * i, "non-finite value"));
        }
        Ok(v)
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let b = self.take(8 * n)?;
        let v: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(at + 8 * i, "non-finite value"));
        }
        Ok(v)
    }

    pub(crate) fn finished(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let mk = |c, d, base: f64| Sample {
            class: c,
            domain: d,
            tokens: DenseArray::new(vec![2, 3], (0..6).map(|i| base + i as f64 * 0.5).collect())
                .unwrap(),
        };
        Dataset {
            tokens: 2,
            in_channels: 3,
            n_classes: 2,
            n_domains: 2,
            samples: vec![mk(0, 0, 1.0), mk(1, 1, -2.0), mk(1, 0, 0.25)],
        }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let bytes = tiny().to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, tiny());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_file_reports_length() {
        let bytes = tiny().to_bytes().unwrap();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("header implies"));
    }

    #[test]
    fn out_of_range_label_names_sample() {
        let mut bytes = tiny().to_bytes().unwrap();
        // Second sample's class field.
        let at = 26 + (8 + 4 * 6);
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        let err = Dataset::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
        assert!(err.contains(&format!("byte {at}")), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let a = AnchorEmbeddings {
            class_anchors: DenseArray::from_rows(&[[1.0, 0.0]]).unwrap(),
            domain_anchors: DenseArray::from_rows(&[[0.0, 1.0]]).unwrap(),
        };
        let mut ab = a.to_bytes().unwrap();
        ab[3] = b'9';
        assert!(matches!(
            AnchorEmbeddings::from_bytes(&ab, None),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn anchors_round_trip_and_renormalize() {
        let mut row = vec![0.0; 4];
        row[0] = 1.0;
        let a = AnchorEmbeddings {
            class_anchors: DenseArray::from_rows(&[row.clone()]).unwrap(),
            domain_anchors: DenseArray::from_rows(&[[0.0, 2.0, 0.0, 0.0]]).unwrap(),
        };
        let back = AnchorEmbeddings::from_bytes(&a.to_bytes().unwrap(), Some(4)).unwrap();
        assert_eq!(back.class_anchors.row(0), row.as_slice());
        assert_eq!(back.domain_anchors.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert!(AnchorEmbeddings::from_bytes(&a.to_bytes().unwrap(), Some(5)).is_err());
    }
}
