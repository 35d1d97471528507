//! Grayscale rasters, binary masks, and their netpbm encodings (P5 / P4).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image must be nonempty"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// 8-bit binary PGM (P5), values scaled by 255 and rounded.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| to_byte(*v)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let header = read_header(&mut reader, "P5", 3)?;
        let (width, height, maxval) = (header[0], header[1], header[2]);
        if maxval == 0 || maxval > 255 {
            return Err(Error::invalid("only 8-bit PGM is supported"));
        }
        let mut raw = vec![0u8; width * height];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::invalid("truncated PGM payload"))?;
        let data = raw.iter().map(|&b| b as f64 / maxval as f64).collect();
        Self::new(height, width, data)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask buffer has {} bits, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Binary PBM (P4): rows packed MSB first, padded to whole bytes, 1 = set.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let stride = self.width.div_ceil(8);
        for row in self.bits.chunks(self.width.max(1)) {
            let mut packed = vec![0u8; stride];
            for (col, &bit) in row.iter().enumerate() {
                if bit {
                    packed[col / 8] |= 0x80 >> (col % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn from_pbm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let header = read_header(&mut reader, "P4", 2)?;
        let (width, height) = (header[0], header[1]);
        let stride = width.div_ceil(8);
        let mut raw = vec![0u8; stride * height];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::invalid("truncated PBM payload"))?;
        let mut bits = Vec::with_capacity(width * height);
        for row in raw.chunks(stride.max(1)).take(height) {
            bits.extend((0..width).map(|col| row[col / 8] & (0x80 >> (col % 8)) != 0));
        }
        Self::new(height, width, bits)
    }

    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pbm())
    }

    pub fn read_pbm(path: &Path) -> Result<Self> {
        Self::from_pbm(&std::fs::read(path)?)
    }

    /// One string of '0'/'1' characters per row.
    pub fn to_row_strings(&self) -> Vec<String> {
        self.bits
            .chunks(self.width.max(1))
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_row_strings<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut bits = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::invalid("ragged mask rows"));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return Err(Error::invalid(format!("bad mask character {other:?}"))),
                }
            }
        }
        Self::new(height, width, bits)
    }
}

fn read_header<R: BufRead>(reader: &mut R, magic: &str, fields: usize) -> Result<Vec<usize>> {
    let mut tokens: Vec<String> = Vec::new();
    let mut line = String::new();
    while tokens.len() < fields + 1 {
        line.clear();
        let read = reader
            .read_line(&mut line)
            .map_err(|_| Error::invalid("netpbm header is not valid text"))?;
        if read == 0 {
            return Err(Error::invalid("truncated netpbm header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != magic {
        return Err(Error::invalid(format!(
            "expected {magic} image, found {}",
            tokens[0]
        )));
    }
    if tokens.len() != fields + 1 {
        return Err(Error::invalid("netpbm header must end on its own line"));
    }
    tokens[1..]
        .iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad netpbm header field {t:?}")))
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(bytes)?;
    Ok(())
}
