//! A minimal FITS subset: one primary HDU holding a 2-D image.
//!
//! Writing always produces BITPIX = -32 (big-endian IEEE floats). Reading
//! also accepts BITPIX = 16 with the usual BZERO/BSCALE scaling. Image
//! metadata travels in a handful of custom keywords:
//!
//! | keyword            | meaning                               | default            |
//! |--------------------|---------------------------------------|--------------------|
//! | `IMAGEID`          | image id                              | 0                  |
//! | `BANDIDX`          | band index, 0..5 (u g r i z)          | 2                  |
//! | `SKYBKG`           | sky counts per pixel                  | median pixel value |
//! | `NPSF`             | number of PSF components              | 1                  |
//! | `PSFWn`, `PSFSn`   | weight and sigma (pixels), n = 1..    | 1.0, 1.5           |
//! | `CRPIX1`, `CRPIX2` | reference pixel, one-based            | 1, 1               |
//! | `CRVAL1`, `CRVAL2` | reference (ra, dec), degrees          | 0, 0               |
//! | `CDi_j`            | degrees per pixel                     | 0.396" diagonal    |

use celeste_mini_core::sky::{Band, ImageMetadata, ModelError, PsfComponent, PsfModel, Wcs, ARCSEC_PER_DEGREE};
use celeste_mini_core::sky::Image;
use std::fmt;

pub const BLOCK: usize = 2880;
pub const CARD: usize = 80;

/// Pixel scale assumed when a file carries no CD matrix, arcsec.
pub const DEFAULT_PIXEL_SCALE: f64 = 0.396;
/// PSF sigma assumed when a file carries no PSF cards, pixels.
pub const DEFAULT_PSF_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitsError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated file: need {expected} bytes, have {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("card cannot be encoded: {0}")]
    InvalidCard(String),
    #[error("invalid image metadata: {0}")]
    Metadata(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CardValue {
    Logical(bool),
    Integer(i64),
    Real(f64),
    Str(String),
}

impl fmt::Display for CardValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CardValue::Logical(b) => write!(f, "{}", if *b { 'T' } else { 'F' }),
            CardValue::Integer(i) => write!(f, "{i}"),
            CardValue::Real(x) => write!(f, "{}", format_real(*x)),
            CardValue::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

/// One 80-byte header record. Commentary cards (`COMMENT`, `HISTORY`,
/// blank) have no value and keep their text in `comment`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeaderCard {
    pub keyword: String,
    pub value: Option<CardValue>,
    pub comment: Option<String>,
}

impl HeaderCard {
    pub fn new(keyword: &str, value: CardValue) -> Self {
        Self { keyword: keyword.to_string(), value: Some(value), comment: None }
    }

    pub fn with_comment(mut self, comment: &str) -> Self {
        self.comment = Some(comment.to_string());
        self
    }

    /// The fixed-format 80-byte record.
    pub fn encode(&self) -> Result<[u8; CARD], FitsError> {
        let kw = &self.keyword;
        if kw.len() > 8 || !kw.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'-' || b == b'_') {
            return Err(FitsError::InvalidCard(format!("bad keyword {kw:?}")));
        }
        let mut text = format!("{kw:<8}");
        match &self.value {
            None => {
                if let Some(c) = &self.comment {
                    text.push_str(c);
                }
            }
            Some(v) => {
                text.push_str("= ");
                match v {
                    CardValue::Str(s) => {
                        // Quoted strings start in column 11, padded to at
                        // least eight characters inside the quotes.
                        let escaped = s.replace('\'', "''");
                        text.push_str(&format!("'{escaped:<8}'"));
                    }
                    CardValue::Real(x) if !x.is_finite() => {
                        return Err(FitsError::InvalidCard(format!("{kw}: non-finite real")));
                    }
                    other => text.push_str(&format!("{:>20}", other.to_string())),
                }
                if let Some(c) = &self.comment {
                    text.push_str(" / ");
                    text.push_str(c);
                }
            }
        }
        if !text.bytes().all(|b| (0x20..=0x7e).contains(&b)) {
            return Err(FitsError::InvalidCard(format!("{kw}: non-printable text")));
        }
        if text.len() > CARD {
            return Err(FitsError::InvalidCard(format!("{kw}: longer than 80 bytes")));
        }
        let mut out = [b' '; CARD];
        out[..text.len()].copy_from_slice(text.as_bytes());
        Ok(out)
    }

    fn end() -> [u8; CARD] {
        let mut out = [b' '; CARD];
        out[..3].copy_from_slice(b"END");
        out
    }
}

/// Shortest round-trip representation, always with a decimal point.
fn format_real(x: f64) -> String {
    let s = format!("{x:E}");
    match s.find('E') {
        Some(e) if !s[..e].contains('.') => format!("{}.0{}", &s[..e], &s[e..]),
        _ => s,
    }
}

fn parse_value(field: &str, keyword: &str) -> Result<(Option<CardValue>, Option<String>), FitsError> {
    let malformed = |what: &str| FitsError::MalformedHeader(format!("{keyword}: {what}"));
    let trimmed = field.trim_start();
    if let Some(rest) = trimmed.strip_prefix('\'') {
        // Scan to the closing quote; a doubled quote is a literal one.
        let bytes = rest.as_bytes();
        let mut s = String::new();
        let mut i = 0;
        loop {
            match bytes.get(i) {
                None => return Err(malformed("unterminated string")),
                Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => {
                    s.push('\'');
                    i += 2;
                }
                Some(b'\'') => break,
                Some(&b) => {
                    s.push(b as char);
                    i += 1;
                }
            }
        }
        let after = &rest[i + 1..];
        let comment = after.trim_start().strip_prefix('/').map(|c| c.trim().to_string());
        // Trailing spaces inside the quotes are not significant.
        return Ok((Some(CardValue::Str(s.trim_end().to_string())), comment));
    }
    let (token, comment) = match field.find('/') {
        Some(k) => (&field[..k], Some(field[k + 1..].trim().to_string())),
        None => (field, None),
    };
    let token = token.trim();
    let value = match token {
        "" => None,
        "T" => Some(CardValue::Logical(true)),
        "F" => Some(CardValue::Logical(false)),
        t if t.bytes().all(|b| b.is_ascii_digit() || b == b'-' || b == b'+') => {
            Some(CardValue::Integer(t.parse().map_err(|_| malformed("bad integer"))?))
        }
        t => Some(CardValue::Real(t.replace('D', "E").parse().map_err(|_| malformed("bad value"))?)),
    };
    Ok((value, comment))
}

fn parse_card(raw: &[u8]) -> Result<HeaderCard, FitsError> {
    if let Some(b) = raw.iter().find(|b| !(0x20..=0x7e).contains(*b)) {
        return Err(FitsError::MalformedHeader(format!("non-ASCII byte 0x{b:02x}")));
    }
    let text = std::str::from_utf8(raw).expect("checked ASCII");
    let keyword = text[..8].trim_end().to_string();
    if &text[8..10] == "= " {
        let (value, comment) = parse_value(&text[10..], &keyword)?;
        return Ok(HeaderCard { keyword, value, comment });
    }
    let rest = text[8..].trim_end();
    Ok(HeaderCard { keyword, value: None, comment: (!rest.is_empty()).then(|| rest.to_string()) })
}

/// Header cards up to (not including) `END`, and the byte offset of the data.
pub fn parse_header(bytes: &[u8]) -> Result<(Vec<HeaderCard>, usize), FitsError> {
    if bytes.len() % BLOCK != 0 {
        let expected = bytes.len().div_ceil(BLOCK) * BLOCK;
        return Err(FitsError::TruncatedFile { expected, actual: bytes.len() });
    }
    let mut cards = Vec::new();
    for (i, raw) in bytes.chunks_exact(CARD).enumerate() {
        if raw.starts_with(b"END") && raw[3..].iter().all(|&b| b == b' ') {
            let offset = ((i + 1) * CARD).div_ceil(BLOCK) * BLOCK;
            return Ok((cards, offset));
        }
        let card = parse_card(raw)?;
        // Blank padding cards carry nothing.
        if card.keyword.is_empty() && card.value.is_none() && card.comment.is_none() {
            continue;
        }
        cards.push(card);
    }
    Err(FitsError::MalformedHeader("no END card".into()))
}

/// A decoded primary image: header cards in file order and pixels in row-major
/// order (`data[row * width + col]`, FITS axis 1 fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct FitsImage {
    pub header: Vec<HeaderCard>,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FitsImage {
    /// An image with only the structural cards.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        Self { header: structural_cards(width, height), width, height, data }
    }

    pub fn card(&self, keyword: &str) -> Option<&CardValue> {
        find(&self.header, keyword)
    }

    /// Serialize as BITPIX = -32. The header must declare that encoding and
    /// the image dimensions.
    pub fn encode(&self) -> Result<Vec<u8>, FitsError> {
        let want = [("BITPIX", -32), ("NAXIS", 2), ("NAXIS1", self.width as i64), ("NAXIS2", self.height as i64)];
        for (kw, v) in want {
            if integer(&self.header, kw) != Some(v) {
                return Err(FitsError::InvalidCard(format!("header must declare {kw} = {v}")));
            }
        }
        if self.width == 0 || self.height == 0 || self.data.len() != self.width * self.height {
            return Err(FitsError::InvalidCard("data does not match dimensions".into()));
        }
        let header_len = ((self.header.len() + 1) * CARD).div_ceil(BLOCK) * BLOCK;
        let data_len = (self.data.len() * 4).div_ceil(BLOCK) * BLOCK;
        let mut out = Vec::with_capacity(header_len + data_len);
        for c in &self.header {
            out.extend_from_slice(&c.encode()?);
        }
        out.extend_from_slice(&HeaderCard::end());
        out.resize(header_len, b' ');
        for v in &self.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.resize(header_len + data_len, 0);
        Ok(out)
    }
}

fn structural_cards(width: usize, height: usize) -> Vec<HeaderCard> {
    vec![
        HeaderCard::new("SIMPLE", CardValue::Logical(true)),
        HeaderCard::new("BITPIX", CardValue::Integer(-32)),
        HeaderCard::new("NAXIS", CardValue::Integer(2)),
        HeaderCard::new("NAXIS1", CardValue::Integer(width as i64)),
        HeaderCard::new("NAXIS2", CardValue::Integer(height as i64)),
    ]
}

fn find<'a>(cards: &'a [HeaderCard], keyword: &str) -> Option<&'a CardValue> {
    cards.iter().find(|c| c.keyword == keyword).and_then(|c| c.value.as_ref())
}

fn integer(cards: &[HeaderCard], keyword: &str) -> Option<i64> {
    match find(cards, keyword)? {
        CardValue::Integer(i) => Some(*i),
        _ => None,
    }
}

fn real(cards: &[HeaderCard], keyword: &str) -> Result<Option<f64>, FitsError> {
    match find(cards, keyword) {
        None => Ok(None),
        Some(CardValue::Integer(i)) => Ok(Some(*i as f64)),
        Some(CardValue::Real(x)) => Ok(Some(*x)),
        Some(_) => Err(FitsError::MalformedHeader(format!("{keyword} must be numeric"))),
    }
}

/// Header cards describing `meta`, structural cards first.
pub fn image_header(meta: &ImageMetadata) -> Vec<HeaderCard> {
    let mut cards = structural_cards(meta.width, meta.height);
    let r = |kw: &str, x: f64| HeaderCard::new(kw, CardValue::Real(x));
    cards.push(HeaderCard::new("IMAGEID", CardValue::Integer(meta.id as i64)));
    cards.push(HeaderCard::new("BANDIDX", CardValue::Integer(meta.band.index() as i64)).with_comment("ugriz index"));
    cards.push(r("SKYBKG", meta.sky_background));
    let psf = meta.psf.components();
    cards.push(HeaderCard::new("NPSF", CardValue::Integer(psf.len() as i64)));
    for (k, c) in psf.iter().enumerate() {
        cards.push(r(&format!("PSFW{}", k + 1), c.weight));
        cards.push(r(&format!("PSFS{}", k + 1), c.sigma));
    }
    let w = &meta.wcs;
    cards.push(r("CRPIX1", w.crpix[0]));
    cards.push(r("CRPIX2", w.crpix[1]));
    cards.push(r("CRVAL1", w.crval[0]));
    cards.push(r("CRVAL2", w.crval[1]));
    cards.push(r("CD1_1", w.cd[0][0]));
    cards.push(r("CD1_2", w.cd[0][1]));
    cards.push(r("CD2_1", w.cd[1][0]));
    cards.push(r("CD2_2", w.cd[1][1]));
    cards
}

/// Encode an image with its metadata cards.
pub fn write_image(image: &Image) -> Vec<u8> {
    let fits = FitsImage {
        header: image_header(&image.meta),
        width: image.meta.width,
        height: image.meta.height,
        data: image.pixels.clone(),
    };
    fits.encode().expect("validated images always encode")
}

/// Decode a file into its pixels and the image metadata it carries.
pub fn read_image(bytes: &[u8]) -> Result<(FitsImage, ImageMetadata), FitsError> {
    let (header, offset) = parse_header(bytes)?;
    if !matches!(header.first(), Some(HeaderCard { keyword, value: Some(CardValue::Logical(true)), .. }) if keyword == "SIMPLE")
    {
        return Err(FitsError::MalformedHeader("first card must be SIMPLE = T".into()));
    }
    let need = |kw: &str| integer(&header, kw).ok_or_else(|| FitsError::MalformedHeader(format!("missing {kw}")));
    let bitpix = need("BITPIX")?;
    if bitpix != -32 && bitpix != 16 {
        return Err(FitsError::UnsupportedEncoding(format!("BITPIX = {bitpix}")));
    }
    let naxis = need("NAXIS")?;
    if naxis != 2 {
        return Err(FitsError::UnsupportedEncoding(format!("NAXIS = {naxis}")));
    }
    let (width, height) = (need("NAXIS1")?, need("NAXIS2")?);
    if width < 1 || height < 1 {
        return Err(FitsError::MalformedHeader("image axes must be positive".into()));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    let bytes_per = if bitpix == 16 { 2 } else { 4 };
    let expected = offset + n * bytes_per;
    if bytes.len() < expected {
        return Err(FitsError::TruncatedFile { expected, actual: bytes.len() });
    }
    let payload = &bytes[offset..expected];
    let bzero = real(&header, "BZERO")?;
    let bscale = real(&header, "BSCALE")?;
    let scaled = bzero.is_some() || bscale.is_some();
    let (z, s) = (bzero.unwrap_or(0.0), bscale.unwrap_or(1.0));
    let data: Vec<f32> = if bitpix == 16 {
        payload
            .chunks_exact(2)
            .map(|c| (z + s * i16::from_be_bytes([c[0], c[1]]) as f64) as f32)
            .collect()
    } else {
        let raw = payload.chunks_exact(4).map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]));
        if scaled {
            raw.map(|v| (z + s * v as f64) as f32).collect()
        } else {
            raw.collect()
        }
    };
    let meta = decode_metadata(&header, width, height, &data)?;
    Ok((FitsImage { header, width, height, data }, meta))
}

fn decode_metadata(cards: &[HeaderCard], width: usize, height: usize, data: &[f32]) -> Result<ImageMetadata, FitsError> {
    let id = integer(cards, "IMAGEID").unwrap_or(0).max(0) as u64;
    let band = match integer(cards, "BANDIDX") {
        Some(b) => Band::new(usize::try_from(b).map_err(|_| ModelError::InvalidBand(usize::MAX))?)?,
        None => Band::REFERENCE,
    };
    let sky_background = match real(cards, "SKYBKG")? {
        Some(s) => s,
        None => median(data).max(0.0),
    };
    let psf = match integer(cards, "NPSF") {
        Some(k) if k >= 1 => {
            let mut comps = Vec::new();
            for i in 1..=k {
                let w = real(cards, &format!("PSFW{i}"))?;
                let s = real(cards, &format!("PSFS{i}"))?;
                match (w, s) {
                    (Some(weight), Some(sigma)) => comps.push(PsfComponent { weight, sigma }),
                    _ => return Err(FitsError::MalformedHeader(format!("PSF component {i} incomplete"))),
                }
            }
            PsfModel::new(comps)?
        }
        Some(k) => return Err(FitsError::MalformedHeader(format!("NPSF = {k}"))),
        None => PsfModel::gaussian(DEFAULT_PSF_SIGMA)?,
    };
    let d = DEFAULT_PIXEL_SCALE / ARCSEC_PER_DEGREE;
    let get = |kw: &str, default: f64| real(cards, kw).map(|v| v.unwrap_or(default));
    let wcs = Wcs::new(
        [[get("CD1_1", d)?, get("CD1_2", 0.0)?], [get("CD2_1", 0.0)?, get("CD2_2", d)?]],
        [get("CRVAL1", 0.0)?, get("CRVAL2", 0.0)?],
        [get("CRPIX1", 1.0)?, get("CRPIX2", 1.0)?],
    )?;
    let meta = ImageMetadata { id, band, width, height, sky_background, psf, wcs };
    meta.validate()?;
    Ok(meta)
}

fn median(data: &[f32]) -> f64 {
    let mut v: Vec<f32> = data.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f32::total_cmp);
    *m as f64
}

/// Read a file and build a validated [`Image`].
pub fn load_image(path: &std::path::Path) -> anyhow::Result<Image> {
    use anyhow::Context;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (fits, meta) = read_image(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Image::new(meta, fits.data).with_context(|| format!("invalid image in {}", path.display()))
}
