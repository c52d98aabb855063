//! Fixed-size little-endian records stored in the global arrays.
//!
//! Image record: `u64` payload length, then the payload, zero-padded to the
//! array's record size. The payload is
//!
//! ```text
//! id u64 | band u8 | width u32 | height u32 | sky f64 | npsf u32
//! | (weight f64, sigma f64) * npsf | cd 4 x f64 (row-major) | crval 2 x f64
//! | crpix 2 x f64 | pixels f32 * (width * height)
//! ```
//!
//! Catalog record (105 bytes):
//!
//! ```text
//! id u64 | sort_key u64 | is_star u8 | ref_flux f64 | colors 4 x f64
//! | ra f64 | dec f64 | profile_mix f64 | scale f64 | axis_ratio f64 | angle f64
//! ```

use celeste_mini_core::sky::{Band, GalaxyShape, Image, ImageMetadata, PsfComponent, PsfModel, SourceParams, Wcs};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("record truncated")]
    Truncated,
    #[error("record holds an invalid value: {0}")]
    Invalid(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], RecordError> {
        let s = self.buf.get(self.pos..self.pos + N).ok_or(RecordError::Truncated)?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, RecordError> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, RecordError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64, RecordError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, RecordError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, RecordError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

fn image_payload(img: &Image) -> Vec<u8> {
    let m = &img.meta;
    let psf = m.psf.components();
    let mut b = Vec::with_capacity(64 + psf.len() * 16 + img.pixels.len() * 4);
    b.extend_from_slice(&m.id.to_le_bytes());
    b.push(m.band.index() as u8);
    b.extend_from_slice(&(m.width as u32).to_le_bytes());
    b.extend_from_slice(&(m.height as u32).to_le_bytes());
    b.extend_from_slice(&m.sky_background.to_le_bytes());
    b.extend_from_slice(&(psf.len() as u32).to_le_bytes());
    for c in psf {
        b.extend_from_slice(&c.weight.to_le_bytes());
        b.extend_from_slice(&c.sigma.to_le_bytes());
    }
    let w = &m.wcs;
    for v in [w.cd[0][0], w.cd[0][1], w.cd[1][0], w.cd[1][1], w.crval[0], w.crval[1], w.crpix[0], w.crpix[1]] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for p in &img.pixels {
        b.extend_from_slice(&p.to_le_bytes());
    }
    b
}

/// Bytes an image occupies as a record, length prefix included.
pub fn image_record_len(img: &Image) -> usize {
    8 + 29 + img.meta.psf.components().len() * 16 + 64 + img.pixels.len() * 4
}

/// `img` as a record of exactly `record_size` bytes.
pub fn encode_image(img: &Image, record_size: usize) -> Vec<u8> {
    let payload = image_payload(img);
    assert!(payload.len() + 8 <= record_size, "record size too small for image");
    let mut out = Vec::with_capacity(record_size);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.resize(record_size, 0);
    out
}

pub fn decode_image(rec: &[u8]) -> Result<Image, RecordError> {
    let mut r = Reader { buf: rec, pos: 0 };
    let len = r.u64()? as usize;
    let mut r = Reader { buf: rec.get(8..8 + len).ok_or(RecordError::Truncated)?, pos: 0 };
    let invalid = |e: celeste_mini_core::sky::ModelError| RecordError::Invalid(e.to_string());
    let id = r.u64()?;
    let band = Band::new(r.u8()? as usize).map_err(invalid)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let sky_background = r.f64()?;
    let npsf = r.u32()? as usize;
    let mut comps = Vec::with_capacity(npsf);
    for _ in 0..npsf {
        comps.push(PsfComponent { weight: r.f64()?, sigma: r.f64()? });
    }
    let mut v = [0.0; 8];
    for x in &mut v {
        *x = r.f64()?;
    }
    let wcs = Wcs::new([[v[0], v[1]], [v[2], v[3]]], [v[4], v[5]], [v[6], v[7]]).map_err(invalid)?;
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        pixels.push(r.f32()?);
    }
    let meta = ImageMetadata { id, band, width, height, sky_background, psf: PsfModel::new(comps).map_err(invalid)?, wcs };
    Image::new(meta, pixels).map_err(invalid)
}

pub const CATALOG_RECORD_SIZE: usize = 105;

/// One catalog global-array entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CatalogEntry {
    pub id: u64,
    pub sort_key: u64,
    pub params: SourceParams,
}

pub fn encode_entry(e: &CatalogEntry) -> [u8; CATALOG_RECORD_SIZE] {
    let mut out = [0u8; CATALOG_RECORD_SIZE];
    out[..8].copy_from_slice(&e.id.to_le_bytes());
    out[8..16].copy_from_slice(&e.sort_key.to_le_bytes());
    let p = &e.params;
    out[16] = u8::from(p.is_star);
    let s = &p.shape;
    let vals = [
        p.ref_flux,
        p.colors[0],
        p.colors[1],
        p.colors[2],
        p.colors[3],
        p.position[0],
        p.position[1],
        s.profile_mix,
        s.scale,
        s.axis_ratio,
        s.angle,
    ];
    for (k, v) in vals.iter().enumerate() {
        out[17 + 8 * k..25 + 8 * k].copy_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_entry(rec: &[u8]) -> Result<CatalogEntry, RecordError> {
    let mut r = Reader { buf: rec, pos: 0 };
    let id = r.u64()?;
    let sort_key = r.u64()?;
    let is_star = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(RecordError::Invalid(format!("is_star byte {b}"))),
    };
    let mut v = [0.0; 11];
    for x in &mut v {
        *x = r.f64()?;
    }
    let params = SourceParams {
        is_star,
        ref_flux: v[0],
        colors: [v[1], v[2], v[3], v[4]],
        position: [v[5], v[6]],
        shape: GalaxyShape { profile_mix: v[7], scale: v[8], axis_ratio: v[9], angle: v[10] },
    };
    Ok(CatalogEntry { id, sort_key, params })
}
