use std::path::PathBuf;

use celeste_mini::fits::{self, CardValue, FitsImage, HeaderCard, BLOCK};
use celeste_mini_core::sky::{Band, Image, ImageMetadata, PsfComponent, PsfModel, Wcs};
use proptest::prelude::*;

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Compare against a committed file; `CELESTE_MINI_BLESS=1` rewrites it.
fn golden(name: &str, bytes: &[u8]) {
    let path = data_path(name);
    if std::env::var_os("CELESTE_MINI_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes.len(), want.len(), "{name}: length");
    if let Some(i) = bytes.iter().zip(&want).position(|(a, b)| a != b) {
        panic!("{name}: first difference at byte {i}");
    }
}

fn metadata_image() -> Image {
    let meta = ImageMetadata {
        id: 42,
        band: Band::new(3).unwrap(),
        width: 4,
        height: 3,
        sky_background: 123.5,
        psf: PsfModel::new(vec![
            PsfComponent { weight: 0.75, sigma: 1.25 },
            PsfComponent { weight: 0.25, sigma: 3.5 },
        ])
        .unwrap(),
        wcs: Wcs::new([[1.1e-4, 2.0e-6], [-3.0e-6, 1.1e-4]], [150.125, -2.5], [2.5, 1.0]).unwrap(),
    };
    let pixels = (0..12).map(|i| 100.0 + i as f32 * 0.75).collect();
    Image::new(meta, pixels).unwrap()
}

#[test]
fn structural_image_matches_golden_file() {
    let data = vec![0.0, 1.5, -2.25, 1e-3, f32::MAX, -0.0];
    let bytes = FitsImage::new(3, 2, data.clone()).encode().unwrap();
    golden("golden_3x2.fits", &bytes);
    let (img, _) = fits::read_image(&bytes).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&img.data), bits(&data));
}

#[test]
fn metadata_image_matches_golden_file() {
    let img = metadata_image();
    let bytes = fits::write_image(&img);
    golden("golden_meta_4x3.fits", &bytes);
    let (f, meta) = fits::read_image(&bytes).unwrap();
    assert_eq!(meta, img.meta);
    assert_eq!(f.data, img.pixels);
    assert_eq!(f.card("BANDIDX"), Some(&CardValue::Integer(3)));
}

/// Scalar reference: physical = BZERO + BSCALE * raw for big-endian i16.
fn reference_decode(payload: &[u8], n: usize, bzero: f64, bscale: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let raw = ((payload[2 * i] as u16) << 8 | payload[2 * i + 1] as u16) as i16;
            bzero + bscale * raw as f64
        })
        .collect()
}

fn int16_file(width: usize, height: usize, counts: &[u16], bscale: Option<f64>) -> Vec<u8> {
    let mut cards = vec![
        HeaderCard::new("SIMPLE", CardValue::Logical(true)),
        HeaderCard::new("BITPIX", CardValue::Integer(16)),
        HeaderCard::new("NAXIS", CardValue::Integer(2)),
        HeaderCard::new("NAXIS1", CardValue::Integer(width as i64)),
        HeaderCard::new("NAXIS2", CardValue::Integer(height as i64)),
        HeaderCard::new("BZERO", CardValue::Integer(32768)),
    ];
    if let Some(s) = bscale {
        cards.push(HeaderCard::new("BSCALE", CardValue::Real(s)));
    }
    let mut out = Vec::new();
    for c in &cards {
        out.extend_from_slice(&c.encode().unwrap());
    }
    out.extend_from_slice(format!("{:<80}", "END").as_bytes());
    out.resize(out.len().div_ceil(BLOCK) * BLOCK, b' ');
    let start = out.len();
    for &c in counts {
        // Unsigned counts are stored offset by -32768.
        out.extend_from_slice(&((c as i32 - 32768) as i16).to_be_bytes());
    }
    out.resize(start + (out.len() - start).div_ceil(BLOCK) * BLOCK, 0);
    out
}

#[test]
fn unsigned_counts_are_reconstructed() {
    let counts: Vec<u16> = vec![0, 1, 32767, 32768, 32769, 65535, 1000, 40000];
    let bytes = int16_file(4, 2, &counts, None);
    let (img, _) = fits::read_image(&bytes).unwrap();
    let reference = reference_decode(&bytes[BLOCK..], counts.len(), 32768.0, 1.0);
    for ((got, want), c) in img.data.iter().zip(&reference).zip(&counts) {
        assert_eq!(*want, *c as f64);
        assert_eq!(*got as f64, *want);
    }
}

#[test]
fn bscale_is_applied() {
    let counts: Vec<u16> = vec![0, 10, 65535];
    let bytes = int16_file(3, 1, &counts, Some(0.5));
    let (img, _) = fits::read_image(&bytes).unwrap();
    // BZERO + BSCALE * raw, with raw = count - 32768.
    let reference = reference_decode(&bytes[BLOCK..], 3, 32768.0, 0.5);
    for (got, want) in img.data.iter().zip(&reference) {
        assert_eq!(*got, *want as f32);
    }
}

#[test]
fn one_pixel_image_is_two_blocks() {
    let bytes = FitsImage::new(1, 1, vec![7.0]).encode().unwrap();
    assert_eq!(bytes.len(), 5760);
}

#[test]
fn survey_sized_image_round_trips() {
    let (w, h) = (1361, 2048);
    let data: Vec<f32> = (0..w * h).map(|i| ((i as u32).wrapping_mul(2_654_435_761) >> 8) as f32 * 1e-3).collect();
    assert_eq!(data.len() * 4, 11_149_312);
    let bytes = FitsImage::new(w, h, data.clone()).encode().unwrap();
    assert_eq!(bytes.len(), BLOCK + 11_149_312usize.div_ceil(BLOCK) * BLOCK);
    let (img, _) = fits::read_image(&bytes).unwrap();
    assert_eq!((img.width, img.height), (w, h));
    assert!(img.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = metadata_image();
    let path = dir.path().join("x.fits");
    std::fs::write(&path, fits::write_image(&img)).unwrap();
    assert_eq!(fits::load_image(&path).unwrap(), img);
    let err = fits::load_image(&dir.path().join("missing.fits")).unwrap_err();
    assert!(format!("{err:#}").contains("missing.fits"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_float_image_round_trips_bit_exactly(
        w in 1usize..40,
        h in 1usize..40,
        seed in any::<u32>(),
    ) {
        // Arbitrary bit patterns, NaN payloads included.
        let data: Vec<f32> = (0..w * h)
            .map(|i| f32::from_bits((i as u32 ^ seed).wrapping_mul(0x9e37_79b1)))
            .collect();
        let bytes = FitsImage::new(w, h, data.clone()).encode().unwrap();
        prop_assert_eq!(bytes.len() % BLOCK, 0);
        let (img, _) = fits::read_image(&bytes).unwrap();
        prop_assert_eq!((img.width, img.height), (w, h));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&img.data), bits(&data));
    }
}
