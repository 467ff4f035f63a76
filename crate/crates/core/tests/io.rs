use helen_core::io::{decode_cube, encode_cube, read_cube, to_json, write_cube, ResultFile, RunConfig};
use helen_core::{run, EngineConfig, HelenError, HsiCube, SynthConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn cube_from(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> HsiCube {
    HsiCube::from_band_major(rows, cols, bands, &data).unwrap()
}

#[test]
fn roundtrip_through_file() {
    let data: Vec<f64> = (0..48).map(|i| (i as f64 * 0.731).sin()).collect();
    let cube = cube_from(4, 4, 3, data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cube");
    write_cube(&cube, &path).unwrap();
    assert_eq!(read_cube(&path).unwrap(), cube);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"HYPC");
    assert_eq!(bytes.len(), 18 + 48 * 8);
}

#[test]
fn payload_is_band_major() {
    let cube = cube_from(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(cube.pixel(0), &[1.0, 3.0]);
    let bytes = encode_cube(&cube).unwrap();
    let second = f64::from_le_bytes(bytes[26..34].try_into().unwrap());
    assert_eq!(second, 2.0);
}

#[test]
fn corrupted_magic_names_offset_zero() {
    let mut bytes = encode_cube(&cube_from(1, 1, 1, vec![0.5])).unwrap();
    bytes[0] = b'X';
    match decode_cube(&bytes) {
        Err(HelenError::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn header_promising_more_data_is_truncation() {
    let mut bytes = encode_cube(&cube_from(2, 2, 2, vec![0.0; 8])).unwrap();
    bytes[6..10].copy_from_slice(&1000u32.to_le_bytes());
    match decode_cube(&bytes) {
        Err(HelenError::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
        other => panic!("unexpected {other:?}"),
    }
    bytes.truncate(12);
    assert!(matches!(decode_cube(&bytes), Err(HelenError::Format { .. })));
}

#[test]
fn overflowing_header_is_rejected() {
    let mut bytes = encode_cube(&cube_from(1, 1, 1, vec![0.0])).unwrap();
    for o in [6, 10, 14] {
        bytes[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(decode_cube(&bytes), Err(HelenError::Format { .. })));
}

#[test]
fn run_config_rejects_unknown_keys() {
    assert!(matches!(RunConfig::from_json(r#"{"engine":{"max_sweeps":3},"extra":1}"#), Err(HelenError::Config(_))));
    assert!(matches!(RunConfig::from_json(r#"{"synth":{"rowz":3}}"#), Err(HelenError::Config(_))));
    let cfg = RunConfig::from_json(r#"{"engine":{"prior_family":"gaussian","max_sweeps":7},"synth":{"snr_db":null}}"#).unwrap();
    assert_eq!(cfg.engine.max_sweeps, 7);
    assert_eq!(cfg.synth.snr_db, None);
}

#[test]
fn result_file_roundtrip_is_exact() {
    let gt = helen_core::synth::generate(&SynthConfig { rows: 6, cols: 6, bands: 5, seed: 1, ..Default::default() }).unwrap();
    let cfg = EngineConfig { max_sweeps: 3, patch_rows: 3, patch_cols: 3, ..Default::default() };
    let r = run(&gt.cube, &cfg).unwrap();
    let text = to_json(&ResultFile::from_result(&r)).unwrap();
    let back: ResultFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back.to_result().unwrap(), r);
    assert_eq!(to_json(&back).unwrap(), text);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn encode_decode_is_identity(rows in 1usize..5, cols in 1usize..5, bands in 1usize..4, seed in any::<u64>()) {
        let n = rows * cols * bands;
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 10_007) as f64).ln_1p() * 1e-3 - 0.2).collect();
        let cube = cube_from(rows, cols, bands, data);
        prop_assert_eq!(decode_cube(&encode_cube(&cube).unwrap()).unwrap(), cube);
    }

    #[test]
    fn any_truncation_is_an_error(cut in 0usize..(18 + 12 * 8)) {
        let cube = HsiCube::new(2, 2, DMatrix::from_element(3, 4, 0.25)).unwrap();
        let bytes = encode_cube(&cube).unwrap();
        prop_assert!(decode_cube(&bytes[..cut]).is_err());
    }
}
