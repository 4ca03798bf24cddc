use std::path::{Path, PathBuf};

use lazystrike::io::{decode_tensors, encode_manifest, encode_tensors, parse_manifest, read_tensors, Manifest};
use lazystrike::{Error, Tensor};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn valid_fixture_contents() {
    let t = read_tensors(fixture("valid.lstn")).unwrap();
    assert_eq!(t[0].0, "features");
    assert_eq!(t[0].1.shape(), [2, 2, 3]);
    assert_eq!(t[0].1.data(), (0..12).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
    assert_eq!(t[1].0, "cls");
    assert_eq!(t[1].1.data(), [1.0, -2.0, 0.25]);
}

#[test]
fn duplicate_names_are_rejected() {
    let t = Tensor::zeros(&[1]);
    let dup = vec![("a".to_string(), t.clone()), ("a".to_string(), t)];
    assert!(matches!(encode_tensors(&dup), Err(Error::DuplicateName(n)) if n == "a"));
}

#[test]
fn corrupt_fixtures_have_distinct_errors() {
    assert!(matches!(read_tensors(fixture("bad_magic.lstn")), Err(Error::BadMagic)));
    assert!(matches!(read_tensors(fixture("truncated.lstn")), Err(Error::Truncated(_))));
    assert!(matches!(read_tensors(fixture("unknown_dtype.lstn")), Err(Error::UnknownDtype(7))));
    assert!(matches!(read_tensors(fixture("missing.lstn")), Err(Error::Io(_))));
}

#[test]
fn manifest_fixture_resolves_features() {
    let mut m = Manifest::read(fixture("pib_manifest.jsonl")).unwrap();
    let samples = m.annotated_features().unwrap();
    assert_eq!(samples.len(), 4);
    assert!(samples.iter().all(|s| s.input.grid_h() == 2 && s.input.grid_w() == 2 && s.input.dim() == 2));
    let text = std::fs::read_to_string(fixture("pib_manifest.jsonl")).unwrap();
    let entries = parse_manifest(&text).unwrap();
    assert_eq!(parse_manifest(&encode_manifest(&entries).unwrap()).unwrap(), entries);
}

fn tensor_strategy() -> impl Strategy<Value = (String, Tensor)> {
    (prop::collection::vec(1usize..4, 1..4), "[a-z.]{1,12}").prop_flat_map(|(shape, name)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, n)
            .prop_map(move |data| (name.clone(), Tensor::new(shape.clone(), data).unwrap()))
    })
}

/// Names are suffixed with their position: the container rejects duplicates.
fn tensors_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(String, Tensor)>> {
    prop::collection::vec(tensor_strategy(), len)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (n, t))| (format!("{n}{i}"), t)).collect())
}

proptest! {
    #[test]
    fn container_roundtrip_is_bit_exact(tensors in tensors_strategy(0..5)) {
        let back = decode_tensors(&encode_tensors(&tensors).unwrap()).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, a), (nb, b)) in tensors.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn every_proper_prefix_is_rejected(tensors in tensors_strategy(1..3), cut in 0.0f64..1.0) {
        let bytes = encode_tensors(&tensors).unwrap();
        let len = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_tensors(&bytes[..len]).is_err());
    }
}
