use std::fs;

use bfd::store::{activation_name, weight_name, write_archive, Archive, ArchiveManifest, NamedTensor};
use bfd::BfdError;
use bfd_core::synth::{generate, SynthConfig};
use proptest::prelude::*;

fn model_tensors(m: &ArchiveManifest) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    let mut k = 0.0f32;
    let mut next = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| {
                k += 1.0;
                k * 0.25 - 3.0
            })
            .collect()
    };
    for l in 0..m.num_layers {
        let shape = vec![m.num_images, m.num_tokens(), m.embed_dim];
        out.push(NamedTensor {
            name: activation_name(l),
            data: next(shape.iter().product()),
            shape,
        });
        for h in 0..m.num_heads {
            for w in ["wq", "wk"] {
                out.push(NamedTensor {
                    name: weight_name(l, h, w),
                    shape: vec![m.embed_dim, m.head_dim],
                    data: next(m.embed_dim * m.head_dim),
                });
            }
        }
    }
    out
}

fn small() -> (ArchiveManifest, Vec<NamedTensor>) {
    let mut m = ArchiveManifest::new("small", 2, 2, 3, 2, 2, 1, 2, 2);
    let t = model_tensors(&m);
    m.assign_entries(&t);
    (m, t)
}

#[test]
fn rank3_tensor_roundtrips_with_96_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, mut t) = small();
    let extra = NamedTensor {
        name: "extra/block".into(),
        shape: vec![2, 3, 4],
        data: (0..24).map(|i| i as f32 * 1.5 - 7.0).collect(),
    };
    t.push(extra.clone());
    m.assign_entries(&t);
    write_archive(dir.path(), &m, &t).unwrap();
    let a = Archive::open(dir.path()).unwrap();
    assert_eq!(a.read("extra/block").unwrap(), extra);
    assert_eq!(a.manifest().entry("extra/block").unwrap().byte_len(), 96);
    assert_eq!(fs::metadata(dir.path().join("extra/block.bin")).unwrap().len(), 96);
    assert_eq!(a.manifest(), &m);
}

#[test]
fn element_count_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, mut t) = small();
    t.push(NamedTensor {
        name: "extra/bad".into(),
        shape: vec![2, 3],
        data: vec![0.0; 5],
    });
    m.assign_entries(&t);
    match write_archive(dir.path(), &m, &t) {
        Err(BfdError::Validation { tensor, .. }) => assert_eq!(tensor, "extra/bad"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn synth_archive_reads_back_generator_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_images: 4,
        dim: 8,
        ..SynthConfig::default()
    };
    bfd::model::write_synth_archive(&cfg, dir.path()).unwrap();
    let a = Archive::open(dir.path()).unwrap();
    let m = a.manifest();
    assert_eq!((m.num_images, m.num_patch_tokens, m.embed_dim), (4, 16, 8));
    let out = generate(&cfg).unwrap();
    assert_eq!(m.tensor_entries.len(), out.tensors.len());
    for t in &out.tensors {
        let back = a.read(&t.name).unwrap();
        assert_eq!(back.shape, t.shape);
        assert!(back.data.iter().zip(&t.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", t.name);
    }
}

#[test]
fn truncated_file_names_its_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let (m, t) = small();
    write_archive(dir.path(), &m, &t).unwrap();
    let file = dir.path().join("weights/layer1.bin");
    let len = fs::metadata(&file).unwrap().len();
    let f = fs::OpenOptions::new().write(true).open(&file).unwrap();
    f.set_len(len - 4).unwrap();
    match Archive::open(dir.path()) {
        Err(BfdError::Truncated { tensor, .. }) => assert_eq!(tensor, weight_name(1, 1, "wk")),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn missing_file_unknown_version_and_unknown_name_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let (m, t) = small();
    write_archive(dir.path(), &m, &t).unwrap();
    let a = Archive::open(dir.path()).unwrap();
    assert!(matches!(a.read("nope"), Err(BfdError::NotFound(n)) if n == "nope"));

    fs::remove_file(dir.path().join("activations/layer0.bin")).unwrap();
    assert!(matches!(Archive::open(dir.path()), Err(BfdError::MissingFile { tensor, .. }) if tensor == activation_name(0)));

    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    fs::write(&path, text).unwrap();
    assert!(matches!(Archive::open(dir.path()), Err(BfdError::UnknownVersion(7))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Archive::open(empty.path()), Err(BfdError::MissingArchive(_))));
}

#[test]
fn subset_of_layers_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, mut t) = small();
    m.num_layers = 12;
    for tensor in &mut t {
        tensor.name = tensor.name.replace("layer1", "layer11");
    }
    m.assign_entries(&t);
    write_archive(dir.path(), &m, &t).unwrap();
    let a = Archive::open(dir.path()).unwrap();
    assert_eq!(a.manifest().captured_layers(), vec![0, 11]);
}

#[test]
fn writes_are_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (m, t) = small();
    write_archive(a.path(), &m, &t).unwrap();
    write_archive(b.path(), &m, &t).unwrap();
    for rel in ["manifest.json", "activations/layer0.bin", "weights/layer1.bin"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
    }
}

fn tensor_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<f32>)>> {
    let one = prop::collection::vec(1usize..5, 0..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<f32>(), n))
    });
    prop::collection::vec(one, 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn roundtrip_is_identity(extra in tensor_strategy(), name in "[a-z]{1,8}") {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, mut t) = small();
        m.model_name = name;
        for (i, (shape, data)) in extra.into_iter().enumerate() {
            t.push(NamedTensor { name: format!("extra/t{i}"), shape, data });
        }
        m.assign_entries(&t);
        write_archive(dir.path(), &m, &t).unwrap();
        let a = Archive::open(dir.path()).unwrap();
        prop_assert_eq!(a.manifest(), &m);
        for tensor in &t {
            let back = a.read(&tensor.name).unwrap();
            prop_assert_eq!(&back.shape, &tensor.shape);
            let same = back.data.iter().zip(&tensor.data).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same && back.data.len() == tensor.data.len());
        }
    }
}
