use std::fs;

use proptest::prelude::*;
use uotalign::features::{
    decode_embedding, encode_embedding, read_embedding_file, synth_dataset, write_embedding_file, SynthSpec,
};
use uotalign::prompt::load_description_manifest;
use uotalign::trainer::{load_checkpoint, save_checkpoint, train, RunConfig};
use uotalign::Mat;

proptest! {
    #[test]
    fn emb1_round_trip_is_bitwise(
        rows in 0usize..6,
        cols in 0usize..6,
        raw in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 36),
    ) {
        let m = Mat::new(rows, cols, raw[..rows * cols].iter().map(|&x| f64::from(x)).collect()).unwrap();
        let bytes = encode_embedding(&m).unwrap();
        prop_assert_eq!(bytes.len(), 12 + 4 * rows * cols);
        let back = decode_embedding(&bytes, std::path::Path::new("p")).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(encode_embedding(&back).unwrap(), bytes);
    }
}

#[test]
fn emb1_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.emb");
    let m = Mat::from_fn(3, 5, |i, j| f64::from((i * 5 + j) as f32 * 0.37f32));
    write_embedding_file(&path, &m).unwrap();
    assert_eq!(read_embedding_file(&path).unwrap(), m);
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_dataset_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SynthSpec { per_class: 8, ..Default::default() };
    synth_dataset(&spec, a.path()).unwrap();
    synth_dataset(&spec, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { per_class: 8, ..Default::default() };
    let manifest = synth_dataset(&spec, dir.path()).unwrap();
    let files = load_description_manifest(dir.path().join("descriptions.json")).unwrap();
    let mut run = RunConfig::default();
    run.train.epochs = 5;
    let paths = [dir.path().join("a.ckpt"), dir.path().join("b.ckpt")];
    for p in &paths {
        save_checkpoint(p, &train(&manifest, &files, &run).unwrap()).unwrap();
    }
    let bytes = fs::read(&paths[0]).unwrap();
    assert_eq!(bytes, fs::read(&paths[1]).unwrap());
    let state = load_checkpoint(&paths[0]).unwrap();
    assert_eq!(state.history.len(), 5);
}
