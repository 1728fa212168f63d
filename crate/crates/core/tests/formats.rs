//! Byte-level round trips of every on-disk artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use unisearch_core::corpus::Dataset;
use unisearch_core::{generate_corpus, load_checkpoint, save_checkpoint, CorpusConfig, ModelBundle, ModelConfig, OptimState, Vocab};
use unisearch_core::nn::ParamSet;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small() -> CorpusConfig {
    CorpusConfig {
        train_scenes: 12,
        val_scenes: 3,
        test_scenes: 6,
        ..Default::default()
    }
}

#[test]
fn corpus_regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&small(), a.path()).unwrap();
    generate_corpus(&small(), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);

    let other = tempfile::tempdir().unwrap();
    generate_corpus(&CorpusConfig { seed: 1, ..small() }, other.path()).unwrap();
    assert_ne!(ta, tree(other.path()));
}

#[test]
fn vocab_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small(), dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let text = ds.vocab.to_tsv();
    let back = Vocab::read_tsv(text.as_bytes()).unwrap();
    assert_eq!(back, ds.vocab);
    assert_eq!(back.to_tsv(), text);
}

#[test]
fn checkpoint_with_optimizer_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = ModelBundle::<f32>::new(&ModelConfig::tiny(20), 11).unwrap();
    b.stage_completed = 3;
    let mut o = OptimState::new(&b.tensors());
    o.step = 42;
    for (i, m) in o.m.iter_mut().enumerate() {
        m.data.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
    }
    save_checkpoint(&b, Some(&o), dir.path()).unwrap();
    let first = tree(dir.path());
    let (b2, o2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(b2, b);
    assert_eq!(o2, Some(o.clone()));
    save_checkpoint(&b2, o2.as_ref(), dir.path()).unwrap();
    assert_eq!(tree(dir.path()), first);
}
