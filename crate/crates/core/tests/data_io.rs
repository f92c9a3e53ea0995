use std::collections::HashMap;

use binens::data::{augment, load_tsv, make_synthetic_task, save_tsv, tokenize, Split, TaskKind, TaskSpec, AUGMENT_RATE};
use binens::Error;

const KINDS: [TaskKind; 3] = [TaskKind::ParityOfMarker, TaskKind::KeywordVsKeyword, TaskKind::MajorityByte];

#[test]
fn two_line_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tsv");
    std::fs::write(&path, "hello\t0\nworld\t1\n").unwrap();
    let ds = load_tsv(&path).unwrap();
    assert_eq!((ds.len(), ds.num_classes), (2, 2));
    assert_eq!(ds.examples[1].text, b"world");
}

#[test]
fn bad_lines_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tsv");
    for body in ["ok\t0\na\tb\tc\t1\n", "ok\t0\nno tab here\n", "ok\t0\nfine\tseven\n"] {
        std::fs::write(&path, body).unwrap();
        match load_tsv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{body:?}"),
            other => panic!("{body:?}: {other:?}"),
        }
    }
    assert!(matches!(load_tsv(&dir.path().join("missing.tsv")), Err(Error::Io { .. })));
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tsv");
    for kind in KINDS {
        let ds = make_synthetic_task(&TaskSpec::new(kind, 300, 3, 2, 0.1), Split::Train).unwrap();
        save_tsv(&ds, &path).unwrap();
        let back = load_tsv(&path).unwrap();
        assert_eq!(back.examples, ds.examples);
        assert_eq!(back.num_classes, ds.num_classes);
    }
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize(b"AB", 4), (vec![66, 67, 0, 0], vec![true, true, false, false]));
    assert_eq!(tokenize(b"", 3), (vec![0; 3], vec![false; 3]));
    let long = vec![b'q'; 100];
    let (ids, mask) = tokenize(&long, 32);
    assert_eq!(ids, vec![b'q' as usize + 1; 32]);
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn noiseless_tasks_are_functions_of_the_text() {
    for kind in KINDS {
        let ds = make_synthetic_task(&TaskSpec::new(kind, 2000, 3, 4, 0.0), Split::Train).unwrap();
        let mut seen: HashMap<&[u8], usize> = HashMap::new();
        for e in &ds.examples {
            assert_eq!(*seen.entry(&e.text).or_insert(e.label), e.label, "{kind}");
        }
    }
}

#[test]
fn flip_fraction() {
    for kind in KINDS {
        let clean = make_synthetic_task(&TaskSpec::new(kind, 10_000, 4, 6, 0.0), Split::Train).unwrap();
        let noisy = make_synthetic_task(&TaskSpec::new(kind, 10_000, 4, 6, 0.1), Split::Train).unwrap();
        let flipped = clean.examples.iter().zip(&noisy.examples).filter(|(a, b)| a.label != b.label).count();
        let rate = flipped as f64 / 10_000.0;
        assert!((rate - 0.1).abs() <= 0.02 * 0.1, "{kind}: {rate}");
        assert_eq!(noisy, make_synthetic_task(&TaskSpec::new(kind, 10_000, 4, 6, 0.1), Split::Train).unwrap());
    }
}

#[test]
fn augmentation() {
    let ds = make_synthetic_task(&TaskSpec::new(TaskKind::MajorityByte, 10, 2, 1, 0.0), Split::Train).unwrap();
    assert_eq!(augment(&ds, 1, 0).unwrap(), ds);
    assert_eq!(augment(&ds, 3, 0).unwrap().len(), 30);

    let big = make_synthetic_task(&TaskSpec::new(TaskKind::ParityOfMarker, 20_000, 2, 2, 0.0), Split::Train).unwrap();
    let aug = augment(&big, 4, 9).unwrap();
    let (mut changed, mut total) = (0usize, 0usize);
    for (i, copy) in aug.examples[big.len()..].iter().enumerate() {
        let orig = &big.examples[i % big.len()];
        assert_eq!(copy.label, orig.label);
        total += orig.text.len();
        changed += orig.text.iter().zip(&copy.text).filter(|(a, b)| a != b).count();
    }
    let rate = changed as f64 / total as f64;
    assert!((rate - AUGMENT_RATE).abs() <= 0.02 * AUGMENT_RATE, "{rate} over {total} bytes");
}
