use std::collections::BTreeMap;

use sblwta_core::datasets::*;
use sblwta_core::error::Error;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 1];
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
    std::fs::write(&lp, idx_labels(&[7, 0])).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.inputs.shape(), &[2, 2, 2, 1]);
    assert_eq!(d.labels, vec![7, 0]);
    assert_eq!(d.inputs.data()[1], 1.0);
    assert!((d.inputs.data()[2] - 0.2).abs() < 1e-15);
    assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

    std::fs::write(&lp, idx_labels(&[7])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    let mut truncated = idx_labels(&[7, 0]);
    truncated.pop();
    std::fs::write(&lp, truncated).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    std::fs::write(&lp, idx_images(2, 2, 2, &[0; 8])).unwrap();
    match load_idx(&ip, &lp) {
        Err(Error::Format(m)) => assert!(m.contains("0x00000803"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io(_))));
}

#[test]
fn cifar_batches_load_channel_last() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![3u8];
    rec.extend(std::iter::repeat(255).take(1024));
    rec.extend(std::iter::repeat(0).take(1024));
    rec.extend(std::iter::repeat(51).take(1024));
    let p = dir.path().join("b1.bin");
    std::fs::write(&p, &rec).unwrap();
    let d = load_cifar10(&[&p, &p]).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels, vec![3, 3]);
    assert_eq!(d.inputs.shape(), &[2, 32, 32, 3]);
    assert_eq!(d.inputs.at(&[0, 5, 7, 0]), 1.0);
    assert_eq!(d.inputs.at(&[0, 5, 7, 1]), 0.0);
    assert!((d.inputs.at(&[1, 31, 31, 2]) - 0.2).abs() < 1e-15);
    std::fs::write(&p, &rec[..3072]).unwrap();
    assert!(matches!(load_cifar10(&[&p]), Err(Error::Format(_))));
}

/// Nearest-empirical-mean accuracy, a linear decision rule.
fn midpoint_accuracy(d: &LabeledDataset) -> f64 {
    let dim = d.example_shape().iter().product::<usize>();
    let classes = d.num_classes();
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0.0; classes];
    for (x, &y) in d.inputs.data().chunks(dim).zip(&d.labels) {
        counts[y] += 1.0;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let correct = d
        .inputs
        .data()
        .chunks(dim)
        .zip(&d.labels)
        .filter(|(x, &y)| {
            let dist = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..classes).all(|k| k == y || dist(&means[y]) < dist(&means[k]))
        })
        .count();
    correct as f64 / d.len() as f64
}

#[test]
fn blob_separation_controls_linear_separability() {
    let far = synthetic_blobs(1000, 2, 2, 10.0, 1).unwrap();
    assert!(midpoint_accuracy(&far) >= 0.999);
    let none = synthetic_blobs(1000, 2, 2, 0.0, 1).unwrap();
    let acc = midpoint_accuracy(&none);
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
    for d in [&far, &none] {
        assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let again = synthetic_blobs(1000, 2, 2, 10.0, 1).unwrap();
    let bytes = |d: &LabeledDataset| d.inputs.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(&far), bytes(&again));
    assert_eq!(far.labels, again.labels);
}

#[test]
fn batches_preserve_the_label_multiset() {
    let d = synthetic_blobs(37, 3, 4, 2.0, 9).unwrap();
    let count = |labels: &mut dyn Iterator<Item = usize>| {
        let mut m = BTreeMap::new();
        labels.for_each(|y| *m.entry(y).or_insert(0) += 1);
        m
    };
    for bs in [1, 7, 111, 500] {
        let b = batches(d.len(), bs, 4).unwrap();
        assert_eq!(b, batches(d.len(), bs, 4).unwrap());
        assert!(b.iter().all(|x| x.len() <= bs));
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        assert_eq!(
            count(&mut seen.iter().map(|&i| d.labels[i])),
            count(&mut d.labels.iter().copied())
        );
        seen.sort_unstable();
        assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
    }
    let single = batches(d.len(), d.len(), 4).unwrap();
    assert_eq!(single.len(), 1);
    assert_ne!(single[0], (0..d.len()).collect::<Vec<_>>());
}
