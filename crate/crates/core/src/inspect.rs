//! Competition patterns and confidence histograms for trained models.

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::{winner_probabilities, Sampling};
use crate::model::Model;
use crate::rng::{self, derive_seed, tags};
use crate::tensor::Tensor;

/// Per-class mean winner probabilities `[M, K * U]` of competitive layer `layer`.
///
/// Each class averages the winner softmax over its examples and `n_samples`
/// gate draws; the layer's input comes from one exact pass through the
/// layers before it.
pub fn competition_patterns(
    model: &Model,
    data: &LabeledDataset,
    layer: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let target = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layer index {layer} out of range for {} layers", model.layers.len())))?;
    let comp = target
        .as_competitive()
        .ok_or_else(|| Error::Config(format!("layer {layer} ({}) is not an LWTA layer", target.kind())))?;
    let (k, u) = (comp.blocks(), comp.units());
    let m = model.classes();
    let base = derive_seed(seed, tags::COMPETITION);
    let mut out = Vec::with_capacity(m * k * u);
    for class in 0..m {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("class {class} has no examples to inspect")));
        }
        let mut r = rng::stream(base, class as u64);
        let x = model.layer_input(&data.inputs.select_rows(&idx), layer, Sampling::Exact, &mut r)?;
        out.extend_from_slice(winner_probabilities(comp, &x, &mut r, n_samples)?.data());
    }
    Ok((Tensor::new(vec![m, k * u], out)?, u))
}

/// CSV with a `k<block>_u<unit>` header and one row per class.
pub fn patterns_csv(patterns: &Tensor, units: usize) -> String {
    let w = patterns.shape()[1];
    let header: Vec<String> = (0..w).map(|c| format!("k{}_u{}", c / units, c % units)).collect();
    let mut s = header.join(",");
    s.push('\n');
    for row in patterns.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Mean total-variation distance between matching `(class, block)` groups.
pub fn mean_block_tv(a: &Tensor, b: &Tensor, units: usize) -> Result<f64> {
    if a.shape() != b.shape() || units == 0 || a.len() % units != 0 {
        return Err(Error::dim(format!(
            "patterns {:?} and {:?} are not comparable in blocks of {units}",
            a.shape(),
            b.shape()
        )));
    }
    let groups = a.len() / units;
    let total: f64 = a
        .data()
        .chunks(units)
        .zip(b.data().chunks(units))
        .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / groups as f64)
}

/// CSV `bin_lo,bin_hi,count` over equal bins on `[0, 1]`.
pub fn histogram_csv(counts: &[u64]) -> String {
    let bins = counts.len();
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        s.push_str(&format!("{},{},{c}\n", i as f64 / bins as f64, (i + 1) as f64 / bins as f64));
    }
    s
}
