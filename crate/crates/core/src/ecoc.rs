//! Error-correcting output codes: code construction, bit transforms,
//! likelihood decoding and ensemble averaging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NOISE_EPS;
use crate::special::sigmoid;
use crate::tensor::{argmax, Graph, Tensor, Var};

/// `M x N` binary code; row `k` is the codeword of class `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingMatrix {
    classes: usize,
    bits: usize,
    entries: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeKind {
    Identity,
    Hadamard,
}

impl std::str::FromStr for CodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodeKind::Identity),
            "hadamard" => Ok(CodeKind::Hadamard),
            other => Err(Error::Config(format!("unknown code kind `{other}`"))),
        }
    }
}

/// Map from output logits to per-bit probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// Two logits per bit; the second of each pair is the "1" outcome.
    SoftmaxPairs,
    Logistic,
    Tanh,
}

impl TransformKind {
    pub fn logits_per_bit(self) -> usize {
        match self {
            TransformKind::SoftmaxPairs => 2,
            TransformKind::Logistic | TransformKind::Tanh => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::SoftmaxPairs => "softmax-pairs",
            TransformKind::Logistic => "logistic",
            TransformKind::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-pairs" | "softmax" => Ok(TransformKind::SoftmaxPairs),
            "logistic" => Ok(TransformKind::Logistic),
            "tanh" => Ok(TransformKind::Tanh),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

impl CodingMatrix {
    /// Validates `rows` as a code: equal lengths, 0/1 entries, distinct rows, `N >= M`.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let code = Self::from_rows_unchecked(rows)?;
        if code.bits < code.classes {
            return Err(Error::Config(format!(
                "code has {} bits for {} classes",
                code.bits, code.classes
            )));
        }
        for a in 0..code.classes {
            for b in a + 1..code.classes {
                if code.row(a) == code.row(b) {
                    return Err(Error::Config(format!("codewords {a} and {b} coincide")));
                }
            }
        }
        Ok(code)
    }

    fn from_rows_unchecked(rows: &[Vec<u8>]) -> Result<Self> {
        let classes = rows.len();
        let bits = rows.first().map_or(0, Vec::len);
        if classes == 0 || bits == 0 {
            return Err(Error::Config("code matrix is empty".into()));
        }
        let mut entries = Vec::with_capacity(classes * bits);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != bits {
                return Err(Error::Config(format!("code row {i} has {} bits, expected {bits}", r.len())));
            }
            if let Some(v) = r.iter().find(|&&v| v > 1) {
                return Err(Error::Config(format!("code row {i} has non-binary entry {v}")));
            }
            entries.extend_from_slice(r);
        }
        Ok(CodingMatrix { classes, bits, entries })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn row(&self, k: usize) -> &[u8] {
        &self.entries[k * self.bits..(k + 1) * self.bits]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries.chunks(self.bits).map(<[u8]>::to_vec).collect()
    }

    pub fn min_distance(&self) -> usize {
        let mut best = usize::MAX;
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                let d = self.row(a).iter().zip(self.row(b)).filter(|(x, y)| x != y).count();
                best = best.min(d);
            }
        }
        best
    }

    /// Columns `[start, end)` as a smaller code for one ensemble member.
    /// Rows of a slice need not be distinct.
    pub fn column_slice(&self, start: usize, end: usize) -> Result<CodingMatrix> {
        if start >= end || end > self.bits {
            return Err(Error::Config(format!(
                "column slice {start}..{end} outside a {}-bit code",
                self.bits
            )));
        }
        let rows: Vec<Vec<u8>> = (0..self.classes).map(|k| self.row(k)[start..end].to_vec()).collect();
        Self::from_rows_unchecked(&rows)
    }

    /// Contiguous disjoint column slices, `N / members` bits each.
    pub fn ensemble_slices(&self, members: usize) -> Result<Vec<CodingMatrix>> {
        if members == 0 || self.bits % members != 0 {
            return Err(Error::Config(format!(
                "{} bits do not split across {members} members",
                self.bits
            )));
        }
        let w = self.bits / members;
        (0..members).map(|e| self.column_slice(e * w, (e + 1) * w)).collect()
    }

    /// `C` as an `[M, N]` tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.classes, self.bits],
            self.entries.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.entries.chunks(self.bits) {
            let cells: Vec<String> = r.iter().map(u8::to_string).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| match c.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Format(format!("code CSV line {}: bad entry `{other}`", i + 1))),
                })
                .collect::<Result<Vec<u8>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Identity (`N == M`) or Sylvester-Hadamard code.
///
/// The Hadamard code takes rows `1..=M` of the `N x N` Sylvester matrix
/// (`+1 -> 1`, `-1 -> 0`), so any two codewords differ in exactly `N / 2` bits.
pub fn build_code(m: usize, n: usize, kind: CodeKind) -> Result<CodingMatrix> {
    if m < 2 {
        return Err(Error::Config(format!("a code needs at least 2 classes, got {m}")));
    }
    match kind {
        CodeKind::Identity => {
            if n != m {
                return Err(Error::Config(format!("identity code needs N == M, got M={m} N={n}")));
            }
            let rows: Vec<Vec<u8>> = (0..m).map(|k| (0..m).map(|j| u8::from(j == k)).collect()).collect();
            CodingMatrix::from_rows(&rows)
        }
        CodeKind::Hadamard => {
            if !n.is_power_of_two() || n < 2 || m > n - 1 {
                return Err(Error::Config(format!(
                    "Hadamard code needs N a power of two with M <= N - 1, got M={m} N={n}"
                )));
            }
            let rows: Vec<Vec<u8>> = (1..=m)
                .map(|i| (0..n).map(|j| u8::from((i & j).count_ones() % 2 == 0)).collect())
                .collect();
            let code = CodingMatrix::from_rows(&rows)?;
            let d = code.min_distance();
            if d != n / 2 {
                return Err(Error::Consistency(format!(
                    "Hadamard({m},{n}) min distance {d}, expected {}",
                    n / 2
                )));
            }
            Ok(code)
        }
    }
}

fn check_logit_width(width: usize, kind: TransformKind) -> Result<usize> {
    if kind == TransformKind::SoftmaxPairs && width % 2 != 0 {
        return Err(Error::dim(format!("softmax-pairs needs an even logit count, got {width}")));
    }
    Ok(width / kind.logits_per_bit())
}

/// Per-bit probabilities `[N_batch, N]` from output logits.
pub fn bit_probabilities(logits: &Tensor, kind: TransformKind) -> Result<Tensor> {
    let (rows, width) = logits.as_matrix("logits")?;
    let bits = check_logit_width(width, kind)?;
    let data: Vec<f64> = match kind {
        TransformKind::Logistic => logits.data().iter().map(|&l| sigmoid(l)).collect(),
        TransformKind::Tanh => logits.data().iter().map(|&l| 0.5 * (1.0 + l.tanh())).collect(),
        TransformKind::SoftmaxPairs => logits
            .data()
            .chunks(2)
            .map(|p| sigmoid(p[1] - p[0]))
            .collect(),
    };
    Tensor::new(vec![rows, bits], data)
}

/// Softmax over the independent-bit log-likelihood of every codeword.
pub fn class_probabilities(bit_probs: &Tensor, code: &CodingMatrix) -> Result<Tensor> {
    let (rows, bits) = bit_probs.as_matrix("bit probabilities")?;
    if bits != code.bits() {
        return Err(Error::dim(format!(
            "{bits} bit probabilities for a {}-bit code",
            code.bits()
        )));
    }
    let m = code.classes();
    let mut out = vec![0.0; rows * m];
    for (dst, p) in out.chunks_mut(m).zip(bit_probs.data().chunks(bits)) {
        let lp: Vec<(f64, f64)> = p
            .iter()
            .map(|&v| {
                let v = v.clamp(NOISE_EPS, 1.0 - NOISE_EPS);
                (v.ln(), (1.0 - v).ln())
            })
            .collect();
        for (k, s) in dst.iter_mut().enumerate() {
            *s = code
                .row(k)
                .iter()
                .zip(&lp)
                .map(|(&c, &(l1, l0))| if c == 1 { l1 } else { l0 })
                .sum();
        }
    }
    Ok(Tensor::new(vec![rows, m], out)?.softmax_last())
}

/// Argmax label and its probability for every row; ties go to the lowest class.
pub fn decode(class_probs: &Tensor) -> Vec<(usize, f64)> {
    let w = class_probs.shape().last().copied().unwrap_or(1).max(1);
    class_probs
        .data()
        .chunks(w)
        .map(|r| {
            let k = argmax(r);
            (k, r[k])
        })
        .collect()
}

/// Mean of member class-probability tables.
pub fn ensemble_aggregate(members: &[Tensor]) -> Result<Tensor> {
    let first = members
        .first()
        .ok_or_else(|| Error::contract("ensemble of zero members"))?;
    let mut acc = first.clone();
    for m in &members[1..] {
        if m.shape() != first.shape() {
            return Err(Error::dim(format!(
                "ensemble member shapes {:?} and {:?} differ",
                first.shape(),
                m.shape()
            )));
        }
        for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let e = members.len() as f64;
    Ok(acc.map(|v| v / e))
}

/// Codeword log-likelihood scores `[N_batch, M]` on the graph.
///
/// Bit log-probabilities come from `log_sigmoid` / `log_softmax` directly, so
/// saturated logits still pass gradient.
pub fn class_scores_var(g: &mut Graph, logits: Var, code: &CodingMatrix, kind: TransformKind) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let &[rows, width] = shape.as_slice() else {
        return Err(Error::dim(format!("logits must be [N, W], got {shape:?}")));
    };
    let bits = check_logit_width(width, kind)?;
    if bits != code.bits() {
        return Err(Error::dim(format!(
            "{width} logits give {bits} bits for a {}-bit code",
            code.bits()
        )));
    }
    let (log_p1, log_p0) = match kind {
        TransformKind::Logistic | TransformKind::Tanh => {
            let s = if kind == TransformKind::Tanh { 2.0 } else { 1.0 };
            let pos = g.scale(logits, s);
            let neg = g.scale(logits, -s);
            (g.log_sigmoid(pos), g.log_sigmoid(neg))
        }
        TransformKind::SoftmaxPairs => {
            let pairs = g.reshape(logits, &[rows, bits, 2])?;
            let lp = g.log_softmax(pairs);
            // pick the "1" / "0" halves with constant selectors
            let sel1 = g.constant(Tensor::vector(vec![0.0, 1.0]));
            let sel0 = g.constant(Tensor::vector(vec![1.0, 0.0]));
            let p1 = g.mul(lp, sel1)?;
            let p0 = g.mul(lp, sel0)?;
            (g.sum_axis(p1, 2)?, g.sum_axis(p0, 2)?)
        }
    };
    let c = code.to_tensor();
    let ct = g.constant(c.transpose()?);
    let c0t = g.constant(c.map(|v| 1.0 - v).transpose()?);
    let s1 = g.matmul(log_p1, ct)?;
    let s0 = g.matmul(log_p0, c0t)?;
    g.add(s1, s0)
}
