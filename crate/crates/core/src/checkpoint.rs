//! `SBLWTA1` model archives.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SBLWTA1"  u64 manifest_len  manifest_json
//! repeated:  u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! The manifest holds the [`ModelSpec`] and the ordered list of array names
//! (`<layer>/<param>`). Sticks are stored as their positive Kumaraswamy
//! parameters `stick_a` / `stick_b`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    DenseLayer, GatedOutputLayer, HardWtaLayer, LwtaConvLayer, LwtaDenseLayer, StickBreakingGate,
};
use crate::model::{Layer, LayerSpec, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SBLWTA1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelSpec,
    arrays: Vec<String>,
}

fn named_arrays(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, t) in layer.params() {
            let (name, t) = match name {
                "stick_log_a" => ("stick_a", t.map(f64::exp)),
                "stick_log_b" => ("stick_b", t.map(f64::exp)),
                _ => (name, t.clone()),
            };
            out.push((format!("{i}/{name}"), t));
        }
    }
    out
}

pub fn write<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let arrays = named_arrays(model);
    let manifest = Manifest {
        model: model.spec(),
        arrays: arrays.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in &arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read(&bytes[..])
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = c.u64("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(len, "manifest")?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for expected in &manifest.arrays {
        let n = c.u32("array name length")? as usize;
        let name = String::from_utf8_lossy(c.take(n, "array name")?).into_owned();
        if &name != expected {
            return Err(Error::Consistency(format!(
                "checkpoint array `{name}` where the manifest lists `{expected}`"
            )));
        }
        let ndim = c.u32("array rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("array shape")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8, "array data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if !c.bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", c.bytes.len())));
    }
    assemble(manifest.model, arrays)
}

fn assemble(spec: ModelSpec, arrays: Vec<(String, Tensor)>) -> Result<Model> {
    let mut it = arrays.into_iter();
    let mut next = |layer: usize, want: &str| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == format!("{layer}/{want}") => Ok(t),
            Some((name, _)) => Err(Error::Consistency(format!(
                "expected array {layer}/{want}, found {name}"
            ))),
            None => Err(Error::Consistency(format!("missing array {layer}/{want}"))),
        }
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let gate = |next: &mut dyn FnMut(usize, &str) -> Result<Tensor>, alpha: f64| -> Result<StickBreakingGate> {
            let logit = next(i, "gate_logit")?;
            let a = next(i, "stick_a")?;
            let b = next(i, "stick_b")?;
            StickBreakingGate::from_parts(alpha, a.data(), b.data(), logit)
        };
        let layer = match *ls {
            LayerSpec::LwtaDense { bias, prior_alpha, .. } => {
                let w = next(i, "weight")?;
                let g = gate(&mut next, prior_alpha)?;
                let b = if bias { Some(next(i, "bias")?) } else { None };
                Layer::LwtaDense(LwtaDenseLayer::from_parts(w, g, b)?)
            }
            LayerSpec::LwtaConv { units, padding, prior_alpha, .. } => {
                let w = next(i, "weight")?;
                let g = gate(&mut next, prior_alpha)?;
                Layer::LwtaConv(LwtaConvLayer::from_parts(w, g, padding, units)?)
            }
            LayerSpec::GatedOutput { bias, prior_alpha, .. } => {
                let w = next(i, "weight")?;
                let g = gate(&mut next, prior_alpha)?;
                let b = if bias { Some(next(i, "bias")?) } else { None };
                Layer::GatedOutput(GatedOutputLayer::from_parts(w, g, b)?)
            }
            LayerSpec::Dense { relu, .. } => {
                let w = next(i, "weight")?;
                let b = next(i, "bias")?;
                Layer::Dense(DenseLayer::from_parts(w, b, relu)?)
            }
            LayerSpec::HardWta { units, .. } => Layer::HardWta(HardWtaLayer::from_parts(next(i, "weight")?, units)?),
        };
        if layer.spec() != *ls {
            return Err(Error::Consistency(format!(
                "layer {i} arrays do not match its manifest entry"
            )));
        }
        layers.push(layer);
    }
    if it.next().is_some() {
        return Err(Error::Consistency("checkpoint has arrays beyond the manifest".into()));
    }
    let model = Model {
        input_shape: spec.input_shape,
        layers,
        head: spec.head,
    };
    model
        .validate()
        .map_err(|e| Error::Consistency(format!("checkpoint manifest: {e}")))?;
    Ok(model)
}
