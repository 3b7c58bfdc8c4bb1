//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "FVBN" | version u32 | mode u8 | layer count u32
//! per layer:  in_dim u32 | out_dim u32 | activation u8
//! per layer:  weight μ [f64; out·in] | weight α | bias μ [f64; out] | bias α
//! ```

use super::{Activation, DenseLayer, LayerSpec, ModelMode, VbnnModel};
use crate::error::{Error, Result};
use crate::gauss_agg::GaussianParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FVBN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &VbnnModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 16 * model.num_parameters());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match model.mode() {
        ModelMode::Variational => 0,
        ModelMode::Deterministic => 1,
    });
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for l in model.layers() {
        out.extend_from_slice(&(l.spec.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.spec.out_dim as u32).to_le_bytes());
        out.push(match l.spec.activation {
            Activation::Relu => 0,
            Activation::None => 1,
        });
    }
    for t in model.tensors() {
        for v in t.mu().iter().chain(t.alpha()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VbnnModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mode = match r.u8()? {
        0 => ModelMode::Variational,
        1 => ModelMode::Deterministic,
        m => return Err(Error::Checkpoint(format!("unknown mode byte {m}"))),
    };
    let n_layers = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::None,
            a => return Err(Error::Checkpoint(format!("unknown activation byte {a}"))),
        };
        specs.push(LayerSpec::new(in_dim, out_dim, activation));
    }
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut tensor = |shape: Vec<usize>| -> Result<GaussianParams> {
            let n = shape.iter().product();
            let mu = r.f64s(n)?;
            let alpha = r.f64s(n)?;
            GaussianParams::new(shape, mu, alpha).map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let weights = tensor(vec![spec.out_dim, spec.in_dim])?;
        let biases = tensor(vec![spec.out_dim])?;
        layers.push(DenseLayer {
            spec,
            weights,
            biases,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    VbnnModel::from_layers(layers, mode).map_err(|e| Error::Checkpoint(e.to_string()))
}
