//! Binary artifact formats, little-endian throughout.
//!
//! Checkpoint container ("ADCK"): magic, format version u16, the six model
//! config fields as u32, then tensors as (name length u16, name bytes,
//! rows u32, cols u32, f32 payload). Model tensors use the `lm.` name
//! prefix, controller tensors `ctrl.`.
//!
//! Trace files ("ADTR"): magic, version u16, then one record per decoding
//! step: step u32, layer count u16, per layer a set size u16 plus u32
//! indices, the uniform set size u16 plus u32 indices, and the token id
//! u32. One file holds the trace of one sequence.

use std::fs;
use std::path::Path;

use crate::controller::{ControllerParams, ControllerVariant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScoredSet, TraceRecord, TransformerParams};
use crate::numkernel::{GruCellParams, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";
pub const TRACE_MAGIC: &[u8; 4] = b"ADTR";
pub const FORMAT_VERSION: u16 = 1;

// ---- low-level helpers ----

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

// ---- checkpoint container ----

pub fn encode_checkpoint(config: &ModelConfig, tensors: &[(String, &Matrix)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    for v in [
        config.n_layers,
        config.model_dim,
        config.n_heads,
        config.vocab,
        config.max_position,
        config.train_context,
    ] {
        push_u32(&mut buf, v as u32);
    }
    for (name, m) in tensors {
        push_u16(&mut buf, name.len() as u16);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, m.rows() as u32);
        push_u32(&mut buf, m.cols() as u32);
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ModelConfig, Vec<(String, Matrix)>)> {
    let mut c = Cursor::new(buf);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let config = ModelConfig {
        n_layers: c.u32()? as usize,
        model_dim: c.u32()? as usize,
        n_heads: c.u32()? as usize,
        vocab: c.u32()? as usize,
        max_position: c.u32()? as usize,
        train_context: c.u32()? as usize,
    };
    let mut tensors = Vec::new();
    while !c.done() {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(c.f32()?);
        }
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((config, tensors))
}

pub fn write_model_checkpoint(path: &Path, params: &TransformerParams) -> Result<()> {
    let names = TransformerParams::tensor_names(&params.config);
    let tensors: Vec<(String, &Matrix)> =
        names.into_iter().zip(params.tensors()).collect();
    fs::write(path, encode_checkpoint(&params.config, &tensors))
        .map_err(|e| Error::io(path, e))
}

pub fn read_model_checkpoint(path: &Path) -> Result<TransformerParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = decode_checkpoint(&buf)?;
    config.validate()?;
    let mut params = TransformerParams::zeros(config);
    let names = TransformerParams::tensor_names(&config);
    if tensors.len() != names.len() {
        return Err(Error::Format(format!(
            "expected {} model tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((name, tensor), (want_name, slot)) in tensors
        .into_iter()
        .zip(names.iter().zip(params.tensors_mut()))
    {
        if &name != want_name {
            return Err(Error::Format(format!(
                "tensor order mismatch: {name} where {want_name} expected"
            )));
        }
        if (tensor.rows(), tensor.cols()) != (slot.rows(), slot.cols()) {
            return Err(Error::Format(format!("tensor {name} has the wrong shape")));
        }
        *slot = tensor;
    }
    Ok(params)
}

fn gru_tensor_names(prefix: &str) -> Vec<String> {
    [
        "w_update", "w_reset", "w_cand", "u_update", "u_reset", "u_cand", "b_update",
        "b_reset", "b_cand",
    ]
    .iter()
    .map(|t| format!("{prefix}.{t}"))
    .collect()
}

/// Controller checkpoints reuse the container with `ctrl.`-prefixed
/// sections; the variant rides along as a one-element tensor.
pub fn write_controller_checkpoint(
    path: &Path,
    params: &ControllerParams,
    config: &ModelConfig,
) -> Result<()> {
    let variant = Matrix::from_vec(
        1,
        1,
        vec![match params.variant {
            ControllerVariant::Unidirectional => 0.0,
            ControllerVariant::Bidirectional => 1.0,
            ControllerVariant::MlpOnly => 2.0,
        }],
    );
    let mut tensors: Vec<(String, &Matrix)> = vec![("ctrl.variant".into(), &variant)];
    let gru_names = gru_tensor_names("ctrl.gru");
    for (n, (_, m)) in gru_names.iter().zip(params.gru.tensors()) {
        tensors.push((n.clone(), m));
    }
    if let Some(back) = &params.gru_back {
        for (n, (_, m)) in gru_tensor_names("ctrl.gru_back").iter().zip(back.tensors()) {
            tensors.push((n.clone(), m));
        }
    }
    if let Some(proj) = &params.input_proj {
        tensors.push(("ctrl.input_proj".into(), proj));
    }
    tensors.push(("ctrl.pos_embed".into(), &params.pos_embed));
    tensors.push(("ctrl.w_inter".into(), &params.w_inter));
    tensors.push(("ctrl.b_inter".into(), &params.b_inter));
    tensors.push(("ctrl.w_out".into(), &params.w_out));
    tensors.push(("ctrl.b_out".into(), &params.b_out));
    fs::write(path, encode_checkpoint(config, &tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_controller_checkpoint(path: &Path) -> Result<(ControllerParams, ModelConfig)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = decode_checkpoint(&buf)?;
    let mut map: std::collections::HashMap<String, Matrix> = tensors.into_iter().collect();
    fn take(map: &mut std::collections::HashMap<String, Matrix>, name: &str) -> Result<Matrix> {
        map.remove(name)
            .ok_or_else(|| Error::Format(format!("missing controller tensor {name}")))
    }
    fn load_gru(
        map: &mut std::collections::HashMap<String, Matrix>,
        prefix: &str,
    ) -> Result<GruCellParams> {
        let names = gru_tensor_names(prefix);
        let w_update = take(map, &names[0])?;
        let (hidden_dim, input_dim) = (w_update.rows(), w_update.cols());
        let mut gru = GruCellParams::zeros(input_dim, hidden_dim);
        gru.w_update = w_update;
        for (name, slot) in names[1..].iter().zip(gru.tensors_mut().into_iter().skip(1)) {
            *slot = take(map, name)?;
        }
        Ok(gru)
    }
    let variant = match take(&mut map, "ctrl.variant")?[(0, 0)] as i32 {
        0 => ControllerVariant::Unidirectional,
        1 => ControllerVariant::Bidirectional,
        2 => ControllerVariant::MlpOnly,
        v => return Err(Error::Format(format!("unknown controller variant {v}"))),
    };
    let gru = load_gru(&mut map, "ctrl.gru")?;
    let gru_back = if variant == ControllerVariant::Bidirectional {
        Some(load_gru(&mut map, "ctrl.gru_back")?)
    } else {
        None
    };
    let input_proj = if variant == ControllerVariant::MlpOnly {
        Some(take(&mut map, "ctrl.input_proj")?)
    } else {
        None
    };
    let pos_embed = take(&mut map, "ctrl.pos_embed")?;
    let w_inter = take(&mut map, "ctrl.w_inter")?;
    let b_inter = take(&mut map, "ctrl.b_inter")?;
    let w_out = take(&mut map, "ctrl.w_out")?;
    let b_out = take(&mut map, "ctrl.b_out")?;
    let params = ControllerParams {
        variant,
        input_dim: gru.input_dim,
        hidden_dim: gru.hidden_dim,
        gru,
        gru_back,
        input_proj,
        pos_embed,
        w_inter,
        b_inter,
        w_out,
        b_out,
    };
    Ok((params, config))
}

// ---- trace files ----

pub fn encode_traces(records: &[TraceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRACE_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    for r in records {
        push_u32(&mut buf, r.step);
        push_u16(&mut buf, r.layer_sets.len() as u16);
        for set in &r.layer_sets {
            push_u16(&mut buf, set.indices.len() as u16);
            for &i in &set.indices {
                push_u32(&mut buf, i);
            }
        }
        push_u16(&mut buf, r.uniform.len() as u16);
        for &i in &r.uniform {
            push_u32(&mut buf, i);
        }
        push_u32(&mut buf, r.token);
    }
    buf
}

/// Parses a trace file. The on-disk format carries index sets only, so the
/// returned records have empty score lists; label construction falls back
/// to recency tie-breaking for them.
pub fn decode_traces(buf: &[u8]) -> Result<Vec<TraceRecord>> {
    let mut c = Cursor::new(buf);
    if c.take(4)? != TRACE_MAGIC {
        return Err(Error::Format("not a trace file (bad magic)".into()));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let mut records = Vec::new();
    while !c.done() {
        let step = c.u32()?;
        let layers = c.u16()? as usize;
        let mut layer_sets = Vec::with_capacity(layers);
        for _ in 0..layers {
            let n = c.u16()? as usize;
            let mut indices = Vec::with_capacity(n);
            for _ in 0..n {
                indices.push(c.u32()?);
            }
            layer_sets.push(ScoredSet {
                indices,
                scores: Vec::new(),
            });
        }
        let n = c.u16()? as usize;
        let mut uniform = Vec::with_capacity(n);
        for _ in 0..n {
            uniform.push(c.u32()?);
        }
        let token = c.u32()?;
        records.push(TraceRecord {
            step,
            layer_sets,
            uniform,
            token,
        });
    }
    Ok(records)
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    fs::write(path, encode_traces(records)).map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_traces(&buf)
}
