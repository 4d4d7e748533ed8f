//! Binary model container.
//!
//! Layout: magic `IGNN`, a u32 version, a hyperparameter block (layer count,
//! relation count, dropout, readout tag, head tag, per-layer input-form and
//! activation tags plus kappas, inter-map tags, learnable-feature flag),
//! then named tensor records: u32 name length, name bytes, u32 rows, u32
//! cols, row-major little-endian f64 payload. Round trips are bit-exact.

use super::{Head, IgnnLayer, IgnnModel, InterMap, Readout};
use crate::equilibrium::{Activation, BlockActivation};
use crate::implicit_grad::{BForm, InputMap};
use crate::linalg::DenseMatrix;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"IGNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}: not a model checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn write_u8(sink: &mut impl Write, v: u8) -> std::io::Result<()> {
    sink.write_all(&[v])
}

fn write_u32(sink: &mut impl Write, v: u32) -> std::io::Result<()> {
    sink.write_all(&v.to_le_bytes())
}

fn write_f64(sink: &mut impl Write, v: f64) -> std::io::Result<()> {
    sink.write_all(&v.to_le_bytes())
}

fn read_u8(source: &mut impl Read) -> std::io::Result<u8> {
    let mut buf = [0u8; 1];
    source.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_u32(source: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    source.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(source: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    source.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn write_activation(sink: &mut impl Write, act: Activation) -> std::io::Result<()> {
    match act {
        Activation::Relu => write_u8(sink, 0),
        Activation::LeakyRelu(slope) => {
            write_u8(sink, 1)?;
            write_f64(sink, slope)
        }
        Activation::Tanh => write_u8(sink, 2),
        Activation::Sigmoid => write_u8(sink, 3),
        Activation::Identity => write_u8(sink, 4),
    }
}

fn read_activation(source: &mut impl Read) -> Result<Activation, CheckpointError> {
    Ok(match read_u8(source)? {
        0 => Activation::Relu,
        1 => Activation::LeakyRelu(read_f64(source)?),
        2 => Activation::Tanh,
        3 => Activation::Sigmoid,
        4 => Activation::Identity,
        tag => return Err(CheckpointError::Corrupt(format!("activation tag {tag}"))),
    })
}

fn write_block_activation(sink: &mut impl Write, act: &BlockActivation) -> std::io::Result<()> {
    match act {
        BlockActivation::Uniform(a) => {
            write_u8(sink, 0)?;
            write_activation(sink, *a)
        }
        BlockActivation::Stacked(blocks) => {
            write_u8(sink, 1)?;
            write_u32(sink, blocks.len() as u32)?;
            for &(rows, a) in blocks {
                write_u32(sink, rows as u32)?;
                write_activation(sink, a)?;
            }
            Ok(())
        }
    }
}

fn read_block_activation(source: &mut impl Read) -> Result<BlockActivation, CheckpointError> {
    match read_u8(source)? {
        0 => Ok(BlockActivation::Uniform(read_activation(source)?)),
        1 => {
            let count = read_u32(source)? as usize;
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                let rows = read_u32(source)? as usize;
                blocks.push((rows, read_activation(source)?));
            }
            Ok(BlockActivation::Stacked(blocks))
        }
        tag => Err(CheckpointError::Corrupt(format!(
            "block activation tag {tag}"
        ))),
    }
}

fn write_tensor(sink: &mut impl Write, name: &str, m: &DenseMatrix) -> std::io::Result<()> {
    write_u32(sink, name.len() as u32)?;
    sink.write_all(name.as_bytes())?;
    write_u32(sink, m.rows() as u32)?;
    write_u32(sink, m.cols() as u32)?;
    for &v in m.data() {
        write_f64(sink, v)?;
    }
    Ok(())
}

fn read_tensor(source: &mut impl Read) -> Result<(String, DenseMatrix), CheckpointError> {
    let name_len = read_u32(source)? as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Corrupt(format!(
            "tensor name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    source.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
    let rows = read_u32(source)? as usize;
    let cols = read_u32(source)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(source)?);
    }
    let matrix = DenseMatrix::from_vec(rows, cols, data)
        .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
    Ok((name, matrix))
}

fn vec_as_column(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(v.len(), 1, v.to_vec()).expect("finite bias")
}

fn bform_tag(form: BForm) -> u8 {
    match form {
        BForm::OmegaUA => 0,
        BForm::OmegaU => 1,
        BForm::Split => 2,
    }
}

fn bform_from_tag(tag: u8) -> Result<BForm, CheckpointError> {
    Ok(match tag {
        0 => BForm::OmegaUA,
        1 => BForm::OmegaU,
        2 => BForm::Split,
        _ => return Err(CheckpointError::Corrupt(format!("input form tag {tag}"))),
    })
}

pub fn save_checkpoint(model: &IgnnModel, sink: &mut impl Write) -> Result<(), CheckpointError> {
    sink.write_all(MAGIC)?;
    write_u32(sink, VERSION)?;
    write_u32(sink, model.layers.len() as u32)?;
    write_u32(sink, model.relations() as u32)?;
    write_f64(sink, model.dropout)?;
    write_u8(
        sink,
        match model.readout {
            Readout::Node => 0,
            Readout::GraphSum => 1,
            Readout::GraphMean => 2,
        },
    )?;
    match &model.head {
        Head::Linear { .. } => write_u8(sink, 0)?,
        Head::Mlp { activation, .. } => {
            write_u8(sink, 1)?;
            write_activation(sink, *activation)?;
        }
    }
    for layer in &model.layers {
        write_u8(sink, bform_tag(layer.input_maps[0].form))?;
        write_block_activation(sink, &layer.activation)?;
        for &kappa in &layer.kappas {
            write_f64(sink, kappa)?;
        }
    }
    for map in &model.inter_maps {
        match map {
            None => write_u8(sink, 0)?,
            Some(m) => {
                write_u8(sink, 1)?;
                write_activation(sink, m.activation)?;
            }
        }
    }
    write_u8(sink, u8::from(model.learnable_u.is_some()))?;

    let mut tensors: Vec<(String, DenseMatrix)> = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for (r, w) in layer.ws.iter().enumerate() {
            tensors.push((format!("layer{l}.w{r}"), w.clone()));
        }
        for (r, imap) in layer.input_maps.iter().enumerate() {
            for (k, omega) in imap.omegas.iter().enumerate() {
                tensors.push((format!("layer{l}.omega{r}.{k}"), omega.clone()));
            }
        }
    }
    for (l, map) in model.inter_maps.iter().enumerate() {
        if let Some(m) = map {
            tensors.push((format!("inter{l}.weight"), m.weight.clone()));
            tensors.push((format!("inter{l}.bias"), vec_as_column(&m.bias)));
        }
    }
    match &model.head {
        Head::Linear { theta } => tensors.push(("head.theta".into(), theta.clone())),
        Head::Mlp { w1, b1, w2, b2, .. } => {
            tensors.push(("head.w1".into(), w1.clone()));
            tensors.push(("head.b1".into(), vec_as_column(b1)));
            tensors.push(("head.w2".into(), w2.clone()));
            tensors.push(("head.b2".into(), vec_as_column(b2)));
        }
    }
    if let Some(u) = &model.learnable_u {
        tensors.push(("u".into(), u.clone()));
    }
    write_u32(sink, tensors.len() as u32)?;
    for (name, tensor) in &tensors {
        write_tensor(sink, name, tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(source: &mut impl Read) -> Result<IgnnModel, CheckpointError> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(source)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let layer_count = read_u32(source)? as usize;
    let relations = read_u32(source)? as usize;
    if layer_count == 0 || relations == 0 {
        return Err(CheckpointError::Corrupt(
            "layer and relation counts must be positive".into(),
        ));
    }
    let dropout = read_f64(source)?;
    let readout = match read_u8(source)? {
        0 => Readout::Node,
        1 => Readout::GraphSum,
        2 => Readout::GraphMean,
        tag => return Err(CheckpointError::Corrupt(format!("readout tag {tag}"))),
    };
    let head_tag = read_u8(source)?;
    let head_activation = match head_tag {
        0 => None,
        1 => Some(read_activation(source)?),
        tag => return Err(CheckpointError::Corrupt(format!("head tag {tag}"))),
    };
    let mut layer_meta = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let form = bform_from_tag(read_u8(source)?)?;
        let activation = read_block_activation(source)?;
        let mut kappas = Vec::with_capacity(relations);
        for _ in 0..relations {
            kappas.push(read_f64(source)?);
        }
        layer_meta.push((form, activation, kappas));
    }
    let mut inter_meta = Vec::with_capacity(layer_count.saturating_sub(1));
    for _ in 0..layer_count.saturating_sub(1) {
        inter_meta.push(match read_u8(source)? {
            0 => None,
            1 => Some(read_activation(source)?),
            tag => return Err(CheckpointError::Corrupt(format!("inter map tag {tag}"))),
        });
    }
    let has_learnable_u = read_u8(source)? != 0;

    let tensor_count = read_u32(source)? as usize;
    let mut tensors: Vec<(String, DenseMatrix)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        tensors.push(read_tensor(source)?);
    }
    let mut take = |name: &str| -> Result<DenseMatrix, CheckpointError> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        Ok(tensors.remove(pos).1)
    };

    let mut layers = Vec::with_capacity(layer_count);
    for (l, (form, activation, kappas)) in layer_meta.into_iter().enumerate() {
        let mut ws = Vec::with_capacity(relations);
        let mut input_maps = Vec::with_capacity(relations);
        for r in 0..relations {
            let w = take(&format!("layer{l}.w{r}"))?;
            if w.rows() != w.cols() {
                return Err(CheckpointError::Corrupt(format!(
                    "layer{l}.w{r} is not square"
                )));
            }
            ws.push(w);
            let mut omegas = Vec::with_capacity(form.omega_count());
            for k in 0..form.omega_count() {
                omegas.push(take(&format!("layer{l}.omega{r}.{k}"))?);
            }
            input_maps.push(InputMap { form, omegas });
        }
        layers.push(IgnnLayer {
            ws,
            input_maps,
            activation,
            kappas,
        });
    }
    let mut inter_maps = Vec::with_capacity(inter_meta.len());
    for (l, meta) in inter_meta.into_iter().enumerate() {
        inter_maps.push(match meta {
            None => None,
            Some(activation) => {
                let weight = take(&format!("inter{l}.weight"))?;
                let bias = take(&format!("inter{l}.bias"))?;
                Some(InterMap {
                    weight,
                    bias: bias.data().to_vec(),
                    activation,
                })
            }
        });
    }
    let head = match head_activation {
        None => Head::Linear {
            theta: take("head.theta")?,
        },
        Some(activation) => Head::Mlp {
            w1: take("head.w1")?,
            b1: take("head.b1")?.data().to_vec(),
            activation,
            w2: take("head.w2")?,
            b2: take("head.b2")?.data().to_vec(),
        },
    };
    let learnable_u = if has_learnable_u { Some(take("u")?) } else { None };
    if !tensors.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "unexpected extra tensors: {:?}",
            tensors.iter().map(|(n, _)| n).collect::<Vec<_>>()
        )));
    }
    Ok(IgnnModel {
        layers,
        inter_maps,
        head,
        readout,
        dropout,
        learnable_u,
    })
}

pub fn save_to_path(model: &IgnnModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut sink = BufWriter::new(File::create(path)?);
    save_checkpoint(model, &mut sink)?;
    sink.flush()?;
    Ok(())
}

pub fn load_from_path(path: impl AsRef<Path>) -> Result<IgnnModel, CheckpointError> {
    let mut source = BufReader::new(File::open(path)?);
    load_checkpoint(&mut source)
}
