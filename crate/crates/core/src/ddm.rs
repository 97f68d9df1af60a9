//! `.ddm` model files.
//!
//! Layout: magic `DDM1`, a little-endian `u32` header length, a UTF-8 header
//! of `key=value` lines, then the raw parameters followed by the EMA shadow,
//! each as little-endian `f64` in layer order.

use std::path::Path;

use crate::divergence::NormalizedDualOffsets;
use crate::error::{Error, Result};
use crate::model::{Activation, DualFunctionModel, ModelConfig};
use crate::scalar::Scalar;

pub const DDM_MAGIC: &[u8; 4] = b"DDM1";
const VERSION: u32 = 1;
const PREFIX: usize = 8;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format { offset, detail: detail.into() }
}

fn join<V: std::fmt::Display>(values: impl IntoIterator<Item = V>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode_ddm<T: Scalar>(model: &DualFunctionModel<T>, offsets: &NormalizedDualOffsets<T>) -> Result<Vec<u8>> {
    if offsets.steps() != model.path_steps() {
        return Err(Error::Argument(format!(
            "model has {} path steps but {} offsets were given",
            model.path_steps(),
            offsets.steps()
        )));
    }
    let cfg = model.config();
    let header = [
        format!("version={VERSION}"),
        format!("rows={}", model.rows()),
        format!("cols={}", model.cols()),
        format!("path_steps={}", model.path_steps()),
        format!("hidden_dims={}", join(&cfg.hidden_dims)),
        format!("activation={}", cfg.activation.name()),
        format!("step_conditioned={}", cfg.step_conditioned),
        format!("init_scale={}", cfg.init_scale.as_f64()),
        format!("seed={}", cfg.seed),
        format!("updates={}", model.updates()),
        format!("input_shift={}", model.input_affine().0.as_f64()),
        format!("input_scale={}", model.input_affine().1.as_f64()),
        format!("offsets={}", join(offsets.eta.iter().map(|e| e.as_f64()))),
    ]
    .join("\n")
        + "\n";
    let mut out = Vec::with_capacity(PREFIX + header.len() + 16 * model.num_params());
    out.extend_from_slice(DDM_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in model.params().iter().chain(model.ema_params()) {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    Ok(out)
}

#[derive(Default)]
struct Header {
    version: Option<u32>,
    rows: Option<usize>,
    cols: Option<usize>,
    path_steps: Option<usize>,
    hidden_dims: Option<Vec<usize>>,
    activation: Option<Activation>,
    step_conditioned: Option<bool>,
    init_scale: Option<f64>,
    seed: Option<u64>,
    updates: Option<u64>,
    offsets: Option<Vec<f64>>,
    input_shift: Option<f64>,
    input_scale: Option<f64>,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut h = Header::default();
    let mut at = PREFIX;
    for line in text.split_inclusive('\n') {
        let start = at;
        at += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| format_err(start, format!("header line `{line}`: {what}"));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let list: Vec<&str> = if value.is_empty() { Vec::new() } else { value.split(',').collect() };
        match key {
            "version" => h.version = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "rows" => h.rows = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "cols" => h.cols = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "path_steps" => h.path_steps = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "hidden_dims" => {
                let dims = list
                    .iter()
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad integer list"))?;
                h.hidden_dims = Some(dims);
            }
            "activation" => h.activation = Some(Activation::parse(value).ok_or_else(|| bad("unknown activation"))?),
            "step_conditioned" => h.step_conditioned = Some(value.parse().map_err(|_| bad("expected true or false"))?),
            "init_scale" => h.init_scale = Some(value.parse().map_err(|_| bad("bad number"))?),
            "seed" => h.seed = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "input_shift" => h.input_shift = Some(value.parse().map_err(|_| bad("bad number"))?),
            "input_scale" => h.input_scale = Some(value.parse().map_err(|_| bad("bad number"))?),
            "updates" => h.updates = Some(value.parse().map_err(|_| bad("bad integer"))?),
            "offsets" => {
                let eta = list
                    .iter()
                    .map(|d| d.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad number list"))?;
                if eta.iter().any(|e| !e.is_finite()) {
                    return Err(bad("offsets must be finite"));
                }
                h.offsets = Some(eta);
            }
            _ => return Err(bad("unknown key")),
        }
    }
    Ok(h)
}

pub fn decode_ddm<T: Scalar>(bytes: &[u8]) -> Result<(DualFunctionModel<T>, NormalizedDualOffsets<T>)> {
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), format!("truncated prefix: expected {PREFIX} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != DDM_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"DDM1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = PREFIX + header_len;
    if bytes.len() < body {
        return Err(format_err(
            bytes.len(),
            format!("header declares {header_len} bytes but only {} follow", bytes.len() - PREFIX),
        ));
    }
    let text = std::str::from_utf8(&bytes[PREFIX..body])
        .map_err(|e| format_err(PREFIX + e.valid_up_to(), "header is not valid UTF-8"))?;
    let h = parse_header(text)?;
    let missing = |key: &str| format_err(PREFIX, format!("header is missing `{key}`"));
    let version = h.version.ok_or_else(|| missing("version"))?;
    if version != VERSION {
        return Err(format_err(PREFIX, format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        hidden_dims: h.hidden_dims.ok_or_else(|| missing("hidden_dims"))?,
        activation: h.activation.ok_or_else(|| missing("activation"))?,
        step_conditioned: h.step_conditioned.ok_or_else(|| missing("step_conditioned"))?,
        init_scale: T::lit(h.init_scale.ok_or_else(|| missing("init_scale"))?),
        seed: h.seed.ok_or_else(|| missing("seed"))?,
    };
    let rows = h.rows.ok_or_else(|| missing("rows"))?;
    let cols = h.cols.ok_or_else(|| missing("cols"))?;
    let steps = h.path_steps.ok_or_else(|| missing("path_steps"))?;
    let mut model = DualFunctionModel::zeroed(rows, cols, steps, config)
        .map_err(|e| format_err(PREFIX, format!("invalid model header: {e}")))?;
    let eta = h.offsets.ok_or_else(|| missing("offsets"))?;
    if eta.len() != steps {
        return Err(format_err(PREFIX, format!("{} offsets for {steps} path steps", eta.len())));
    }
    let count = model.num_params();
    let expected = body + 16 * count;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("parameter block size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(2 * count);
    for (i, chunk) in bytes[body..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(format_err(body + 8 * i, format!("parameter value {v} is not finite")));
        }
        values.push(T::lit(v));
    }
    model.set_params(&values[..count], &values[count..])?;
    model.set_updates(h.updates.ok_or_else(|| missing("updates"))?);
    let shift = h.input_shift.ok_or_else(|| missing("input_shift"))?;
    let scale = h.input_scale.ok_or_else(|| missing("input_scale"))?;
    model
        .set_input_affine(T::lit(shift), T::lit(scale))
        .map_err(|e| format_err(PREFIX, format!("invalid input map: {e}")))?;
    Ok((model, NormalizedDualOffsets { eta: eta.into_iter().map(T::lit).collect() }))
}

pub fn write_ddm<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_ddm(model, offsets)?)?;
    Ok(())
}

pub fn read_ddm<T: Scalar>(path: impl AsRef<Path>) -> Result<(DualFunctionModel<T>, NormalizedDualOffsets<T>)> {
    decode_ddm(&std::fs::read(path)?)
}
