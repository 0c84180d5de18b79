//! On-disk formats.
//!
//! Latent sequences are JSON (human-inspectable, full-precision numbers
//! round-trip exactly). Models are a small binary container so floats
//! round-trip bit for bit, guarded by a trailing CRC32. Images are flat
//! little-endian f64 arrays with a JSON sidecar, plus an optional PPM export
//! for eyeballing.

use crate::decoder::Image;
use crate::dynamics::{Layer, MlpParams};
use crate::error::{Error, Result};
use crate::solver::SolverConfig;
use crate::train::LossRecord;
use crate::trajectory::{FittedModel, LatentSequence, TimeNorm};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

// ---- latent sequences (JSON) ----------------------------------------------

pub const SEQUENCE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SequenceFile {
    version: u32,
    dim: usize,
    times: Vec<f64>,
    codes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heldout: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

fn parse_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_sequence(seq: &LatentSequence, path: &Path) -> Result<()> {
    save_sequence_with_meta(seq, serde_json::Value::Null, path)
}

pub fn save_sequence_with_meta(
    seq: &LatentSequence,
    meta: serde_json::Value,
    path: &Path,
) -> Result<()> {
    seq.validate()?;
    let heldout: Vec<usize> = seq.heldout_indices();
    let file = SequenceFile {
        version: SEQUENCE_VERSION,
        dim: seq.dim,
        times: seq.times.clone(),
        codes: seq.codes.clone(),
        heldout: if heldout.is_empty() { None } else { Some(heldout) },
        meta,
    };
    let mut body = serde_json::to_string_pretty(&file).expect("sequence serializes");
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<LatentSequence> {
    let raw = fs::read_to_string(path)?;
    let mut de = serde_json::Deserializer::from_str(&raw);
    let file: SequenceFile = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| parse_error(path, format!("at {}: {}", e.path(), e.inner())))?;
    if file.version != SEQUENCE_VERSION {
        return Err(parse_error(
            path,
            format!("unsupported sequence version {}", file.version),
        ));
    }
    let mut mask = vec![false; file.times.len()];
    if let Some(heldout) = &file.heldout {
        for &i in heldout {
            if i >= mask.len() {
                return Err(parse_error(path, format!("held-out index {i} out of range")));
            }
            mask[i] = true;
        }
    }
    LatentSequence::new(file.dim, file.times, file.codes, Some(mask))
        .map_err(|e| parse_error(path, e.to_string()))
}

// ---- model files (binary) ---------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"DYNO";
pub const MODEL_VERSION: u16 = 1;

const CRC_TABLE: [u32; 256] = crc_table();

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// IEEE CRC32 (the zlib/PNG polynomial).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = !0u32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a fitted model. Layout: magic "DYNO", format version u16,
/// latent dim u16, hidden layer count u8 + u16 dims, the raw time span as
/// two f64, z0, then per-layer row-major weights and biases, all
/// little-endian f64, closed by a CRC32 of everything before it.
pub fn save_model(m: &FittedModel, path: &Path) -> Result<()> {
    let d = m.z0.len();
    if d > u16::MAX as usize {
        return Err(Error::invalid("latent dim too large for the model format"));
    }
    let hidden = m.params.hidden_dims();
    if hidden.len() > u8::MAX as usize || hidden.iter().any(|&h| h > u16::MAX as usize) {
        return Err(Error::invalid("hidden layout too large for the model format"));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u16).to_le_bytes());
    buf.push(hidden.len() as u8);
    for &h in &hidden {
        buf.extend_from_slice(&(h as u16).to_le_bytes());
    }
    buf.extend_from_slice(&m.time_norm.t_first.to_le_bytes());
    buf.extend_from_slice(&m.time_norm.t_last.to_le_bytes());
    push_f64s(&mut buf, &m.z0);
    for layer in m.params.layers() {
        push_f64s(&mut buf, &layer.w);
        push_f64s(&mut buf, &layer.b);
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Some(out)
    }
}

/// Load a model saved by [`save_model`]. The CRC is validated before any
/// value is trusted. The inference solver settings are the normalized-span
/// defaults; whether the field has a time input is recovered from the
/// parameter block length.
pub fn load_model(path: &Path) -> Result<FittedModel> {
    let bytes = fs::read(path)?;
    let truncated = || parse_error(path, "model file truncated");
    if bytes.len() < MODEL_MAGIC.len() + 4 {
        return Err(truncated());
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32(body) != stored {
        return Err(parse_error(path, "CRC mismatch: model file is corrupt"));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4).ok_or_else(truncated)?;
    if magic != MODEL_MAGIC {
        return Err(parse_error(path, "not a model file (bad magic)"));
    }
    let version = r.u16().ok_or_else(truncated)?;
    if version != MODEL_VERSION {
        return Err(parse_error(path, format!("unsupported model version {version}")));
    }
    let d = r.u16().ok_or_else(truncated)? as usize;
    if d == 0 {
        return Err(parse_error(path, "latent dim must be positive"));
    }
    let n_hidden = r.u8().ok_or_else(truncated)? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u16().ok_or_else(truncated)? as usize);
    }
    let t_first = r.f64().ok_or_else(truncated)?;
    let t_last = r.f64().ok_or_else(truncated)?;
    let z0 = r.f64s(d).ok_or_else(truncated)?;

    // The header stores the hidden layout only; whether the first layer also
    // takes the time coordinate follows from how many floats remain.
    let count_for = |time_input: bool| -> usize {
        let mut dims = vec![d + usize::from(time_input)];
        dims.extend_from_slice(&hidden);
        dims.push(d);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    };
    let remaining = (body.len() - r.pos) / 8;
    let time_input = if remaining == count_for(true) {
        true
    } else if remaining == count_for(false) {
        false
    } else {
        return Err(parse_error(
            path,
            format!(
                "parameter block holds {remaining} floats, expected {} or {}",
                count_for(true),
                count_for(false)
            ),
        ));
    };

    let mut dims = vec![d + usize::from(time_input)];
    dims.extend_from_slice(&hidden);
    dims.push(d);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w = r.f64s(in_dim * out_dim).ok_or_else(truncated)?;
        let b = r.f64s(out_dim).ok_or_else(truncated)?;
        layers.push(Layer {
            w,
            b,
            in_dim,
            out_dim,
        });
    }

    let params = MlpParams::from_layers(layers, d, time_input)
        .map_err(|e| parse_error(path, e.to_string()))?;
    let time_norm =
        TimeNorm::new(t_first, t_last).map_err(|e| parse_error(path, e.to_string()))?;
    Ok(FittedModel {
        params,
        z0,
        time_norm,
        solver: SolverConfig::default(),
    })
}

// ---- images -----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ImageSidecar {
    channels: usize,
    height: usize,
    width: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

/// Write the pixels as flat little-endian f64 plus a `<path>.json` sidecar
/// recording the shape.
pub fn save_image_raw(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.data.len() * 8);
    push_f64s(&mut buf, &img.data);
    fs::write(path, buf)?;
    let sidecar = ImageSidecar {
        channels: img.channels,
        height: img.height,
        width: img.width,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load_image_raw(path: &Path) -> Result<Image> {
    let side = sidecar_path(path);
    let sidecar: ImageSidecar = serde_json::from_str(&fs::read_to_string(&side)?)
        .map_err(|e| parse_error(&side, e.to_string()))?;
    let bytes = fs::read(path)?;
    let expected = sidecar.channels * sidecar.height * sidecar.width * 8;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Image {
        channels: sidecar.channels,
        height: sidecar.height,
        width: sidecar.width,
        data,
    })
}

/// Binary PPM (P6) export, mapping [-1, 1] to [0, 255] with clamping.
/// Single-channel images are replicated to gray; only 1- and 3-channel
/// images are supported.
pub fn save_image_ppm(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::invalid("PPM export needs 1 or 3 channels"));
    }
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    let to_byte = |v: f64| -> u8 { (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8 };
    for p in 0..plane {
        for c in 0..3 {
            let ch = if img.channels == 1 { 0 } else { c };
            buf.push(to_byte(img.data[ch * plane + p]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

// ---- loss history --------------------------------------------------------

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,total,latent,feature,image\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.total, r.latent, r.feature, r.image
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
