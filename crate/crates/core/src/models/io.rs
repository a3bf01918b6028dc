//! Model file format (NFMD).
//!
//! Little-endian layout: magic `NFMD`, version u16 = 1, spec block (kind u8,
//! t_s u32, d_c u32, group table, gru_hidden u32, convgru_channels u32,
//! seed u64), normalization block (f32 arrays + force scale), parameter
//! table (per entry: name length u16, UTF-8 name, rank u8, dims u32[], f32
//! payload), and a trailing CRC32 of all preceding bytes.
//!
//! Loading rebuilds the architecture from the spec block and then fills the
//! named parameters, so a file can never produce a partially wired model.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio::{CountingReader, HashingWriter};
use crate::error::{Error, Result};
use crate::gp::{gp_fit, GpHyper};
use crate::models::{build, ArchKind, ArchSpec, Model};
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 4] = b"NFMD";
const MODEL_VERSION: u16 = 1;

fn write_entry<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[shape.len() as u8])?;
    for d in shape {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;

    let spec = &model.spec;
    w.write_all(&[spec.kind.code()])?;
    w.write_all(&(spec.t_s as u32).to_le_bytes())?;
    w.write_all(&(spec.d_c as u32).to_le_bytes())?;
    w.write_all(&[spec.cnn_groups.len() as u8])?;
    for &(f, n) in &spec.cnn_groups {
        w.write_all(&(f as u32).to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(spec.gru_hidden as u32).to_le_bytes())?;
    w.write_all(&(spec.convgru_channels as u32).to_le_bytes())?;
    w.write_all(&spec.seed.to_le_bytes())?;

    w.write_all(&(model.norm.px_mean.len() as u32).to_le_bytes())?;
    for v in &model.norm.px_mean {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(model.norm.px_std.len() as u32).to_le_bytes())?;
    for v in &model.norm.px_std {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&model.norm.force_scale.to_le_bytes())?;

    let gp_entries = model.gp.as_ref().map(|gp| {
        let x: Vec<f32> = gp.x.iter().map(|v| *v as f32).collect();
        let y: Vec<f32> = gp.y.iter().map(|v| *v as f32).collect();
        let hyper = vec![
            gp.hyper.length_scale as f32,
            gp.hyper.signal_var as f32,
            gp.hyper.noise_var as f32,
        ];
        (x, y, hyper)
    });
    let n_entries = model.params.len() + gp_entries.as_ref().map_or(0, |_| 3);
    w.write_all(&(n_entries as u32).to_le_bytes())?;
    for entry in model.params.iter() {
        write_entry(&mut w, &entry.name, entry.tensor.shape(), entry.tensor.data())?;
    }
    if let Some((x, y, hyper)) = gp_entries {
        write_entry(&mut w, "gp.x", &[x.len()], &x)?;
        write_entry(&mut w, "gp.y", &[y.len()], &y)?;
        write_entry(&mut w, "gp.hyper", &[3], &hyper)?;
    }
    w.finish()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"NFMD\"")));
    }
    let (version, at) = r.read_u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }

    let (kind_code, at) = r.read_u8("architecture kind")?;
    let kind = ArchKind::from_code(kind_code)
        .ok_or_else(|| Error::format(at, format!("unknown architecture code {kind_code}")))?;
    let (t_s, _) = r.read_u32("t_s")?;
    let (d_c, _) = r.read_u32("d_c")?;
    let (n_groups, _) = r.read_u8("group count")?;
    let mut cnn_groups = Vec::with_capacity(n_groups as usize);
    for _ in 0..n_groups {
        let (f, _) = r.read_u32("group feature maps")?;
        let (n, _) = r.read_u32("group block count")?;
        cnn_groups.push((f as usize, n as usize));
    }
    let (gru_hidden, _) = r.read_u32("gru_hidden")?;
    let (convgru_channels, _) = r.read_u32("convgru_channels")?;
    let (seed, _) = r.read_u64("seed")?;
    let spec = ArchSpec {
        kind,
        t_s: t_s as usize,
        d_c: d_c as usize,
        cnn_groups,
        gru_hidden: gru_hidden as usize,
        convgru_channels: convgru_channels as usize,
        seed,
    };

    let (mean_len, _) = r.read_u32("normalization mean length")?;
    let px_mean = r.read_f32_vec(mean_len as usize, "normalization mean")?;
    let (std_len, _) = r.read_u32("normalization std length")?;
    let px_std = r.read_f32_vec(std_len as usize, "normalization std")?;
    let (force_scale, _) = r.read_f32("force scale")?;

    let mut model = build(&spec).map_err(|e| Error::format(0, format!("invalid spec block: {e}")))?;
    model.norm.px_mean = px_mean;
    model.norm.px_std = px_std;
    model.norm.force_scale = force_scale;
    if model.norm.px_mean.len() != spec.d_c || model.norm.px_std.len() != spec.d_c {
        return Err(Error::format(
            at,
            format!(
                "normalization arrays of {}/{} values vs d_c {}",
                model.norm.px_mean.len(),
                model.norm.px_std.len(),
                spec.d_c
            ),
        ));
    }

    let (n_entries, _) = r.read_u32("parameter count")?;
    let mut gp_x: Option<Vec<f32>> = None;
    let mut gp_y: Option<Vec<f32>> = None;
    let mut gp_hyper: Option<Vec<f32>> = None;
    let mut filled = vec![false; model.params.len()];
    for _ in 0..n_entries {
        let (name_len, _) = r.read_u16("parameter name length")?;
        let mut name_bytes = vec![0u8; name_len as usize];
        let at = r.read_exact_at(&mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(at, "parameter name is not valid UTF-8"))?;
        let (rank, _) = r.read_u8("parameter rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let (d, _) = r.read_u32("parameter dimension")?;
            shape.push(d as usize);
        }
        let count: usize = shape.iter().product();
        let at = r.offset;
        let data = r.read_f32_vec(count, &format!("payload of parameter {name}"))?;

        if let Some(rest) = name.strip_prefix("gp.") {
            match rest {
                "x" => gp_x = Some(data),
                "y" => gp_y = Some(data),
                "hyper" => gp_hyper = Some(data),
                _ => return Err(Error::format(at, format!("unknown GP entry {name}"))),
            }
            continue;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::format(at, format!("unknown parameter {name} for {}", kind.name())))?;
        let target = model.params.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(Error::format(
                at,
                format!(
                    "parameter {name}: declared shape {:?} does not match model shape {:?}",
                    shape,
                    target.shape()
                ),
            ));
        }
        *target = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        filled[id.index()] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(Error::format(
            r.offset,
            format!("file is missing parameter {}", model.params.entry(missing).name),
        ));
    }
    let end_offset = r.offset;
    r.verify_crc()?;

    match (gp_x, gp_y, gp_hyper) {
        (Some(x), Some(y), Some(h)) if h.len() == 3 => {
            let hyper = GpHyper {
                length_scale: h[0] as f64,
                signal_var: h[1] as f64,
                noise_var: h[2] as f64,
            };
            let xf: Vec<f64> = x.iter().map(|v| *v as f64).collect();
            let yf: Vec<f64> = y.iter().map(|v| *v as f64).collect();
            model.gp = Some(gp_fit(&xf, &yf, hyper)?);
        }
        (None, None, None) => {}
        _ => {
            return Err(Error::format(end_offset, "incomplete GP state in parameter table"));
        }
    }
    Ok(model)
}
