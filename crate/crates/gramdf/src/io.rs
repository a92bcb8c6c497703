//! File formats: grid kernels, sampled arrays, spectra, feature clouds,
//! and alignment reports.
//!
//! Text formats use the shortest round-tripping decimal representation,
//! so write-read cycles are bitwise exact and identical inputs produce
//! identical bytes. Binary twins carry an eight-byte ASCII magic followed
//! by little-endian payloads.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::{Latents, SampledArray};
use crate::error::{Error, Result};
use crate::grid::{DyadicLevel, GridFunction1D, GridKernel};
use crate::measure::{Alignment, OrthogonalMap};
use crate::mercer::SpectralDecomposition;
use crate::recovery::{FeatureCloud, FeaturePoint, Provenance};

const KERNEL_MAGIC_TEXT: &str = "GDK1";
const KERNEL_MAGIC_BINARY: &[u8; 8] = b"GDKB0001";
const ARRAY_MAGIC_TEXT: &str = "GDA1";
const ARRAY_MAGIC_BINARY: &[u8; 8] = b"GDAB0001";
const FLAG_LATENTS: u64 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_f64(token: &str) -> Result<f64> {
    token
        .trim()
        .parse::<f64>()
        .map_err(|_| format_err(format!("bad float {token:?}")))
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let row = line
        .split(',')
        .map(parse_f64)
        .collect::<Result<Vec<f64>>>()?;
    if row.len() != expected {
        return Err(format_err(format!(
            "expected {expected} values per row, got {}",
            row.len()
        )));
    }
    Ok(row)
}

fn write_row(w: &mut impl IoWrite, row: &[f64]) -> Result<()> {
    let mut first = true;
    for v in row {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        write!(w, "{v}")?;
    }
    w.write_all(b"\n")?;
    Ok(())
}

fn read_line(r: &mut impl BufRead, what: &str) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(format_err(format!("unexpected end of file reading {what}")));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

// ---- Grid kernels ----

pub fn write_kernel_text(k: &GridKernel, w: &mut impl IoWrite) -> Result<()> {
    let cells = k.level().cells();
    writeln!(w, "{KERNEL_MAGIC_TEXT} {}", k.level().m())?;
    for i in 0..cells {
        write_row(w, &k.values()[i * cells..(i + 1) * cells])?;
    }
    Ok(())
}

pub fn read_kernel_text(r: &mut impl BufRead) -> Result<GridKernel> {
    let header = read_line(r, "kernel header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(KERNEL_MAGIC_TEXT) {
        return Err(format_err("bad kernel magic"));
    }
    let m: u32 = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format_err("bad kernel level in header"))?;
    if parts.next().is_some() {
        return Err(format_err("unexpected tokens in kernel header"));
    }
    let level = DyadicLevel::new(m)?;
    let cells = level.cells();
    let mut values = Vec::with_capacity(cells * cells);
    for _ in 0..cells {
        values.extend(parse_row(&read_line(r, "kernel row")?, cells)?);
    }
    GridKernel::from_values(level, values)
}

pub fn write_kernel_binary(k: &GridKernel, w: &mut impl IoWrite) -> Result<()> {
    w.write_all(KERNEL_MAGIC_BINARY)?;
    w.write_all(&(k.level().m() as u64).to_le_bytes())?;
    for v in k.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_kernel_binary(r: &mut impl Read) -> Result<GridKernel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("kernel file too short for magic"))?;
    if &magic != KERNEL_MAGIC_BINARY {
        return Err(format_err("bad kernel magic"));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|_| format_err("kernel file too short for level"))?;
    let m = u64::from_le_bytes(word);
    let level = DyadicLevel::new(
        u32::try_from(m).map_err(|_| format_err("kernel level out of range"))?,
    )?;
    // Read what is actually there and compare, so a lying header cannot
    // force a giant allocation.
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = (level.cells() as u128) * (level.cells() as u128) * 8;
    if payload.len() as u128 != expected {
        return Err(format_err(format!(
            "kernel payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    GridKernel::from_values(level, bytes_to_f64s(&payload))
}

// ---- Sampled arrays ----

pub fn write_array_text(a: &SampledArray, w: &mut impl IoWrite) -> Result<()> {
    let n = a.n();
    match a.latents() {
        Some(l) => writeln!(w, "{ARRAY_MAGIC_TEXT} {n} latents {}", l.seed())?,
        None => writeln!(w, "{ARRAY_MAGIC_TEXT} {n}")?,
    }
    for i in 0..n {
        write_row(w, &a.entries()[i * n..(i + 1) * n])?;
    }
    if let Some(l) = a.latents() {
        write_row(w, l.u())?;
    }
    Ok(())
}

pub fn read_array_text(r: &mut impl BufRead) -> Result<SampledArray> {
    let header = read_line(r, "array header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(ARRAY_MAGIC_TEXT) {
        return Err(format_err("bad array magic"));
    }
    let n: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format_err("bad array size in header"))?;
    let seed = match parts.next() {
        None => None,
        Some("latents") => Some(
            parts
                .next()
                .and_then(|t| t.parse::<u64>().ok())
                .ok_or_else(|| format_err("bad latent seed in header"))?,
        ),
        Some(other) => return Err(format_err(format!("unexpected header token {other:?}"))),
    };
    if parts.next().is_some() {
        return Err(format_err("unexpected tokens in array header"));
    }
    let mut entries = Vec::new();
    for _ in 0..n {
        entries.extend(parse_row(&read_line(r, "array row")?, n)?);
    }
    let latents = match seed {
        Some(s) => Some(Latents::new(
            s,
            parse_row(&read_line(r, "latent row")?, n)?,
        )),
        None => None,
    };
    SampledArray::from_entries(n, entries, latents)
}

pub fn write_array_binary(a: &SampledArray, w: &mut impl IoWrite) -> Result<()> {
    w.write_all(ARRAY_MAGIC_BINARY)?;
    w.write_all(&(a.n() as u64).to_le_bytes())?;
    let flags = if a.latents().is_some() { FLAG_LATENTS } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for v in a.entries() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(l) = a.latents() {
        w.write_all(&l.seed().to_le_bytes())?;
        for v in l.u() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_array_binary(r: &mut impl Read) -> Result<SampledArray> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("array file too short for magic"))?;
    if &magic != ARRAY_MAGIC_BINARY {
        return Err(format_err("bad array magic"));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|_| format_err("array file too short for size"))?;
    let n = usize::try_from(u64::from_le_bytes(word))
        .map_err(|_| format_err("array size out of range"))?;
    r.read_exact(&mut word)
        .map_err(|_| format_err("array file too short for flags"))?;
    let flags = u64::from_le_bytes(word);
    if flags & !FLAG_LATENTS != 0 {
        return Err(format_err(format!("unknown array flags {flags:#x}")));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let entry_bytes = (n as u128) * (n as u128) * 8;
    let latent_bytes = if flags & FLAG_LATENTS != 0 {
        8 + (n as u128) * 8
    } else {
        0
    };
    if payload.len() as u128 != entry_bytes + latent_bytes {
        return Err(format_err(format!(
            "array payload has {} bytes, expected {}",
            payload.len(),
            entry_bytes + latent_bytes
        )));
    }
    let entry_bytes = entry_bytes as usize;
    let entries = bytes_to_f64s(&payload[..entry_bytes]);
    let latents = if flags & FLAG_LATENTS != 0 {
        let seed = u64::from_le_bytes(
            payload[entry_bytes..entry_bytes + 8]
                .try_into()
                .expect("8 seed bytes"),
        );
        Some(Latents::new(seed, bytes_to_f64s(&payload[entry_bytes + 8..])))
    } else {
        None
    };
    SampledArray::from_entries(n, entries, latents)
}

// ---- Spectra ----

#[derive(Debug, Serialize, Deserialize)]
struct SpectrumFile {
    m: u32,
    r: usize,
    lambda: Vec<f64>,
    clipped_mass: f64,
    eigenfunctions_file: String,
}

/// Write the spectrum JSON beside a raw eigenfunction block (r x 2^m
/// little-endian doubles) named after the JSON file.
pub fn save_spectrum(s: &SpectralDecomposition, json_path: &Path) -> Result<()> {
    let block_name = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| format!("{s}.phi"))
        .ok_or_else(|| format_err("spectrum path has no usable file name"))?;
    let file = SpectrumFile {
        m: s.level().m(),
        r: s.eigenvalues().len(),
        lambda: s.eigenvalues().to_vec(),
        clipped_mass: s.clipped_mass(),
        eigenfunctions_file: block_name.clone(),
    };
    let mut w = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut w, &file)
        .map_err(|e| format_err(format!("spectrum encode: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    let block_path = json_path.with_file_name(block_name);
    let mut b = BufWriter::new(File::create(block_path)?);
    for f in s.eigenfunctions() {
        for v in f.values() {
            b.write_all(&v.to_le_bytes())?;
        }
    }
    b.flush()?;
    Ok(())
}

pub fn load_spectrum(json_path: &Path) -> Result<SpectralDecomposition> {
    let file: SpectrumFile = serde_json::from_reader(BufReader::new(File::open(json_path)?))
        .map_err(|e| format_err(format!("spectrum decode: {e}")))?;
    let level = DyadicLevel::new(file.m)?;
    if file.lambda.len() != file.r {
        return Err(format_err(format!(
            "spectrum declares r = {} but carries {} eigenvalues",
            file.r,
            file.lambda.len()
        )));
    }
    let block_path = json_path.with_file_name(&file.eigenfunctions_file);
    let mut payload = Vec::new();
    File::open(block_path)?.read_to_end(&mut payload)?;
    let expected = (file.r as u128) * (level.cells() as u128) * 8;
    if payload.len() as u128 != expected {
        return Err(format_err(format!(
            "eigenfunction block has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let cells = level.cells();
    let eigenfunctions = (0..file.r)
        .map(|l| {
            GridFunction1D::from_values(
                level,
                bytes_to_f64s(&payload[l * cells * 8..(l + 1) * cells * 8]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    SpectralDecomposition::from_parts(level, file.lambda, eigenfunctions, file.clipped_mass)
}

// ---- Feature clouds ----

#[derive(Debug, Serialize, Deserialize)]
struct CloudHeader {
    r: usize,
    n: usize,
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudLine {
    h: Vec<f64>,
    t: f64,
    a: f64,
}

pub fn write_cloud(c: &FeatureCloud, w: &mut impl IoWrite) -> Result<()> {
    let header = CloudHeader {
        r: c.r(),
        n: c.n(),
        provenance: c.provenance(),
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).map_err(|e| format_err(format!("cloud encode: {e}")))?
    )?;
    for p in c.points() {
        let line = CloudLine {
            h: p.h().to_vec(),
            t: p.t(),
            a: p.a(),
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&line).map_err(|e| format_err(format!("cloud encode: {e}")))?
        )?;
    }
    Ok(())
}

pub fn read_cloud(r: &mut impl BufRead) -> Result<FeatureCloud> {
    let header: CloudHeader = serde_json::from_str(&read_line(r, "cloud header")?)
        .map_err(|e| format_err(format!("cloud header decode: {e}")))?;
    let points = (0..header.n)
        .map(|_| {
            let line: CloudLine = serde_json::from_str(&read_line(r, "cloud point")?)
                .map_err(|e| format_err(format!("cloud point decode: {e}")))?;
            FeaturePoint::with_excess(line.h, line.t, line.a)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureCloud::from_points(header.r, points, header.provenance)
}

// ---- Alignment reports ----

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentFile {
    q: Vec<Vec<f64>>,
    residual: f64,
    iterations: usize,
}

pub fn write_alignment(a: &Alignment, w: &mut impl IoWrite) -> Result<()> {
    let file = AlignmentFile {
        q: a.map.rows().to_vec(),
        residual: a.residual,
        iterations: a.iterations,
    };
    serde_json::to_writer_pretty(&mut *w, &file)
        .map_err(|e| format_err(format!("alignment encode: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_alignment(r: &mut impl Read) -> Result<Alignment> {
    let file: AlignmentFile =
        serde_json::from_reader(r).map_err(|e| format_err(format!("alignment decode: {e}")))?;
    Ok(Alignment {
        map: OrthogonalMap::from_rows(file.q)?,
        residual: file.residual,
        iterations: file.iterations,
    })
}

// ---- Path helpers ----

pub fn save_kernel_text(k: &GridKernel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_kernel_text(k, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_kernel_text(path: &Path) -> Result<GridKernel> {
    read_kernel_text(&mut BufReader::new(File::open(path)?))
}

pub fn save_kernel_binary(k: &GridKernel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_kernel_binary(k, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_kernel_binary(path: &Path) -> Result<GridKernel> {
    read_kernel_binary(&mut BufReader::new(File::open(path)?))
}

pub fn save_array_text(a: &SampledArray, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_array_text(a, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_array_text(path: &Path) -> Result<SampledArray> {
    read_array_text(&mut BufReader::new(File::open(path)?))
}

pub fn save_array_binary(a: &SampledArray, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_array_binary(a, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_array_binary(path: &Path) -> Result<SampledArray> {
    read_array_binary(&mut BufReader::new(File::open(path)?))
}

/// True when the file starts with the given 8-byte binary magic.
fn has_magic(path: &Path, magic: &[u8; 8]) -> Result<bool> {
    let mut head = [0u8; 8];
    let mut file = File::open(path)?;
    let got = file.read(&mut head)?;
    Ok(got == 8 && &head == magic)
}

/// Load a kernel from either format, sniffing the binary magic.
pub fn load_kernel(path: &Path) -> Result<GridKernel> {
    if has_magic(path, KERNEL_MAGIC_BINARY)? {
        load_kernel_binary(path)
    } else {
        load_kernel_text(path)
    }
}

/// Load an array from either format, sniffing the binary magic.
pub fn load_array(path: &Path) -> Result<SampledArray> {
    if has_magic(path, ARRAY_MAGIC_BINARY)? {
        load_array_binary(path)
    } else {
        load_array_text(path)
    }
}

pub fn save_cloud(c: &FeatureCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cloud(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<FeatureCloud> {
    read_cloud(&mut BufReader::new(File::open(path)?))
}

pub fn save_alignment(a: &Alignment, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_alignment(a, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_alignment(path: &Path) -> Result<Alignment> {
    read_alignment(&mut BufReader::new(File::open(path)?))
}
