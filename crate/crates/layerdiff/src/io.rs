//! Binary tensor container and PNG import/export.
//!
//! Container layout: a plain-text header (magic line, optional `meta` lines,
//! one `tensor` line per payload recording role label, element type and
//! shape, then `end`), followed by the concatenated little-endian payloads in
//! declaration order. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{
    EmbedLabel, ImageTensor, Latent, Mask, NoiseSchedule, ResolutionTag, Timestep,
};

const MAGIC: &str = "TENSORS v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub role: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// A named bundle of tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Container {
    pub fn push(&mut self, role: &str, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(TensorEntry {
            role: role.to_string(),
            dims,
            data,
        });
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn find(&self, role: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.role == role)
    }

    pub fn require(&self, role: &str, path: &Path) -> Result<&TensorEntry> {
        self.find(role).ok_or_else(|| Error::TensorType {
            path: path.to_path_buf(),
            expected: role.to_string(),
            found: self
                .tensors
                .iter()
                .map(|t| t.role.clone())
                .collect::<Vec<_>>()
                .join(","),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{MAGIC}").map_err(io)?;
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(char::is_whitespace));
            debug_assert!(!v.contains('\n'));
            writeln!(w, "meta {k} {v}").map_err(io)?;
        }
        for t in &self.tensors {
            let dims = t
                .dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(w, "tensor {} f64 {} {dims}", t.role, t.dims.len()).map_err(io)?;
        }
        writeln!(w, "end").map_err(io)?;
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        // Header is everything up to the line `end`.
        let mut pos = 0usize;
        let mut lines: Vec<String> = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| fmt_err(path, "header not terminated by `end` line"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| fmt_err(path, "non-utf8 header"))?
                .to_string();
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.is_empty() || lines[0] != MAGIC {
            return Err(fmt_err(path, format!("bad magic, expected `{MAGIC}`")));
        }

        let mut out = Container::default();
        let mut payload_len = 0usize;
        for line in &lines[1..] {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| fmt_err(path, format!("malformed meta line `{line}`")))?;
                out.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() < 3 {
                    return Err(fmt_err(path, format!("malformed tensor line `{line}`")));
                }
                let role = parts[0].to_string();
                if parts[1] != "f64" {
                    return Err(fmt_err(path, format!("unsupported element type {}", parts[1])));
                }
                let ndim: usize = parts[2]
                    .parse()
                    .map_err(|_| fmt_err(path, "bad ndim"))?;
                if parts.len() != 3 + ndim {
                    return Err(fmt_err(path, format!("dim count mismatch in `{line}`")));
                }
                let mut dims = Vec::with_capacity(ndim);
                for p in &parts[3..] {
                    dims.push(p.parse::<usize>().map_err(|_| fmt_err(path, "bad dim"))?);
                }
                let n: usize = dims.iter().product();
                payload_len += n * 8;
                out.tensors.push(TensorEntry {
                    role,
                    dims,
                    data: Vec::new(),
                });
            } else {
                return Err(fmt_err(path, format!("unknown header line `{line}`")));
            }
        }
        if bytes.len() - pos != payload_len {
            return Err(fmt_err(
                path,
                format!(
                    "payload length {} does not match header total {}",
                    bytes.len() - pos,
                    payload_len
                ),
            ));
        }
        for t in &mut out.tensors {
            let n: usize = t.dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[pos..pos + 8]);
                data.push(f64::from_le_bytes(buf));
                pos += 8;
            }
            t.data = data;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Typed save/load for the core types
// ---------------------------------------------------------------------------

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.push(
        "image",
        vec![img.height(), img.width(), 3],
        img.data().to_vec(),
    );
    c.save(path)
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let c = Container::load(path)?;
    let t = c.require("image", path)?;
    if t.dims.len() != 3 || t.dims[2] != 3 {
        return Err(fmt_err(path, format!("image dims {:?}", t.dims)));
    }
    ImageTensor::new(t.data.clone(), t.dims[0], t.dims[1])
}

pub fn save_latent(l: &Latent, path: &Path) -> Result<()> {
    let mut c = Container::default();
    let ts = match l.timestep {
        Timestep::Clean => "clean".to_string(),
        Timestep::Step(t) => t.to_string(),
    };
    c.set_meta("timestep", &ts);
    c.push(
        "latent",
        vec![l.height(), l.width(), l.channels()],
        l.data().to_vec(),
    );
    c.save(path)
}

pub fn load_latent(path: &Path) -> Result<Latent> {
    let c = Container::load(path)?;
    let t = c.require("latent", path)?;
    if t.dims.len() != 3 {
        return Err(fmt_err(path, format!("latent dims {:?}", t.dims)));
    }
    let ts = match c.meta("timestep") {
        None | Some("clean") => Timestep::Clean,
        Some(s) => Timestep::Step(
            s.parse()
                .map_err(|_| fmt_err(path, format!("bad timestep meta `{s}`")))?,
        ),
    };
    Latent::new(t.data.clone(), t.dims[0], t.dims[1], t.dims[2], ts)
}

pub fn save_embedding(e: &TextEmbeddingRef<'_>, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.set_meta("label", e.label.as_str());
    c.set_meta("tokens", &e.tokens.to_string());
    c.push(
        "embedding",
        vec![e.token_capacity, e.dim],
        e.data.to_vec(),
    );
    c.save(path)
}

/// Borrowed view used so callers can save without cloning.
pub struct TextEmbeddingRef<'a> {
    pub data: &'a [f64],
    pub token_capacity: usize,
    pub dim: usize,
    pub tokens: usize,
    pub label: EmbedLabel,
}

impl<'a> From<&'a crate::types::TextEmbedding> for TextEmbeddingRef<'a> {
    fn from(e: &'a crate::types::TextEmbedding) -> Self {
        Self {
            data: e.data(),
            token_capacity: e.token_capacity(),
            dim: e.dim(),
            tokens: e.tokens,
            label: e.label,
        }
    }
}

pub fn load_embedding(path: &Path) -> Result<crate::types::TextEmbedding> {
    let c = Container::load(path)?;
    let t = c.require("embedding", path)?;
    if t.dims.len() != 2 {
        return Err(fmt_err(path, format!("embedding dims {:?}", t.dims)));
    }
    let label = match c.meta("label") {
        Some("raw") | None => EmbedLabel::Raw,
        Some("optimized") => EmbedLabel::Optimized,
        Some("interpolated") => EmbedLabel::Interpolated,
        Some(other) => return Err(fmt_err(path, format!("bad label `{other}`"))),
    };
    let tokens = match c.meta("tokens") {
        None => t.dims[0],
        Some(s) => s
            .parse()
            .map_err(|_| fmt_err(path, format!("bad tokens meta `{s}`")))?,
    };
    crate::types::TextEmbedding::new(t.data.clone(), t.dims[0], t.dims[1], tokens, label)
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    let mut c = Container::default();
    let tag = match m.resolution_tag {
        ResolutionTag::Image => "image",
        ResolutionTag::Latent => "latent",
    };
    c.set_meta("resolution", tag);
    c.push("mask", vec![m.height(), m.width()], m.data().to_vec());
    c.save(path)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let c = Container::load(path)?;
    let t = c.require("mask", path)?;
    if t.dims.len() != 2 {
        return Err(fmt_err(path, format!("mask dims {:?}", t.dims)));
    }
    let tag = match c.meta("resolution") {
        Some("latent") => ResolutionTag::Latent,
        _ => ResolutionTag::Image,
    };
    Mask::new(t.data.clone(), t.dims[0], t.dims[1], tag)
}

pub fn save_schedule(s: &NoiseSchedule, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.push("schedule.betas", vec![s.t_steps()], s.betas().to_vec());
    c.push(
        "schedule.alpha_bars",
        vec![s.t_steps()],
        s.alpha_bars().to_vec(),
    );
    c.save(path)
}

pub fn load_schedule(path: &Path) -> Result<NoiseSchedule> {
    let c = Container::load(path)?;
    let betas = c.require("schedule.betas", path)?;
    NoiseSchedule::from_betas(betas.data.clone())
}

// ---------------------------------------------------------------------------
// PNG import/export
// ---------------------------------------------------------------------------

/// Writes an image as 8-bit RGB PNG. Lossy (the tensor container is the
/// bit-exact path).
pub fn image_to_png(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let buf: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let im = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer sized from image");
    im.save(path)
        .map_err(|e| fmt_err(path, format!("png encode: {e}")))
}

pub fn image_from_png(path: &Path) -> Result<ImageTensor> {
    let im = image::open(path)
        .map_err(|e| fmt_err(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (im.width() as usize, im.height() as usize);
    let data: Vec<f64> = im.as_raw().iter().map(|b| *b as f64 / 255.0).collect();
    ImageTensor::new(data, h, w)
}

/// Single-channel PNG, 0/255 encoding; nonzero pixels count as foreground.
pub fn mask_to_png(m: &Mask, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let buf: Vec<u8> = m.data().iter().map(|v| if *v > 0.5 { 255 } else { 0 }).collect();
    let im = image::GrayImage::from_raw(m.width() as u32, m.height() as u32, buf)
        .expect("buffer sized from mask");
    im.save(path)
        .map_err(|e| fmt_err(path, format!("png encode: {e}")))
}

pub fn mask_from_png(path: &Path, tag: ResolutionTag) -> Result<Mask> {
    let im = image::open(path)
        .map_err(|e| fmt_err(path, format!("png decode: {e}")))?
        .to_luma8();
    let (w, h) = (im.width() as usize, im.height() as usize);
    let data: Vec<f64> = im
        .as_raw()
        .iter()
        .map(|b| if *b >= 128 { 1.0 } else { 0.0 })
        .collect();
    Mask::new(data, h, w, tag)
}

/// SHA-256 content hash of a file, hex-encoded. Used by the job manifest.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TextEmbedding;
    use tempfile::tempdir;

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.tns");
        let e = TextEmbedding::new(
            vec![0.1, -0.25, 1e-300, 3.5, 0.0, -0.0],
            2,
            3,
            1,
            EmbedLabel::Raw,
        )
        .unwrap();
        save_embedding(&(&e).into(), &p).unwrap();
        let back = load_embedding(&p).unwrap();
        assert_eq!(e.data(), back.data());
        assert_eq!(back.tokens, 1);
        assert_eq!(back.label, EmbedLabel::Raw);
    }

    #[test]
    fn wrong_declared_type_is_a_type_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.tns");
        let e = TextEmbedding::new(vec![0.0; 6], 2, 3, 2, EmbedLabel::Raw).unwrap();
        save_embedding(&(&e).into(), &p).unwrap();
        match load_mask(&p) {
            Err(Error::TensorType { expected, .. }) => assert_eq!(expected, "mask"),
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip_preserves_coverage() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.tns");
        let m = Mask::new(
            (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
            8,
            8,
            ResolutionTag::Image,
        )
        .unwrap();
        save_mask(&m, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(m.coverage(), back.coverage());
        assert_eq!(m.data(), back.data());
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.tns");
        std::fs::write(&p, b"NOT A TENSOR FILE\nend\n").unwrap();
        assert!(matches!(Container::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"TENSORS v1\ntensor x f64 1 4\nend\nshort").unwrap();
        assert!(matches!(Container::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn schedule_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.tns");
        let s = NoiseSchedule::default_linear();
        save_schedule(&s, &p).unwrap();
        let back = load_schedule(&p).unwrap();
        assert_eq!(s.betas(), back.betas());
        assert_eq!(s.alpha_bars(), back.alpha_bars());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(
            (0..64).map(|i| if i / 8 < 4 { 1.0 } else { 0.0 }).collect(),
            8,
            8,
            ResolutionTag::Image,
        )
        .unwrap();
        mask_to_png(&m, &p).unwrap();
        let back = mask_from_png(&p, ResolutionTag::Image).unwrap();
        assert_eq!(m.data(), back.data());
    }
}
