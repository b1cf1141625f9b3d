//! Images as row-major HWC buffers of `f64` in [0, 1], with lossless
//! portable-pixmap IO and the canvas layout sidecar.
//!
//! Scenes travel as binary P6 pixmaps (maxval 255), masks as binary P5
//! graymaps. Values of the form k/255 survive a write/read round trip
//! bit-exactly, and the forge only ever emits such values, so datasets are
//! lossless on disk.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Row-major, channel-interleaved: index = (y * w + x) * c + ch.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Image {
        assert!(h > 0 && w > 0 && c > 0, "image extents must be positive");
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn filled(h: usize, w: usize, color: &[f64]) -> Image {
        let mut img = Image::new(h, w, color.len());
        for px in img.data.chunks_mut(color.len()) {
            px.copy_from_slice(color);
        }
        img
    }

    pub fn get(&self, y: usize, x: usize) -> &[f64] {
        &self.data[(y * self.w + x) * self.c..(y * self.w + x + 1) * self.c]
    }

    pub fn set(&mut self, y: usize, x: usize, px: &[f64]) {
        assert_eq!(px.len(), self.c);
        let at = (y * self.w + x) * self.c;
        self.data[at..at + self.c].copy_from_slice(px);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Quantize to bytes: clamp then round, so k/255 maps back to k.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(h: usize, w: usize, c: usize, bytes: &[u8]) -> Image {
        assert_eq!(bytes.len(), h * w * c);
        Image { h, w, c, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    /// Crop columns x0..x0+w (full height).
    pub fn crop_cols(&self, x0: usize, w: usize) -> Image {
        assert!(x0 + w <= self.w, "crop past image edge");
        let mut out = Image::new(self.h, w, self.c);
        for y in 0..self.h {
            let src = (y * self.w + x0) * self.c;
            let dst = y * w * self.c;
            out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
        }
        out
    }

    /// Paste `other` with its left edge at column x0.
    pub fn paste_cols(&mut self, x0: usize, other: &Image) {
        assert_eq!(self.h, other.h);
        assert_eq!(self.c, other.c);
        assert!(x0 + other.w <= self.w, "paste past image edge");
        for y in 0..self.h {
            let dst = (y * self.w + x0) * self.c;
            let src = y * other.w * self.c;
            self.data[dst..dst + other.w * self.c]
                .copy_from_slice(&other.data[src..src + other.w * self.c]);
        }
    }
}

/// Horizontal concatenation; panels must agree in height and channels.
pub fn hcat(panels: &[&Image]) -> Result<Image> {
    let first = panels.first().ok_or_else(|| Error::Data("hcat of zero panels".into()))?;
    let (h, c) = (first.h, first.c);
    for p in panels {
        if p.h != h || p.c != c {
            return Err(Error::Shape(format!(
                "panel {}x{}x{} does not match {}x?x{}",
                p.h, p.w, p.c, h, c
            )));
        }
    }
    let w: usize = panels.iter().map(|p| p.w).sum();
    let mut out = Image::new(h, w, c);
    let mut x0 = 0usize;
    for p in panels {
        out.paste_cols(x0, p);
        x0 += p.w;
    }
    Ok(out)
}

// ---- portable pixmap / graymap IO ----

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.c != 3 {
        return Err(Error::Shape(format!("P6 wants 3 channels, image has {}", img.c)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.to_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, c, raster) = parse_pnm(&bytes, b"P6", path)?;
    Ok(Image::from_bytes(h, w, c, &raster))
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    if img.c != 1 {
        return Err(Error::Shape(format!("P5 wants 1 channel, image has {}", img.c)));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.to_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, c, raster) = parse_pnm(&bytes, b"P5", path)?;
    Ok(Image::from_bytes(h, w, c, &raster))
}

fn parse_pnm(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(bad(&format!(
            "expected {} pixmap",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let mut at = 2usize;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // Skip whitespace and # comments between header fields.
        loop {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                break;
            }
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        if start == at {
            return Err(bad("malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, want 255")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    // Exactly one whitespace byte separates header and raster.
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    at += 1;
    let c = if magic == b"P6" { 3 } else { 1 };
    let want = w * h * c;
    let raster = &bytes[at..];
    if raster.len() != want {
        return Err(bad(&format!("raster holds {} bytes, want {want}", raster.len())));
    }
    Ok((w, h, c, raster.to_vec()))
}

// ---- canvas layout sidecar ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelRole {
    Reference(usize),
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSpec {
    pub role: PanelRole,
    /// Left edge in canvas columns.
    pub offset: usize,
    pub width: usize,
}

/// Geometry record stored next to every composed canvas: panel roles and
/// horizontal offsets, one line per panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanvasLayout {
    pub height: usize,
    pub panels: Vec<PanelSpec>,
}

impl CanvasLayout {
    pub fn width(&self) -> usize {
        self.panels.iter().map(|p| p.width).sum()
    }

    pub fn target(&self) -> Option<&PanelSpec> {
        self.panels.iter().find(|p| p.role == PanelRole::Target)
    }

    pub fn references(&self) -> impl Iterator<Item = &PanelSpec> {
        self.panels.iter().filter(|p| matches!(p.role, PanelRole::Reference(_)))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "panels={}", self.panels.len());
        for p in &self.panels {
            let role = match p.role {
                PanelRole::Reference(i) => format!("ref:{i}"),
                PanelRole::Target => "target".to_string(),
            };
            let _ = writeln!(s, "panel role={role} offset={} width={}", p.offset, p.width);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CanvasLayout> {
        let bad = |msg: String| Error::Data(format!("layout: {msg}"));
        let mut height = None;
        let mut declared = None;
        let mut panels = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("height=") {
                height = Some(v.parse().map_err(|_| bad(format!("bad height {v}")))?);
            } else if let Some(v) = line.strip_prefix("panels=") {
                declared = Some(v.parse::<usize>().map_err(|_| bad(format!("bad count {v}")))?);
            } else if let Some(rest) = line.strip_prefix("panel ") {
                let mut role = None;
                let mut offset = None;
                let mut width = None;
                for field in rest.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad field {field}")))?;
                    match k {
                        "role" => {
                            role = Some(if v == "target" {
                                PanelRole::Target
                            } else if let Some(i) = v.strip_prefix("ref:") {
                                PanelRole::Reference(
                                    i.parse().map_err(|_| bad(format!("bad ref index {v}")))?,
                                )
                            } else {
                                return Err(bad(format!("unknown role {v}")));
                            });
                        }
                        "offset" => {
                            offset = Some(v.parse().map_err(|_| bad(format!("bad offset {v}")))?)
                        }
                        "width" => {
                            width = Some(v.parse().map_err(|_| bad(format!("bad width {v}")))?)
                        }
                        _ => return Err(bad(format!("unknown key {k}"))),
                    }
                }
                panels.push(PanelSpec {
                    role: role.ok_or_else(|| bad("panel without role".into()))?,
                    offset: offset.ok_or_else(|| bad("panel without offset".into()))?,
                    width: width.ok_or_else(|| bad("panel without width".into()))?,
                });
            } else {
                return Err(bad(format!("unknown line {line}")));
            }
        }
        let layout = CanvasLayout {
            height: height.ok_or_else(|| bad("missing height".into()))?,
            panels,
        };
        if let Some(n) = declared {
            if n != layout.panels.len() {
                return Err(bad(format!("declared {n} panels, found {}", layout.panels.len())));
            }
        }
        Ok(layout)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<CanvasLayout> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CanvasLayout::from_text(&text)
    }
}
