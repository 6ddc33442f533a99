//! Readers and writers for PFM, PGM, OBJ, landmark CSV and JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::raster::RenderBuffers;

/// Float image, rows top to bottom, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        crate::error::check_len("image samples", width * height * channels, data.len())?;
        Ok(Image { width, height, channels, data })
    }

    /// Camera-space normals; uncovered pixels are zero.
    pub fn from_normals(b: &RenderBuffers) -> Self {
        let data = b.normal.iter().flat_map(|n| [n.x as f32, n.y as f32, n.z as f32]).collect();
        Image { width: b.width, height: b.height, channels: 3, data }
    }

    /// Depth along the optical axis; background is stored as `f32::MAX`.
    pub fn from_depth(b: &RenderBuffers) -> Self {
        let data = b.depth.iter().map(|&d| if d.is_finite() { d as f32 } else { f32::MAX }).collect();
        Image { width: b.width, height: b.height, channels: 1, data }
    }

    pub fn pixel3(&self, p: usize) -> Vec3 {
        let s = &self.data[3 * p..3 * p + 3];
        Vec3::new(s[0] as f64, s[1] as f64, s[2] as f64)
    }
}

pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn pfm_err(msg: impl Into<String>) -> Error {
    Error::format("pfm", msg)
}

/// Splits `n` whitespace-separated header tokens off `bytes`; returns them and the payload.
fn header_tokens<'a>(bytes: &'a [u8], n: usize, fmt: &'static str) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(fmt, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates header and payload
    if i >= bytes.len() {
        return Err(Error::format(fmt, "missing payload"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let (t, payload) = header_tokens(bytes, 4, "pfm")?;
    let channels = match t[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(pfm_err(format!("bad magic `{other}`"))),
    };
    let width: usize = t[1].parse().map_err(|_| pfm_err("bad width"))?;
    let height: usize = t[2].parse().map_err(|_| pfm_err("bad height"))?;
    let scale: f32 = t[3].parse().map_err(|_| pfm_err("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(pfm_err("scale must be non-zero"));
    }
    let row = width * channels;
    if payload.len() != 4 * row * height {
        return Err(pfm_err(format!("expected {} payload bytes, found {}", 4 * row * height, payload.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; row * height];
    for (k, c) in payload.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (yf, x) = (k / row, k % row);
        data[(height - 1 - yf) * row + x] = v;
    }
    Ok(Image { width, height, channels, data })
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// 8-bit grayscale, binary.
pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (t, payload) = header_tokens(bytes, 4, "pgm")?;
    if t[0] != "P5" {
        return Err(Error::format("pgm", format!("bad magic `{}`", t[0])));
    }
    let width: usize = t[1].parse().map_err(|_| Error::format("pgm", "bad width"))?;
    let height: usize = t[2].parse().map_err(|_| Error::format("pgm", "bad height"))?;
    if t[3] != "255" {
        return Err(Error::format("pgm", "only maxval 255 is supported"));
    }
    if payload.len() != width * height {
        return Err(Error::format("pgm", format!("expected {} pixels, found {}", width * height, payload.len())));
    }
    Ok((width, height, payload.to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, data)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn mask_to_pgm(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
}

/// Triangle mesh with `v` and `f` records only; coordinates use shortest round-trip formatting.
pub fn encode_obj(positions: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for p in positions {
        s.push_str(&format!("v {} {} {}\n", p.x, p.y, p.z));
    }
    for f in faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

pub fn decode_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let err = |line: usize, msg: &str| Error::format("obj", format!("line {}: {msg}", line + 1));
    let mut pos = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse().map_err(|_| err(ln, "bad coordinate"))).collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(err(ln, "vertex needs three coordinates"));
                }
                pos.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| err(ln, "bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err(ln, "only triangles are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= pos.len())) {
        return Err(Error::format("obj", format!("face {f:?} references a missing vertex")));
    }
    Ok((pos, faces))
}

pub fn write_obj(path: &Path, positions: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    fs::write(path, encode_obj(positions, faces)).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    decode_obj(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkRow {
    pub frame: usize,
    pub landmark_id: usize,
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

pub const LANDMARK_HEADER: &str = "frame,landmark_id,u,v,valid";

pub fn encode_landmarks(rows: &[LandmarkRow]) -> String {
    let mut s = format!("{LANDMARK_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.frame, r.landmark_id, r.u, r.v, r.valid as u8));
    }
    s
}

pub fn decode_landmarks(text: &str) -> Result<Vec<LandmarkRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LANDMARK_HEADER) {
        return Err(Error::format("csv", format!("expected header `{LANDMARK_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = || Error::format("csv", format!("line {}: malformed row `{l}`", i + 2));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(err());
            }
            Ok(LandmarkRow {
                frame: f[0].parse().map_err(|_| err())?,
                landmark_id: f[1].parse().map_err(|_| err())?,
                u: f[2].parse().map_err(|_| err())?,
                v: f[3].parse().map_err(|_| err())?,
                valid: match f[4] {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(err()),
                },
            })
        })
        .collect()
}

pub fn write_landmarks(path: &Path, rows: &[LandmarkRow]) -> Result<()> {
    fs::write(path, encode_landmarks(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkRow>> {
    decode_landmarks(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_rows_are_bottom_to_top() {
        let img = Image::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let b = encode_pfm(&img);
        assert!(b.starts_with(b"Pf\n1 2\n-1.0\n"));
        let payload = &b[b.len() - 8..];
        assert_eq!(&payload[..4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_reads_big_endian() {
        let mut b = b"Pf\n1 1\n1.0\n".to_vec();
        b.extend_from_slice(&3.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&b).unwrap().data, vec![3.5]);
    }

    #[test]
    fn pfm_rejects_truncation() {
        let img = Image::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let b = encode_pfm(&img);
        assert!(decode_pfm(&b[..b.len() - 1]).is_err());
        assert!(decode_pfm(b"PX\n1 1\n-1\n    ").is_err());
    }

    #[test]
    fn pgm_round_trip_and_rejects() {
        let d = vec![0, 255, 7, 9, 1, 2];
        let (w, h, back) = decode_pgm(&encode_pgm(3, 2, &d)).unwrap();
        assert_eq!((w, h, back), (3, 2, d));
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00").is_err());
    }

    #[test]
    fn obj_accepts_slashes_and_rejects_quads() {
        let (p, f) = decode_obj("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 3\n").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
        assert!(decode_obj("v 0 0 0\nf 1 1 1 1\n").is_err());
        assert!(decode_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn landmark_csv_rejects_bad_rows() {
        assert!(decode_landmarks("frame,u\n").is_err());
        assert!(decode_landmarks(&format!("{LANDMARK_HEADER}\n0,1,2.0,3.0,maybe\n")).is_err());
        assert!(decode_landmarks(&format!("{LANDMARK_HEADER}\n0,1,2.0\n")).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        let v: Vec<f64> = vec![0.1, 1e-300, -2.5];
        write_json(&p, &v).unwrap();
        assert_eq!(read_json::<Vec<f64>>(&p).unwrap(), v);
        assert!(read_json::<Vec<f64>>(&dir.path().join("missing.json")).is_err());
    }

    proptest! {
        #[test]
        fn pfm_round_trip(w in 1usize..6, h in 1usize..6, three in any::<bool>(), seed in any::<u32>()) {
            let c = if three { 3 } else { 1 };
            let data: Vec<f32> = (0..w * h * c).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let img = Image::new(w, h, c, data).unwrap();
            let back = decode_pfm(&encode_pfm(&img)).unwrap();
            prop_assert_eq!(back.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), img.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!((back.width, back.height, back.channels), (w, h, c));
        }

        #[test]
        fn obj_round_trip(coords in prop::collection::vec(-1e3f64..1e3, 9..30)) {
            let pos: Vec<Vec3> = coords.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let faces = vec![[0, 1, 2]; 2];
            let (p, f) = decode_obj(&encode_obj(&pos, &faces)).unwrap();
            prop_assert_eq!(p, pos);
            prop_assert_eq!(f, faces);
        }

        #[test]
        fn landmark_round_trip(vals in prop::collection::vec((0usize..10, 0usize..70, -1e4f64..1e4, -1e4f64..1e4, any::<bool>()), 0..20)) {
            let rows: Vec<LandmarkRow> = vals.into_iter().map(|(frame, landmark_id, u, v, valid)| LandmarkRow { frame, landmark_id, u, v, valid }).collect();
            prop_assert_eq!(decode_landmarks(&encode_landmarks(&rows)).unwrap(), rows);
        }
    }
}
