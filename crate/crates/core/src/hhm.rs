//! HHM v1 container: a line-oriented text header followed by raw little-endian
//! array payloads.
//!
//! ```text
//! HHM v1
//! kind <tag>
//! meta <key> <value to end of line>      (zero or more)
//! array <name> <f32|i32> <ndim> <d0> ... (zero or more, payload order)
//! end
//! <payload of array 0><payload of array 1>...
//! ```
//!
//! Every line ends with a single `\n`. Payloads are packed with no padding;
//! each is `prod(dims)` elements of 4 bytes, little-endian, row-major.
//! Names and keys contain no whitespace; meta values contain no newline.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "HHM v1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::I32(_) => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HhmFile {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<Array>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("HHM", msg)
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!("{what} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl HhmFile {
    pub fn new(kind: &str) -> Self {
        HhmFile {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("meta key `{key}` has unparsable value `{raw}`")))
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.arrays.push(Array {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::F32(data),
        });
    }

    /// Stores f64 values rounded to f32.
    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) {
        self.push_f32(name, shape, data.into_iter().map(|x| x as f32).collect());
    }

    pub fn push_i32(&mut self, name: &str, shape: &[usize], data: Vec<i32>) {
        self.arrays.push(Array {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::I32(data),
        });
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| bad(format!("missing array `{name}`")))
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    /// Float array widened to f64, with its shape.
    pub fn f64s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((a.shape.clone(), v.iter().map(|&x| x as f64).collect())),
            ArrayData::I32(_) => Err(bad(format!("array `{name}` is i32, expected f32"))),
        }
    }

    pub fn i32s(&self, name: &str) -> Result<(Vec<usize>, &[i32])> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((a.shape.clone(), v)),
            ArrayData::F32(_) => Err(bad(format!("array `{name}` is f32, expected i32"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::new();
        check_token(&self.kind, "kind")?;
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            check_token(k, "meta key")?;
            if v.contains('\n') {
                return Err(bad(format!("meta value for `{k}` contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            check_token(&a.name, "array name")?;
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(bad(format!(
                    "array `{}` has shape {:?} but {} elements",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            header.push_str(&format!("array {} {} {}", a.name, a.data.dtype(), a.shape.len()));
            for d in &a.shape {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");
        let mut buf = header.into_bytes();
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| Error::io("<stream>", e))?;
            if n == 0 || !line.ends_with('\n') {
                return Err(bad("truncated header"));
            }
            line.pop();
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(bad(format!("bad magic `{line}`")));
        }
        next_line(&mut r, &mut line)?;
        let kind = line
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind line"))?
            .to_string();
        let mut file = HhmFile::new(&kind);
        let mut specs: Vec<(String, String, Vec<usize>)> = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                file.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("array ") {
                let toks: Vec<&str> = rest.split(' ').collect();
                if toks.len() < 3 {
                    return Err(bad(format!("bad array line `{line}`")));
                }
                let ndim: usize = toks[2].parse().map_err(|_| bad(format!("bad ndim in `{line}`")))?;
                if toks.len() != 3 + ndim {
                    return Err(bad(format!("array line `{line}` has wrong dim count")));
                }
                let shape = toks[3..]
                    .iter()
                    .map(|t| t.parse::<usize>().map_err(|_| bad(format!("bad dim in `{line}`"))))
                    .collect::<Result<Vec<_>>>()?;
                specs.push((toks[0].to_string(), toks[1].to_string(), shape));
            } else {
                return Err(bad(format!("unknown header line `{line}`")));
            }
        }
        for (name, dtype, shape) in specs {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("truncated payload for `{name}`")))?;
            let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype.as_str() {
                "f32" => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                "i32" => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
                other => return Err(bad(format!("unknown dtype `{other}`"))),
            };
            file.arrays.push(Array { name, shape, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io("<stream>", e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after payload", rest.len())));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| relabel(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f).map_err(|e| relabel(e, path))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected kind `{kind}`, found `{}`", self.kind)));
        }
        Ok(())
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format { format, msg } => Error::Format {
            format,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let mut f = HhmFile::new("test");
        f.set_meta("seed", 7);
        f.push_f32("a", &[2], vec![1.0, -2.5]);
        f.push_i32("b", &[1, 1], vec![-1]);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let header = b"HHM v1\nkind test\nmeta seed 7\narray a f32 1 2\narray b i32 2 1 1\nend\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(&buf[buf.len() - 4..], &(-1i32).to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut f = HhmFile::new("t");
        f.push_f32("x", &[3], vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert!(HhmFile::read_from(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(HhmFile::read_from(&longer[..]).is_err());
        assert!(HhmFile::read_from(&b"HHM v2\n"[..]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected_on_write() {
        let mut f = HhmFile::new("t");
        f.push_f32("x", &[2, 2], vec![1.0]);
        assert!(f.write_to(Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            floats in proptest::collection::vec(any::<u32>(), 0..64),
            ints in proptest::collection::vec(any::<i32>(), 0..16),
            value in "[a-z0-9 ._-]{0,20}",
        ) {
            let mut f = HhmFile::new("prop");
            f.set_meta("note", &value);
            let fl: Vec<f32> = floats.iter().map(|&b| f32::from_bits(b)).collect();
            f.push_f32("floats", &[fl.len()], fl);
            f.push_i32("ints", &[ints.len()], ints.clone());
            let mut buf = Vec::new();
            f.write_to(&mut buf).unwrap();
            let back = HhmFile::read_from(&buf[..]).unwrap();
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(buf, again);
            prop_assert_eq!(back.meta("note").unwrap(), value.as_str());
        }
    }
}
