//! Checkpoint files: a textual header followed by a flat little-endian `f64`
//! payload.
//!
//! ```text
//! gipo-checkpoint 1
//! meta version 42
//! meta kind mlp
//! tensor trunk0.weight 25 64
//! tensor trunk0.bias 1 64
//! end
//! <rows*cols f64 values per tensor, in header order>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &str = "gipo-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing meta `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint meta `{key}` is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    /// Tensors whose names start with `prefix`, in file order, prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Format(format!("meta `{k}` cannot be encoded")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name `{name}` contains whitespace")));
            }
            writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols())?;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Format("unexpected end of checkpoint header".into()));
            }
            while line.ends_with('\n') || line.ends_with('\r') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic `{line}`")));
        }
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(rest)) => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [name, rows, cols] = fields[..] else {
                        return Err(Error::Format(format!("bad tensor line `{line}`")));
                    };
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad tensor line `{line}`")))
                    };
                    shapes.push((name.to_string(), parse(rows)?, parse(cols)?));
                }
                _ => return Err(Error::Format(format!("unrecognised header line `{line}`"))),
            }
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut buf = [0u8; 8];
        for (name, rows, cols) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated payload in tensor `{name}`")))?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Array2::from_shape_vec((rows, cols), data).expect("shape matches length");
            tensors.push((name, t));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}
