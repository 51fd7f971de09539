//! `.cpft` word-embedding tables.
//!
//! ```text
//! magic b"CPFT", version u32 = 1, d u32, rows u32
//! per row: name_len u16, UTF-8 name, d f32
//! ```
//!
//! Vocabulary names are resolved against the table by exact match first,
//! then lowercased. A name with no entry of its own that splits on
//! `' '`, `'_'`, `'.'` or `'-'` into known words gets the mean of those
//! word vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::features::{put_f32s, put_str, Cursor};
use crate::error::{Error, Result};
use crate::model::TextEmbeddings;
use crate::tensor::Tensor;

pub const TEXT_MAGIC: [u8; 4] = *b"CPFT";
pub const TEXT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WordTable {
    dim: usize,
    names: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl WordTable {
    pub fn new(dim: usize) -> Self {
        WordTable {
            dim,
            names: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim("word vector", &[vector.len()], &[self.dim]));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("word vector {name:?}")));
        }
        if self.index.contains_key(name) {
            return Err(Error::Data(format!("duplicate word {name:?} in embedding table")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.vectors.push(vector);
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .or_else(|| self.index.get(&word.to_lowercase()))
            .map(|&i| self.vectors[i].as_slice())
    }

    /// Vector for a vocabulary name, averaging the parts of a multi-word name.
    pub fn resolve(&self, name: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.lookup(name) {
            return Ok(v.to_vec());
        }
        let words: Vec<&str> = name
            .split([' ', '_', '.', '-'])
            .filter(|w| !w.is_empty())
            .collect();
        if words.len() < 2 {
            return Err(Error::Data(format!("no embedding for {name:?}")));
        }
        let mut mean = vec![0.0; self.dim];
        for w in &words {
            let v = self
                .lookup(w)
                .ok_or_else(|| Error::Data(format!("no embedding for {w:?} (part of {name:?})")))?;
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let k = words.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        Ok(mean)
    }

    /// Builds the frozen embeddings for a vocabulary.
    pub fn embeddings(&self, attrs: &[String], objs: &[String]) -> Result<TextEmbeddings> {
        let table = |names: &[String]| -> Result<Tensor> {
            let mut data = Vec::with_capacity(names.len() * self.dim);
            for n in names {
                data.extend(self.resolve(n)?);
            }
            Tensor::matrix(names.len(), self.dim, data)
        };
        TextEmbeddings::new(attrs.to_vec(), objs.to_vec(), table(attrs)?, table(objs)?)
    }

    /// A table holding exactly the vocabulary rows of `text`.
    pub fn from_embeddings(text: &TextEmbeddings) -> Result<Self> {
        let mut t = WordTable::new(text.dim());
        for (names, m) in [(&text.attr_names, &text.attrs), (&text.obj_names, &text.objs)] {
            for (i, n) in names.iter().enumerate() {
                t.insert(n, m.row_slice(i).to_vec())?;
            }
        }
        Ok(t)
    }
}

pub fn read_word_table_from<R: Read>(reader: R) -> Result<WordTable> {
    let mut cur = Cursor::new(reader);
    let mut magic = [0u8; 4];
    cur.bytes(&mut magic, "magic")?;
    if magic != TEXT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"CPFT\"")));
    }
    let version = cur.u32("version")?;
    if version != TEXT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::format(8, "dimension must be at least 1"));
    }
    let rows = cur.u32("row count")?;
    let mut table = WordTable::new(dim);
    for _ in 0..rows {
        let at = cur.offset;
        let name = cur.string("word")?;
        let v = cur.f32s(dim, "word vector")?;
        table.insert(&name, v).map_err(|e| match e {
            Error::Data(m) | Error::Numeric { context: m } => Error::format(at, m),
            other => other,
        })?;
    }
    let mut probe = [0u8; 1];
    if cur.bytes(&mut probe, "").is_ok() {
        return Err(Error::format(cur.offset - 1, "trailing bytes after the last row"));
    }
    Ok(table)
}

pub fn read_word_table(path: impl AsRef<Path>) -> Result<WordTable> {
    read_word_table_from(BufReader::new(File::open(path)?))
}

pub fn write_word_table_to<W: Write>(writer: W, table: &WordTable) -> Result<()> {
    let mut w = BufWriter::new(writer);
    w.write_all(&TEXT_MAGIC)?;
    w.write_all(&TEXT_VERSION.to_le_bytes())?;
    w.write_all(&(table.dim as u32).to_le_bytes())?;
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, v) in table.rows() {
        put_str(&mut w, name)?;
        put_f32s(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_word_table(path: impl AsRef<Path>, table: &WordTable) -> Result<()> {
    write_word_table_to(File::create(path)?, table)
}
