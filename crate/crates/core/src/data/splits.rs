//! Plain-text split files.
//!
//! ```text
//! [attributes]
//! red
//! [objects]
//! car
//! [train_seen]
//! red,car
//! [val_seen]
//! ...
//! ```
//!
//! Sections `[attributes]`, `[objects]`, `[train_seen]`, `[val_seen]`,
//! `[val_unseen]`, `[test_seen]` and `[test_unseen]` may appear in any order;
//! the two vocabularies are required, a missing pair section is empty.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};

const PAIR_SECTIONS: [&str; 5] = ["train_seen", "val_seen", "val_unseen", "test_seen", "test_unseen"];

pub fn parse_splits(text: &str) -> Result<CompositionSpace> {
    let mut sections: HashMap<String, Vec<(usize, String)>> = HashMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if name != "attributes" && name != "objects" && !PAIR_SECTIONS.contains(&name.as_str()) {
                return Err(Error::Data(format!("line {line_no}: unknown section [{name}]")));
            }
            if sections.contains_key(&name) {
                return Err(Error::Data(format!("line {line_no}: section [{name}] repeated")));
            }
            sections.insert(name.clone(), Vec::new());
            current = Some(name);
            continue;
        }
        let Some(sec) = &current else {
            return Err(Error::Data(format!("line {line_no}: entry before any section header")));
        };
        sections.get_mut(sec).expect("section exists").push((line_no, line.to_string()));
    }

    let vocab = |name: &str| -> Result<Vec<String>> {
        sections
            .get(name)
            .map(|v| v.iter().map(|(_, s)| s.clone()).collect())
            .ok_or_else(|| Error::Data(format!("missing [{name}] section")))
    };
    let attributes = vocab("attributes")?;
    let objects = vocab("objects")?;
    let a_idx: HashMap<&str, usize> = attributes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let o_idx: HashMap<&str, usize> = objects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut sets: Vec<BTreeSet<Pair>> = Vec::new();
    for sec in PAIR_SECTIONS {
        let mut set = BTreeSet::new();
        for (line_no, entry) in sections.get(sec).map(Vec::as_slice).unwrap_or(&[]) {
            let (a, o) = entry
                .split_once(',')
                .ok_or_else(|| Error::Data(format!("line {line_no}: expected attr,obj but got {entry:?}")))?;
            let (a, o) = (a.trim(), o.trim());
            let attr = *a_idx
                .get(a)
                .ok_or_else(|| Error::Data(format!("line {line_no}: unknown attribute {a:?}")))?;
            let obj = *o_idx
                .get(o)
                .ok_or_else(|| Error::Data(format!("line {line_no}: unknown object {o:?}")))?;
            if !set.insert(Pair::new(attr, obj)) {
                return Err(Error::Data(format!("line {line_no}: pair {a},{o} repeated in [{sec}]")));
            }
        }
        sets.push(set);
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("five pair sections");
    CompositionSpace::new(attributes, objects, next(), next(), next(), next(), next())
}

pub fn format_splits(space: &CompositionSpace) -> String {
    let mut out = String::new();
    for (name, vocab) in [("attributes", &space.attributes), ("objects", &space.objects)] {
        let _ = writeln!(out, "[{name}]");
        for v in vocab {
            let _ = writeln!(out, "{v}");
        }
    }
    let sets = [
        &space.train_seen,
        &space.val_seen,
        &space.val_unseen,
        &space.test_seen,
        &space.test_unseen,
    ];
    for (name, set) in PAIR_SECTIONS.iter().zip(sets) {
        let _ = writeln!(out, "[{name}]");
        for p in set {
            let _ = writeln!(out, "{}", space.pair_name(*p));
        }
    }
    out
}

pub fn read_splits(path: impl AsRef<Path>) -> Result<CompositionSpace> {
    parse_splits(&std::fs::read_to_string(path)?)
}

pub fn write_splits(path: impl AsRef<Path>, space: &CompositionSpace) -> Result<()> {
    for n in space.attributes.iter().chain(&space.objects) {
        if n.contains(',') || n.trim() != n || n.is_empty() || n.starts_with('[') || n.starts_with('#') {
            return Err(Error::Data(format!("name {n:?} cannot be stored in a split file")));
        }
    }
    std::fs::write(path, format_splits(space))?;
    Ok(())
}
