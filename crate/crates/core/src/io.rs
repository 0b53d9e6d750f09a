//! Extended-XYZ reading/writing and the JSON dataset manifest.
//!
//! Frame layout:
//!
//! ```text
//! 3
//! Lattice="ax ay az bx by bz cx cy cz" Properties=species:S:1:pos:R:3:forces:R:3 pbc="T T T" energy=-12.5
//! O 0.0 0.0 0.0 0.1 0.0 0.0
//! H ...
//! ```
//!
//! Floats are written in shortest round-trip form, so write→read is
//! bit-exact. Keys other than the known typed ones are kept as raw text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{atomic_number, element_symbol, AtomicStructure, LabelValue, Labels, Mat3};

const FLOAT_KEYS: &[&str] = &["energy", "formation_energy"];
const INT_KEYS: &[&str] = &["crystal_system", "space_group"];

fn perr(record: usize, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        record,
        line,
        msg: msg.into(),
    }
}

/// Splits a comment line into `key=value` pairs honoring double quotes.
fn split_kv(line: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            return Err(format!("expected `=` after key `{key}`"));
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => value.push(c),
                    None => return Err(format!("unterminated quote for key `{key}`")),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

#[derive(Debug)]
struct Column {
    name: String,
    kind: char,
    width: usize,
}

fn parse_properties(spec: &str) -> std::result::Result<Vec<Column>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(format!("malformed Properties `{spec}`"));
    }
    parts
        .chunks(3)
        .map(|c| {
            let kind = c[1].chars().next().unwrap_or('?');
            let width = c[2]
                .parse()
                .map_err(|_| format!("bad column width `{}`", c[2]))?;
            Ok(Column {
                name: c[0].to_string(),
                kind,
                width,
            })
        })
        .collect()
}

pub fn parse_extxyz(text: &str) -> Result<Vec<AtomicStructure>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let record = out.len();
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| perr(record, i + 1, format!("expected atom count, got `{}`", lines[i])))?;
        let header_line = i + 1;
        let header = lines
            .get(header_line)
            .ok_or_else(|| perr(record, header_line + 1, "missing comment line"))?;
        let kv = split_kv(header).map_err(|m| perr(record, header_line + 1, m))?;

        let mut columns = vec![
            Column {
                name: "species".into(),
                kind: 'S',
                width: 1,
            },
            Column {
                name: "pos".into(),
                kind: 'R',
                width: 3,
            },
        ];
        let mut cell: Option<Mat3> = None;
        let mut pbc: Option<bool> = None;
        let mut labels = Labels::default();
        for (k, v) in kv {
            match k.as_str() {
                "Lattice" => {
                    let vals: Vec<f64> = v
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| perr(record, header_line + 1, "non-numeric Lattice"))?;
                    if vals.len() != 9 {
                        return Err(perr(record, header_line + 1, "Lattice needs 9 numbers"));
                    }
                    cell = Some([
                        [vals[0], vals[1], vals[2]],
                        [vals[3], vals[4], vals[5]],
                        [vals[6], vals[7], vals[8]],
                    ]);
                }
                "Properties" => {
                    columns = parse_properties(&v).map_err(|m| perr(record, header_line + 1, m))?;
                }
                "pbc" => {
                    let flags: Vec<&str> = v.split_whitespace().collect();
                    let all_t = flags.iter().all(|f| matches!(*f, "T" | "True" | "1"));
                    let all_f = flags.iter().all(|f| matches!(*f, "F" | "False" | "0"));
                    if flags.len() != 3 || !(all_t || all_f) {
                        return Err(perr(
                            record,
                            header_line + 1,
                            format!("only fully periodic or non-periodic pbc supported, got `{v}`"),
                        ));
                    }
                    pbc = Some(all_t);
                }
                key if FLOAT_KEYS.contains(&key) => {
                    let x = v.parse().map_err(|_| {
                        perr(record, header_line + 1, format!("`{key}` is not a number"))
                    })?;
                    labels.insert(key, LabelValue::Float(x));
                }
                key if INT_KEYS.contains(&key) => {
                    let x = v.parse().map_err(|_| {
                        perr(record, header_line + 1, format!("`{key}` is not an integer"))
                    })?;
                    labels.insert(key, LabelValue::Int(x));
                }
                _ => labels.insert(k, LabelValue::Text(v)),
            }
        }

        let mut species = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut per_atom: IndexMap<String, Vec<[f64; 3]>> = IndexMap::new();
        for a in 0..n {
            let ln = header_line + 1 + a;
            let line = lines
                .get(ln)
                .ok_or_else(|| perr(record, ln + 1, format!("expected {n} atom lines")))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let mut t = 0;
            for col in &columns {
                let slice = toks
                    .get(t..t + col.width)
                    .ok_or_else(|| perr(record, ln + 1, "too few columns"))?;
                t += col.width;
                match (col.name.as_str(), col.kind) {
                    ("species", 'S') => {
                        let z = atomic_number(slice[0]).ok_or_else(|| {
                            perr(record, ln + 1, format!("unknown element `{}`", slice[0]))
                        })?;
                        species.push(z);
                    }
                    (name, 'R') if col.width == 3 => {
                        let v: Vec<f64> = slice
                            .iter()
                            .map(|s| s.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| perr(record, ln + 1, "non-numeric coordinate"))?;
                        let v = [v[0], v[1], v[2]];
                        if name == "pos" {
                            positions.push(v);
                        } else {
                            per_atom.entry(name.to_string()).or_default().push(v);
                        }
                    }
                    (name, kind) => {
                        return Err(perr(
                            record,
                            ln + 1,
                            format!("unsupported column `{name}:{kind}:{}`", col.width),
                        ))
                    }
                }
            }
            if t != toks.len() {
                return Err(perr(record, ln + 1, "unexpected extra columns"));
            }
        }
        for (k, v) in per_atom {
            labels.insert(k, LabelValue::PerAtom(v));
        }
        let periodic = pbc.unwrap_or(cell.is_some());
        let s = AtomicStructure {
            species,
            positions,
            cell,
            periodic,
            labels,
        };
        s.validate()
            .map_err(|e| perr(record, header_line + 1, e.to_string()))?;
        out.push(s);
        i = header_line + 1 + n;
    }
    Ok(out)
}

fn needs_quotes(s: &str) -> bool {
    s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=' || c == '"')
}

pub fn format_extxyz(structures: &[AtomicStructure]) -> String {
    let mut out = String::new();
    for s in structures {
        let _ = writeln!(out, "{}", s.len());
        let mut header = Vec::new();
        if let Some(c) = &s.cell {
            let v: Vec<String> = c.iter().flatten().map(|x| format!("{x:?}")).collect();
            header.push(format!("Lattice=\"{}\"", v.join(" ")));
        }
        let per_atom: Vec<(&String, &Vec<[f64; 3]>)> = s
            .labels
            .0
            .iter()
            .filter_map(|(k, v)| match v {
                LabelValue::PerAtom(f) => Some((k, f)),
                _ => None,
            })
            .collect();
        let mut props = String::from("species:S:1:pos:R:3");
        for (k, _) in &per_atom {
            let _ = write!(props, ":{k}:R:3");
        }
        header.push(format!("Properties={props}"));
        header.push(format!(
            "pbc=\"{}\"",
            if s.periodic { "T T T" } else { "F F F" }
        ));
        for (k, v) in &s.labels.0 {
            let text = match v {
                LabelValue::Float(x) => format!("{x:?}"),
                LabelValue::Int(x) => x.to_string(),
                LabelValue::Text(t) if needs_quotes(t) => format!("\"{t}\""),
                LabelValue::Text(t) => t.clone(),
                LabelValue::PerAtom(_) => continue,
            };
            header.push(format!("{k}={text}"));
        }
        let _ = writeln!(out, "{}", header.join(" "));
        for a in 0..s.len() {
            let p = s.positions[a];
            let _ = write!(
                out,
                "{} {:?} {:?} {:?}",
                element_symbol(s.species[a]).unwrap_or("X"),
                p[0],
                p[1],
                p[2]
            );
            for (_, f) in &per_atom {
                let v = f[a];
                let _ = write!(out, " {:?} {:?} {:?}", v[0], v[1], v[2]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<AtomicStructure>> {
    parse_extxyz(&fs::read_to_string(path)?)
}

pub fn write_dataset(structures: &[AtomicStructure], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_extxyz(structures))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Float,
    Int,
    Text,
    PerAtom,
}

/// Lists dataset files, their split, and the expected label schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub files: Vec<ManifestEntry>,
    #[serde(default)]
    pub labels: IndexMap<String, LabelKind>,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != Self::VERSION {
            return Err(Error::Input(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads every structure of one split; relative paths resolve against `root`.
    /// Typed label kinds from the schema are applied to text labels.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<AtomicStructure>> {
        let mut out = Vec::new();
        for entry in self.files.iter().filter(|e| e.split == split) {
            let p = if entry.path.is_absolute() {
                entry.path.clone()
            } else {
                root.join(&entry.path)
            };
            for mut s in read_dataset(&p)? {
                self.apply_schema(&mut s)?;
                out.push(s);
            }
        }
        Ok(out)
    }

    fn apply_schema(&self, s: &mut AtomicStructure) -> Result<()> {
        for (key, kind) in &self.labels {
            let Some(LabelValue::Text(t)) = s.labels.get(key).cloned() else {
                continue;
            };
            let typed = match kind {
                LabelKind::Float => LabelValue::Float(t.parse().map_err(|_| {
                    Error::Input(format!("label `{key}` = `{t}` is not a float"))
                })?),
                LabelKind::Int => LabelValue::Int(t.parse().map_err(|_| {
                    Error::Input(format!("label `{key}` = `{t}` is not an integer"))
                })?),
                _ => continue,
            };
            s.labels.insert(key.clone(), typed);
        }
        Ok(())
    }
}
