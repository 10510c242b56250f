//! Sectioned `key = value` configuration files with command-line overrides.

use std::cell::RefCell;
use std::collections::BTreeSet;

pub use toml::Table;
use toml::Value;

use crate::error::{Error, Result};

/// Parses a configuration document.
pub fn parse(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Config(e.to_string()))
}

/// Applies `section.key=value`. The value is read as a TOML literal when
/// possible and as a bare string otherwise.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key `{}` needs a section, e.g. train.epochs", path.trim())))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = doc
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a section"))),
    }
}

/// Typed, tracked access to one section; [`Section::finish`] rejects keys
/// that nothing asked for.
pub struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<&'a str>>,
}

impl<'a> Section<'a> {
    pub fn new(doc: &'a Table, name: &'a str) -> Result<Self> {
        let table = match doc.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::Config(format!("`{name}` must be a section"))),
        };
        Ok(Section {
            name,
            table,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn is_present(&self) -> bool {
        self.table.is_some()
    }

    fn raw(&self, key: &'a str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn bad(&self, key: &str, want: &str, got: &Value) -> Error {
        Error::Config(format!("{}.{key}: expected {want}, got {got}", self.name))
    }

    pub fn u64(&self, key: &'a str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Some(v) => Err(self.bad(key, "a non-negative integer", v)),
        }
    }

    pub fn usize(&self, key: &'a str, default: usize) -> Result<usize> {
        self.u64(key, default as u64).map(|v| v as usize)
    }

    pub fn f64(&self, key: &'a str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(v) => Err(self.bad(key, "a number", v)),
        }
    }

    pub fn bool(&self, key: &'a str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(Value::String(s)) if s == "on" => Ok(true),
            Some(Value::String(s)) if s == "off" => Ok(false),
            Some(v) => Err(self.bad(key, "true/false or on/off", v)),
        }
    }

    pub fn string(&self, key: &'a str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.bad(key, "a string", v)),
        }
    }

    pub fn f64_list(&self, key: &'a str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(self.bad(key, "a list of numbers", v)),
                })
                .collect(),
            Some(v) => Err(self.bad(key, "a list of numbers", v)),
        }
    }

    pub fn usize_list(&self, key: &'a str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(self.bad(key, "a list of non-negative integers", v)),
                })
                .collect(),
            Some(v) => Err(self.bad(key, "a list of non-negative integers", v)),
        }
    }

    pub fn finish(self) -> Result<()> {
        let used = self.used.borrow();
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !used.contains(k.as_str())) {
                return Err(Error::Config(format!("unknown key `{}.{k}`", self.name)));
            }
        }
        Ok(())
    }
}

/// Rejects top-level entries outside `known` sections.
pub fn check_sections(doc: &Table, known: &[&str]) -> Result<()> {
    match doc.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("unknown section `{k}` (expected one of {known:?})"))),
        None => Ok(()),
    }
}
