//! Named parameter tensors and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "U2UCKPT\n"
//! version  u32       FORMAT_VERSION
//! hlen     u32       length of the manifest in bytes
//! manifest hlen      UTF-8 lines, tab separated:
//!                      meta    <key>   <value>
//!                      config  <one line of the run config>
//!                      tensor  <role>  <name>  <d0,d1,..>  <trainable 0|1>
//! payload            f32 values of every `tensor` line, in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"U2UCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// All parameters of a model, keyed by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every tensor on `g`: trainable ones as gradient leaves,
    /// frozen ones as named constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable {
                    g.param(k, p.value.clone())
                } else {
                    g.frozen(k, p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Checks that `other` has exactly the same names, shapes and flags.
    pub fn check_compatible(&self, other: &Params<T>) -> Result<()> {
        for (k, p) in &self.map {
            let q = other
                .map
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{k}`")))?;
            if p.value.shape() != q.value.shape() {
                return Err(Error::ParamShape {
                    name: k.clone(),
                    expected: p.value.shape().to_vec(),
                    found: q.value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.map.keys().find(|k| !self.map.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Graph handles of bound parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }
}

// ---------------------------------------------------------------------------

/// Everything persisted by training: parameters, step counter, Adam
/// moments and the run configuration that produced them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub step: u64,
    pub adam_m: BTreeMap<String, Tensor<f32>>,
    pub adam_v: BTreeMap<String, Tensor<f32>>,
    pub meta: BTreeMap<String, String>,
    pub config_text: String,
}

const ROLE_PARAM: &str = "param";
const ROLE_M: &str = "adam_m";
const ROLE_V: &str = "adam_v";

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(&format!("meta\tstep\t{}\n", self.step));
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for line in self.config_text.lines() {
            manifest.push_str(&format!("config\t{line}\n"));
        }
        let mut tensors: Vec<&Tensor<f32>> = Vec::new();
        for (k, p) in self.params.iter() {
            manifest.push_str(&format!(
                "tensor\t{ROLE_PARAM}\t{k}\t{}\t{}\n",
                dims(p.value.shape()),
                u8::from(p.trainable)
            ));
            tensors.push(&p.value);
        }
        for (role, map) in [(ROLE_M, &self.adam_m), (ROLE_V, &self.adam_v)] {
            for (k, t) in map {
                manifest.push_str(&format!("tensor\t{role}\t{k}\t{}\t1\n", dims(t.shape())));
                tensors.push(t);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut payload = &bytes[16 + hlen..];

        let mut ck = Checkpoint::default();
        let mut config_lines = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.first().copied() {
                Some("meta") if fields.len() == 3 => {
                    if fields[1] == "step" {
                        ck.step = fields[2]
                            .parse()
                            .map_err(|_| Error::Checkpoint(format!("manifest line {}: bad step", i + 1)))?;
                    } else {
                        ck.meta.insert(fields[1].to_string(), fields[2].to_string());
                    }
                }
                Some("config") if fields.len() >= 2 => config_lines.push(fields[1..].join("\t")),
                Some("tensor") if fields.len() == 5 => {
                    let shape = fields[3]
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Checkpoint(format!("manifest line {}: bad shape", i + 1)))?;
                    let n = shape
                        .iter()
                        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                        .ok_or_else(|| bad("shape overflow"))?;
                    let nbytes = n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?;
                    if payload.len() < nbytes {
                        return Err(Error::Checkpoint(format!(
                            "payload truncated at tensor `{}`",
                            fields[2]
                        )));
                    }
                    let (chunk, rest) = payload.split_at(nbytes);
                    payload = rest;
                    let data = chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(shape, data)?;
                    let trainable = match fields[4] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(Error::Checkpoint(format!("manifest line {}: bad flag", i + 1))),
                    };
                    let name = fields[2].to_string();
                    match fields[1] {
                        ROLE_PARAM => ck.params.insert(name, t, trainable),
                        ROLE_M => {
                            ck.adam_m.insert(name, t);
                        }
                        ROLE_V => {
                            ck.adam_v.insert(name, t);
                        }
                        other => {
                            return Err(Error::Checkpoint(format!(
                                "manifest line {}: unknown role `{other}`",
                                i + 1
                            )))
                        }
                    }
                }
                _ => return Err(Error::Checkpoint(format!("manifest line {}: malformed", i + 1))),
            }
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        ck.config_text = config_lines.iter().map(|l| format!("{l}\n")).collect();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
