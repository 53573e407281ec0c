use std::collections::BTreeMap;
use std::io::Read;

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// File magic opening every serialized parameter set.
pub const PARAM_MAGIC: &[u8; 8] = b"TFDA0001";

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same name set with the same shapes.
    pub fn shape_compatible(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn ensure_compatible(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.shape_compatible(other) {
            return Ok(());
        }
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::shape(op, format!("`{name}` missing from second set"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::shape(
                        op,
                        format!("`{name}`: {:?} vs {:?}", t.shape(), o.shape()),
                    ))
                }
                _ => {}
            }
        }
        Err(Error::shape(op, "second set has extra parameters"))
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Registers every tensor on `graph`, tracked or as constants.
    pub fn bind(&self, graph: &mut Graph, tracked: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if tracked {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Gradients for every bound parameter; unreached ones are zero.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Grads) -> ParamSet {
        let mut out = self.zeros_like();
        for (name, var) in bound.iter() {
            if let (Some(g), Some(t)) = (grads.get(var), out.tensors.get_mut(name)) {
                t.data_mut().copy_from_slice(g);
            }
        }
        out
    }

    /// Serialized form: magic, then per tensor `u32` name length, UTF-8
    /// name, `u32` rank, `u32` dims and `f64` values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.numel() * 8 + self.len() * 32);
        out.extend_from_slice(PARAM_MAGIC);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |d: &str| Error::format("<param bytes>", d.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fail("truncated magic"))?;
        if &magic != PARAM_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut set = ParamSet::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r).ok_or_else(|| fail("truncated name length"))? as usize;
            if r.len() < name_len {
                return Err(fail("truncated name"));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| fail("name is not UTF-8"))?
                .to_string();
            r = &r[name_len..];
            let rank = read_u32(&mut r).ok_or_else(|| fail("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r).ok_or_else(|| fail("truncated dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(fail(&format!("truncated values for `{name}`")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    if r.len() < 4 {
        return None;
    }
    let v = u32::from_le_bytes(r[..4].try_into().ok()?);
    *r = &r[4..];
    Some(v)
}
