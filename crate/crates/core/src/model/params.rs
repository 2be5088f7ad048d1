use std::collections::HashMap;

use nmt_tensor::{Float, Tensor};

use crate::error::{usage, Result};

/// Named parameter tensors in canonical shape-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Float = f32> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new(entries: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return usage(format!("duplicate parameter {name}"));
            }
        }
        Ok(ParamStore { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn at(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<F>)> {
        self.entries
    }

    /// FNV-1a over every name and the bit pattern of every element.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.iter())
    }

    /// Fingerprint restricted to parameters whose name starts with `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        fingerprint(self.iter().filter(|(n, _)| n.starts_with(prefix)))
    }
}

fn fingerprint<'a, F: Float>(items: impl Iterator<Item = (&'a str, &'a Tensor<F>)>) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    let mut buf = Vec::new();
    for (name, t) in items {
        eat(name.as_bytes());
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        eat(&buf);
    }
    h
}
