//! Named parameter blocks and the `IGSN` checkpoint container.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IGSN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named tensors. Order is insertion order, which keeps
/// checkpoints and optimizer state deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Inserts or replaces a block.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.blocks[i].1 = t,
            None => self.blocks.push((name, t)),
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.blocks[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.blocks[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing parameter block `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.position(name).map(|i| self.blocks.remove(i).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.blocks.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|(_, t)| t.is_finite())
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (n, t) in &self.blocks {
            eat(n.as_bytes());
            eat(&(t.rows as u64).to_le_bytes());
            eat(&(t.cols as u64).to_le_bytes());
            for x in &t.data {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.blocks.len() as u32)?;
        for (name, t) in &self.blocks {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(2)?;
            w.write_u32::<LittleEndian>(t.rows as u32)?;
            w.write_u32::<LittleEndian>(t.cols as u32)?;
            for x in &t.data {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { kind: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("block name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let ndims = r.read_u32::<LittleEndian>()? as usize;
            if ndims == 0 || ndims > 8 {
                return Err(Error::Format(format!("block `{name}` has {ndims} dimensions")));
            }
            let dims: Vec<usize> = (0..ndims).map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<_>>()?;
            let total: usize = dims.iter().product();
            let cols = *dims.last().unwrap();
            let rows = if cols == 0 { 0 } else { total / cols };
            let mut data = vec![0.0; total];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            store.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
