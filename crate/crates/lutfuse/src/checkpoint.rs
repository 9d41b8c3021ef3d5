//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "LUTF" (4 bytes)
//! u32    format version (currently 1)
//! u32    entry count
//! entry* u32 name length, UTF-8 name, u32 rank, u64 extents[rank],
//!        f32 payload[product(extents)]
//! ```
//!
//! Model parameters are stored under their path names. Optimizer state uses
//! the reserved `opt/` prefix; embedded metadata (the config snapshot, log
//! digest) uses `meta/`, with UTF-8 bytes widened one-per-f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"LUTF";
const VERSION: u32 = 1;

/// In-memory checkpoint: named entries sorted by name.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "checkpoint entry length mismatch");
        self.entries.insert(name.into(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Inserts every parameter of a model under `prefix/name`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.insert(
                format!("{prefix}/{name}"),
                t.shape().to_vec(),
                t.data().to_vec(),
            );
        }
    }

    /// Extracts the parameters stored under `prefix/` into a [`ParamSet`]
    /// with gradient tracking enabled.
    pub fn extract_params(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::new();
        let pat = format!("{prefix}/");
        for (name, (shape, data)) in &self.entries {
            if let Some(rest) = name.strip_prefix(&pat) {
                if rest.starts_with("opt/") || rest.starts_with("meta/") {
                    continue;
                }
                let mut t = Tensor::from_vec(shape.clone(), data.clone());
                t.set_requires_grad(true);
                ps.insert(rest.to_string(), t);
            }
        }
        ps
    }

    /// Stores a UTF-8 string as one f32 per byte.
    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let data: Vec<f32> = text.bytes().map(f32::from).collect();
        self.insert(name, vec![data.len()], data);
    }

    pub fn get_text(&self, name: &str) -> Option<String> {
        self.get(name).map(|(_, data)| {
            data.iter().map(|&v| v as u8 as char).collect()
        })
    }

    /// Entries under a prefix as (suffix-included-name, data) pairs.
    pub fn entries_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<f32>)> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, (_, d))| (n.clone(), d.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fail = |offset: usize, msg: &str| Error::ParseAt {
            offset,
            msg: format!("{msg} in {}", path.display()),
        };
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(fail(0, "not a LUTF checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(4, &format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut pos = 12usize;
        let take = |len: usize, pos: &mut usize| -> Result<std::ops::Range<usize>> {
            if bytes.len() < *pos + len {
                return Err(fail(bytes.len(), "truncated checkpoint"));
            }
            let r = *pos..*pos + len;
            *pos += len;
            Ok(r)
        };
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let r = take(4, &mut pos)?;
            let name_len = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
            let r = take(name_len, &mut pos)?;
            let name = std::str::from_utf8(&bytes[r.clone()])
                .map_err(|_| fail(r.start, "entry name is not UTF-8"))?
                .to_string();
            let r = take(4, &mut pos)?;
            let rank = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let r = take(8, &mut pos)?;
                shape.push(u64::from_le_bytes(bytes[r].try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let r = take(numel * 4, &mut pos)?;
            let data = bytes[r]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, (shape, data));
        }
        Ok(Checkpoint { entries })
    }
}
