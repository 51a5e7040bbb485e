//! Checkpoint container: a JSON manifest followed by tensor records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SYMOECKP"
//! version      u32      1
//! manifest_len u32
//! manifest     manifest_len bytes of UTF-8 JSON:
//!              {"kind": str, "meta": any, "records": [str, ...]}
//! records      one tensor record per manifest name, in order
//!              (u32 rank, rank x u32 dims, little-endian f64 data)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SYMOECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub records: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.manifest
            .records
            .iter()
            .position(|r| r == name)
            .map(|i| &self.tensors[i])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.manifest.records.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} record names for {} tensors",
                self.manifest.records.len(),
                self.tensors.len()
            )));
        }
        let json = serde_json::to_vec(&self.manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            t.write_record(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let tensors = manifest
            .records
            .iter()
            .map(|_| Tensor::read_record(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_bad_magic() {
        let ck = Checkpoint {
            manifest: Manifest {
                kind: "test".into(),
                meta: serde_json::json!({"a": 1}),
                records: vec!["x".into(), "y".into()],
            },
            tensors: vec![
                Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap(),
                Tensor::<f64>::from_f64(&[1, 3], &[0.5, -0.25, 9.0]).unwrap(),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.get("y").unwrap(), &ck.tensors[1]);

        buf[0] = b'X';
        assert!(Checkpoint::<f64>::read_from(&mut buf.as_slice()).is_err());
    }
}
