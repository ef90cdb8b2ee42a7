//! Self-describing checkpoint container: a JSON header (variant echo, coil
//! count, training fingerprint, split provenance, tensor index) followed by
//! raw little-endian f32 parameter blobs. Loading refuses variant or shape
//! mismatches.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamVisitor;

use super::graph::Model;
use super::variant::ModelVariant;

const MAGIC: &[u8; 8] = b"KTRCKPT1";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Header {
    variant: ModelVariant,
    n_coils: usize,
    train_fingerprint: String,
    train_subjects: Vec<u32>,
    val_subjects: Vec<u32>,
    seed: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct TensorInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub variant: ModelVariant,
    pub n_coils: usize,
    pub train_fingerprint: u64,
    pub train_subjects: Vec<u32>,
    pub val_subjects: Vec<u32>,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<f32>)>,
}

struct Exporter {
    tensors: Vec<(String, Vec<f32>)>,
}

impl ParamVisitor<f32> for Exporter {
    fn visit(&mut self, name: &str, param: &mut [f32], _grad: &mut [f32]) {
        self.tensors.push((name.to_string(), param.to_vec()));
    }
}

struct Importer<'a> {
    tensors: &'a [(String, Vec<f32>)],
    cursor: usize,
    error: Option<Error>,
}

impl ParamVisitor<f32> for Importer<'_> {
    fn visit(&mut self, name: &str, param: &mut [f32], _grad: &mut [f32]) {
        if self.error.is_some() {
            return;
        }
        let Some((tname, values)) = self.tensors.get(self.cursor) else {
            self.error = Some(Error::Data(format!("checkpoint is missing tensor '{name}'")));
            return;
        };
        if tname != name || values.len() != param.len() {
            self.error = Some(Error::Data(format!(
                "checkpoint tensor mismatch: expected '{name}' ({}), found '{tname}' ({})",
                param.len(),
                values.len()
            )));
            return;
        }
        param.copy_from_slice(values);
        self.cursor += 1;
    }
}

impl Checkpoint {
    /// Snapshot the parameters of a model.
    pub fn from_model(
        model: &mut Model<f32>,
        train_fingerprint: u64,
        train_subjects: Vec<u32>,
        val_subjects: Vec<u32>,
        seed: u64,
    ) -> Self {
        let mut exporter = Exporter { tensors: vec![] };
        model.visit_params(&mut exporter);
        Checkpoint {
            variant: model.variant().clone(),
            n_coils: model.n_coils(),
            train_fingerprint,
            train_subjects,
            val_subjects,
            seed,
            tensors: exporter.tensors,
        }
    }

    /// Restore parameters into a freshly constructed model. The model must
    /// have been built from the same variant and coil count.
    pub fn into_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.variant, self.n_coils, self.seed)?;
        let mut importer = Importer { tensors: &self.tensors, cursor: 0, error: None };
        model.visit_params(&mut importer);
        if let Some(e) = importer.error {
            return Err(e);
        }
        if importer.cursor != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} extra tensors",
                self.tensors.len() - importer.cursor
            )));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        variant: ckpt.variant.clone(),
        n_coils: ckpt.n_coils,
        train_fingerprint: format!("{:016x}", ckpt.train_fingerprint),
        train_subjects: ckpt.train_subjects.clone(),
        val_subjects: ckpt.val_subjects.clone(),
        seed: ckpt.seed,
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, v)| TensorInfo { name: name.clone(), len: v.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, values) in &ckpt.tensors {
        for v in values {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let fingerprint = u64::from_str_radix(&header.train_fingerprint, 16)
        .map_err(|_| Error::Data("bad fingerprint field".into()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let mut buf = vec![0u8; info.len * 4];
        f.read_exact(&mut buf)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((info.name.clone(), values));
    }
    Ok(Checkpoint {
        variant: header.variant,
        n_coils: header.n_coils,
        train_fingerprint: fingerprint,
        train_subjects: header.train_subjects,
        val_subjects: header.val_subjects,
        seed: header.seed,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::variant::variant_by_name;

    #[test]
    fn checkpoint_roundtrip_preserves_parameters() {
        let mut variant = variant_by_name("3d_xf_skip_dca").unwrap();
        variant.base_channels = 2;
        let mut model = Model::<f32>::new(&variant, 1, 99).unwrap();
        let ckpt = Checkpoint::from_model(&mut model, 0xabcd, vec![1, 2], vec![3], 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.variant, variant);
        assert_eq!(loaded.train_fingerprint, 0xabcd);
        assert_eq!(loaded.train_subjects, vec![1, 2]);
        let mut restored = loaded.into_model().unwrap();
        let a = Checkpoint::from_model(&mut model, 0, vec![], vec![], 99);
        let b = Checkpoint::from_model(&mut restored, 0, vec![], vec![], 99);
        assert_eq!(a.tensors.len(), b.tensors.len());
        for ((na, va), (nb, vb)) in a.tensors.iter().zip(b.tensors.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn variant_mismatch_is_refused() {
        let mut va = variant_by_name("3d_xf_skip_dcf").unwrap();
        va.base_channels = 2;
        let mut model = Model::<f32>::new(&va, 1, 1).unwrap();
        let mut ckpt = Checkpoint::from_model(&mut model, 0, vec![], vec![], 1);
        // corrupt the tensor list
        ckpt.tensors.pop();
        assert!(ckpt.into_model().is_err());
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
