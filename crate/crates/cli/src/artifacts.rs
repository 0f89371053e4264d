//! Dataset directory layout: three DNFM matrices (query, gallery, raw)
//! plus `labels.json` carrying the id arrays and generator meta. The raw
//! ids are optional in the sidecar so label-free training data stays
//! loadable without them.

use std::path::Path;

use dnfuse::evalkit::{DatasetMeta, RetrievalDataset, SyntheticData};
use dnfuse::numerics::io::{load_matrix, save_matrix, Dtype};
use dnfuse::{Error, Matrix, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct LabelSidecar {
    meta: DatasetMeta,
    query_ids: Vec<u32>,
    gallery_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_ids: Option<Vec<u32>>,
}

/// Everything a downstream command can want from a dataset directory.
#[derive(Debug)]
pub struct StoredDataset {
    pub dataset: RetrievalDataset,
    pub raw: Matrix,
    pub raw_ids: Option<Vec<u32>>,
}

pub fn save_dataset(dir: &Path, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::Io)?;
    save_matrix(dir.join("query.dnfm"), data.dataset.query(), Dtype::F64)?;
    save_matrix(dir.join("gallery.dnfm"), data.dataset.gallery(), Dtype::F64)?;
    save_matrix(dir.join("raw.dnfm"), &data.raw, Dtype::F64)?;
    let sidecar = LabelSidecar {
        meta: data.dataset.meta().clone(),
        query_ids: data.dataset.query_ids().to_vec(),
        gallery_ids: data.dataset.gallery_ids().to_vec(),
        raw_ids: Some(data.raw_ids.clone()),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::CorruptFile(format!("labels encode: {e}")))?;
    text.push('\n');
    std::fs::write(dir.join("labels.json"), text).map_err(Error::Io)
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let text = std::fs::read_to_string(dir.join("labels.json")).map_err(Error::Io)?;
    let sidecar: LabelSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptFile(format!("labels.json: {e}")))?;
    let query = load_matrix(dir.join("query.dnfm"))?;
    let gallery = load_matrix(dir.join("gallery.dnfm"))?;
    let raw = load_matrix(dir.join("raw.dnfm"))?;
    let dataset = RetrievalDataset::new(
        query,
        sidecar.query_ids,
        gallery,
        sidecar.gallery_ids,
        sidecar.meta,
    )?;
    if raw.cols() != dataset.dim() {
        return Err(Error::CorruptFile(format!(
            "raw matrix is {} wide but the dataset is {}",
            raw.cols(),
            dataset.dim()
        )));
    }
    Ok(StoredDataset { dataset, raw, raw_ids: sidecar.raw_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnfuse::evalkit::gen_synthetic;

    #[test]
    fn roundtrip_preserves_matrices_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(4, 8, 6, 0.3, 11).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.dataset.query().as_slice(), data.dataset.query().as_slice());
        assert_eq!(back.dataset.gallery_ids(), data.dataset.gallery_ids());
        assert_eq!(back.raw.as_slice(), data.raw.as_slice());
        assert_eq!(back.raw_ids.as_deref(), Some(&data.raw_ids[..]));
        assert_eq!(back.dataset.meta(), data.dataset.meta());
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(3, 4, 5, 1.0, 7).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let first = std::fs::read(dir.path().join("labels.json")).unwrap();
        let first_raw = std::fs::read(dir.path().join("raw.dnfm")).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("labels.json")).unwrap());
        assert_eq!(first_raw, std::fs::read(dir.path().join("raw.dnfm")).unwrap());
    }

    #[test]
    fn missing_raw_ids_load_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(3, 4, 5, 1.0, 7).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let text = std::fs::read_to_string(dir.path().join("labels.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("raw_ids");
        std::fs::write(dir.path().join("labels.json"), v.to_string()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.raw_ids.is_none());
    }

    #[test]
    fn truncated_sidecar_is_a_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(3, 4, 5, 1.0, 7).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        std::fs::write(dir.path().join("labels.json"), "{\"meta\":").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CorruptFile(_)), "{err:?}");
    }
}
