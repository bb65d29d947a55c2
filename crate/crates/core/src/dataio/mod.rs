//! On-disk formats and the synthetic data generator.

mod annotations;
mod checkpoint;
mod features;
mod synthetic;

use std::path::Path;

pub use annotations::{format_annotations, parse_annotations, read_annotations, write_annotations, Annotation};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use features::{
    decode_features, encode_features, read_features, write_features, FEATURE_HEADER_LEN, FEATURE_VERSION, MAGIC,
};
pub use synthetic::{generate_synthetic_stream, SyntheticStream, SyntheticStreamConfig};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Patch features `[N, L, D_raw]` with their full ground-truth label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<u64>,
    pub features: Tensor,
    pub labels: Vec<Vec<usize>>,
    pub total_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn patches(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn raw_dim(&self) -> usize {
        self.features.shape()[2]
    }

    fn row_len(&self) -> usize {
        self.patches() * self.raw_dim()
    }

    /// `[rows.len(), L, D_raw]` features of the given rows.
    pub fn batch_features(&self, rows: &[usize]) -> Tensor {
        let rl = self.row_len();
        let src = self.features.data();
        let mut data = Vec::with_capacity(rows.len() * rl);
        for &r in rows {
            data.extend_from_slice(&src[r * rl..(r + 1) * rl]);
        }
        Tensor::new(&[rows.len(), self.patches(), self.raw_dim()], data).expect("non-empty batch")
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            features: self.batch_features(rows),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
            total_classes: self.total_classes,
        }
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.ids
            .iter()
            .zip(&self.labels)
            .map(|(&id, labels)| Annotation {
                id,
                labels: labels.clone(),
            })
            .collect()
    }

    pub fn mean_cardinality(&self) -> f64 {
        self.labels.iter().map(Vec::len).sum::<usize>() as f64 / self.len() as f64
    }

    /// Writes `<stem>.clf` and `<stem>.ann` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_features(dir.join(format!("{stem}.clf")), &self.features)?;
        write_annotations(dir.join(format!("{stem}.ann")), &self.annotations())
    }

    pub fn load(dir: &Path, stem: &str, total_classes: usize) -> Result<Dataset> {
        let fpath = dir.join(format!("{stem}.clf"));
        let apath = dir.join(format!("{stem}.ann"));
        let features = read_features(&fpath)?;
        let ann = read_annotations(&apath, total_classes)?;
        if ann.len() != features.shape()[0] {
            return Err(Error::Format {
                kind: "annotation",
                path: apath,
                detail: format!("{} records for {} feature rows", ann.len(), features.shape()[0]),
            });
        }
        Ok(Dataset {
            ids: ann.iter().map(|a| a.id).collect(),
            labels: ann.into_iter().map(|a| a.labels).collect(),
            features,
            total_classes,
        })
    }
}
