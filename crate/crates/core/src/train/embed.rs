use std::fmt::Write as _;
use std::path::Path;

use super::TrainError;
use crate::data::{batches, BatchOptions, LabeledDataset};
use crate::nn::ModelParams;
use crate::tensor::{Graph, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub index: usize,
    pub label: usize,
    pub x: f64,
    pub y: f64,
}

/// Gated hidden activations `f1(F) * c` (before the relu) of every item, for
/// models with a 2-wide hidden layer.
pub fn export_embeddings<T: Scalar>(params: &ModelParams<T>, ds: &LabeledDataset) -> Result<Vec<EmbeddingRow>, TrainError> {
    if params.config.hidden_dim != 2 {
        return Err(TrainError::Config(format!(
            "embedding export needs hidden dim 2, model has {}",
            params.config.hidden_dim
        )));
    }
    let mut rows = Vec::with_capacity(ds.len());
    for batch in batches::<T>(ds, BatchOptions::sequential(256))? {
        let mut g = Graph::<T>::new();
        let vars = params.bind(&mut g);
        let x = g.constant(batch.inputs);
        let out = params.forward_cam(&mut g, &vars, x)?;
        let h = g.value(out.gated_hidden);
        for (r, (&index, &label)) in batch.indices.iter().zip(&batch.labels).enumerate() {
            let v = h.row(r);
            rows.push(EmbeddingRow { index, label, x: v[0].f64(), y: v[1].f64() });
        }
    }
    Ok(rows)
}

/// CSV with header `index,label,x,y`.
pub fn write_embeddings(rows: &[EmbeddingRow], path: &Path) -> Result<(), TrainError> {
    let mut s = String::from("index,label,x,y\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.index, r.label, r.x, r.y);
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::{BackboneKind, InputShape, ModelConfig};
    use crate::rng::{stream_rng, Stream};

    fn model(hidden: usize) -> ModelParams<f32> {
        let cfg = ModelConfig {
            backbone: BackboneKind::Mlp,
            input: InputShape { channels: 1, height: 1, width: 4 },
            hidden_dim: hidden,
            classes: 3,
            mlp_widths: vec![8],
        };
        ModelParams::init(&cfg, &mut stream_rng(0, Stream::Init, 0)).unwrap()
    }

    #[test]
    fn rows_cover_dataset_in_order() {
        let ds = synth_blobs(3, 4, 4, 5.0, 0).unwrap();
        let rows = export_embeddings(&model(2), &ds).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().enumerate().all(|(i, r)| r.index == i && r.label == ds.labels()[i]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_embeddings(&rows, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn wide_hidden_is_rejected() {
        let ds = synth_blobs(3, 2, 4, 5.0, 0).unwrap();
        assert!(matches!(export_embeddings(&model(4), &ds), Err(TrainError::Config(_))));
    }
}
