//! Binary parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "CCL1" | version: u32 | count: u32
//! count x { name_len: u32 | name: utf-8 | rank: u32 | dims: rank x u32 | data: numel x f32 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams, NnError};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CCL1";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<(), NnError> {
    let tensors: Vec<(String, Tensor<f32>)> = params.named_params().into_iter().map(|(n, t)| (n, t.cast())).collect();
    write_tensors(BufWriter::new(File::create(path)?), &tensors)
}

/// Loads a checkpoint into the structure described by `config`. Every
/// parameter must be present with a matching shape.
pub fn load<T: Scalar>(config: &ModelConfig, path: &Path) -> Result<ModelParams<T>, NnError> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    from_tensors(config, tensors)
}

pub fn from_tensors<T: Scalar>(config: &ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<ModelParams<T>, NnError> {
    let mut model = ModelParams::<T>::init(config, &mut stream_rng(0, Stream::Init, 0))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if tensors.len() != names.len() {
        return Err(NnError::Checkpoint(format!("expected {} tensors, found {}", names.len(), tensors.len())));
    }
    for ((name, slot), (cname, t)) in names.iter().zip(model.params_mut()).zip(tensors) {
        if *name != cname || slot.shape() != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "expected {name} {:?}, found {cname} {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.cast();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneKind, InputShape};

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneKind::Mlp,
            input: InputShape { channels: 1, height: 1, width: 5 },
            hidden_dim: 4,
            classes: 3,
            mlp_widths: vec![8],
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap())]).unwrap();
        assert_eq!(&buf[..4], b"CCL1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..26], &2u32.to_le_bytes());
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 34);
    }

    #[test]
    fn save_load_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = ModelParams::<f32>::init(&cfg(), &mut stream_rng(4, Stream::Init, 0)).unwrap();
        save(&m, &path).unwrap();
        let back: ModelParams<f32> = load(&cfg(), &path).unwrap();
        assert_eq!(m, back);

        let mut other = cfg();
        other.hidden_dim = 6;
        assert!(matches!(load::<f32>(&other, &path), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), Tensor::zeros(&[3, 3]))]).unwrap();
        assert!(matches!(read_tensors(&buf[..buf.len() - 1]), Err(NnError::Io(_))));
        buf[0] = b'X';
        assert!(matches!(read_tensors(&buf[..]), Err(NnError::Checkpoint(_))));
    }
}
