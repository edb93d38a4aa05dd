//! Dataset export/import: a directory of raw tensor files plus a JSON
//! metadata document. Round trips are bit-exact (images stored as
//! little-endian f64).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{KfError, Result};
use crate::synthdata::{DatasetSplit, LabeledSample, LatentFactorSpec};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    spec: LatentFactorSpec,
    seed: u64,
    ratio: f64,
    /// (channels, height, width) of each stored image.
    sample_shape: (usize, usize, usize),
    train_indices: Vec<Vec<usize>>,
    test_indices: Vec<Vec<usize>>,
}

fn write_images(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        for &v in s.image.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

fn read_images(
    path: &Path,
    count: usize,
    shape: (usize, usize, usize),
) -> Result<Vec<Array3<f64>>> {
    let per_image = shape.0 * shape.1 * shape.2;
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != count * per_image * 8 {
        return Err(KfError::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            count * per_image * 8
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let mut data = Vec::with_capacity(per_image);
        for j in 0..per_image {
            let at = (i * per_image + j) * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[at..at + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        images.push(
            Array3::from_shape_vec(shape, data)
                .map_err(|e| KfError::Format(format!("bad image shape: {e}")))?,
        );
    }
    Ok(images)
}

/// Write a dataset split to `dir` (created if missing): `meta.json`,
/// `train_images.bin`, `test_images.bin`.
pub fn export_dataset(split: &DatasetSplit, spec: &LatentFactorSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        seed: split.seed,
        ratio: split.ratio,
        sample_shape: spec.sample_shape(),
        train_indices: split.train.iter().map(|s| s.latent_index.clone()).collect(),
        test_indices: split.test.iter().map(|s| s.latent_index.clone()).collect(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_images(&dir.join("train_images.bin"), &split.train)?;
    write_images(&dir.join("test_images.bin"), &split.test)?;
    Ok(())
}

/// Read a dataset directory back; inverse of [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<(LatentFactorSpec, DatasetSplit)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(KfError::NotFound(format!("{} is missing meta.json", dir.display())));
    }
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(KfError::Format(format!(
            "unsupported dataset format version {}",
            meta.format_version
        )));
    }
    meta.spec.validate()?;
    let train_images = read_images(
        &dir.join("train_images.bin"),
        meta.train_indices.len(),
        meta.sample_shape,
    )?;
    let test_images = read_images(
        &dir.join("test_images.bin"),
        meta.test_indices.len(),
        meta.sample_shape,
    )?;
    let rebuild = |images: Vec<Array3<f64>>, indices: Vec<Vec<usize>>| -> Result<Vec<LabeledSample>> {
        images
            .into_iter()
            .zip(indices)
            .map(|(image, latent_index)| {
                let task_labels = crate::synthdata::derive_task_labels(&latent_index, &meta.spec)?;
                Ok(LabeledSample { image, latent_index, task_labels })
            })
            .collect()
    };
    let split = DatasetSplit {
        train: rebuild(train_images, meta.train_indices)?,
        test: rebuild(test_images, meta.test_indices)?,
        seed: meta.seed,
        ratio: meta.ratio,
    };
    Ok((meta.spec, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, Factor};

    #[test]
    fn export_import_round_trip_is_bit_exact() {
        let spec = LatentFactorSpec::new(
            vec![
                Factor::new("shape", vec![0.0, 1.0]),
                Factor::new("pos_x", vec![0.0, 0.5, 1.0]),
            ],
            (8, 8),
            1,
        )
        .unwrap();
        let split = generate_split(&spec, None, 3, 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&split, &spec, dir.path()).unwrap();
        let (spec2, split2) = import_dataset(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(split.seed, split2.seed);
        assert_eq!(split.train.len(), split2.train.len());
        for (a, b) in split.train.iter().zip(&split2.train) {
            assert_eq!(a.latent_index, b.latent_index);
            assert_eq!(a.task_labels, b.task_labels);
            assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn missing_dir_reports_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            import_dataset(&dir.path().join("nope")),
            Err(KfError::NotFound(_))
        ));
    }
}
