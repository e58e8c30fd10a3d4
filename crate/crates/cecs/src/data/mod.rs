//! Datasets: an in-memory container plus synthetic generation, image-folder
//! loading (`root/<category>/<image>.{ppm,pgm,rawt}`), deterministic 1:1
//! splits, and per-channel statistics.

pub mod codec;
pub mod synth;

pub use synth::{generate_synthetic, SynthSpec};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{seed_rng, TAG_SPLIT};
use crate::tensor::Tensor;

/// Labeled images. Labels index into `names`; every category is non-empty and
/// all images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<(Tensor, usize)>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<(Tensor, usize)>, names: Vec<String>) -> Result<Self> {
        if samples.is_empty() || names.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = names.len();
        let shape = samples[0].0.shape().to_vec();
        let mut counts = vec![0usize; k];
        for (image, label) in &samples {
            if *label >= k {
                return Err(Error::LabelOutOfRange { label: *label, k });
            }
            counts[*label] += 1;
            if image.shape() != shape.as_slice() {
                return Err(Error::InvalidDataset(format!(
                    "images disagree on shape: {:?} vs {:?}",
                    shape,
                    image.shape()
                )));
            }
            if image.rank() != 3 {
                return Err(Error::InvalidDataset(format!(
                    "images must be rank 3 [h,w,c], got {:?}",
                    image.shape()
                )));
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDataset(format!(
                "category {:?} has no samples",
                names[empty]
            )));
        }
        Ok(Dataset { samples, names })
    }

    pub fn samples(&self) -> &[(Tensor, usize)] {
        &self.samples
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn category_count(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].0.shape()
    }
}

/// Splits each category half/half by a per-category shuffle, keeping original
/// sample order within each half. Every category count must be even.
pub fn split_half(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let k = dataset.category_count();
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (_, label)) in dataset.samples().iter().enumerate() {
        by_category[*label].push(i);
    }
    let mut train_idx = Vec::with_capacity(dataset.len() / 2);
    let mut test_idx = Vec::with_capacity(dataset.len() / 2);
    for (c, indices) in by_category.iter().enumerate() {
        if indices.len() % 2 != 0 {
            return Err(Error::OddCategoryCount {
                category: dataset.names()[c].clone(),
                count: indices.len(),
            });
        }
        let mut shuffled = indices.clone();
        let mut rng = seed_rng(&[seed, TAG_SPLIT, c as u64]);
        shuffled.shuffle(&mut rng);
        let half = shuffled.len() / 2;
        let (mut a, mut b) = (shuffled[..half].to_vec(), shuffled[half..].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        train_idx.extend(a);
        test_idx.extend(b);
    }
    let pick = |idx: &[usize]| -> Result<Dataset> {
        let samples = idx.iter().map(|&i| dataset.samples()[i].clone()).collect();
        Dataset::new(samples, dataset.names().to_vec())
    };
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

/// Per-channel mean and standard deviation over every pixel of every sample.
/// Two passes keep the variance numerically clean; iteration order is fixed.
pub fn channel_stats(samples: &[(Tensor, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let channels = samples[0].0.shape()[2];
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    for (image, _) in samples {
        for (i, v) in image.data().iter().enumerate() {
            sums[i % channels] += v;
        }
        count += image.numel() / channels;
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for (image, _) in samples {
        for (i, v) in image.data().iter().enumerate() {
            let d = v - means[i % channels];
            sq[i % channels] += d * d;
        }
    }
    let stds = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    Ok((means, stds))
}

fn decode_image(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", name), e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let image = match ext {
        "ppm" => codec::decode_ppm(&bytes, &name)?,
        "pgm" => codec::decode_pgm(&bytes, &name)?,
        "rawt" => {
            let t = codec::decode_rawt(&bytes, &name)?;
            if t.rank() != 3 {
                return Err(Error::Undecodable {
                    path: name,
                    reason: format!("image tensor must be rank 3, got {:?}", t.shape()),
                });
            }
            t
        }
        _ => unreachable!("caller filters extensions"),
    };
    Ok(image)
}

/// Loads `root/<category>/<image>.{ppm,pgm,rawt}`. Categories are the
/// subdirectories of `root` in lexicographic order; files sort the same way.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read_dir(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
    };
    let mut categories = BTreeMap::new();
    for entry in read(root)? {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", root.display()), e))?;
        if entry.path().is_dir() {
            categories.insert(entry.file_name().to_string_lossy().into_owned(), entry.path());
        }
    }
    if categories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut samples = Vec::new();
    let mut names = Vec::new();
    for (label, (name, dir)) in categories.into_iter().enumerate() {
        let mut files: Vec<_> = read(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("ppm") | Some("pgm") | Some("rawt")
                    )
            })
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyCategory(name));
        }
        files.sort_by_key(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()));
        for file in files {
            samples.push((decode_image(&file)?, label));
        }
        names.push(name);
    }
    Dataset::new(samples, names)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveFormat {
    Netpbm,
    Rawt,
}

/// Writes the dataset as an image folder. Netpbm picks PPM or PGM from the
/// channel count and quantizes to 8 bits; Rawt keeps single-precision values.
pub fn save_dataset(dataset: &Dataset, root: &Path, format: SaveFormat) -> Result<()> {
    let mut counters = vec![0usize; dataset.category_count()];
    for (image, label) in dataset.samples() {
        let dir = root.join(&dataset.names()[*label]);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let (bytes, ext) = match format {
            SaveFormat::Netpbm => match image.shape()[2] {
                3 => (codec::encode_ppm(image)?, "ppm"),
                1 => (codec::encode_pgm(image)?, "pgm"),
                c => {
                    return Err(Error::InvalidTensor(format!(
                        "cannot write {}-channel image as netpbm",
                        c
                    )))
                }
            },
            SaveFormat::Rawt => (codec::encode_rawt(image)?, "rawt"),
        };
        let path = dir.join(format!("img_{:04}.{}", counters[*label], ext));
        counters[*label] += 1;
        std::fs::write(&path, bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}
