//! On-disk corpus layout: `root/{train,val}/img_%06d.ppm` + `msk_%06d.pgm`
//! and a `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{self, Gray};
use super::scene::{gen_scene, Sample, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    /// Fraction of pixels per class, counted over the written masks.
    pub train_class_frequency: Vec<f64>,
    pub val_class_frequency: Vec<f64>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
        }
    }

    /// Generator index of the `i`-th sample of a split. Validation samples
    /// follow the training ones so the splits never share a scene.
    pub fn scene_index(&self, split: Split, i: usize) -> u64 {
        match split {
            Split::Train => i as u64,
            Split::Val => (self.n_train + i) as u64,
        }
    }
}

pub fn image_path(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(split.dir()).join(format!("img_{i:06}.ppm"))
}

pub fn mask_path(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(split.dir()).join(format!("msk_{i:06}.pgm"))
}

/// Fraction of pixels per class over a set of masks (labels `>= classes` are skipped).
pub fn class_frequency<'a>(masks: impl IntoIterator<Item = &'a [u8]>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for m in masks {
        for &l in m {
            if (l as usize) < classes {
                counts[l as usize] += 1;
                total += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Generates and writes a corpus. Refuses a non-empty `root` unless `force`.
pub fn write_dataset(root: &Path, spec: &SceneSpec, n_train: usize, n_val: usize, force: bool) -> Result<Manifest> {
    spec.validate()?;
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "{} exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let mut manifest = Manifest {
        spec: spec.clone(),
        n_train,
        n_val,
        train_class_frequency: vec![],
        val_class_frequency: vec![],
    };
    for split in [Split::Train, Split::Val] {
        let dir = root.join(split.dir());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut masks = Vec::with_capacity(manifest.count(split));
        for i in 0..manifest.count(split) {
            let s = gen_scene(spec, manifest.scene_index(split, i));
            netpbm::write_ppm(&image_path(root, split, i), &s.image)?;
            let gray = Gray {
                width: s.width(),
                height: s.height(),
                data: s.mask,
            };
            netpbm::write_pgm(&mask_path(root, split, i), &gray)?;
            masks.push(gray.data);
        }
        let freq = class_frequency(masks.iter().map(|m| m.as_slice()), spec.classes);
        match split {
            Split::Train => manifest.train_class_frequency = freq,
            Split::Val => manifest.val_class_frequency = freq,
        }
    }
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// All samples of one split, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.count(split));
    for i in 0..manifest.count(split) {
        let image: Tensor<f32> = netpbm::read_ppm(&image_path(root, split, i))?;
        let mp = mask_path(root, split, i);
        let gray = netpbm::read_pgm(&mp)?;
        if [gray.height, gray.width] != image.shape()[1..] {
            return Err(Error::config(format!(
                "{}: mask is {}x{}, image is {:?}",
                mp.display(),
                gray.width,
                gray.height,
                &image.shape()[1..]
            )));
        }
        if let Some(&bad) = gray
            .data
            .iter()
            .find(|&&l| (l as usize) >= manifest.spec.classes && l != crate::objectives::IGNORE_LABEL)
        {
            return Err(Error::config(format!("{}: label {bad} outside the class range", mp.display())));
        }
        samples.push(Sample {
            image,
            mask: gray.data,
        });
    }
    Ok(Dataset {
        classes: manifest.spec.classes,
        samples,
    })
}
