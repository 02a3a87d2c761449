//! Datasets: the bundled synthetic domains, IDX files, domain transforms,
//! batching and JSON task configs.

pub mod batch;
pub mod digits;
pub mod idx;
pub mod shapes8;
pub mod transforms;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::oracle::gather;
use crate::networks::ImageShape;
use crate::records::{self, Record};

pub use batch::{BatchIter, BatchPosition};
pub use digits::{gen_digits, DigitSpec};
pub use idx::{load_idx, write_idx};
pub use shapes8::{gen_shapes8, Glyph, Shapes8Spec};
pub use transforms::{transform_domain, Transform};

/// A labeled image batch held as one (n, c, h, w) tensor with values in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image: ImageShape,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

impl Dataset {
    pub fn new(
        image: ImageShape,
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if images.shape() != image.batch_dims(n) {
            return Err(Error::Shape(format!(
                "dataset: images {:?} vs {n} labels of {image:?}",
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Self {
            image,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<LabeledImage> {
        let pixels = self.images.outer(i)?;
        Ok(LabeledImage {
            pixels,
            label: self.labels[i],
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let images = gather(&self.images, idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.image, images, labels, self.classes)
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// All parts, in order. Parts must share geometry.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut classes = 0;
        for d in parts {
            if d.image != first.image {
                return Err(Error::Shape(format!(
                    "cannot join {:?} and {:?} images",
                    first.image, d.image
                )));
            }
            images.extend_from_slice(d.images.data());
            labels.extend_from_slice(&d.labels);
            classes = classes.max(d.classes);
        }
        let images = Tensor::new(first.image.batch_dims(labels.len()), images)?;
        Dataset::new(first.image, images, labels, classes)
    }

    pub fn to_records(&self) -> Vec<Record> {
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        vec![
            Record::tensor("images", self.images.clone()),
            Record::tensor(
                "labels",
                Tensor::new([self.len()], labels).expect("label count"),
            ),
            Record::tensor("classes", Tensor::scalar(self.classes as f32)),
        ]
    }

    pub fn from_records(recs: &[Record]) -> Result<Self> {
        let images = records::find_tensor(recs, "images")?;
        let labels: Vec<usize> = records::find_tensor(recs, "labels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let classes = records::find_tensor(recs, "classes")?.item() as usize;
        let image = match *images.shape() {
            [_, c, h, w] => ImageShape::new(c, h, w),
            _ => {
                return Err(Error::Malformed(format!(
                    "dataset images have shape {:?}",
                    images.shape()
                )))
            }
        };
        Dataset::new(image, images, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        records::save(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&records::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

/// Where a domain's base images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Shapes8(Shapes8Spec),
    Digits(DigitSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub role: DomainRole,
    pub generator: Generator,
    #[serde(default)]
    pub transforms: Vec<Transform>,
}

impl DatasetSpec {
    /// Materializes `n` items (IDX sources are truncated to `n`).
    pub fn build(&self, n: usize, seed: u64) -> Result<Dataset> {
        let base = match &self.generator {
            Generator::Shapes8(s) => gen_shapes8(s, n, seed)?,
            Generator::Digits(d) => gen_digits(d, n, seed)?,
            Generator::Idx { images, labels } => load_idx(images, labels)?.take(n)?,
        };
        transform_domain(&base, &self.transforms)
    }
}

/// A source/target pairing plus sizes and seeds; the JSON task schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub classes: usize,
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    pub n_train: usize,
    /// Held-out images per domain, used for evaluation.
    pub n_test: usize,
    /// Data seed; training seeds are separate.
    pub seed: u64,
}

/// Built datasets of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub source: Dataset,
    pub target: Dataset,
    pub source_test: Dataset,
    pub target_test: Dataset,
}

impl TaskConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.role != DomainRole::Source || self.target.role != DomainRole::Target {
            return Err(Error::Config(
                "task needs one source and one target domain".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<TaskData> {
        self.validate()?;
        // four disjoint seed streams
        let s = |k: u64| self.seed.wrapping_mul(4).wrapping_add(k);
        let data = TaskData {
            source: self.source.build(self.n_train, s(0))?,
            target: self.target.build(self.n_train, s(1))?,
            source_test: self.source.build(self.n_test, s(2))?,
            target_test: self.target.build(self.n_test, s(3))?,
        };
        if data.source.image != data.target.image {
            return Err(Error::Config(format!(
                "domains differ in geometry: {:?} vs {:?}",
                data.source.image, data.target.image
            )));
        }
        for d in [&data.source, &data.target] {
            if d.classes > self.classes {
                return Err(Error::Config(format!(
                    "domain has {} classes, task declares {}",
                    d.classes, self.classes
                )));
            }
        }
        Ok(data)
    }

    /// Squares to disks on the eight-mode ring.
    pub fn shapes8() -> Self {
        Self {
            name: "shapes8".into(),
            classes: shapes8::MODES,
            source: DatasetSpec {
                name: "squares".into(),
                role: DomainRole::Source,
                generator: Generator::Shapes8(Shapes8Spec::with_glyph(Glyph::Square)),
                transforms: vec![],
            },
            target: DatasetSpec {
                name: "disks".into(),
                role: DomainRole::Target,
                generator: Generator::Shapes8(Shapes8Spec::with_glyph(Glyph::Disk)),
                transforms: vec![],
            },
            n_train: 2000,
            n_test: 600,
            seed: 1,
        }
    }

    /// Digits to inverted digits.
    pub fn digits_invert() -> Self {
        Self {
            name: "digits-invert".into(),
            classes: digits::CLASSES,
            source: DatasetSpec {
                name: "digits".into(),
                role: DomainRole::Source,
                generator: Generator::Digits(DigitSpec::default()),
                transforms: vec![],
            },
            target: DatasetSpec {
                name: "digits-inverted".into(),
                role: DomainRole::Target,
                generator: Generator::Digits(DigitSpec::default()),
                transforms: vec![Transform::Invert],
            },
            n_train: 2000,
            n_test: 1000,
            seed: 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_json_round_trip() {
        for t in [TaskConfig::shapes8(), TaskConfig::digits_invert()] {
            let s = serde_json::to_string_pretty(&t).unwrap();
            assert_eq!(TaskConfig::from_json(&s).unwrap(), t);
        }
    }

    #[test]
    fn builds_with_shared_geometry() {
        let mut t = TaskConfig::digits_invert();
        t.n_train = 20;
        t.n_test = 10;
        let d = t.build().unwrap();
        assert_eq!(d.source.len(), 20);
        assert_eq!(d.target_test.len(), 10);
        assert_eq!(d.source.image, d.target.image);
        // target is a different draw, inverted
        assert_ne!(d.source.images, d.target.images);
    }

    #[test]
    fn dataset_container_round_trip() {
        let ds = gen_shapes8(&Shapes8Spec::default(), 9, 3).unwrap();
        let back = Dataset::from_records(&ds.to_records()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_validates_labels() {
        let r = Dataset::new(
            ImageShape::new(1, 2, 2),
            Tensor::zeros([1, 1, 2, 2]),
            vec![3],
            3,
        );
        assert!(matches!(r, Err(Error::LabelOutOfRange { .. })));
    }
}
