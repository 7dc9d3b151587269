//! Image datasets: class-per-folder loading with split manifests, and
//! synthetic prototype-plus-noise datasets for desk-scale experiments.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::{ClassIndex, ExampleId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Images with a shared `[C, H, W]` shape, grouped by class.
#[derive(Clone, Debug)]
pub struct Dataset {
    shape: [usize; 3],
    images: Vec<Array3<f32>>,
    index: ClassIndex,
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<Array3<f32>>, index: ClassIndex) -> Result<Self> {
        for img in &images {
            if img.shape() != shape {
                return Err(Error::Shape {
                    context: "dataset image".into(),
                    expected: shape.to_vec(),
                    received: img.shape().to_vec(),
                });
            }
        }
        if let Some(bad) = index.iter().flat_map(|(_, ex)| ex.iter()).find(|&&id| id >= images.len()) {
            return Err(Error::Manifest(format!("example id {bad} out of range")));
        }
        Ok(Self { shape, images, index })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn index(&self) -> &ClassIndex {
        &self.index
    }

    pub fn image(&self, id: ExampleId) -> &Array3<f32> {
        &self.images[id]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given examples into an `[n, C, H, W]` batch.
    pub fn batch<S: Scalar>(&self, ids: &[ExampleId]) -> Array4<S> {
        let [c, h, w] = self.shape;
        let mut out = Array4::<S>::zeros((ids.len(), c, h, w));
        for (mut dst, &id) in out.axis_iter_mut(Axis(0)).zip(ids) {
            ndarray::Zip::from(&mut dst)
                .and(&self.images[id])
                .for_each(|d, &s| *d = S::from_f64_lossy(s as f64));
        }
        out
    }

    /// Keeps only the named classes (images are shared by clone, ids re-packed).
    pub fn subset<'a>(&self, classes: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut images = Vec::new();
        let mut index = ClassIndex::new();
        for class in classes {
            let ex = self
                .index
                .get(class)
                .ok_or_else(|| Error::Manifest(format!("class `{class}` not in dataset")))?;
            let start = images.len();
            images.extend(ex.iter().map(|&id| self.images[id].clone()));
            index.insert(class, (start..images.len()).collect());
        }
        Self::new(self.shape, images, index)
    }

    /// Keeps, for every class, the examples at positions `range` of that
    /// class's list. Used to hold out examples when there are too few classes
    /// for disjoint class splits.
    pub fn select_examples(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let mut images = Vec::new();
        let mut index = ClassIndex::new();
        for (class, ex) in self.index.iter() {
            let picked = ex.get(range.clone()).ok_or_else(|| Error::ClassTooSmall {
                class: class.to_string(),
                available: ex.len(),
                needed: range.end,
            })?;
            let start = images.len();
            images.extend(picked.iter().map(|&id| self.images[id].clone()));
            index.insert(class, (start..images.len()).collect());
        }
        Self::new(self.shape, images, index)
    }
}

/// Per-channel affine normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization stds must be positive".into()));
        }
        Ok(())
    }
}

/// Class-disjoint train/validation/test class lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub train_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub test_classes: Vec<String>,
}

impl SplitManifest {
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let m = Self {
            train_classes: train,
            val_classes: val,
            test_classes: test,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let splits = [
            ("train", &self.train_classes),
            ("val", &self.val_classes),
            ("test", &self.test_classes),
        ];
        let mut seen: HashSet<&str> = HashSet::new();
        for (name, list) in splits {
            if list.is_empty() {
                return Err(Error::Manifest(format!("{name} split is empty")));
            }
            for class in list {
                if !seen.insert(class) {
                    return Err(Error::Manifest(format!("class `{class}` listed more than once")));
                }
            }
        }
        Ok(())
    }

    pub fn from_files(train: &Path, val: &Path, test: &Path) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Manifest(format!("{}: {e}", p.display())))?;
            Ok(parse_manifest(&text))
        };
        Self::new(read(train)?, read(val)?, read(test)?)
    }

    pub fn all_classes(&self) -> impl Iterator<Item = &String> {
        self.train_classes.iter().chain(&self.val_classes).chain(&self.test_classes)
    }
}

/// One class id per line; blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn write_manifest(path: &Path, classes: &[String]) -> Result<()> {
    let mut text = String::new();
    for c in classes {
        text.push_str(c);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loading options for [`load_image_folder`].
#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub target_size: (usize, usize),
    pub channels: usize,
    pub normalization: Normalization,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            target_size: (84, 84),
            channels: 3,
            normalization: Normalization::identity(3),
        }
    }
}

/// Loads `<root>/<class_id>/<image files>` for every class in the manifest.
pub fn load_image_folder(root: &Path, manifest: &SplitManifest, opts: &LoadOptions) -> Result<Splits> {
    manifest.validate()?;
    if opts.channels != 1 && opts.channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {}", opts.channels)));
    }
    opts.normalization.check(opts.channels)?;
    let missing: Vec<String> = manifest
        .all_classes()
        .filter(|c| !root.join(c).is_dir())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses {
            root: root.to_path_buf(),
            missing,
        });
    }
    let load_split = |classes: &[String]| -> Result<Dataset> {
        let mut images = Vec::new();
        let mut index = ClassIndex::new();
        for class in classes {
            let files = list_images(&root.join(class))?;
            if files.is_empty() {
                return Err(Error::ClassTooSmall {
                    class: class.clone(),
                    needed: 1,
                    available: 0,
                });
            }
            let start = images.len();
            for f in files {
                images.push(decode_image(&f, opts)?);
            }
            index.insert(class.clone(), (start..images.len()).collect());
        }
        let (h, w) = opts.target_size;
        Dataset::new([opts.channels, h, w], images, index)
    };
    Ok(Splits {
        train: load_split(&manifest.train_classes)?,
        val: load_split(&manifest.val_classes)?,
        test: load_split(&manifest.test_classes)?,
    })
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    files.sort();
    Ok(files)
}

fn decode_image(path: &Path, opts: &LoadOptions) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (h, w) = opts.target_size;
    let img = if img.height() as usize != h || img.width() as usize != w {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let c = opts.channels;
    let raw: Vec<u8> = if c == 3 {
        img.to_rgb8().into_raw()
    } else {
        img.to_luma8().into_raw()
    };
    let norm = &opts.normalization;
    Ok(Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let v = raw[(y * w + x) * c + ch] as f32 / 255.0;
        (v - norm.mean[ch]) / norm.std[ch]
    }))
}

/// Writes a dataset with pixel values in `[0, 1]` as 8-bit PNGs in the loader's layout.
pub fn export_image_folder(dataset: &Dataset, root: &Path) -> Result<()> {
    let [c, h, w] = dataset.shape();
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("cannot export {c}-channel images")));
    }
    for (class, examples) in dataset.index().iter() {
        let dir = root.join(class);
        fs::create_dir_all(&dir)?;
        for (i, &id) in examples.iter().enumerate() {
            let img = dataset.image(id);
            let mut raw = vec![0u8; c * h * w];
            for ((ch, y, x), &v) in img.indexed_iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("pixel value {v} outside [0, 1]; cannot export")));
                }
                raw[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
            }
            let path = dir.join(format!("{i:05}.png"));
            let res = if c == 3 {
                image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").save(&path)
            } else {
                image::GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").save(&path)
            };
            res.map_err(|e| Error::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Prototype-plus-noise dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub examples_per_class: usize,
    /// `[C, H, W]`
    pub image_size: [usize; 3],
    /// Minimum Euclidean pixel distance between any two class prototypes.
    pub class_separation: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.examples_per_class == 0 {
            return Err(Error::Config("synthetic dataset needs classes and examples".into()));
        }
        if self.image_size.contains(&0) {
            return Err(Error::Config("synthetic image size must be positive".into()));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be positive".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn class_id(c: usize) -> String {
        format!("class_{c:03}")
    }
}

/// Draws per prototype before giving up on the separation constraint.
const MAX_PROTOTYPE_DRAWS: usize = 1000;

/// Generates the dataset and also returns the class prototypes (in class order).
///
/// Prototypes are uniform 8-bit pixel levels; each example is its prototype plus
/// `N(0, noise_scale²)` per pixel, clamped to `[0, 1]` and quantized to 8 bits
/// so that exporting to PNG and reloading is lossless.
pub fn generate_synthetic_with_prototypes(spec: &SyntheticSpec) -> Result<(Dataset, Vec<Array3<f32>>)> {
    spec.validate()?;
    let [c, h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prototypes: Vec<Array3<f32>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut placed = false;
        for _ in 0..MAX_PROTOTYPE_DRAWS {
            let cand = Array3::from_shape_simple_fn((c, h, w), || rng.random_range(0u8..=255) as f32 / 255.0);
            let far_enough = prototypes.iter().all(|p| {
                let d2: f64 = p.iter().zip(&cand).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                d2.sqrt() >= spec.class_separation
            });
            if far_enough {
                prototypes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SeparationInfeasible {
                n_classes: spec.n_classes,
                separation: spec.class_separation,
                attempts: MAX_PROTOTYPE_DRAWS,
            });
        }
    }
    let noise = Normal::new(0.0, spec.noise_scale).expect("positive noise scale");
    let mut images = Vec::with_capacity(spec.n_classes * spec.examples_per_class);
    let mut index = ClassIndex::new();
    for (ci, proto) in prototypes.iter().enumerate() {
        let start = images.len();
        for _ in 0..spec.examples_per_class {
            images.push(proto.mapv(|p| {
                let v = (p as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0);
                ((v * 255.0).round() / 255.0) as f32
            }));
        }
        index.insert(SyntheticSpec::class_id(ci), (start..images.len()).collect());
    }
    Ok((Dataset::new([c, h, w], images, index)?, prototypes))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_prototypes(spec).map(|(d, _)| d)
}
