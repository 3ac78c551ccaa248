//! Dataset schema, YOLO-format label I/O, category merging and deterministic
//! train/val/test splitting.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Mapping from the nine raw annotation categories to the four merged
/// training categories; unmapped categories are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub raw_names: Vec<String>,
    pub merged_names: Vec<String>,
    /// `mapping[raw_id] = Some(merged_id)` or `None` for dropped categories.
    pub mapping: Vec<Option<usize>>,
}

impl Default for CategorySchema {
    fn default() -> Self {
        let raw_names: Vec<String> = [
            "bone anomaly",
            "bone lesion",
            "foreign body",
            "fracture",
            "metal",
            "periosteal reaction",
            "pronator sign",
            "soft-tissue",
            "text",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let merged_names: Vec<String> = ["fracture", "foreign_body", "periosteal_reaction", "bone_lesion"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // bone anomaly + bone lesion -> bone_lesion; foreign body + metal ->
        // foreign_body; fracture and periosteal reaction keep themselves;
        // pronator sign / soft-tissue / text are dropped
        let mapping = vec![
            Some(3), // bone anomaly -> bone_lesion
            Some(3), // bone lesion -> bone_lesion
            Some(1), // foreign body -> foreign_body
            Some(0), // fracture -> fracture
            Some(1), // metal -> foreign_body
            Some(2), // periosteal reaction -> periosteal_reaction
            None,    // pronator sign
            None,    // soft-tissue
            None,    // text
        ];
        CategorySchema {
            raw_names,
            merged_names,
            mapping,
        }
    }
}

impl CategorySchema {
    /// Identity schema over `n` categories (labels already merged).
    pub fn identity(names: Vec<String>) -> Self {
        let n = names.len();
        CategorySchema {
            raw_names: names.clone(),
            merged_names: names,
            mapping: (0..n).map(Some).collect(),
        }
    }

    pub fn num_merged(&self) -> usize {
        self.merged_names.len()
    }

    pub fn map_raw(&self, raw_id: usize) -> Result<Option<usize>> {
        self.mapping
            .get(raw_id)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("raw category id {raw_id} out of range")))
    }
}

/// One dataset record: raster plus ground-truth boxes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    /// (3, H, W) u8; grayscale sources are replicated to three channels.
    pub image: Array3<u8>,
    pub boxes: Vec<BoundingBox>,
}

/// Parse one YOLO label file: lines `raw_id cx cy w h` (plus an optional
/// trailing confidence for detection files). Dropped categories are omitted;
/// order is preserved.
pub fn load_labels(path: &Path, schema: &CategorySchema) -> Result<Vec<BoundingBox>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fail = |reason: String| Error::LabelParse {
            path: PathBuf::from(path),
            line: lineno + 1,
            reason,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(fail(format!("expected 5 or 6 fields, found {}", fields.len())));
        }
        let raw_id: usize = fields[0]
            .parse()
            .map_err(|_| fail(format!("bad category id {:?}", fields[0])))?;
        let mut nums = [0f64; 4];
        for (i, f) in fields[1..5].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| fail(format!("bad coordinate {f:?}")))?;
            if !(0.0..=1.0).contains(&nums[i]) {
                return Err(fail(format!("coordinate {} out of [0,1]", nums[i])));
            }
        }
        let confidence = if fields.len() == 6 {
            fields[5]
                .parse()
                .map_err(|_| fail(format!("bad confidence {:?}", fields[5])))?
        } else {
            1.0
        };
        let Some(merged) = schema.map_raw(raw_id)? else {
            continue;
        };
        let mut b = BoundingBox::new(nums[0], nums[1], nums[2], nums[3], merged);
        b.confidence = confidence;
        out.push(b);
    }
    Ok(out)
}

/// Write boxes in YOLO text format with 6-decimal coordinates; detection
/// boxes (confidence < 1) get a sixth confidence column.
pub fn save_labels(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in boxes {
        if (b.confidence - 1.0).abs() < f64::EPSILON {
            writeln!(
                f,
                "{} {:.6} {:.6} {:.6} {:.6}",
                b.category_id, b.cx, b.cy, b.w, b.h
            )?;
        } else {
            writeln!(
                f,
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
                b.category_id, b.cx, b.cy, b.w, b.h, b.confidence
            )?;
        }
    }
    Ok(())
}

/// Deterministic 70/20/10 split of image ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Shuffle ids with `seed` and split 70/20/10: train = round(0.7 n) in exact
/// integer arithmetic, val = floor(0.2 n), test = remainder.
pub fn make_split(ids: &[String], seed: u64) -> Result<SplitManifest> {
    if ids.len() < 10 {
        return Err(Error::Dataset(format!(
            "need at least 10 ids to honor a 70/20/10 split, got {}",
            ids.len()
        )));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_train = (7 * n + 5) / 10;
    let n_val = 2 * n / 10;
    let val_at = n_train + n_val;
    Ok(SplitManifest {
        train_ids: shuffled[..n_train].to_vec(),
        val_ids: shuffled[n_train..val_at].to_vec(),
        test_ids: shuffled[val_at..].to_vec(),
        seed,
    })
}

impl SplitManifest {
    /// Persist as three id-list text files in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, ids) in [
            ("train.txt", &self.train_ids),
            ("val.txt", &self.val_ids),
            ("test.txt", &self.test_ids),
        ] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            for id in ids {
                writeln!(f, "{id}")?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, seed: u64) -> Result<SplitManifest> {
        let read = |name: &str| -> Result<Vec<String>> {
            let content = std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Dataset(format!("{}/{name}: {e}", dir.display())))?;
            Ok(content.lines().map(|l| l.to_string()).collect())
        };
        Ok(SplitManifest {
            train_ids: read("train.txt")?,
            val_ids: read("val.txt")?,
            test_ids: read("test.txt")?,
            seed,
        })
    }

    pub fn ids(&self, split: DataSplit) -> &[String] {
        match split {
            DataSplit::Train => &self.train_ids,
            DataSplit::Val => &self.val_ids,
            DataSplit::Test => &self.test_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for DataSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataSplit::Train),
            "val" => Ok(DataSplit::Val),
            "test" => Ok(DataSplit::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// How records are keyed for splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    #[default]
    Image,
    Patient,
}

/// Load an image file as a (3, H, W) u8 array; grayscale is replicated.
pub fn load_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<u8>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c];
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    assert_eq!(c, 3);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([data[[0, y, x]], data[[1, y, x]], data[[2, y, x]]]),
            );
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// On-disk dataset description (the dataset manifest config file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `yolo` reads image/label directories; `synthetic` generates solid
    /// rectangles on the fly.
    #[serde(default)]
    pub kind: DatasetKind,
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    #[serde(default)]
    pub label_dir: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<CategorySchema>,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default)]
    pub split_by: SplitBy,
    /// Synthetic-only: number of images to generate.
    #[serde(default)]
    pub synthetic_count: Option<usize>,
    /// Synthetic-only: square image size.
    #[serde(default)]
    pub synthetic_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Yolo,
    Synthetic,
}

fn default_split_seed() -> u64 {
    0
}

/// A fully loaded dataset: ids plus a loader for samples.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub schema: CategorySchema,
    ids: Vec<String>,
    image_paths: std::collections::HashMap<String, PathBuf>,
    synthetic: Option<crate::engine::synthetic::SyntheticDataset>,
}

impl Dataset {
    pub fn open(manifest: DatasetManifest) -> Result<Dataset> {
        match manifest.kind {
            DatasetKind::Synthetic => {
                let count = manifest.synthetic_count.unwrap_or(8);
                let size = manifest.synthetic_size.unwrap_or(160);
                let synth = crate::engine::synthetic::SyntheticDataset::new(
                    count,
                    size,
                    manifest.split_seed,
                );
                let ids = synth.ids();
                Ok(Dataset {
                    schema: CategorySchema::default(),
                    manifest,
                    ids,
                    image_paths: Default::default(),
                    synthetic: Some(synth),
                })
            }
            DatasetKind::Yolo => {
                let image_dir = manifest
                    .image_dir
                    .clone()
                    .ok_or_else(|| Error::Config("dataset.image_dir is required".into()))?;
                let mut ids = Vec::new();
                let mut image_paths = std::collections::HashMap::new();
                let mut entries: Vec<_> = std::fs::read_dir(&image_dir)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", image_dir.display())))?
                    .collect::<std::io::Result<Vec<_>>>()?;
                entries.sort_by_key(|e| e.path());
                for entry in entries {
                    let path = entry.path();
                    let ext = path
                        .extension()
                        .and_then(|e| e.to_str())
                        .unwrap_or("")
                        .to_ascii_lowercase();
                    if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                        let id = path
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or_default()
                            .to_string();
                        ids.push(id.clone());
                        image_paths.insert(id, path);
                    }
                }
                if ids.is_empty() {
                    return Err(Error::Dataset(format!(
                        "no images found under {}",
                        image_dir.display()
                    )));
                }
                let schema = manifest.schema.clone().unwrap_or_default();
                Ok(Dataset {
                    manifest,
                    schema,
                    ids,
                    image_paths,
                    synthetic: None,
                })
            }
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn num_categories(&self) -> usize {
        self.schema.num_merged()
    }

    pub fn split(&self) -> Result<SplitManifest> {
        make_split(&self.ids, self.manifest.split_seed)
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        if let Some(synth) = &self.synthetic {
            return synth.sample(id);
        }
        let image_path = self
            .image_paths
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("unknown image id {id}")))?;
        let image = load_image(image_path)?;
        let label_dir = self
            .manifest
            .label_dir
            .clone()
            .unwrap_or_else(|| self.manifest.image_dir.clone().unwrap());
        let label_path = label_dir.join(format!("{id}.txt"));
        let boxes = if label_path.exists() {
            load_labels(&label_path, &self.schema)?
        } else {
            Vec::new()
        };
        Ok(Sample {
            image_id: id.to_string(),
            image,
            boxes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_label_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn fracture_maps_to_itself() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_label_file(dir.path(), "a.txt", "3 0.5 0.5 0.2 0.1\n");
        let boxes = load_labels(&p, &CategorySchema::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].category_id, 0); // fracture
        assert_eq!(boxes[0].cx, 0.5);
    }

    #[test]
    fn foreign_body_and_metal_merge() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_label_file(
            dir.path(),
            "a.txt",
            "2 0.3 0.3 0.1 0.1\n4 0.7 0.7 0.2 0.2\n",
        );
        let boxes = load_labels(&p, &CategorySchema::default()).unwrap();
        assert_eq!(boxes.len(), 2);
        assert!(boxes.iter().all(|b| b.category_id == 1)); // foreign_body
    }

    #[test]
    fn anomaly_and_lesion_merge_and_text_drops() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_label_file(
            dir.path(),
            "a.txt",
            "0 0.3 0.3 0.1 0.1\n1 0.4 0.4 0.1 0.1\n8 0.5 0.5 0.1 0.1\n",
        );
        let boxes = load_labels(&p, &CategorySchema::default()).unwrap();
        assert_eq!(boxes.len(), 2);
        assert!(boxes.iter().all(|b| b.category_id == 3)); // bone_lesion
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_label_file(dir.path(), "bad.txt", "3 0.5 0.5 0.2\n");
        let err = load_labels(&p, &CategorySchema::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bad.txt:1"), "{msg}");

        let p = write_label_file(dir.path(), "oob.txt", "3 0.5 0.5 0.2 1.5\n");
        let err = load_labels(&p, &CategorySchema::default()).unwrap_err();
        assert!(format!("{err}").contains("out of [0,1]"));
    }

    #[test]
    fn label_roundtrip_within_1e6() {
        let dir = tempfile::tempdir().unwrap();
        let boxes = vec![
            BoundingBox::new(0.123456789, 0.5, 0.25, 0.333333333, 0),
            BoundingBox::new(0.9, 0.1, 0.05, 0.07, 2),
        ];
        let p = dir.path().join("rt.txt");
        save_labels(&p, &boxes).unwrap();
        let schema = CategorySchema::identity(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        let back = load_labels(&p, &schema).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in boxes.iter().zip(back.iter()) {
            assert!((a.cx - b.cx).abs() < 1e-6);
            assert!((a.cy - b.cy).abs() < 1e-6);
            assert!((a.w - b.w).abs() < 1e-6);
            assert!((a.h - b.h).abs() < 1e-6);
            assert_eq!(a.category_id, b.category_id);
        }
    }

    #[test]
    fn detection_variant_roundtrips_confidence() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BoundingBox::new(0.5, 0.5, 0.2, 0.2, 1);
        b.confidence = 0.25;
        let p = dir.path().join("det.txt");
        save_labels(&p, &[b]).unwrap();
        let schema = CategorySchema::identity(vec!["a".into(), "b".into()]);
        let back = load_labels(&p, &schema).unwrap();
        assert!((back[0].confidence - 0.25).abs() < 1e-9);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("im{i}")).collect();
        let m = make_split(&ids, 7).unwrap();
        assert_eq!(m.train_ids.len(), 7);
        assert_eq!(m.val_ids.len(), 2);
        assert_eq!(m.test_ids.len(), 1);
        let m2 = make_split(&ids, 7).unwrap();
        assert_eq!(m, m2);
        assert!(make_split(&ids[..9], 7).is_err());
    }

    #[test]
    fn split_sizes_at_paper_scale() {
        let ids: Vec<String> = (0..20327).map(|i| format!("im{i}")).collect();
        let m = make_split(&ids, 0).unwrap();
        assert_eq!(m.train_ids.len(), 14229);
        assert_eq!(m.val_ids.len(), 4065);
        assert_eq!(m.test_ids.len(), 2033);
        assert_eq!(m.train_ids.len() + m.val_ids.len() + m.test_ids.len(), 20327);
    }

    #[test]
    fn split_partitions_ids() {
        let ids: Vec<String> = (0..137).map(|i| format!("im{i}")).collect();
        let m = make_split(&ids, 3).unwrap();
        let mut all: Vec<String> = m
            .train_ids
            .iter()
            .chain(&m.val_ids)
            .chain(&m.test_ids)
            .cloned()
            .collect();
        all.sort();
        let mut orig = ids.clone();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_manifest_io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..20).map(|i| format!("im{i}")).collect();
        let m = make_split(&ids, 11).unwrap();
        m.save(dir.path()).unwrap();
        let loaded = SplitManifest::load(dir.path(), 11).unwrap();
        assert_eq!(m, loaded);
    }
}
