//! Grounding dataset schema, on-disk layout, and synthetic generation.
//!
//! A dataset root contains `manifest.jsonl` (one JSON record per line) and a
//! `views/` directory of binary PPM renderings. Generated datasets also carry
//! `truth.jsonl`, the per-object attribute ground truth, which only tests and
//! oracle scorers read.

mod image;
mod synth;
mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::{decode_pgm, encode_pgm, ViewImage};
pub use synth::{generate_synthetic, mentioned_attributes, SynthSpec, COLORS, PARTS, SHAPES, SIZES};
pub use tokenizer::{tokenize, Vocabulary, BOS_ID, EOS_ID, N_SPECIAL, PAD_ID, UNK_ID};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const VIEWS_DIR: &str = "views";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Visual,
    Blind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Number and arrangement of views per object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLayout {
    /// Eight fixed viewpoints per object.
    Ring8,
    /// Bird, front, left, right, and side views.
    Sim5,
    Custom(usize),
}

impl ViewLayout {
    pub fn for_count(views: usize) -> Self {
        match views {
            8 => ViewLayout::Ring8,
            5 => ViewLayout::Sim5,
            n => ViewLayout::Custom(n),
        }
    }

    pub fn view_count(self) -> usize {
        match self {
            ViewLayout::Ring8 => 8,
            ViewLayout::Sim5 => 5,
            ViewLayout::Custom(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub object_id: String,
    pub category: String,
    /// View image paths relative to the dataset root.
    pub views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRecord {
    pub reference_id: String,
    pub description: String,
    pub candidates: [String; 2],
    pub target: String,
    pub annotation: Annotation,
    pub split: Split,
}

impl ReferenceRecord {
    pub fn distractor(&self) -> &str {
        if self.candidates[0] == self.target {
            &self.candidates[1]
        } else {
            &self.candidates[0]
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestRecord {
    Dataset {
        view_layout: ViewLayout,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vocabulary: Option<Vocabulary>,
    },
    Object(ObjectRecord),
    Reference(ReferenceRecord),
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    object_id: String,
    attributes: BTreeMap<String, String>,
}

/// Attribute ground truth keyed by attribute name (`shape`, `color`, ...).
pub type Attributes = BTreeMap<String, String>;

/// Objects with their rendered views plus referring expressions over them.
///
/// Immutable once constructed; every invariant is checked in [`GroundingDataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingDataset {
    objects: BTreeMap<String, ObjectRecord>,
    images: BTreeMap<String, Vec<ViewImage>>,
    references: Vec<ReferenceRecord>,
    view_layout: ViewLayout,
    vocabulary: Option<Vocabulary>,
    truth: Option<BTreeMap<String, Attributes>>,
}

impl GroundingDataset {
    pub fn new(
        objects: Vec<(ObjectRecord, Vec<ViewImage>)>,
        references: Vec<ReferenceRecord>,
        vocabulary: Option<Vocabulary>,
        truth: Option<BTreeMap<String, Attributes>>,
    ) -> Result<Self> {
        let mut object_map = BTreeMap::new();
        let mut images = BTreeMap::new();
        let mut view_count = None;
        let mut dims = None;
        for (record, views) in objects {
            let id = record.object_id.clone();
            if record.views.is_empty() {
                return Err(Error::schema(&id, "object has no views"));
            }
            if record.views.len() != views.len() {
                return Err(Error::schema(
                    &id,
                    format!("{} view paths but {} images", record.views.len(), views.len()),
                ));
            }
            match view_count {
                None => view_count = Some(views.len()),
                Some(j) if j != views.len() => {
                    return Err(Error::schema(
                        &id,
                        format!("has {} views, dataset layout has {j}", views.len()),
                    ))
                }
                _ => {}
            }
            for v in &views {
                let d = (v.width(), v.height());
                match dims {
                    None => dims = Some(d),
                    Some(expected) if expected != d => {
                        return Err(Error::schema(
                            &id,
                            format!("view is {}x{}, expected {}x{}", d.0, d.1, expected.0, expected.1),
                        ))
                    }
                    _ => {}
                }
            }
            if object_map.insert(id.clone(), record).is_some() {
                return Err(Error::schema(&id, "duplicate object_id"));
            }
            images.insert(id, views);
        }
        let mut seen = BTreeSet::new();
        for r in &references {
            let id = &r.reference_id;
            if !seen.insert(id.clone()) {
                return Err(Error::schema(id, "duplicate reference_id"));
            }
            if r.description.trim().is_empty() {
                return Err(Error::schema(id, "description is empty"));
            }
            if r.candidates[0] == r.candidates[1] {
                return Err(Error::schema(id, "candidates are not distinct"));
            }
            if !r.candidates.contains(&r.target) {
                return Err(Error::schema(
                    id,
                    format!("target `{}` is not one of the candidates", r.target),
                ));
            }
            for c in &r.candidates {
                if !object_map.contains_key(c) {
                    return Err(Error::schema(id, format!("unknown object `{c}`")));
                }
            }
        }
        let view_layout = ViewLayout::for_count(view_count.unwrap_or(0));
        Ok(Self {
            objects: object_map,
            images,
            references,
            view_layout,
            vocabulary,
            truth,
        })
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.objects.values()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectRecord> {
        self.objects.get(id)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    /// Rendered views of an object in viewpoint order.
    pub fn views(&self, object_id: &str) -> Option<&[ViewImage]> {
        self.images.get(object_id).map(Vec::as_slice)
    }

    pub fn references(&self) -> &[ReferenceRecord] {
        &self.references
    }

    pub fn split(&self, split: Split) -> Vec<&ReferenceRecord> {
        self.references.iter().filter(|r| r.split == split).collect()
    }

    pub fn view_layout(&self) -> ViewLayout {
        self.view_layout
    }

    pub fn view_count(&self) -> usize {
        self.view_layout.view_count()
    }

    /// `(width, height)` shared by every view.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images
            .values()
            .next()
            .and_then(|v| v.first())
            .map(|img| (img.width(), img.height()))
    }

    /// The declared vocabulary, or one built from every description.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.vocabulary {
            Some(v) => Ok(v.clone()),
            None => Vocabulary::from_corpus(self.references.iter().map(|r| r.description.as_str())),
        }
    }

    pub fn truth(&self) -> Option<&BTreeMap<String, Attributes>> {
        self.truth.as_ref()
    }

    /// Writes the manifest, PPM views, and truth sidecar under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root.join(VIEWS_DIR)).map_err(|e| Error::io(root, e))?;
        let mut manifest = Vec::new();
        let header = ManifestRecord::Dataset {
            view_layout: self.view_layout,
            vocabulary: self.vocabulary.clone(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&header)?).expect("in-memory write");
        for (id, record) in &self.objects {
            for (path, img) in record.views.iter().zip(&self.images[id]) {
                let full = root.join(path);
                if let Some(parent) = full.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                img.write_ppm(&full)?;
            }
            let line = serde_json::to_string(&ManifestRecord::Object(record.clone()))?;
            writeln!(manifest, "{line}").expect("in-memory write");
        }
        for r in &self.references {
            let line = serde_json::to_string(&ManifestRecord::Reference(r.clone()))?;
            writeln!(manifest, "{line}").expect("in-memory write");
        }
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

        if let Some(truth) = &self.truth {
            let mut out = Vec::new();
            for (object_id, attributes) in truth {
                let rec = TruthRecord {
                    object_id: object_id.clone(),
                    attributes: attributes.clone(),
                };
                writeln!(out, "{}", serde_json::to_string(&rec)?).expect("in-memory write");
            }
            let path = root.join(TRUTH_FILE);
            std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Loads and fully validates a dataset rooted at `root`.
pub fn load_dataset(root: &Path) -> Result<GroundingDataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let file = std::fs::File::open(&manifest_path).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut objects = Vec::new();
    let mut references = Vec::new();
    let mut vocabulary = None;
    let mut declared_layout = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(format!("{}:{}", manifest_path.display(), lineno + 1), e.to_string()))?;
        match record {
            ManifestRecord::Dataset {
                view_layout,
                vocabulary: v,
            } => {
                declared_layout = Some(view_layout);
                vocabulary = v;
            }
            ManifestRecord::Object(o) => {
                let views = o
                    .views
                    .iter()
                    .map(|p| ViewImage::read_ppm(&root.join(p)))
                    .collect::<Result<Vec<_>>>()?;
                objects.push((o, views));
            }
            ManifestRecord::Reference(r) => references.push(r),
        }
    }

    let truth_path = root.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        let text = std::fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: TruthRecord = serde_json::from_str(line)?;
            map.insert(rec.object_id, rec.attributes);
        }
        Some(map)
    } else {
        None
    };

    let dataset = GroundingDataset::new(objects, references, vocabulary, truth)?;
    if let Some(layout) = declared_layout {
        if layout.view_count() != dataset.view_count() {
            return Err(Error::schema(
                "dataset",
                format!(
                    "declared layout has {} views, objects have {}",
                    layout.view_count(),
                    dataset.view_count()
                ),
            ));
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(root: &Path, target: &str) {
        std::fs::create_dir_all(root.join("views")).unwrap();
        let mut manifest = String::new();
        for (id, color) in [("mug", [200, 10, 10]), ("cup", [10, 10, 200])] {
            let views: Vec<String> = (0..8).map(|j| format!("views/{id}_{j}.ppm")).collect();
            for v in &views {
                ViewImage::filled(4, 4, color)
                    .unwrap()
                    .write_ppm(&root.join(v))
                    .unwrap();
            }
            manifest.push_str(
                &serde_json::json!({"type": "object", "object_id": id, "category": "vessel", "views": views})
                    .to_string(),
            );
            manifest.push('\n');
        }
        manifest.push_str(
            &serde_json::json!({
                "type": "reference", "reference_id": "r0", "description": "the red one",
                "candidates": ["mug", "cup"], "target": target,
                "annotation": "visual", "split": "train"
            })
            .to_string(),
        );
        manifest.push('\n');
        std::fs::write(root.join(MANIFEST_FILE), manifest).unwrap();
    }

    #[test]
    fn loads_minimal_fixture_with_eight_views() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "mug");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.n_objects(), 2);
        assert_eq!(ds.view_layout(), ViewLayout::Ring8);
        assert_eq!(ds.views("mug").unwrap().len(), 8);
        assert_eq!(ds.references().len(), 1);
        assert_eq!(ds.references()[0].distractor(), "cup");
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "mug");
        std::fs::remove_file(dir.path().join("views/cup_3.ppm")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert!(path.ends_with("views/cup_3.ppm")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn target_outside_candidates_names_reference() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "bowl");
        match load_dataset(dir.path()) {
            Err(Error::Schema { record, .. }) => assert_eq!(record, "r0"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn duplicate_reference_is_rejected() {
        let img = ViewImage::filled(2, 2, [0, 0, 0]).unwrap();
        let obj = |id: &str| {
            (
                ObjectRecord {
                    object_id: id.into(),
                    category: "c".into(),
                    views: vec![format!("views/{id}.ppm")],
                },
                vec![img.clone()],
            )
        };
        let r = ReferenceRecord {
            reference_id: "r".into(),
            description: "x".into(),
            candidates: ["a".into(), "b".into()],
            target: "a".into(),
            annotation: Annotation::Blind,
            split: Split::Train,
        };
        let err = GroundingDataset::new(vec![obj("a"), obj("b")], vec![r.clone(), r], None, None);
        assert!(matches!(err, Err(Error::Schema { .. })));
    }
}
