//! Procedural stand-in for a multi-view referring-expression corpus.
//!
//! Objects are flat glyphs (shape × color × size × part) rendered from `J`
//! deterministic viewpoints. Each reference pairs a target with a same-shape
//! distractor and names every attribute that tells them apart; visual
//! references always mention the target color, blind ones never do.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Annotation, Attributes, GroundingDataset, ObjectRecord, ReferenceRecord, Split, ViewImage, Vocabulary};
use crate::error::{Error, Result};

pub const SHAPES: [&str; 5] = ["square", "circle", "triangle", "cross", "diamond"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const PARTS: [&str; 4] = ["plain", "handle", "stripe", "dot"];

const RGB: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 210, 40],
    [150, 60, 190],
    [240, 140, 30],
];
const BACKGROUND: [u8; 3] = [16, 16, 16];
const PART_RGB: [u8; 3] = [240, 240, 240];
const SCALE: [f64; 2] = [0.45, 0.78];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_objects: usize,
    pub n_references: usize,
    pub image_size: usize,
    /// Views rendered per object.
    #[serde(alias = "J")]
    pub views: usize,
    pub visual_fraction: f64,
    /// Tokenizer vocabulary recorded with the dataset; empty selects the
    /// generator's own lexicon.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 2 {
            return Err(Error::Config(format!(
                "n_objects must be at least 2, got {}",
                self.n_objects
            )));
        }
        let capacity = SHAPES.len() * COLORS.len() * SIZES.len() * PARTS.len();
        if self.n_objects > capacity {
            return Err(Error::Config(format!(
                "n_objects {} exceeds the {capacity} distinct glyphs available",
                self.n_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.visual_fraction) {
            return Err(Error::Config(format!(
                "visual_fraction must lie in [0, 1], got {}",
                self.visual_fraction
            )));
        }
        if self.image_size == 0 || self.views == 0 {
            return Err(Error::Config("image_size and views must be positive".into()));
        }
        Ok(())
    }

    fn lexicon() -> Vec<String> {
        ["the", "a", "with"]
            .into_iter()
            .chain(SIZES)
            .chain(COLORS)
            .chain(SHAPES)
            .chain(PARTS)
            .map(str::to_owned)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Glyph {
    shape: usize,
    color: usize,
    size: usize,
    part: usize,
}

impl Glyph {
    fn attributes(&self) -> Attributes {
        BTreeMap::from([
            ("shape".to_owned(), SHAPES[self.shape].to_owned()),
            ("color".to_owned(), COLORS[self.color].to_owned()),
            ("size".to_owned(), SIZES[self.size].to_owned()),
            ("part".to_owned(), PARTS[self.part].to_owned()),
        ])
    }

    fn covers(&self, u: f64, v: f64) -> Option<[u8; 3]> {
        let s = SCALE[self.size];
        let body = match SHAPES[self.shape] {
            "square" => u.abs() <= s && v.abs() <= s,
            "circle" => u * u + v * v <= s * s,
            "triangle" => v <= s && v >= -s && u.abs() <= (v + s) / 2.0,
            "cross" => (u.abs() <= s && v.abs() <= s / 3.0) || (v.abs() <= s && u.abs() <= s / 3.0),
            "diamond" => u.abs() + v.abs() <= s,
            _ => unreachable!(),
        };
        let part = match PARTS[self.part] {
            "handle" => u > s && u <= s + 0.22 && v.abs() <= 0.14,
            "stripe" => body && v.abs() <= 0.2 * s,
            "dot" => u * u + v * v <= (0.28 * s) * (0.28 * s),
            _ => false,
        };
        if part {
            Some(PART_RGB)
        } else if body {
            Some(RGB[self.color])
        } else {
            None
        }
    }

    /// Renders viewpoint `j` of `views`: a rotation, scale, and offset that
    /// vary smoothly with the view index.
    fn render(&self, size: usize, j: usize, views: usize) -> ViewImage {
        let phase = 2.0 * PI * j as f64 / views as f64;
        let theta = 0.5 * PI * j as f64 / views as f64;
        let scale = 1.0 - 0.08 * (j % 2) as f64;
        let (dx, dy) = (0.08 * phase.sin(), 0.08 * phase.cos());
        let (sin, cos) = theta.sin_cos();
        let mut img = ViewImage::filled(size, size, BACKGROUND).expect("positive size");
        for y in 0..size {
            for x in 0..size {
                let px = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0 - dx;
                let py = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0 - dy;
                let u = (cos * px + sin * py) / scale;
                let v = (-sin * px + cos * py) / scale;
                if let Some(rgb) = self.covers(u, v) {
                    img.put(x, y, rgb);
                }
            }
        }
        img
    }
}

/// Maps attribute words occurring in `description` to their attribute name.
pub fn mentioned_attributes(description: &str) -> Attributes {
    let mut out = Attributes::new();
    for word in description.split_whitespace().map(str::to_lowercase) {
        let key = if SHAPES.contains(&word.as_str()) {
            "shape"
        } else if COLORS.contains(&word.as_str()) {
            "color"
        } else if SIZES.contains(&word.as_str()) {
            "size"
        } else if PARTS.contains(&word.as_str()) {
            "part"
        } else {
            continue;
        };
        out.insert(key.to_owned(), word);
    }
    out
}

fn split_for(reference_id: &str) -> Split {
    let digest = Sha256::digest(reference_id.as_bytes());
    match (u32::from(digest[0]) * 100) / 256 {
        0..=69 => Split::Train,
        70..=84 => Split::Validation,
        _ => Split::Test,
    }
}

fn assign_glyphs(n_objects: usize, rng: &mut ChaCha8Rng) -> Vec<Glyph> {
    let n_groups = (n_objects / 2).clamp(1, SHAPES.len());
    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    shapes.shuffle(rng);
    let mut combos: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_groups);
    let mut offsets: Vec<Vec<usize>> = Vec::with_capacity(n_groups);
    let mut color_perms: Vec<Vec<usize>> = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let mut c: Vec<(usize, usize)> = (0..SIZES.len())
            .flat_map(|s| (0..PARTS.len()).map(move |p| (s, p)))
            .collect();
        c.shuffle(rng);
        combos.push(c);
        offsets.push(
            (0..SIZES.len() * PARTS.len())
                .map(|_| rng.random_range(0..COLORS.len()))
                .collect(),
        );
        let mut perm: Vec<usize> = (0..COLORS.len()).collect();
        perm.shuffle(rng);
        color_perms.push(perm);
    }
    // Objects of a group first take distinct (size, part) slots, so any two
    // of them can be told apart without mentioning color; later rounds reuse
    // a slot with a different color.
    (0..n_objects)
        .map(|i| {
            let g = i % n_groups;
            let k = i / n_groups;
            let slot = k % combos[g].len();
            let round = k / combos[g].len();
            let (size, part) = combos[g][slot];
            let color = color_perms[g][(round + offsets[g][slot]) % COLORS.len()];
            Glyph {
                shape: shapes[g],
                color,
                size,
                part,
            }
        })
        .collect()
}

/// Generates a dataset that is a pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<GroundingDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let glyphs = assign_glyphs(spec.n_objects, &mut rng);
    let ids: Vec<String> = (0..glyphs.len()).map(|i| format!("obj{i:04}")).collect();

    let objects = glyphs
        .iter()
        .zip(&ids)
        .map(|(g, id)| {
            let paths = (0..spec.views)
                .map(|j| format!("{}/{id}_{j}.ppm", super::VIEWS_DIR))
                .collect();
            let views = (0..spec.views)
                .map(|j| g.render(spec.image_size, j, spec.views))
                .collect();
            let record = ObjectRecord {
                object_id: id.clone(),
                category: SHAPES[g.shape].to_owned(),
                views: paths,
            };
            (record, views)
        })
        .collect();

    let n_visual = (spec.visual_fraction * spec.n_references as f64).round() as usize;
    let mut visual_flags: Vec<bool> = (0..spec.n_references).map(|i| i < n_visual).collect();
    visual_flags.shuffle(&mut rng);

    let mut references = Vec::with_capacity(spec.n_references);
    for (i, &visual) in visual_flags.iter().enumerate() {
        let t = rng.random_range(0..glyphs.len());
        let target = glyphs[t];
        let mates: Vec<usize> = (0..glyphs.len())
            .filter(|&o| o != t && glyphs[o].shape == target.shape)
            .filter(|&o| {
                let g = glyphs[o];
                visual || g.size != target.size || g.part != target.part
            })
            .collect();
        // Every group holds at least two objects with distinct (size, part).
        let d = *mates
            .get(rng.random_range(0..mates.len().max(1)))
            .ok_or_else(|| Error::Config("no valid distractor for target".into()))?;
        let distractor = glyphs[d];

        let mut words = vec![if rng.random_bool(0.5) { "the" } else { "a" }];
        if distractor.size != target.size {
            words.push(SIZES[target.size]);
        }
        if visual {
            words.push(COLORS[target.color]);
        }
        let part_differs = distractor.part != target.part;
        if part_differs && PARTS[target.part] == "plain" {
            words.push("plain");
        }
        words.push(SHAPES[target.shape]);
        if part_differs && PARTS[target.part] != "plain" {
            words.extend(["with", "a", PARTS[target.part]]);
        }

        let reference_id = format!("ref{i:05}");
        let mut candidates = [ids[t].clone(), ids[d].clone()];
        if rng.random_bool(0.5) {
            candidates.swap(0, 1);
        }
        references.push(ReferenceRecord {
            split: split_for(&reference_id),
            reference_id,
            description: words.join(" "),
            candidates,
            target: ids[t].clone(),
            annotation: if visual { Annotation::Visual } else { Annotation::Blind },
        });
    }

    let vocabulary = if spec.vocabulary.is_empty() {
        Vocabulary::new(SynthSpec::lexicon())?
    } else {
        Vocabulary::new(&spec.vocabulary)?
    };
    let truth = glyphs
        .iter()
        .zip(&ids)
        .map(|(g, id)| (id.clone(), g.attributes()))
        .collect();
    GroundingDataset::new(objects, references, Some(vocabulary), Some(truth))
}
