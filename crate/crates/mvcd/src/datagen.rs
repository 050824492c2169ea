//! Deterministic synthetic-shapes detection data and the incremental
//! class-split protocols (addition at once, sequential addition, disjoint
//! groups). Images are rendered as raw 3×64×64 tensors with tight
//! ground-truth boxes, so the micro detector can learn each class in
//! seconds and tests stay byte-reproducible.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::microdet::{Annotation, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::rngutil::{mix_seed, normal_sample};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

/// One renderable class: a shape with a fill color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeClass {
    pub name: String,
    pub kind: ShapeKind,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub classes: Vec<ShapeClass>,
    /// Inclusive [min, max] object count per image.
    #[serde(default = "default_objects_per_image")]
    pub objects_per_image: [usize; 2],
    #[serde(default = "default_noise")]
    pub noise_level: f64,
}

fn default_image_size() -> usize {
    IMAGE_SIZE
}

fn default_objects_per_image() -> [usize; 2] {
    [1, 3]
}

fn default_noise() -> f64 {
    0.02
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::invalid("num_images must be positive"));
        }
        if self.image_size != IMAGE_SIZE {
            return Err(Error::invalid(format!(
                "only image_size {IMAGE_SIZE} is supported"
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("class list must be nonempty"));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(&c.name) {
                return Err(Error::invalid(format!("duplicate class name {}", c.name)));
            }
        }
        if self.objects_per_image[0] < 1 || self.objects_per_image[0] > self.objects_per_image[1] {
            return Err(Error::invalid("objects_per_image range invalid"));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(Error::invalid("noise_level must be ≥ 0"));
        }
        Ok(())
    }
}

/// The six default classes: high-contrast shapes, one color each.
pub fn default_classes() -> Vec<ShapeClass> {
    vec![
        ShapeClass { name: "circle".into(), kind: ShapeKind::Circle, color: [0.85, 0.12, 0.12] },
        ShapeClass { name: "square".into(), kind: ShapeKind::Square, color: [0.10, 0.80, 0.15] },
        ShapeClass { name: "triangle".into(), kind: ShapeKind::Triangle, color: [0.15, 0.25, 0.90] },
        ShapeClass { name: "cross".into(), kind: ShapeKind::Cross, color: [0.90, 0.85, 0.10] },
        ShapeClass { name: "ring".into(), kind: ShapeKind::Ring, color: [0.85, 0.10, 0.80] },
        ShapeClass { name: "bar".into(), kind: ShapeKind::Bar, color: [0.10, 0.80, 0.85] },
    ]
}

pub fn default_spec(seed: u64, num_images: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        num_images,
        image_size: IMAGE_SIZE,
        classes: default_classes(),
        objects_per_image: [1, 3],
        noise_level: 0.02,
    }
}


/// In-memory dataset: images, per-image annotations (global class ids
/// indexing `class_names`), and stable image ids that survive views.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub class_names: Vec<String>,
    pub image_ids: Vec<u64>,
    pub images: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

const BACKGROUND: [f64; 3] = [0.05, 0.05, 0.05];
const MIN_RADIUS: f64 = 6.0;
const MAX_RADIUS: f64 = 10.0;
const MAX_PLACEMENT_TRIES: usize = 100;
const MAX_OVERLAP_IOU: f64 = 0.2;

struct PlacedShape {
    class_id: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn shape_bbox(kind: ShapeKind, cx: f64, cy: f64, r: f64) -> BBox {
    match kind {
        ShapeKind::Bar => BBox::new(cx - r, cy - 0.4 * r, cx + r, cy + 0.4 * r),
        _ => BBox::new(cx - r, cy - r, cx + r, cy + r),
    }
}

fn inside_shape(kind: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        // apex up: (0, −r), base corners (±r, +r)
        ShapeKind::Triangle => {
            dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
        }
        ShapeKind::Cross => {
            (dx.abs() <= r && dy.abs() <= r / 3.0) || (dx.abs() <= r / 3.0 && dy.abs() <= r)
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.4 * r,
    }
}

/// Render one image deterministically from its derived seed.
fn render_image(
    spec: &SyntheticSpec,
    index: usize,
) -> Result<(Tensor, Vec<Annotation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let size = spec.image_size;
    let n_classes = spec.classes.len();
    let count = rng.gen_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);

    let mut placed: Vec<PlacedShape> = Vec::new();
    for obj in 0..count {
        // the first object cycles through classes so every class shows up
        // in a fixed fraction of images
        let class_id = if obj == 0 {
            index % n_classes
        } else {
            rng.gen_range(0..n_classes)
        };
        let kind = spec.classes[class_id].kind;
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = rng.gen_range(MIN_RADIUS..=MAX_RADIUS);
            let cx = rng.gen_range(r + 1.0..size as f64 - r - 1.0);
            let cy = rng.gen_range(r + 1.0..size as f64 - r - 1.0);
            let bbox = shape_bbox(kind, cx, cy, r);
            let clashes = placed.iter().any(|p| {
                let other = shape_bbox(spec.classes[p.class_id].kind, p.cx, p.cy, p.r);
                iou(&bbox, &other).map(|v| v > MAX_OVERLAP_IOU).unwrap_or(true)
            });
            if !clashes {
                placed.push(PlacedShape { class_id, cx, cy, r });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place object {obj} in image {index} after {MAX_PLACEMENT_TRIES} tries"
            )));
        }
    }

    let mut image = Tensor::from_fn(vec![IMAGE_CHANNELS, size, size], |i| {
        BACKGROUND[i / (size * size)]
    });
    for p in &placed {
        let class = &spec.classes[p.class_id];
        let bbox = shape_bbox(class.kind, p.cx, p.cy, p.r);
        let (px1, py1) = (bbox.x1.floor().max(0.0) as usize, bbox.y1.floor().max(0.0) as usize);
        let (px2, py2) = (
            (bbox.x2.ceil() as usize).min(size - 1),
            (bbox.y2.ceil() as usize).min(size - 1),
        );
        for py in py1..=py2 {
            for px in px1..=px2 {
                let (dx, dy) = (px as f64 + 0.5 - p.cx, py as f64 + 0.5 - p.cy);
                if inside_shape(class.kind, dx, dy, p.r) {
                    for ch in 0..IMAGE_CHANNELS {
                        let idx = image.idx3(ch, py, px);
                        image.data_mut()[idx] = class.color[ch];
                    }
                }
            }
        }
    }
    if spec.noise_level > 0.0 {
        for v in image.data_mut() {
            *v = (*v + normal_sample(&mut rng, spec.noise_level)).clamp(0.0, 1.0);
        }
    }

    let annotations = placed
        .iter()
        .map(|p| Annotation {
            class_id: p.class_id,
            bbox: shape_bbox(spec.classes[p.class_id].kind, p.cx, p.cy, p.r),
        })
        .collect();
    Ok((image, annotations))
}

/// Generate the dataset described by `spec`. Pure function of the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.num_images);
    let mut annotations = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let (img, anns) = render_image(spec, i)?;
        images.push(img);
        annotations.push(anns);
    }
    Ok(Dataset {
        spec: spec.clone(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        image_ids: (0..spec.num_images as u64).collect(),
        images,
        annotations,
    })
}

// ---------------------------------------------------------------------
// split protocols

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    AtOnce,
    Sequential,
    Groups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub mode: SplitMode,
    pub old_classes: Vec<String>,
    pub increments: Vec<Vec<String>>,
}

impl SplitProtocol {
    pub fn validate(&self, class_names: &[String]) -> Result<()> {
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        for name in self.old_classes.iter().chain(self.increments.iter().flatten()) {
            if !class_names.contains(name) {
                return Err(Error::invalid(format!("unknown class {name} in protocol")));
            }
            if !seen.insert(name) {
                return Err(Error::invalid(format!(
                    "class {name} appears twice across old classes and increments"
                )));
            }
        }
        if self.old_classes.is_empty() || self.increments.iter().any(|inc| inc.is_empty()) {
            return Err(Error::invalid("old classes and every increment must be nonempty"));
        }
        Ok(())
    }

    /// Classes visible after finishing `step` (old + increments 0..=step).
    pub fn seen_through(&self, step: usize) -> Vec<String> {
        let mut out = self.old_classes.clone();
        for inc in &self.increments[..=step] {
            out.extend(inc.iter().cloned());
        }
        out
    }
}

fn ids_of(dataset: &Dataset, names: &[String]) -> Result<BTreeSet<usize>> {
    names
        .iter()
        .map(|n| {
            dataset
                .class_id(n)
                .ok_or_else(|| Error::invalid(format!("class {n} not in dataset")))
        })
        .collect()
}

fn view(
    dataset: &Dataset,
    keep_image: impl Fn(&[Annotation]) -> bool,
    visible: &BTreeSet<usize>,
) -> Dataset {
    let mut out = Dataset {
        spec: dataset.spec.clone(),
        class_names: dataset.class_names.clone(),
        image_ids: Vec::new(),
        images: Vec::new(),
        annotations: Vec::new(),
    };
    for i in 0..dataset.len() {
        if keep_image(&dataset.annotations[i]) {
            out.image_ids.push(dataset.image_ids[i]);
            out.images.push(dataset.images[i].clone());
            out.annotations.push(
                dataset.annotations[i]
                    .iter()
                    .filter(|a| visible.contains(&a.class_id))
                    .cloned()
                    .collect(),
            );
        }
    }
    out
}

/// Training view for the initial old-class model: images containing old
/// classes (in groups mode: containing nothing else), with only old-class
/// annotations visible.
pub fn old_train_view(dataset: &Dataset, protocol: &SplitProtocol) -> Result<Dataset> {
    protocol.validate(&dataset.class_names)?;
    let old = ids_of(dataset, &protocol.old_classes)?;
    let keep: Box<dyn Fn(&[Annotation]) -> bool> = match protocol.mode {
        SplitMode::Groups => {
            let old = old.clone();
            Box::new(move |anns: &[Annotation]| {
                !anns.is_empty() && anns.iter().all(|a| old.contains(&a.class_id))
            })
        }
        _ => {
            let old = old.clone();
            Box::new(move |anns: &[Annotation]| anns.iter().any(|a| old.contains(&a.class_id)))
        }
    };
    Ok(view(dataset, keep, &old))
}

/// Train/test views for incremental step `step`.
///
/// Train: at-once/sequential keep images containing the step's new
/// classes and expose only those annotations (old-class labels are
/// masked); groups mode keeps images whose objects all belong to the
/// step's group. Test: every image containing classes seen so far, with
/// full annotations for those classes.
pub fn apply_split(
    dataset: &Dataset,
    protocol: &SplitProtocol,
    step: usize,
) -> Result<(Dataset, Dataset)> {
    protocol.validate(&dataset.class_names)?;
    if step >= protocol.increments.len() {
        return Err(Error::invalid(format!(
            "step {step} out of range ({} increments)",
            protocol.increments.len()
        )));
    }
    let new = ids_of(dataset, &protocol.increments[step])?;
    let train = match protocol.mode {
        SplitMode::Groups => {
            let new2 = new.clone();
            view(
                dataset,
                move |anns| !anns.is_empty() && anns.iter().all(|a| new2.contains(&a.class_id)),
                &new,
            )
        }
        _ => {
            let new2 = new.clone();
            view(
                dataset,
                move |anns| anns.iter().any(|a| new2.contains(&a.class_id)),
                &new,
            )
        }
    };
    let seen = ids_of(dataset, &protocol.seen_through(step))?;
    let seen2 = seen.clone();
    let test = view(
        dataset,
        move |anns| anns.iter().any(|a| seen2.contains(&a.class_id)),
        &seen,
    );
    Ok((train, test))
}

// ---------------------------------------------------------------------
// dataset files: manifest.json + images.bin + annotations.json

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImage {
    id: u64,
    tensor_file_offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: SyntheticSpec,
    class_names: Vec<String>,
    images: Vec<ManifestImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image_id: u64,
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Write `manifest.json`, `images.bin` (little-endian f64, C×H×W per
/// image), and `annotations.json` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join(IMAGES_FILE))?);
    let mut manifest = Manifest {
        spec: dataset.spec.clone(),
        class_names: dataset.class_names.clone(),
        images: Vec::with_capacity(dataset.len()),
    };
    let mut offset = 0u64;
    for (i, img) in dataset.images.iter().enumerate() {
        manifest.images.push(ManifestImage {
            id: dataset.image_ids[i],
            tensor_file_offset: offset,
        });
        for v in img.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += (img.numel() * 8) as u64;
    }
    blob.flush()?;

    let mut anns = Vec::new();
    for (i, per_image) in dataset.annotations.iter().enumerate() {
        for a in per_image {
            anns.push(AnnotationRecord {
                image_id: dataset.image_ids[i],
                class: dataset.class_names[a.class_id].clone(),
                bbox: a.bbox.to_array(),
            });
        }
    }
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest"),
    )?;
    std::fs::write(
        dir.join(ANNOTATIONS_FILE),
        serde_json::to_string(&anns).expect("annotations"),
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::format(format!("manifest: {e}")))?;
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(IMAGES_FILE))?.read_to_end(&mut blob)?;
    let size = manifest.spec.image_size;
    let per_image = IMAGE_CHANNELS * size * size;
    let mut images = Vec::with_capacity(manifest.images.len());
    for m in &manifest.images {
        let start = m.tensor_file_offset as usize;
        let end = start + per_image * 8;
        if end > blob.len() {
            return Err(Error::format("images.bin shorter than manifest implies"));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(Tensor::new(vec![IMAGE_CHANNELS, size, size], data)?);
    }
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(ANNOTATIONS_FILE))?)
            .map_err(|e| Error::format(format!("annotations: {e}")))?;
    let mut annotations: Vec<Vec<Annotation>> = vec![Vec::new(); manifest.images.len()];
    let index_of: std::collections::BTreeMap<u64, usize> = manifest
        .images
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id, i))
        .collect();
    for r in records {
        let idx = *index_of
            .get(&r.image_id)
            .ok_or_else(|| Error::format(format!("annotation for unknown image {}", r.image_id)))?;
        let class_id = manifest
            .class_names
            .iter()
            .position(|n| *n == r.class)
            .ok_or_else(|| Error::format(format!("annotation with unknown class {}", r.class)))?;
        annotations[idx].push(Annotation {
            class_id,
            bbox: BBox::from_array(r.bbox),
        });
    }
    Ok(Dataset {
        class_names: manifest.class_names,
        image_ids: manifest.images.iter().map(|m| m.id).collect(),
        spec: manifest.spec,
        images,
        annotations,
    })
}
