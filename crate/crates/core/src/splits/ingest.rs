use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::splits::{AnnotatedImage, Partition};

/// The twenty Pascal VOC classes; a class id is its index here.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u32,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

/// Reads a COCO-style detection annotation file. Images without any
/// annotation are kept with an empty category set.
pub fn load_coco(json: &Path, image_root: &Path, partition: Partition) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(json)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Annotation {
        path: json.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut cats: BTreeMap<u64, BTreeSet<u32>> = file.images.iter().map(|i| (i.id, BTreeSet::new())).collect();
    for a in &file.annotations {
        cats.get_mut(&a.image_id)
            .ok_or_else(|| Error::Annotation {
                path: json.to_path_buf(),
                reason: format!("annotation refers to unknown image {}", a.image_id),
            })?
            .insert(a.category_id);
    }
    let mut out: Vec<AnnotatedImage> = file
        .images
        .into_iter()
        .map(|i| AnnotatedImage {
            id: i.id.to_string(),
            path: image_root.join(&i.file_name),
            categories: cats.remove(&i.id).unwrap_or_default(),
            partition,
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn voc_xml(path: &Path) -> Result<(String, BTreeSet<u32>)> {
    let bad = |reason: String| Error::Annotation {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| bad(e.to_string()))?;
    let root = doc.root_element();
    let filename = root
        .children()
        .find(|n| n.has_tag_name("filename"))
        .and_then(|n| n.text())
        .ok_or_else(|| bad("missing <filename>".into()))?
        .trim()
        .to_string();
    let mut cats = BTreeSet::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = obj
            .children()
            .find(|n| n.has_tag_name("name"))
            .and_then(|n| n.text())
            .ok_or_else(|| bad("object without <name>".into()))?
            .trim();
        let id = VOC_CLASSES
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| bad(format!("unknown class `{name}`")))?;
        cats.insert(id as u32);
    }
    Ok((filename, cats))
}

/// Reads a VOC-layout dataset: ids from `ImageSets/Main/<set>.txt`, objects
/// from `Annotations/<id>.xml`, pixels from `JPEGImages/`.
pub fn load_voc(root: &Path, image_set: &str, partition: Partition) -> Result<Vec<AnnotatedImage>> {
    let list = root.join("ImageSets/Main").join(format!("{image_set}.txt"));
    let ids = std::fs::read_to_string(&list)?;
    let mut out = Vec::new();
    for id in ids.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (filename, categories) = voc_xml(&root.join("Annotations").join(format!("{id}.xml")))?;
        out.push(AnnotatedImage {
            id: id.to_string(),
            path: root.join("JPEGImages").join(filename),
            categories,
            partition,
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Reads `root/{train,test}/<class>/<image>`; class ids follow the sorted
/// class-directory names across both partitions.
pub fn load_folder(root: &Path) -> Result<(Vec<AnnotatedImage>, Vec<String>)> {
    let mut names = BTreeSet::new();
    for part in ["train", "test"] {
        let dir = root.join(part);
        if !dir.is_dir() {
            return Err(Error::Annotation {
                path: dir,
                reason: "missing partition directory".into(),
            });
        }
        for e in std::fs::read_dir(&dir)? {
            let e = e?;
            if e.file_type()?.is_dir() {
                names.insert(e.file_name().to_string_lossy().into_owned());
            }
        }
    }
    let names: Vec<String> = names.into_iter().collect();
    let mut out = Vec::new();
    for (part, partition) in [("train", Partition::Train), ("test", Partition::Test)] {
        for (cid, name) in names.iter().enumerate() {
            let dir = root.join(part).join(name);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            for f in files {
                let stem = f.file_stem().unwrap_or_default().to_string_lossy();
                out.push(AnnotatedImage {
                    id: format!("{part}/{name}/{stem}"),
                    path: f,
                    categories: BTreeSet::from([cid as u32]),
                    partition,
                });
            }
        }
    }
    Ok((out, names))
}

/// Annotation list in this crate's own JSON form (as written by the
/// synthetic generator).
pub fn load_annotation_list(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(path)?;
    let mut list: Vec<AnnotatedImage> = serde_json::from_str(&text).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // Relative image paths are relative to the list's directory.
    let base = path.parent().unwrap_or(Path::new("."));
    for a in &mut list {
        if a.path.is_relative() {
            a.path = base.join(&a.path);
        }
    }
    Ok(list)
}

pub fn save_annotation_list(path: &Path, list: &[AnnotatedImage]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(list)?)?;
    Ok(())
}
