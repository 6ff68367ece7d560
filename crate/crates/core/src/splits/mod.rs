//! Normal/abnormal benchmark construction at the object level.

mod ingest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::Label;

pub use ingest::{load_annotation_list, load_coco, load_folder, load_voc, save_annotation_list, VOC_CLASSES};
pub use synthetic::{
    generate_synthetic, save_scenes, synthetic_dataset, Placement, PlacedGlyph, SceneLayout, SyntheticScene,
    SyntheticSceneSpec, GLYPH_NAMES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub path: PathBuf,
    /// Native category ids of every object present; may be empty.
    pub categories: BTreeSet<u32>,
    pub partition: Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MembershipRule {
    /// One label per image; normal iff that label is a normal class.
    ImageClass,
    /// Normal iff the image contains at least one normal-category object.
    ObjectPresence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    UniClass,
    MultiClassPartition,
    AllVsOne,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::UniClass => "uni-class",
            Setting::MultiClassPartition => "multi-class",
            Setting::AllVsOne => "all-vs-one",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub dataset: String,
    pub rule: MembershipRule,
    pub setting: Setting,
    pub normal: BTreeSet<u32>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn uni_class(dataset: &str, rule: MembershipRule, class: u32) -> Self {
        Self {
            dataset: dataset.into(),
            rule,
            setting: Setting::UniClass,
            normal: BTreeSet::from([class]),
            seed: 0,
        }
    }

    pub fn multi_class(dataset: &str, rule: MembershipRule, normal: impl IntoIterator<Item = u32>) -> Self {
        Self {
            dataset: dataset.into(),
            rule,
            setting: Setting::MultiClassPartition,
            normal: normal.into_iter().collect(),
            seed: 0,
        }
    }

    /// A seeded random half of `classes` as the normal set.
    pub fn half_vs_half(dataset: &str, rule: MembershipRule, classes: &[u32], seed: u64) -> Self {
        let mut c = classes.to_vec();
        c.sort_unstable();
        c.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut s = Self::multi_class(dataset, rule, c[..c.len() / 2].iter().copied());
        s.seed = seed;
        s
    }

    /// Every class but `abnormal` is normal.
    pub fn all_vs_one(dataset: &str, rule: MembershipRule, classes: &[u32], abnormal: u32) -> Self {
        Self {
            dataset: dataset.into(),
            rule,
            setting: Setting::AllVsOne,
            normal: classes.iter().copied().filter(|&c| c != abnormal).collect(),
            seed: 0,
        }
    }

    /// Short identifier of the normal set, e.g. `01234`.
    pub fn normal_id(&self) -> String {
        let sep = if self.normal.iter().all(|&c| c < 10) { "" } else { "-" };
        self.normal
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(sep)
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Split {
            spec: format!("{} {} normal={{{}}}", self.dataset, self.setting, self.normal_id()),
            reason: reason.into(),
        }
    }

    pub fn validate(&self, taxonomy: &BTreeSet<u32>) -> Result<()> {
        if self.normal.is_empty() {
            return Err(self.err("normal set is empty"));
        }
        if let Some(c) = self.normal.iter().find(|c| !taxonomy.contains(c)) {
            return Err(self.err(format!("normal category {c} does not occur in the data")));
        }
        if self.normal.len() >= taxonomy.len() {
            return Err(self.err("normal set must be a strict subset of the categories"));
        }
        match self.setting {
            Setting::UniClass if self.normal.len() != 1 => {
                Err(self.err("uni-class setting needs exactly one normal class"))
            }
            Setting::AllVsOne if self.normal.len() + 1 != taxonomy.len() => {
                Err(self.err("all-vs-one setting needs every class but one to be normal"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: AnnotatedImage,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub spec: SplitSpec,
    /// Normal training images.
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<LabeledImage>,
    /// Categories absent from one of the partitions; never used as normal.
    pub excluded_categories: Vec<u32>,
}

/// Every category id occurring anywhere in `annotations`.
pub fn taxonomy(annotations: &[AnnotatedImage]) -> BTreeSet<u32> {
    annotations.iter().flat_map(|a| a.categories.iter().copied()).collect()
}

/// Categories occurring in both partitions, and those occurring in only one.
pub fn eligible_classes(annotations: &[AnnotatedImage]) -> (Vec<u32>, Vec<u32>) {
    let of = |p: Partition| -> BTreeSet<u32> {
        annotations
            .iter()
            .filter(|a| a.partition == p)
            .flat_map(|a| a.categories.iter().copied())
            .collect()
    };
    let (train, test) = (of(Partition::Train), of(Partition::Test));
    let eligible = train.intersection(&test).copied().collect();
    let excluded = train.symmetric_difference(&test).copied().collect();
    (eligible, excluded)
}

fn image_class(a: &AnnotatedImage, spec: &SplitSpec) -> Result<u32> {
    match a.categories.len() {
        1 => Ok(*a.categories.iter().next().expect("one element")),
        n => Err(spec.err(format!(
            "image-class rule needs one label per image; `{}` has {n}",
            a.id
        ))),
    }
}

/// Builds the normal-only training set and the labeled test set.
pub fn build_split(annotations: &[AnnotatedImage], spec: &SplitSpec) -> Result<Split> {
    let tax = taxonomy(annotations);
    spec.validate(&tax)?;
    let (_, excluded) = eligible_classes(annotations);
    if let Some(c) = spec.normal.iter().find(|c| excluded.contains(c)) {
        return Err(spec.err(format!("normal category {c} is missing from one partition")));
    }
    let is_normal = |a: &AnnotatedImage| -> Result<bool> {
        Ok(match spec.rule {
            MembershipRule::ImageClass => spec.normal.contains(&image_class(a, spec)?),
            MembershipRule::ObjectPresence => !a.categories.is_disjoint(&spec.normal),
        })
    };
    let mut sorted: Vec<&AnnotatedImage> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for a in sorted {
        if !seen.insert(a.id.as_str()) {
            return Err(spec.err(format!("image id `{}` occurs twice", a.id)));
        }
        let normal = is_normal(a)?;
        match a.partition {
            Partition::Train if normal => train.push(a.clone()),
            Partition::Train => {}
            Partition::Test => test.push(LabeledImage {
                image: a.clone(),
                label: if normal { Label::Normal } else { Label::Abnormal },
            }),
        }
    }
    if train.is_empty() {
        return Err(spec.err("no normal training images"));
    }
    let n_normal = test.iter().filter(|t| t.label == Label::Normal).count();
    if n_normal == 0 || n_normal == test.len() {
        return Err(spec.err("test set lacks one of the two labels"));
    }
    Ok(Split {
        spec: spec.clone(),
        train,
        test,
        excluded_categories: excluded,
    })
}

/// Twice the number of distinct categories in the constructed training set
/// (twice the normal-set size under the image-class rule); 5 when the
/// ablation override is set.
pub fn prototype_count_for(spec: &SplitSpec, annotations: &[AnnotatedImage], ablation: bool) -> Result<usize> {
    if ablation {
        return Ok(5);
    }
    if annotations.is_empty() {
        return Err(spec.err("no annotations"));
    }
    Ok(match spec.rule {
        MembershipRule::ImageClass => 2 * spec.normal.len(),
        MembershipRule::ObjectPresence => {
            let split = build_split(annotations, spec)?;
            2 * taxonomy(&split.train).len()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test: BTreeMap<String, Label>,
    pub excluded_categories: Vec<u32>,
    pub config_hash: String,
}

impl Split {
    pub fn manifest(&self, config_hash: &str) -> SplitManifest {
        SplitManifest {
            spec: self.spec.clone(),
            seed: self.spec.seed,
            train_ids: self.train.iter().map(|a| a.id.clone()).collect(),
            test: self
                .test
                .iter()
                .map(|t| (t.image.id.clone(), t.label))
                .collect(),
            excluded_categories: self.excluded_categories.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn write_manifest(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest(config_hash))?)?;
        Ok(())
    }
}
