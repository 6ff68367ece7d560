use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::PixelNorm;
use crate::defend::DefendConfig;
use crate::encoder::{Pretraining, VitConfig};
use crate::error::{Error, Result};
use crate::mkd::DistillConfig;
use crate::splits::{MembershipRule, Setting, SplitSpec, SyntheticSceneSpec};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "OBJECT_NOVELTY_OUTPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub arch: String,
    /// safetensors file with timm parameter names. Without one the teacher
    /// is pretrained on synthetic glyphs (if enabled) or left random.
    pub checkpoint: Option<PathBuf>,
    pub pretraining: Pretraining,
    pub pixel_norm: PixelNorm,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            arch: "vit_toy".into(),
            checkpoint: None,
            pretraining: Pretraining::SyntheticSupervised,
            pixel_norm: PixelNorm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        scenes: SyntheticSceneSpec,
        train: usize,
        test: usize,
    },
    Coco {
        train_json: PathBuf,
        train_images: PathBuf,
        test_json: PathBuf,
        test_images: PathBuf,
    },
    Voc {
        root: PathBuf,
        #[serde(default = "voc_train")]
        train_set: String,
        #[serde(default = "voc_test")]
        test_set: String,
    },
    /// `root/{train,test}/<class>/<image>`.
    Folder { root: PathBuf },
    /// Annotation list JSON as written by `synth`.
    List { path: PathBuf },
}

fn voc_train() -> String {
    "train".into()
}

fn voc_test() -> String {
    "val".into()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            scenes: SyntheticSceneSpec::default(),
            train: 400,
            test: 200,
        }
    }
}

/// Supervised glyph-classification pretraining of the toy teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub scenes: SyntheticSceneSpec,
    pub images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scenes: SyntheticSceneSpec {
                objects: (1, 4),
                seed: 0x7e7e,
                ..Default::default()
            },
            images: 2000,
            epochs: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DefendToggle {
    Off,
    #[default]
    On,
    /// Run both variants and report them side by side.
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub defend: DefendToggle,
}

/// Which normal sets to evaluate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLoop {
    /// Only the split's configured normal set.
    #[default]
    Configured,
    /// Every eligible class in turn as the single normal class (uni-class)
    /// or as the single abnormal class (all-vs-one).
    AllClasses,
    Classes(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Input side length; images are resized to it.
    pub image_size: usize,
    pub backbone: BackboneSpec,
    pub data: DataSource,
    pub split: SplitSpec,
    pub classes: ClassLoop,
    pub stages: StageToggles,
    pub pretrain: PretrainConfig,
    pub defend: DefendConfig,
    pub distill: DistillConfig,
    /// Number of test images per unit that get a heatmap PNG.
    pub heatmaps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            image_size: 64,
            backbone: BackboneSpec::default(),
            data: DataSource::default(),
            split: SplitSpec::uni_class("synthetic", MembershipRule::ImageClass, 0),
            classes: ClassLoop::Configured,
            stages: StageToggles::default(),
            pretrain: PretrainConfig::default(),
            defend: DefendConfig::default(),
            distill: DistillConfig::default(),
            heatmaps: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// The settings used for the toy transformer on 64-pixel inputs:
    /// narrower head, 32-pixel crops and stage learning rates scaled up.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.defend.head_hidden = 256;
        c.defend.head_out = 64;
        c.defend.crop.resize_to = 32;
        c.defend.batch_size = 16;
        c.defend.backbone_lr = 1e-4;
        c.defend.head_lr = 1e-3;
        c.distill.batch_size = 16;
        c.distill.learning_rate = 1e-3;
        c
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        let mut v = VitConfig::from_arch(&self.backbone.arch)?;
        v.image_size = self.image_size;
        v.validate()?;
        Ok(v)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let v = self.vit_config()?;
        if self.image_size % v.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, v.patch_size
            )));
        }
        self.defend.validate()?;
        if self.defend.trainable_blocks > v.depth {
            return Err(Error::range(format!(
                "cannot unfreeze {} blocks of a depth-{} backbone",
                self.defend.trainable_blocks, v.depth
            )));
        }
        if self.defend.crop.resize_to % v.patch_size != 0 {
            return Err(Error::config(format!(
                "crop size {} not divisible by patch {}",
                self.defend.crop.resize_to, v.patch_size
            )));
        }
        self.distill.validate()?;
        if self.distill.layers > v.depth {
            return Err(Error::range(format!(
                "cannot distill {} layers of a depth-{} backbone",
                self.distill.layers, v.depth
            )));
        }
        if self.split.normal.is_empty() && self.classes == ClassLoop::Configured {
            return Err(Error::config("split has no normal classes"));
        }
        if self.classes != ClassLoop::Configured
            && !matches!(self.split.setting, Setting::UniClass | Setting::AllVsOne)
        {
            return Err(Error::config(
                "class loops apply to uni-class and all-vs-one settings only",
            ));
        }
        if let DataSource::Synthetic { scenes, .. } = &self.data {
            scenes.validate()?;
            if scenes.canvas != self.image_size {
                return Err(Error::config(format!(
                    "synthetic canvas {} differs from image size {}",
                    scenes.canvas, self.image_size
                )));
            }
        }
        if self.backbone.checkpoint.is_none() && self.pretrain.enabled {
            self.pretrain.scenes.validate()?;
            if self.pretrain.scenes.canvas != self.image_size {
                return Err(Error::config("pretraining canvas differs from image size"));
            }
            if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || self.pretrain.images == 0 {
                return Err(Error::config("pretraining needs images, epochs and a batch size"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Output directory, resolved against the output-root variable when
    /// relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}
