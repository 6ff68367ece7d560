//! Experiment orchestration: split → optional dense tuning → distillation →
//! scoring → report, with per-stage markers so an interrupted run resumes at
//! the first unfinished stage.

mod config;
mod pretrain;
mod table;

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image, to_batch, Image};
use crate::defend::{load_tuned_backbone, DefendTrainer};
use crate::encoder::BackboneHandle;
use crate::error::{Error, Result};
use crate::mkd::{student_forward_cost, stream_seed, MkdTrainer, StudentModel};
use crate::scoring::{
    read_scores_csv, score_batch, write_scores_csv, EvalReport, NoveltyRecord,
};
use crate::splits::{
    build_split, eligible_classes, load_annotation_list, load_coco, load_folder, load_voc, prototype_count_for,
    synthetic_dataset, taxonomy, AnnotatedImage, Partition, Setting, Split, SplitSpec,
};

pub use config::{
    BackboneSpec, ClassLoop, DataSource, DefendToggle, PretrainConfig, RunConfig, StageToggles, OUTPUT_ROOT_ENV,
};
pub use pretrain::{pretrain_teacher, PretrainEpoch};
pub use table::{report_per_class, PerClassReport, ResultRow, ResultTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Split,
    Defend,
    Distill,
    Score,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Split => "split",
            Stage::Defend => "defend",
            Stage::Distill => "distill",
            Stage::Score => "score",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Mkd,
    MkdDefend,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Mkd => "MKD",
            Method::MkdDefend => "MKD+DEFEND",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Method::Mkd => "mkd",
            Method::MkdDefend => "mkd-defend",
        }
    }

    pub fn for_toggle(t: DefendToggle) -> Vec<Method> {
        match t {
            DefendToggle::Off => vec![Method::Mkd],
            DefendToggle::On => vec![Method::MkdDefend],
            DefendToggle::Both => vec![Method::Mkd, Method::MkdDefend],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop (as if interrupted) once this stage has completed for every unit.
    pub stop_after: Option<Stage>,
}

#[derive(Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    config_hash: String,
}

fn marker_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.done", stage.name()))
}

fn stage_done(dir: &Path, stage: Stage, hash: &str) -> Result<bool> {
    let p = marker_path(dir, stage);
    if !p.exists() {
        return Ok(false);
    }
    let m: Marker = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
    if m.config_hash != hash {
        return Err(Error::Stage {
            stage: stage.name().into(),
            source: Box::new(Error::config(format!(
                "{} was produced by config {}, current config is {hash}",
                dir.display(),
                m.config_hash
            ))),
        });
    }
    Ok(true)
}

fn mark_done(dir: &Path, stage: Stage, hash: &str) -> Result<()> {
    let m = Marker {
        stage,
        config_hash: hash.to_string(),
    };
    std::fs::write(marker_path(dir, stage), serde_json::to_string(&m)?)?;
    Ok(())
}

/// Annotations plus the pixels of in-memory (synthetic) images.
pub struct Dataset {
    pub annotations: Vec<AnnotatedImage>,
    cache: HashMap<String, Image>,
    size: usize,
    norm: crate::dataset::PixelNorm,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let norm = cfg.backbone.pixel_norm;
        let mut cache = HashMap::new();
        let annotations = match &cfg.data {
            DataSource::Synthetic { scenes, train, test } => {
                let all = synthetic_dataset(scenes, *train, *test)?;
                let mut anns = Vec::with_capacity(all.len());
                for s in all {
                    cache.insert(s.annotation.id.clone(), s.image);
                    anns.push(s.annotation);
                }
                anns
            }
            DataSource::Coco {
                train_json,
                train_images,
                test_json,
                test_images,
            } => {
                let mut a = load_coco(train_json, train_images, Partition::Train)?;
                a.extend(load_coco(test_json, test_images, Partition::Test)?);
                disambiguate(a)
            }
            DataSource::Voc {
                root,
                train_set,
                test_set,
            } => {
                let mut a = load_voc(root, train_set, Partition::Train)?;
                a.extend(load_voc(root, test_set, Partition::Test)?);
                disambiguate(a)
            }
            DataSource::Folder { root } => load_folder(root)?.0,
            DataSource::List { path } => load_annotation_list(path)?,
        };
        Ok(Self {
            annotations,
            cache,
            size: cfg.image_size,
            norm,
        })
    }

    pub fn image(&self, a: &AnnotatedImage) -> Result<Image> {
        match self.cache.get(&a.id) {
            Some(img) => Ok(img.clone()),
            None => load_image(&a.path, self.size, &self.norm),
        }
    }

    pub fn images(&self, list: &[AnnotatedImage]) -> Result<Vec<Image>> {
        list.iter().map(|a| self.image(a)).collect()
    }
}

/// Prefixes ids with their partition when the two partitions share ids.
fn disambiguate(mut a: Vec<AnnotatedImage>) -> Vec<AnnotatedImage> {
    let mut seen = std::collections::BTreeSet::new();
    let clash = a.iter().any(|x| !seen.insert(x.id.clone()));
    if clash {
        for x in &mut a {
            let p = match x.partition {
                Partition::Train => "train",
                Partition::Test => "test",
            };
            x.id = format!("{p}/{}", x.id);
        }
    }
    a
}

/// Everything shared by the stages of one run.
pub struct RunContext {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub device: Device,
    pub data: Dataset,
    teacher: Option<BackboneHandle>,
}

fn csv_line(w: &mut impl std::io::Write, fields: &[String]) -> Result<()> {
    writeln!(w, "{}", fields.join(","))?;
    Ok(())
}

impl RunContext {
    /// Validates the config, creates the output directory and writes the
    /// config (with its hash) there.
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let out = cfg.resolved_output_dir();
        std::fs::create_dir_all(&out)?;
        std::fs::write(
            out.join("config.toml"),
            format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml()?),
        )?;
        let data = Dataset::load(&cfg)?;
        Ok(Self {
            cfg,
            hash,
            out,
            device: Device::Cpu,
            data,
            teacher: None,
        })
    }

    /// The pretrained (not yet tuned) teacher backbone.
    pub fn base_teacher(&mut self) -> Result<BackboneHandle> {
        if let Some(t) = &self.teacher {
            return t.deep_clone();
        }
        let t = self.load_base_teacher().map_err(|e| e.in_stage(Stage::Pretrain.name()))?;
        self.teacher = Some(t.deep_clone()?);
        Ok(t)
    }

    fn load_base_teacher(&self) -> Result<BackboneHandle> {
        let vit = self.cfg.vit_config()?;
        let arch = &self.cfg.backbone.arch;
        if let Some(ckpt) = &self.cfg.backbone.checkpoint {
            return BackboneHandle::from_checkpoint(arch, vit, ckpt, self.cfg.backbone.pretraining, &self.device);
        }
        if !self.cfg.pretrain.enabled {
            log::warn!("no checkpoint and pretraining disabled: the teacher keeps random weights");
            return BackboneHandle::random(arch, vit, stream_seed(self.cfg.seed, 10, 0), &self.device);
        }
        let dir = self.out.join("teacher");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("pretrained.safetensors");
        if stage_done(&dir, Stage::Pretrain, &self.hash)? {
            let mut b = BackboneHandle::random(arch, vit, 0, &self.device)?;
            b.load_weights(&path)?;
            b.set_pretraining(crate::encoder::Pretraining::SyntheticSupervised);
            return Ok(b);
        }
        let mut curve = std::fs::File::create(dir.join("pretrain_curve.csv"))?;
        csv_line(&mut curve, &["epoch,loss,accuracy,config_hash".into()])?;
        let mut io_err = None;
        let b = pretrain_teacher(arch, vit, &self.cfg.pretrain, self.cfg.pretrain.scenes.seed, &self.device, |e| {
            log::info!("pretrain epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy);
            if let Err(err) = writeln!(curve, "{},{},{},{}", e.epoch, e.loss, e.accuracy, self.hash) {
                io_err = Some(err);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        b.save(&path)?;
        mark_done(&dir, Stage::Pretrain, &self.hash)?;
        Ok(b)
    }

    /// The split specs this run evaluates.
    pub fn units(&self) -> Result<Vec<SplitSpec>> {
        let base = &self.cfg.split;
        let classes: Vec<u32> = match &self.cfg.classes {
            ClassLoop::Configured => return Ok(vec![base.clone()]),
            ClassLoop::AllClasses => eligible_classes(&self.data.annotations).0,
            ClassLoop::Classes(c) => c.clone(),
        };
        let all: Vec<u32> = taxonomy(&self.data.annotations).into_iter().collect();
        Ok(classes
            .into_iter()
            .map(|c| {
                let mut s = match base.setting {
                    Setting::AllVsOne => SplitSpec::all_vs_one(&base.dataset, base.rule, &all, c),
                    _ => SplitSpec::uni_class(&base.dataset, base.rule, c),
                };
                s.seed = base.seed;
                s
            })
            .collect())
    }

    /// Class or split identifier used in tables and directory names.
    pub fn unit_id(&self, spec: &SplitSpec) -> String {
        if spec.setting == Setting::AllVsOne {
            let tax = taxonomy(&self.data.annotations);
            if let Some(c) = tax.iter().find(|c| !spec.normal.contains(c)) {
                return format!("not-{c}");
            }
        }
        spec.normal_id()
    }

    fn unit_dir(&self, spec: &SplitSpec) -> PathBuf {
        self.out.join(format!("{}-{}", spec.setting, self.unit_id(spec)))
    }

    fn method_dir(&self, spec: &SplitSpec, method: Method) -> Result<PathBuf> {
        let d = self.unit_dir(spec).join(method.dir());
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn stage_split(&self, spec: &SplitSpec) -> Result<Split> {
        let split = build_split(&self.data.annotations, spec).map_err(|e| e.in_stage(Stage::Split.name()))?;
        let dir = self.unit_dir(spec);
        std::fs::create_dir_all(&dir)?;
        split.write_manifest(&dir.join("split.json"), &self.hash)?;
        mark_done(&dir, Stage::Split, &self.hash)?;
        Ok(split)
    }

    /// Dense tuning of the teacher on the split's normal training images.
    /// Returns the stage-1 checkpoint path.
    pub fn stage_defend(&mut self, spec: &SplitSpec) -> Result<PathBuf> {
        let dir = self.method_dir(spec, Method::MkdDefend)?;
        let ckpt = dir.join("stage1.safetensors");
        if stage_done(&dir, Stage::Defend, &self.hash)? {
            return Ok(ckpt);
        }
        self.run_defend(spec, &dir, &ckpt).map_err(|e| e.in_stage(Stage::Defend.name()))?;
        mark_done(&dir, Stage::Defend, &self.hash)?;
        Ok(ckpt)
    }

    fn run_defend(&mut self, spec: &SplitSpec, dir: &Path, ckpt: &Path) -> Result<()> {
        let split = self.stage_split(spec)?;
        let k_rule = prototype_count_for(spec, &self.data.annotations, false)?;
        let k = self.cfg.defend.prototype_count(k_rule);
        let train = self.data.images(&split.train)?;
        let teacher = self.base_teacher()?;
        let mut trainer = DefendTrainer::new(teacher, k, self.cfg.defend.clone(), stream_seed(self.cfg.seed, 4, 0))?
            .with_dump_dir(dir);
        log::info!(
            "defend {}: {} images, {k} prototypes, {} epochs",
            self.unit_id(spec),
            train.len(),
            self.cfg.defend.epochs
        );
        let mut curve = std::fs::File::create(dir.join("defend_curve.csv"))?;
        csv_line(&mut curve, &["step,epoch,dense_loss,sinkhorn_residual,config_hash".into()])?;
        for epoch in 0..self.cfg.defend.epochs {
            let mut lines = Vec::new();
            let mean = trainer.run_epoch(&train, epoch, |r| {
                lines.push(format!("{},{epoch},{},{},{}", r.step, r.loss, r.residual, self.hash));
            })?;
            for l in lines {
                csv_line(&mut curve, &[l])?;
            }
            log::info!("defend epoch {epoch}: mean dense loss {mean:.4}");
            trainer.save(&dir.join(format!("defend_epoch{epoch}.safetensors")))?;
        }
        trainer.save(ckpt)?;
        Ok(())
    }

    fn teacher_for(&mut self, spec: &SplitSpec, method: Method) -> Result<BackboneHandle> {
        let teacher = self.base_teacher()?;
        if method == Method::MkdDefend {
            let ckpt = self.stage_defend(spec)?;
            load_tuned_backbone(&teacher, &ckpt)?;
        }
        Ok(teacher)
    }

    fn student_seed(&self) -> u64 {
        self.cfg.distill.student_seed.unwrap_or(stream_seed(self.cfg.seed, 3, 0))
    }

    /// Distillation into a fresh student. Returns the student checkpoint.
    pub fn stage_distill(&mut self, spec: &SplitSpec, method: Method) -> Result<PathBuf> {
        let dir = self.method_dir(spec, method)?;
        let ckpt = dir.join("student.safetensors");
        if stage_done(&dir, Stage::Distill, &self.hash)? {
            return Ok(ckpt);
        }
        let teacher = self.teacher_for(spec, method)?;
        self.run_distill(spec, &teacher, &dir, &ckpt)
            .map_err(|e| e.in_stage(Stage::Distill.name()))?;
        mark_done(&dir, Stage::Distill, &self.hash)?;
        Ok(ckpt)
    }

    fn run_distill(&self, spec: &SplitSpec, teacher: &BackboneHandle, dir: &Path, ckpt: &Path) -> Result<()> {
        let split = self.stage_split(spec)?;
        let train = self.data.images(&split.train)?;
        let student = StudentModel::init(teacher, self.student_seed())?;
        let cfg = &self.cfg.distill;
        let mut trainer = MkdTrainer::new(student, cfg.clone(), stream_seed(self.cfg.seed, 5, 0))?.with_dump_dir(dir);
        let (gh, gw) = teacher.config().grid();
        let n = gh * gw;
        let mut curve = std::fs::File::create(dir.join("distill_curve.csv"))?;
        csv_line(&mut curve, &["step,epoch,loss,config_hash".into()])?;
        let mut eff = std::fs::File::create(dir.join("efficiency.csv"))?;
        csv_line(
            &mut eff,
            &["epoch,steps,student_tokens,full_tokens,expected_tokens,mean_step_seconds,images_per_second,config_hash"
                .into()],
        )?;
        for epoch in 0..cfg.epochs {
            let mut lines = Vec::new();
            let (mut secs, mut steps, mut tokens) = (0.0, 0usize, 0usize);
            let mean = trainer.run_epoch(teacher, &train, epoch, |r| {
                lines.push(format!("{},{epoch},{},{}", r.step, r.loss, self.hash));
                secs += r.seconds;
                steps += 1;
                tokens = r.student_tokens;
            })?;
            for l in lines {
                csv_line(&mut curve, &[l])?;
            }
            let expected = if cfg.mask_mode == crate::mkd::MaskMode::None {
                n + 1
            } else {
                student_forward_cost(n, cfg.mask_ratio)
            };
            writeln!(
                eff,
                "{epoch},{steps},{tokens},{},{expected},{},{},{}",
                n + 1,
                secs / steps.max(1) as f64,
                train.len() as f64 / secs.max(1e-12),
                self.hash
            )?;
            log::info!("distill epoch {epoch}: mean loss {mean:.4}");
            trainer.student.save(&dir.join(format!("student_epoch{epoch}.safetensors")))?;
        }
        trainer.student.save(ckpt)?;
        Ok(())
    }

    /// Scores every test image. Writes `scores.csv` and heatmaps.
    pub fn stage_score(&mut self, spec: &SplitSpec, method: Method) -> Result<Vec<NoveltyRecord>> {
        let dir = self.method_dir(spec, method)?;
        let scores = dir.join("scores.csv");
        if stage_done(&dir, Stage::Score, &self.hash)? {
            return read_scores_csv(&scores);
        }
        let student_ckpt = self.stage_distill(spec, method)?;
        let teacher = self.teacher_for(spec, method)?;
        let records = self
            .run_score(spec, &teacher, &student_ckpt, &dir)
            .map_err(|e| e.in_stage(Stage::Score.name()))?;
        write_scores_csv(&scores, &records, &self.hash)?;
        mark_done(&dir, Stage::Score, &self.hash)?;
        Ok(records)
    }

    fn run_score(
        &self,
        spec: &SplitSpec,
        teacher: &BackboneHandle,
        student_ckpt: &Path,
        dir: &Path,
    ) -> Result<Vec<NoveltyRecord>> {
        let split = self.stage_split(spec)?;
        let student = StudentModel::load(teacher, student_ckpt)?;
        let cfg = &self.cfg.distill;
        let mut records = Vec::with_capacity(split.test.len());
        let mut heat_index = Vec::new();
        for chunk in split.test.chunks(cfg.batch_size) {
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|t| self.data.image(&t.image))
                .collect::<Result<_>>()?;
            let refs: Vec<&Image> = imgs.iter().collect();
            let batch = to_batch(&refs, &self.device)?;
            let (scores, maps) = score_batch(&batch, teacher, &student, cfg)?;
            for ((t, s), m) in chunk.iter().zip(scores).zip(maps) {
                if records.len() < self.cfg.heatmaps {
                    let name = format!("{}.png", t.image.id.replace(['/', '\\'], "_"));
                    m.write_png(&dir.join("heatmaps").join(&name), teacher.patch_size(), None)?;
                    heat_index.push((name, t.image.id.clone()));
                }
                records.push(NoveltyRecord::new(t.image.id.clone(), s.total, t.label));
            }
        }
        if !heat_index.is_empty() {
            let index: BTreeMap<String, String> = heat_index.into_iter().collect();
            std::fs::write(
                dir.join("heatmaps").join("index.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "config_hash": self.hash,
                    "images": index,
                }))?,
            )?;
        }
        Ok(records)
    }

    /// AUROC report from the unit's scores.
    pub fn stage_eval(&mut self, spec: &SplitSpec, method: Method) -> Result<EvalReport> {
        let records = self.stage_score(spec, method)?;
        let dir = self.method_dir(spec, method)?;
        let mut checkpoints = BTreeMap::new();
        for name in ["stage1.safetensors", "student.safetensors"] {
            let p = dir.join(name);
            if p.exists() {
                checkpoints.insert(name.to_string(), file_digest(&p)?);
            }
        }
        if let Some(ckpt) = &self.cfg.backbone.checkpoint {
            checkpoints.insert("teacher".into(), file_digest(ckpt)?);
        } else if self.cfg.pretrain.enabled {
            let p = self.out.join("teacher/pretrained.safetensors");
            if p.exists() {
                checkpoints.insert("teacher".into(), file_digest(&p)?);
            }
        }
        let report = EvalReport::from_records(&records, &self.hash, checkpoints)?;
        report.write_json(&dir.join("report.json"))?;
        Ok(report)
    }
}

fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Runs the whole pipeline for every configured unit and method.
pub fn run_experiment(cfg: RunConfig) -> Result<ResultTable> {
    run_experiment_with(cfg, &RunOptions::default()).map(|t| t.expect("no early stop requested"))
}

/// Like [`run_experiment`]; returns `None` when stopped early by `opts`.
pub fn run_experiment_with(cfg: RunConfig, opts: &RunOptions) -> Result<Option<ResultTable>> {
    let mut ctx = RunContext::prepare(cfg)?;
    let units = ctx.units()?;
    let methods = Method::for_toggle(ctx.cfg.stages.defend);
    let stop = |s: Stage| opts.stop_after == Some(s);

    ctx.base_teacher()?;
    if stop(Stage::Pretrain) {
        return Ok(None);
    }
    for spec in &units {
        ctx.stage_split(spec)?;
    }
    if stop(Stage::Split) {
        return Ok(None);
    }
    if methods.contains(&Method::MkdDefend) {
        for spec in &units {
            ctx.stage_defend(spec)?;
        }
    }
    if stop(Stage::Defend) {
        return Ok(None);
    }
    for spec in &units {
        for &m in &methods {
            ctx.stage_distill(spec, m)?;
        }
    }
    if stop(Stage::Distill) {
        return Ok(None);
    }
    let mut table = ResultTable::new(ctx.hash.clone());
    for spec in &units {
        for &m in &methods {
            let report = ctx.stage_eval(spec, m)?;
            log::info!(
                "{} {} {}: AUROC {:.4}",
                spec.setting,
                ctx.unit_id(spec),
                m.tag(),
                report.auroc
            );
            table.push(spec.setting.to_string(), ctx.unit_id(spec), m.tag(), report.auroc);
        }
    }
    table.write(&ctx.out, "results")?;
    let rep = report_per_class(std::slice::from_ref(&table))?;
    std::fs::write(ctx.out.join("per_class.csv"), rep.csv()?)?;
    std::fs::write(ctx.out.join("per_class.txt"), rep.text())?;
    Ok(Some(table))
}
