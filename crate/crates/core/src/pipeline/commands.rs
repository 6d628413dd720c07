use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::{kmeans_restarts, make_pairs, make_random_pairs, stratified_split, standardize, LesionFeature, SplitTag};
use crate::crf::{refine_probability, CrfParams};
use crate::error::{Error, Result};
use crate::grid::{normalize, BinaryMask, ImageGrid};
use crate::io::{read_image, read_mask, write_image, write_mask, write_rgb};
use crate::metrics::{aggregate, evaluate_case, AvdMode, EvalReport};
use crate::nn::{checkpoint, threshold, train, CosegNet, Example, TrainReport};
use crate::phantom::generate;
use crate::pipeline::artifacts::{self, ArchetypeRow, LesionRecord};
use crate::pipeline::config::{FeatureMode, Pairing, PipelineConfig, CONFIG_VERSION};
use crate::pipeline::lesion::{lesion_features, network_example, predict, test_partners, unmap, weak_mask, Roi};
use crate::pipeline::manifest::{hash_all, sha256_file, sha256_json, stale_outputs, Manifest, Tracked, UpstreamRef};
use crate::pipeline::overlay::side_by_side;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenPhantoms,
    GenMasks,
    Cluster,
    Split,
    Pair,
    Train,
    Infer,
    Refine,
    Evaluate,
    Overlay,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenPhantoms,
        Stage::GenMasks,
        Stage::Cluster,
        Stage::Split,
        Stage::Pair,
        Stage::Train,
        Stage::Infer,
        Stage::Refine,
        Stage::Evaluate,
        Stage::Overlay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenPhantoms => "gen-phantoms",
            Stage::GenMasks => "gen-masks",
            Stage::Cluster => "cluster",
            Stage::Split => "split",
            Stage::Pair => "pair",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Refine => "refine",
            Stage::Evaluate => "evaluate",
            Stage::Overlay => "overlay",
        }
    }

    fn rng_tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: Status,
    pub outputs: usize,
}

/// Reports written by `evaluate`, keyed by mask source.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<(String, EvalReport)>,
}

impl Evaluation {
    pub fn table(&self) -> String {
        self.reports.iter().map(|(name, r)| r.table(name)).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    iterations: usize,
    train_pairs: usize,
    val_pairs: usize,
    best_iteration: usize,
    best_val_dice: Option<f64>,
    parameters: usize,
}

/// Lesions of the annotation file with their images.
pub struct Dataset {
    pub records: Vec<LesionRecord>,
    images: Vec<ImageGrid>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<LesionRecord>, images: Vec<ImageGrid>) -> Dataset {
        let index = records.iter().enumerate().map(|(i, r)| (r.id().to_string(), i)).collect();
        Dataset { records, images, index }
    }

    pub fn image(&self, id: &str) -> Result<&ImageGrid> {
        self.index.get(id).map(|&i| &self.images[i]).ok_or_else(|| Error::IdMismatch(format!("lesion {id} is not in the annotation file")))
    }

    pub fn record(&self, id: &str) -> Result<&LesionRecord> {
        self.index.get(id).map(|&i| &self.records[i]).ok_or_else(|| Error::IdMismatch(format!("lesion {id} is not in the annotation file")))
    }

    pub fn roi(&self, id: &str, margin: usize) -> Result<Roi> {
        let img = self.image(id)?;
        Roi::around(&self.record(id)?.recist, img.width(), img.height(), margin)
    }
}

/// Drives the stages against one configuration and output directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    force: bool,
}

const MASKS: &str = "masks";
const PROB: &str = "prob";
const PRED: &str = "pred";
const REFINED: &str = "refined";
const OVERLAYS: &str = "overlays";
const MANIFESTS: &str = "manifests";

fn png(id: &str) -> String {
    format!("{id}.png")
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Pipeline> {
        cfg.validate()?;
        Ok(Pipeline { cfg, force })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.output.join(rel)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out(&format!("{MANIFESTS}/{stage}.json"))
    }

    fn roots(&self) -> Vec<(&'static str, PathBuf)> {
        let p = &self.cfg.paths;
        let mut roots = vec![("out", p.output.clone()), ("images", p.images.clone())];
        if let Some(gt) = &p.ground_truth {
            roots.push(("ground_truth", gt.clone()));
        }
        roots
    }

    fn named_files(&self) -> Vec<(&'static str, PathBuf)> {
        let p = &self.cfg.paths;
        let mut files = vec![("annotations.csv", p.annotations.clone())];
        if let Some(a) = &p.archetypes {
            files.push(("archetypes.csv", a.clone()));
        }
        if let Some(e) = &self.cfg.clustering.embeddings {
            files.push(("embeddings.csv", e.clone()));
        }
        files
    }

    /// Location-independent name of a file for manifests.
    fn label(&self, path: &Path) -> String {
        for (name, p) in self.named_files() {
            if path == p {
                return name.to_string();
            }
        }
        for (name, root) in self.roots() {
            if let Ok(rel) = path.strip_prefix(&root) {
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                return format!("{name}/{}", parts.join("/"));
            }
        }
        path.to_string_lossy().into_owned()
    }

    fn resolve_label(&self, label: &str) -> Option<PathBuf> {
        if let Some((_, p)) = self.named_files().into_iter().find(|(n, _)| *n == label) {
            return Some(p);
        }
        let (head, rest) = label.split_once('/')?;
        self.roots().into_iter().find(|(n, _)| *n == head).map(|(_, root)| root.join(rest))
    }

    fn track(&self, path: PathBuf) -> Tracked {
        Tracked { label: self.label(&path), path }
    }

    /// Configuration fragment each stage depends on.
    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        let seed = c.seed;
        match stage {
            Stage::GenPhantoms => json!({"seed": seed, "phantoms": c.phantoms}),
            Stage::GenMasks => json!({"seed": seed, "grabcut": c.grabcut, "roi_margin": c.preprocess.roi_margin}),
            Stage::Cluster => json!({
                "seed": seed,
                "k": c.clustering.k,
                "features": c.clustering.features,
                "standardize": c.clustering.standardize,
                "max_iterations": c.clustering.max_iterations,
                "restarts": c.clustering.restarts,
            }),
            Stage::Split => json!({"seed": seed, "split_ratios": c.clustering.split_ratios}),
            Stage::Pair => json!({"seed": seed, "cap_per_cluster": c.clustering.cap_per_cluster, "pairing": c.clustering.pairing}),
            Stage::Train | Stage::Infer => json!({"seed": seed, "preprocess": c.preprocess, "network": c.network, "train": c.train}),
            Stage::Refine => json!({"crf": c.crf, "refine": c.refine}),
            Stage::Evaluate => json!({"evaluate": c.evaluate}),
            Stage::Overlay => json!({"roi_margin": c.preprocess.roi_margin}),
        }
    }

    pub fn config_hash(&self, stage: Stage) -> String {
        sha256_json(&self.stage_config(stage))
    }

    fn rng(&self, stage: Stage) -> SeededRng {
        SeededRng::new(self.cfg.seed).fork(stage.rng_tag())
    }

    fn mismatch(&self, msg: String) -> Result<()> {
        if self.force {
            warn(&format!("{msg}; continuing because of --force"));
            Ok(())
        } else {
            Err(Error::Stale(format!("{msg}; rerun the upstream command or pass --force")))
        }
    }

    /// Validates an upstream manifest and returns its reference.
    fn upstream(&self, stage: Stage, required: bool) -> Result<Option<UpstreamRef>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            if required {
                return Err(Error::MissingArtifact { path, hint: format!("run `coseg {stage}` first") });
            }
            return Ok(None);
        }
        let m = Manifest::read(&path)?;
        if m.config_sha256 != self.config_hash(stage) {
            self.mismatch(format!("{stage} outputs were produced with a different configuration"))?;
        }
        let stale = stale_outputs(&m, |l| self.resolve_label(l));
        if !stale.is_empty() {
            let shown: Vec<&str> = stale.iter().take(5).map(String::as_str).collect();
            self.mismatch(format!("{} {stage} output(s) changed or missing since it ran: {}", stale.len(), shown.join(", ")))?;
        }
        Ok(Some(UpstreamRef { stage: stage.name().to_string(), manifest_sha256: sha256_file(&path)? }))
    }

    /// Shared bookkeeping: upstream checks, up-to-date detection and the
    /// manifest write. `body` returns the files it produced.
    fn stage(
        &self,
        stage: Stage,
        upstream: &[(Stage, bool)],
        inputs: Vec<Tracked>,
        body: impl FnOnce() -> Result<Vec<Tracked>>,
    ) -> Result<StageOutcome> {
        let mut refs = Vec::new();
        for &(up, required) in upstream {
            if let Some(r) = self.upstream(up, required)? {
                refs.push(r);
            }
        }
        let inputs = hash_all(&inputs)?;
        let config_sha256 = self.config_hash(stage);
        let mpath = self.manifest_path(stage);
        if !self.force && mpath.exists() {
            if let Ok(old) = Manifest::read(&mpath) {
                let same = old.config_sha256 == config_sha256 && old.upstream == refs && old.inputs == inputs && old.seed == self.cfg.seed;
                if same && stale_outputs(&old, |l| self.resolve_label(l)).is_empty() {
                    return Ok(StageOutcome { stage, status: Status::UpToDate, outputs: old.outputs.len() });
                }
            }
        }
        let outputs = hash_all(&body()?)?;
        let m = Manifest {
            stage: stage.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_version: CONFIG_VERSION,
            seed: self.cfg.seed,
            config_sha256,
            upstream: refs,
            inputs,
            outputs,
        };
        m.write(&mpath)?;
        Ok(StageOutcome { stage, status: Status::Ran, outputs: m.outputs.len() })
    }

    fn require(&self, path: PathBuf, hint: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, hint: hint.to_string() })
        }
    }

    fn gt_dir(&self) -> Result<PathBuf> {
        self.cfg.paths.ground_truth.clone().ok_or_else(|| Error::Config("paths.ground_truth is not set".into()))
    }

    fn image_path(&self, rec: &LesionRecord) -> PathBuf {
        if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            self.cfg.paths.images.join(&rec.image_path)
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ann = self.require(self.cfg.paths.annotations.clone(), "set paths.annotations or run `coseg gen-phantoms`")?;
        let records = artifacts::read_annotations(&ann)?;
        if records.is_empty() {
            return Err(Error::Empty(format!("{} has no lesions", ann.display())));
        }
        let mut cache: HashMap<PathBuf, ImageGrid> = HashMap::new();
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let p = self.image_path(r);
            if !cache.contains_key(&p) {
                let img = read_image(&self.require(p.clone(), &format!("image for lesion {} not found", r.id()))?)?;
                cache.insert(p.clone(), img);
            }
            images.push(cache[&p].clone());
        }
        Ok(Dataset::new(records, images))
    }

    fn dataset_inputs(&self, ds: &Dataset) -> Vec<Tracked> {
        let mut files = vec![self.track(self.cfg.paths.annotations.clone())];
        let mut seen = std::collections::BTreeSet::new();
        for r in &ds.records {
            let p = self.image_path(r);
            if seen.insert(p.clone()) {
                files.push(self.track(p));
            }
        }
        files
    }

    pub fn gen_phantoms(&self) -> Result<StageOutcome> {
        self.stage(Stage::GenPhantoms, &[], vec![], || {
            let gt = self.gt_dir()?;
            let phantoms = generate(&self.cfg.phantoms, self.cfg.seed)?;
            let p = &self.cfg.paths;
            reset_dir(&p.images)?;
            reset_dir(&gt)?;
            let mut outputs = Vec::new();
            let mut records = Vec::new();
            let mut arch = Vec::new();
            for ph in &phantoms {
                let (ip, gp) = (p.images.join(png(&ph.id)), gt.join(png(&ph.id)));
                write_image(&ip, &ph.image)?;
                write_mask(&gp, &ph.mask)?;
                outputs.push(self.track(ip));
                outputs.push(self.track(gp));
                records.push(LesionRecord { image_path: png(&ph.id).into(), recist: ph.recist.clone() });
                arch.push(ArchetypeRow { lesion_id: ph.id.clone(), archetype: ph.archetype, name: self.cfg.phantoms.archetypes[ph.archetype].name.clone() });
            }
            artifacts::write_annotations(&p.annotations, &records)?;
            outputs.push(self.track(p.annotations.clone()));
            if let Some(a) = &p.archetypes {
                artifacts::write_archetypes(a, &arch)?;
                outputs.push(self.track(a.clone()));
            }
            Ok(outputs)
        })
    }

    pub fn gen_masks(&self) -> Result<StageOutcome> {
        let ds = self.load_dataset()?;
        self.stage(Stage::GenMasks, &[(Stage::GenPhantoms, false)], self.dataset_inputs(&ds), || {
            let dir = self.out(MASKS);
            reset_dir(&dir)?;
            let base = self.rng(Stage::GenMasks);
            let mut outputs = Vec::new();
            for (i, rec) in ds.records.iter().enumerate() {
                let img = ds.image(rec.id())?;
                let mask = weak_mask(img, &rec.recist, &self.cfg.grabcut, self.cfg.preprocess.roi_margin, &mut base.fork(i as u64))?;
                let path = dir.join(png(rec.id()));
                write_mask(&path, &mask)?;
                outputs.push(self.track(path));
            }
            Ok(outputs)
        })
    }

    fn features(&self, ds: &Dataset) -> Result<Vec<LesionFeature>> {
        let c = &self.cfg.clustering;
        match c.features {
            FeatureMode::Handcrafted => {
                let items: Vec<_> = ds.records.iter().map(|r| Ok((ds.image(r.id())?, &r.recist))).collect::<Result<_>>()?;
                lesion_features(&items, c.standardize)
            }
            FeatureMode::Precomputed => {
                let path = self.require(c.embeddings.clone().expect("validated"), "precomputed embeddings file not found")?;
                let by_id: HashMap<String, LesionFeature> = artifacts::read_features(&path)?.into_iter().map(|f| (f.lesion_id.clone(), f)).collect();
                let missing: Vec<&str> = ds.records.iter().map(LesionRecord::id).filter(|id| !by_id.contains_key(*id)).collect();
                if !missing.is_empty() {
                    return Err(Error::IdMismatch(format!("no embedding for lesion(s): {}", missing.join(", "))));
                }
                let raw: Vec<LesionFeature> = ds.records.iter().map(|r| by_id[r.id()].clone()).collect();
                Ok(if c.standardize { standardize(&raw) } else { raw })
            }
        }
    }

    pub fn cluster(&self) -> Result<StageOutcome> {
        let ds = self.load_dataset()?;
        let mut inputs = vec![self.track(self.cfg.paths.annotations.clone())];
        match self.cfg.clustering.features {
            FeatureMode::Handcrafted => inputs = self.dataset_inputs(&ds),
            FeatureMode::Precomputed => inputs.extend(self.cfg.clustering.embeddings.clone().map(|p| self.track(p))),
        }
        self.stage(Stage::Cluster, &[(Stage::GenPhantoms, false)], inputs, || {
            let features = self.features(&ds)?;
            let k = self.cfg.clustering.k.min(features.len());
            if k < self.cfg.clustering.k {
                warn(&format!("clustering.k = {} exceeds {} lesions; using k = {k}", self.cfg.clustering.k, features.len()));
            }
            let model = kmeans_restarts(&features, k, self.cfg.clustering.max_iterations, self.cfg.clustering.restarts, &mut self.rng(Stage::Cluster))?;
            let (f, a, c) = (self.out("features.csv"), self.out("clusters.csv"), self.out("centroids.csv"));
            artifacts::write_features(&f, &features)?;
            artifacts::write_clusters(&a, &c, &model)?;
            Ok(vec![self.track(f), self.track(a), self.track(c)])
        })
    }

    fn read_clusters(&self) -> Result<crate::cluster::ClusterModel> {
        artifacts::read_clusters(&self.require(self.out("clusters.csv"), "run `coseg cluster` first")?)
    }

    fn read_split(&self) -> Result<crate::cluster::DatasetSplit> {
        artifacts::read_split(&self.require(self.out("split.csv"), "run `coseg split` first")?)
    }

    pub fn split(&self) -> Result<StageOutcome> {
        self.stage(Stage::Split, &[(Stage::Cluster, true)], vec![], || {
            let model = self.read_clusters()?;
            let split = stratified_split(&model, self.cfg.clustering.split_ratios, &mut self.rng(Stage::Split))?;
            let path = self.out("split.csv");
            artifacts::write_split(&path, &split)?;
            Ok(vec![self.track(path)])
        })
    }

    pub fn pair(&self) -> Result<StageOutcome> {
        self.stage(Stage::Pair, &[(Stage::Cluster, true), (Stage::Split, true)], vec![], || {
            let model = self.read_clusters()?;
            let split = self.read_split()?;
            let mut rng = self.rng(Stage::Pair);
            let mut sets = make_pairs(&split, &model, self.cfg.clustering.cap_per_cluster, &mut rng)?;
            if self.cfg.clustering.pairing == Pairing::Random {
                let counts = [sets[0].pairs.len(), sets[1].pairs.len(), sets[2].pairs.len()];
                sets = make_random_pairs(&split, counts, &mut rng);
            }
            let path = self.out("pairs.csv");
            artifacts::write_pairs(&path, &sets)?;
            Ok(vec![self.track(path)])
        })
    }

    fn read_pairs(&self) -> Result<Vec<crate::cluster::PairSet>> {
        artifacts::read_pairs(&self.require(self.out("pairs.csv"), "run `coseg pair` first")?)
    }

    /// Network examples for `ids`; targets come from `masks` when given.
    pub fn examples<'a>(&self, ds: &Dataset, ids: impl IntoIterator<Item = &'a String>, masks: Option<&HashMap<String, BinaryMask>>) -> Result<HashMap<String, Example>> {
        let pre = &self.cfg.preprocess;
        let mut out = HashMap::new();
        for id in ids {
            if out.contains_key(id) {
                continue;
            }
            let img = ds.image(id)?;
            let roi = ds.roi(id, pre.roi_margin)?;
            let mask = match masks {
                Some(m) => m.get(id).cloned().ok_or_else(|| Error::IdMismatch(format!("no initial mask for lesion {id}")))?,
                None => BinaryMask::zeros(img.width(), img.height()),
            };
            out.insert(id.clone(), network_example(img, &mask, &roi, pre.size, pre.normalize));
        }
        Ok(out)
    }

    fn read_masks<'a>(&self, dir: &Path, ids: impl IntoIterator<Item = &'a String>, hint: &str) -> Result<HashMap<String, BinaryMask>> {
        let mut out = HashMap::new();
        for id in ids {
            if !out.contains_key(id) {
                out.insert(id.clone(), read_mask(&self.require(dir.join(png(id)), hint)?)?);
            }
        }
        Ok(out)
    }

    fn new_net(&self) -> Result<CosegNet> {
        CosegNet::new(self.cfg.network.clone(), &mut self.rng(Stage::Train).fork(0))
    }

    pub fn train(&self) -> Result<StageOutcome> {
        self.stage(Stage::Train, &[(Stage::GenMasks, true), (Stage::Pair, true)], vec![], || {
            let ds = self.load_dataset()?;
            let sets = self.read_pairs()?;
            let (tr, va) = (&sets[0].pairs, &sets[1].pairs);
            let ids: Vec<&String> = tr.iter().chain(va).flat_map(|p| [&p.a, &p.b]).collect();
            let masks = self.read_masks(&self.out(MASKS), ids.iter().copied(), "run `coseg gen-masks` first")?;
            let data = self.examples(&ds, ids.iter().copied(), Some(&masks))?;
            let mut net = self.new_net()?;
            let report = train(&mut net, tr, va, &data, &self.cfg.train, &mut self.rng(Stage::Train).fork(1))?;
            self.write_training(&net, &report, tr.len(), va.len())
        })
    }

    fn write_training(&self, net: &CosegNet, report: &TrainReport, train_pairs: usize, val_pairs: usize) -> Result<Vec<Tracked>> {
        let ckpt = self.out("model.ckpt");
        checkpoint::save(net.params(), &ckpt)?;
        let curve = self.out("loss_curve.csv");
        write_text(&curve, &report.to_csv())?;
        let summary = TrainSummary {
            iterations: self.cfg.train.total_iterations(),
            train_pairs,
            val_pairs,
            best_iteration: report.best_iteration,
            best_val_dice: report.best_val_dice,
            parameters: net.params().scalar_count(),
        };
        let sp = self.out("train_summary.json");
        write_text(&sp, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        Ok(vec![self.track(ckpt), self.track(curve), self.track(sp)])
    }

    pub fn load_net(&self) -> Result<CosegNet> {
        let entries = checkpoint::load(&self.require(self.out("model.ckpt"), "run `coseg train` first")?)?;
        let mut net = self.new_net()?;
        net.params_mut().load(&entries)?;
        Ok(net)
    }

    pub fn infer(&self) -> Result<StageOutcome> {
        self.stage(Stage::Infer, &[(Stage::Train, true), (Stage::Split, true), (Stage::Pair, true)], vec![], || {
            let ds = self.load_dataset()?;
            let net = self.load_net()?;
            let split = self.read_split()?;
            let sets = self.read_pairs()?;
            let partners = test_partners(&split.test, &sets[2].pairs);
            let data = self.examples(&ds, partners.keys().chain(partners.values()), None)?;
            let probs = predict(&net, &partners, &data, self.cfg.train.single_branch, self.cfg.train.batch_size)?;
            let (pdir, mdir) = (self.out(PROB), self.out(PRED));
            reset_dir(&pdir)?;
            reset_dir(&mdir)?;
            let mut outputs = Vec::new();
            for (id, prob) in &probs {
                let img = ds.image(id)?;
                let roi = ds.roi(id, self.cfg.preprocess.roi_margin)?;
                let full = roi.paste_image(&unmap(prob, &roi), img.width(), img.height());
                let (pp, mp) = (pdir.join(png(id)), mdir.join(png(id)));
                write_image(&pp, &full)?;
                write_mask(&mp, &threshold(&full))?;
                outputs.push(self.track(pp));
                outputs.push(self.track(mp));
            }
            let partners_csv = self.out("test_partners.csv");
            let mut text = String::from("lesion_id,partner\n");
            for (a, b) in &partners {
                text.push_str(&format!("{a},{b}\n"));
            }
            write_text(&partners_csv, &text)?;
            outputs.push(self.track(partners_csv));
            Ok(outputs)
        })
    }

    pub fn refine(&self) -> Result<StageOutcome> {
        self.stage(Stage::Refine, &[(Stage::Infer, true)], vec![], || {
            let ds = self.load_dataset()?;
            let split = self.read_split()?;
            let dir = self.out(REFINED);
            reset_dir(&dir)?;
            let mut outputs = Vec::new();
            for id in &split.test {
                let img = ds.image(id)?;
                let prob = read_image(&self.require(self.out(PROB).join(png(id)), "run `coseg infer` first")?)?;
                let mask = refine_lesion(img, &prob, &ds.roi(id, self.cfg.refine.margin)?, &self.cfg.crf)?;
                let path = dir.join(png(id));
                write_mask(&path, &mask)?;
                outputs.push(self.track(path));
            }
            Ok(outputs)
        })
    }

    pub fn evaluate(&self) -> Result<(StageOutcome, Evaluation)> {
        let sources = [("grabcut", MASKS, Stage::GenMasks), ("network", PRED, Stage::Infer), ("network+crf", REFINED, Stage::Refine)];
        let present: Vec<_> = sources.iter().filter(|s| self.manifest_path(s.2).exists()).collect();
        if present.is_empty() {
            return Err(Error::MissingArtifact { path: self.out(MANIFESTS), hint: "nothing to evaluate; run `coseg gen-masks` or `coseg infer` first".into() });
        }
        let gt = self.require(self.gt_dir()?, "ground-truth mask directory not found")?;
        let upstream: Vec<(Stage, bool)> = present.iter().map(|s| (s.2, true)).collect();
        let mut evaluation = Evaluation { reports: Vec::new() };
        let outcome = self.stage(Stage::Evaluate, &upstream, vec![], || {
            let ds = self.load_dataset()?;
            let split = self.read_split().ok();
            let mut outputs = Vec::new();
            for (name, dir, stage) in present.iter().copied() {
                let ids: Vec<String> = match (stage, &split) {
                    (Stage::GenMasks, _) => ds.records.iter().map(|r| r.id().to_string()).collect(),
                    (_, Some(s)) => s.test.clone(),
                    (_, None) => return Err(Error::MissingArtifact { path: self.out("split.csv"), hint: "run `coseg split` first".into() }),
                };
                let report = evaluate_dirs(&self.out(dir), &gt, &ids, self.cfg.evaluate.avd)?;
                let stem = format!("report_{}", name.replace('+', "_"));
                let (csv, js) = (self.out(&format!("{stem}.csv")), self.out(&format!("{stem}.json")));
                write_text(&csv, &report_csv(&report))?;
                write_text(&js, &(serde_json::to_string_pretty(&report)? + "\n"))?;
                outputs.push(self.track(csv));
                outputs.push(self.track(js));
                evaluation.reports.push((name.to_string(), report));
            }
            let table = self.out("report_table.txt");
            write_text(&table, &evaluation.table())?;
            outputs.push(self.track(table));
            Ok(outputs)
        })?;
        if evaluation.reports.is_empty() {
            // up to date: reload what was written before
            for (name, _, _) in present.iter().copied() {
                let js = self.out(&format!("report_{}.json", name.replace('+', "_")));
                let report: EvalReport = serde_json::from_slice(&fs::read(&js).map_err(|e| Error::io(&js, e))?)?;
                evaluation.reports.push((name.to_string(), report));
            }
        }
        Ok((outcome, evaluation))
    }

    pub fn overlay(&self) -> Result<StageOutcome> {
        let (dir, stage) = if self.manifest_path(Stage::Refine).exists() { (REFINED, Stage::Refine) } else { (PRED, Stage::Infer) };
        self.stage(Stage::Overlay, &[(stage, true)], vec![], || {
            let ds = self.load_dataset()?;
            let gt = self.gt_dir()?;
            let split = self.read_split()?;
            let missing: Vec<&str> = split.test.iter().filter(|id| !gt.join(png(id)).exists()).map(String::as_str).collect();
            if !missing.is_empty() {
                return Err(Error::IdMismatch(format!("no ground truth for prediction(s): {}", missing.join(", "))));
            }
            let out = self.out(OVERLAYS);
            reset_dir(&out)?;
            let mut outputs = Vec::new();
            for id in &split.test {
                let img = ds.image(id)?;
                let roi = ds.roi(id, self.cfg.preprocess.roi_margin)?;
                let g = read_mask(&gt.join(png(id)))?;
                let p = read_mask(&self.require(self.out(dir).join(png(id)), "prediction missing")?)?;
                let (w, rgb) = side_by_side(&roi.crop_image(img), &roi.crop_mask(&g), &roi.crop_mask(&p))?;
                let path = out.join(png(id));
                write_rgb(&path, w, roi.height, &rgb)?;
                outputs.push(self.track(path));
            }
            Ok(outputs)
        })
    }

    /// Every stage in order; `phantoms` adds data generation first.
    pub fn run(&self, phantoms: bool) -> Result<(Vec<StageOutcome>, Evaluation)> {
        let mut done = Vec::new();
        if phantoms {
            done.push(self.gen_phantoms()?);
        }
        done.push(self.gen_masks()?);
        done.push(self.cluster()?);
        done.push(self.split()?);
        done.push(self.pair()?);
        done.push(self.train()?);
        done.push(self.infer()?);
        done.push(self.refine()?);
        let (o, eval) = self.evaluate()?;
        done.push(o);
        done.push(self.overlay()?);
        Ok((done, eval))
    }
}

/// CRF refinement of `prob` inside `roi`; thresholded probability elsewhere.
pub fn refine_lesion(img: &ImageGrid, prob: &ImageGrid, roi: &Roi, params: &CrfParams) -> Result<BinaryMask> {
    let refined = refine_probability(&normalize(&roi.crop_image(img)), &roi.crop_image(prob), params)?;
    let outside = threshold(prob);
    let inside = roi.paste_mask(&refined.mask, img.width(), img.height());
    let in_roi = roi.paste_mask(&BinaryMask::ones(roi.width, roi.height), img.width(), img.height());
    Ok(BinaryMask::from_fn(img.width(), img.height(), |x, y| if in_roi.get(x, y) { inside.get(x, y) } else { outside.get(x, y) }))
}

/// Scores `<pred_dir>/<id>.png` against `<gt_dir>/<id>.png` for every id.
/// Missing files on either side are reported together.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, ids: &[String], mode: AvdMode) -> Result<EvalReport> {
    let missing: Vec<String> = ids
        .iter()
        .flat_map(|id| {
            let mut m = Vec::new();
            if !pred_dir.join(png(id)).exists() {
                m.push(format!("{id} (prediction)"));
            }
            if !gt_dir.join(png(id)).exists() {
                m.push(format!("{id} (ground truth)"));
            }
            m
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::IdMismatch(format!("missing masks: {}", missing.join(", "))));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let pred = read_mask(&pred_dir.join(png(id)))?;
        let gt = read_mask(&gt_dir.join(png(id)))?;
        cases.push(evaluate_case(id, &pred, &gt, mode)?);
    }
    aggregate(cases)
}

/// Per-case rows followed by `mean` and `std` rows; a missing AVD is an empty cell.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("lesion_id,recall,precision,dice,avd,vs\n");
    for c in &report.cases {
        let avd = c.avd.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{},{},{}\n", c.id, c.recall, c.precision, c.dice, avd, c.vs));
    }
    let a = &report.aggregate;
    let avd_mean = a.avd.map_or(String::new(), |v| v.mean.to_string());
    let avd_std = a.avd.map_or(String::new(), |v| v.std.to_string());
    s.push_str(&format!("mean,{},{},{},{},{}\n", a.recall.mean, a.precision.mean, a.dice.mean, avd_mean, a.vs.mean));
    s.push_str(&format!("std,{},{},{},{},{}\n", a.recall.std, a.precision.std, a.dice.std, avd_std, a.vs.std));
    s
}

/// Split tag of every lesion, for reporting.
pub fn split_tags(split: &crate::cluster::DatasetSplit) -> BTreeMap<String, SplitTag> {
    SplitTag::ALL.iter().flat_map(|&t| split.get(t).iter().map(move |id| (id.clone(), t))).collect()
}
