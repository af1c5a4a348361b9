//! Configuration, artifact persistence and staged execution.
//!
//! Every stage reads its inputs back from the [`ArtifactStore`], so a stage
//! computes the same bytes in a fresh run, a resumed run, or on its own.

pub mod config;
pub mod stages;
pub mod store;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::align::{EmbeddingGrid, ProjectionHead};
use crate::attack::{evaluate_attack, PreAttack};
use crate::autoencoder::LayerAutoencoder;
use crate::cav::{
    tcav_table, CavKind, CavSet, CavVector, ClassGradients, Method, ProbeBank, ScoreTable,
};
use crate::error::{GcavError, Result};
use crate::eval::{
    build_report, render_svg, tgcav_table, write_attack_csv, write_report_csv, AttackRow,
    ComparisonReport,
};
use crate::fusion::{FusionModule, GlobalCav};
use crate::probe::{ClassDataset, ConceptSpec, ProbeKind, ProbeSet, TargetModel, World};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

pub use config::PipelineConfig;
pub use store::{stage_index, ArtifactStore, STAGES};

/// A stage that failed, with its position in [`STAGES`].
#[derive(Debug, Error)]
#[error("stage `{stage}` failed")]
pub struct StageFailure {
    pub stage: &'static str,
    #[source]
    pub source: GcavError,
}

impl StageFailure {
    /// Process exit code: 10 plus the stage index.
    pub fn exit_code(&self) -> i32 {
        10 + STAGES.iter().position(|s| *s == self.stage).unwrap_or(0) as i32
    }
}

/// Output file options for the report stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOptions {
    pub csv: bool,
    pub json: bool,
    pub svg: bool,
    /// Appended to report file names when set.
    pub timestamp: Option<String>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
            svg: true,
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub files: Vec<String>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub store: ArtifactStore,
    pub report: ReportOptions,
    files: Vec<PathBuf>,
}

fn layer_key(prefix: &str, layer: &str) -> String {
    format!("{prefix}/{layer}")
}

fn scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v as f32])
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(GcavError::io(path))
}

impl Pipeline {
    /// Validates `cfg` and opens the artifact store under `out`. Without
    /// `resume`, previous artifacts are discarded.
    pub fn open(cfg: PipelineConfig, out: &Path, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let store = if resume {
            ArtifactStore::open(out, &hash)?
        } else {
            ArtifactStore::create(out, &hash)?
        };
        let p = Self {
            cfg,
            store,
            report: ReportOptions::default(),
            files: Vec::new(),
        };
        p.write_effective_config()?;
        Ok(p)
    }

    pub fn out_dir(&self) -> &Path {
        self.store.root()
    }

    fn write_effective_config(&self) -> Result<()> {
        write_file(
            &self.out_dir().join("config.effective.json"),
            self.cfg.to_json().as_bytes(),
        )
    }

    /// Stages `run` executes, in order.
    pub fn run_plan(&self) -> Vec<&'static str> {
        STAGES
            .iter()
            .copied()
            .filter(|s| *s != "attack" || self.cfg.attack.is_some())
            .collect()
    }

    /// Runs every stage of [`Pipeline::run_plan`], skipping completed stages
    /// when `resume` is set. `on_stage` is called before each executed stage.
    pub fn run(
        &mut self,
        resume: bool,
        mut on_stage: impl FnMut(&str),
    ) -> std::result::Result<RunSummary, StageFailure> {
        let mut summary = RunSummary {
            executed: Vec::new(),
            skipped: Vec::new(),
            files: Vec::new(),
        };
        for stage in self.run_plan() {
            if resume && self.store.is_complete(stage) {
                summary.skipped.push(stage.to_string());
                continue;
            }
            on_stage(stage);
            self.run_stage(stage)?;
            summary.executed.push(stage.to_string());
        }
        summary.files = self.files.iter().map(|p| p.display().to_string()).collect();
        let text = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
        write_file(&self.out_dir().join("run_summary.json"), text.as_bytes()).map_err(
            |source| StageFailure {
                stage: "report",
                source,
            },
        )?;
        Ok(summary)
    }

    /// Runs exactly one stage; later stages are invalidated.
    pub fn run_stage(&mut self, stage: &str) -> std::result::Result<(), StageFailure> {
        let idx = stage_index(stage).map_err(|source| StageFailure {
            stage: "gen",
            source,
        })?;
        let name = STAGES[idx];
        let result = match name {
            "gen" => self.stage_gen(),
            "target" => self.stage_target(),
            "cavs" => self.stage_cavs(),
            "ae" => self.stage_ae(),
            "align" => self.stage_align(),
            "fuse" => self.stage_fuse(),
            "score" => self.stage_score(),
            "attack" => self.stage_attack(),
            _ => self.stage_report(),
        };
        result.map_err(|source| StageFailure {
            stage: name,
            source,
        })
    }

    /// Files written by stages run through this handle.
    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    // ---- loaders -------------------------------------------------------

    fn world(&self, reader: &str) -> Result<World> {
        let s = &self.store;
        let w = &self.cfg.world;
        let dirs = s.read(reader, "gen/world/directions")?;
        let rel = s.read(reader, "gen/world/relevance")?;
        let concepts = (0..w.n_concepts)
            .map(|c| ConceptSpec {
                id: crate::probe::concept_id(c),
                direction: dirs.row(c).to_vec(),
                relevance: rel.row(c).iter().map(|&v| v > 0.5).collect(),
            })
            .collect();
        let labels = s
            .read(reader, "gen/data/labels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        Ok(World {
            config: w.clone(),
            concepts,
            dataset: ClassDataset {
                inputs: s.read(reader, "gen/data/inputs")?,
                labels,
                n_classes: w.n_classes,
            },
        })
    }

    fn bank(&self, reader: &str) -> Result<ProbeBank> {
        let concepts = (0..self.cfg.world.n_concepts)
            .map(|c| {
                let id = crate::probe::concept_id(c);
                Ok(ProbeSet {
                    kind: ProbeKind::Concept,
                    examples: self
                        .store
                        .read(reader, &format!("gen/probe/concept/{id}"))?,
                    concept_id: Some(id),
                    index: 0,
                })
            })
            .collect::<Result<_>>()?;
        let randoms = (0..=self.cfg.runs)
            .map(|i| {
                Ok(ProbeSet {
                    kind: ProbeKind::Random,
                    concept_id: None,
                    index: i,
                    examples: self.store.read(reader, &format!("gen/probe/random/{i}"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ProbeBank { concepts, randoms })
    }

    fn model(&self, reader: &str) -> Result<TargetModel> {
        self.store.require("target/model")?;
        let mut model =
            TargetModel::new(&self.cfg.target, &mut SeedStreams::new(0).stream("unused"))?;
        self.store
            .read_params(reader, "target/model", &mut model.store)?;
        Ok(model)
    }

    fn grads(&self, reader: &str) -> Result<(World, TargetModel, ClassGradients)> {
        let world = self.world(reader)?;
        let model = self.model(reader)?;
        let grads = stages::gradients(&self.cfg, &model, &world)?;
        Ok((world, model, grads))
    }

    fn cav_set(&self, reader: &str) -> Result<CavSet> {
        self.store.require("cavs/concept")?;
        let layers = self.cfg.target.instrumented.clone();
        let concepts: Vec<String> = (0..self.cfg.world.n_concepts)
            .map(crate::probe::concept_id)
            .collect();
        let runs = self.cfg.runs;
        let mut concept = Vec::with_capacity(layers.len());
        let mut random = Vec::with_capacity(layers.len());
        for layer in &layers {
            let v = self.store.read(reader, &layer_key("cavs/concept", layer))?;
            let acc = self
                .store
                .read(reader, &layer_key("cavs/concept_accuracy", layer))?;
            let vr = self.store.read(reader, &layer_key("cavs/random", layer))?;
            let accr = self
                .store
                .read(reader, &layer_key("cavs/random_accuracy", layer))?;
            let cav = |kind, id: String, r, row: &[f32], a: f32| CavVector {
                concept_id: id,
                kind,
                layer: layer.clone(),
                run_index: r,
                vector: row.to_vec(),
                train_accuracy: a as f64,
            };
            concept.push(
                concepts
                    .iter()
                    .enumerate()
                    .map(|(c, id)| {
                        (0..runs)
                            .map(|r| {
                                let i = c * runs + r;
                                cav(CavKind::Concept, id.clone(), r, v.row(i), acc.data()[i])
                            })
                            .collect()
                    })
                    .collect(),
            );
            random.push(
                (0..runs)
                    .map(|r| {
                        cav(
                            CavKind::Random,
                            format!("random{r}"),
                            r,
                            vr.row(r),
                            accr.data()[r],
                        )
                    })
                    .collect(),
            );
        }
        Ok(CavSet {
            layers,
            concepts,
            runs,
            concept,
            random,
        })
    }

    fn autoencoders(&self, reader: &str, cavs: &CavSet) -> Result<Vec<LayerAutoencoder>> {
        let mut aes = stages::init_autoencoders(&self.cfg, cavs);
        for ae in &mut aes {
            let prefix = layer_key("ae", &ae.layer);
            self.store.read_params(reader, &prefix, &mut ae.store)?;
        }
        Ok(aes)
    }

    fn head(&self, reader: &str) -> Result<ProjectionHead> {
        let mut head = stages::init_head(&self.cfg);
        self.store
            .read_params(reader, "align/head", &mut head.store)?;
        Ok(head)
    }

    fn aligned(&self, reader: &str) -> Result<EmbeddingGrid> {
        let t = &self.cfg.target;
        EmbeddingGrid::new(
            (0..self.cfg.world.n_concepts)
                .map(crate::probe::concept_id)
                .collect(),
            t.instrumented.clone(),
            self.cfg.runs,
            self.store.read(reader, "align/aligned")?,
        )
    }

    fn fusion(&self, reader: &str) -> Result<FusionModule> {
        let mut fm = stages::init_fusion(&self.cfg)?;
        self.store
            .read_params(reader, "fuse/module", &mut fm.store)?;
        Ok(fm)
    }

    fn gcavs(&self, reader: &str) -> Result<Vec<GlobalCav>> {
        let z = self.store.read(reader, "fuse/gcav")?;
        let runs = self.cfg.runs;
        Ok((0..z.rows())
            .map(|i| GlobalCav {
                concept_id: crate::probe::concept_id(i / runs),
                run_index: i % runs,
                z: z.row(i).to_vec(),
            })
            .collect())
    }

    /// TCAV and TGCAV grids recomputed from stored CAVs and global CAVs.
    fn tables(
        &self,
        reader: &str,
    ) -> Result<(
        World,
        TargetModel,
        ClassGradients,
        CavSet,
        ScoreTable,
        ScoreTable,
    )> {
        self.store.require("fuse/gcav")?;
        let (world, model, grads) = self.grads(reader)?;
        let cavs = self.cav_set(reader)?;
        let tcav = tcav_table(&cavs, &grads)?;
        let aes = self.autoencoders(reader, &cavs)?;
        let aligned = self.aligned(reader)?;
        let tgcav = tgcav_table(
            &self.gcavs(reader)?,
            &aligned.concepts,
            aligned.runs,
            &aes,
            &grads,
        )?;
        Ok((world, model, grads, cavs, tcav, tgcav))
    }

    // ---- stages --------------------------------------------------------

    fn stage_gen(&mut self) -> Result<()> {
        let (world, bank) = stages::gen(&self.cfg)?;
        let mut w = self.store.writer("gen")?;
        let dirs: Vec<Vec<f32>> = world.concepts.iter().map(|c| c.direction.clone()).collect();
        let rel: Vec<Vec<f32>> = world
            .concepts
            .iter()
            .map(|c| {
                c.relevance
                    .iter()
                    .map(|&r| if r { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        w.put("gen/world/directions", Tensor::from_rows(&dirs)?);
        w.put("gen/world/relevance", Tensor::from_rows(&rel)?);
        w.put("gen/data/inputs", world.dataset.inputs.clone());
        w.put(
            "gen/data/labels",
            Tensor::vector(world.dataset.labels.iter().map(|&l| l as f32).collect()),
        );
        for set in &bank.concepts {
            let id = set.concept_id.as_deref().unwrap_or_default();
            w.put(format!("gen/probe/concept/{id}"), set.examples.clone());
        }
        for set in &bank.randoms {
            w.put(
                format!("gen/probe/random/{}", set.index),
                set.examples.clone(),
            );
        }
        self.store.commit(w)?;
        let path = self.out_dir().join("dataset.csv");
        let mut bytes = Vec::new();
        world
            .dataset
            .write_csv(&mut bytes)
            .map_err(GcavError::io(&path))?;
        write_file(&path, &bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn stage_target(&mut self) -> Result<()> {
        let world = self.world("target")?;
        let (model, report) = stages::target(&self.cfg, &world)?;
        let mut w = self.store.writer("target")?;
        w.put_params("target/model", &model.store);
        w.put("target/accuracy", scalar(report.accuracy));
        w.put(
            "target/epoch_loss",
            Tensor::vector(report.epoch_losses.iter().map(|&v| v as f32).collect()),
        );
        self.store.commit(w)
    }

    fn stage_cavs(&mut self) -> Result<()> {
        self.store.require("target/model")?;
        let (_, model, grads) = self.grads("cavs")?;
        let bank = self.bank("cavs")?;
        let base = stages::cavs(&self.cfg, &model, &bank, &grads)?;
        let mut w = self.store.writer("cavs")?;
        for (l, layer) in base.cavs.layers.iter().enumerate() {
            let rows: Vec<&CavVector> = base.cavs.concept[l].iter().flatten().collect();
            w.put(
                layer_key("cavs/concept", layer),
                Tensor::from_rows(&rows.iter().map(|v| v.vector.clone()).collect::<Vec<_>>())?,
            );
            w.put(
                layer_key("cavs/concept_accuracy", layer),
                Tensor::vector(rows.iter().map(|v| v.train_accuracy as f32).collect()),
            );
            let rand = &base.cavs.random[l];
            w.put(
                layer_key("cavs/random", layer),
                Tensor::from_rows(&rand.iter().map(|v| v.vector.clone()).collect::<Vec<_>>())?,
            );
            w.put(
                layer_key("cavs/random_accuracy", layer),
                Tensor::vector(rand.iter().map(|v| v.train_accuracy as f32).collect()),
            );
        }
        self.store.commit(w)
    }

    fn stage_ae(&mut self) -> Result<()> {
        let cavs = self.cav_set("ae")?;
        let (aes, reports) = stages::autoencoders(&self.cfg, &cavs)?;
        let mut w = self.store.writer("ae")?;
        for (ae, rep) in aes.iter().zip(&reports) {
            w.put_params(&layer_key("ae", &ae.layer), &ae.store);
            w.put(
                layer_key("ae_stats/mean_cosine", &ae.layer),
                scalar(rep.mean_cosine),
            );
        }
        self.store.commit(w)
    }

    fn stage_align(&mut self) -> Result<()> {
        let cavs = self.cav_set("align")?;
        let aes = self.autoencoders("align", &cavs)?;
        let (grid, random) = stages::embed(&aes, &cavs)?;
        let (head, out) = stages::align(&self.cfg, &grid, &random)?;
        let mut w = self.store.writer("align")?;
        w.put_params("align/head", &head.store);
        w.put("align/aligned", out.aligned.z.clone());
        w.put("align/random", out.projected_random.z.clone());
        let r = &out.report;
        w.put(
            "align/stats",
            Tensor::vector(
                [
                    r.before.positive,
                    r.before.negative,
                    r.after.positive,
                    r.after.negative,
                ]
                .iter()
                .map(|&v| v as f32)
                .collect(),
            ),
        );
        self.store.commit(w)
    }

    fn stage_fuse(&mut self) -> Result<()> {
        self.store.require("align/head")?;
        let aligned = self.aligned("fuse")?;
        let cavs = self.cav_set("fuse")?;
        let aes = self.autoencoders("fuse", &cavs)?;
        let (_, _, grads) = self.grads("fuse")?;
        let (fm, out) = stages::fuse(&self.cfg, &aligned, &aes, &grads)?;
        let mut w = self.store.writer("fuse")?;
        w.put_params("fuse/module", &fm.store);
        let rows: Vec<Vec<f32>> = out.gcavs.iter().map(|g| g.z.clone()).collect();
        w.put("fuse/gcav", Tensor::from_rows(&rows)?);
        let losses: Vec<Vec<f32>> = out
            .losses
            .iter()
            .map(|s| {
                [s.tau, s.variance, s.consistency, s.total]
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect();
        if !losses.is_empty() {
            w.put("fuse/losses", Tensor::from_rows(&losses)?);
        }
        self.store.commit(w)
    }

    fn stage_score(&mut self) -> Result<()> {
        let (_, _, _, _, tcav, tgcav) = self.tables("score")?;
        let mut w = self.store.writer("score")?;
        w.put(
            "score/tcav",
            Tensor::vector(tcav.scores().iter().map(|&v| v as f32).collect()),
        );
        w.put(
            "score/tgcav",
            Tensor::vector(tgcav.scores().iter().map(|&v| v as f32).collect()),
        );
        self.store.commit(w)?;
        let path = self.out_dir().join("scores.csv");
        let mut bytes = Vec::new();
        crate::cav::write_scores_csv(&[&tcav, &tgcav], &mut bytes).map_err(GcavError::io(&path))?;
        write_file(&path, &bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn attack_path(&self, layer: &str, ext: &str) -> PathBuf {
        self.out_dir().join(format!("attack_{layer}.{ext}"))
    }

    fn stage_attack(&mut self) -> Result<()> {
        let spec =
            self.cfg.attack.clone().ok_or_else(|| {
                GcavError::InvalidConfig("no `attack` section in the config".into())
            })?;
        self.store.require("score/tgcav")?;
        let (world, model, grads, cavs, tcav, tgcav) = self.tables("attack")?;
        let bank = self.bank("attack")?;
        let aes = self.autoencoders("attack", &cavs)?;
        let head = self.head("attack")?;
        let fusion = self.fusion("attack")?;
        let pre = PreAttack {
            world: &world,
            bank: &bank,
            grads: &grads,
            tcav: &tcav,
            autoencoders: &aes,
            head: &head,
            fusion: &fusion,
            tgcav: &tgcav,
        };
        let outcome = evaluate_attack(&self.cfg, &model, &pre, &spec)?;
        let mut w = self.store.writer("attack")?;
        if let Some(p) = &outcome.perturbed {
            w.put("attack/perturbed", p.examples.clone());
        }
        self.store.commit(w)?;

        let csv = self.attack_path(&spec.layer, "csv");
        let mut bytes = Vec::new();
        write_attack_csv(&outcome.rows, &mut bytes).map_err(GcavError::io(&csv))?;
        write_file(&csv, &bytes)?;
        let json = self.attack_path(&spec.layer, "json");
        let text = serde_json::to_string_pretty(&outcome).expect("outcome serialises") + "\n";
        write_file(&json, text.as_bytes())?;
        self.files.extend([csv, json]);
        Ok(())
    }

    /// Attack rows from the last attack stage, if it ran.
    fn attack_rows(&self) -> Result<Vec<AttackRow>> {
        let Some(spec) = &self.cfg.attack else {
            return Ok(Vec::new());
        };
        if !self.store.is_complete("attack") {
            return Ok(Vec::new());
        }
        let path = self.attack_path(&spec.layer, "json");
        let text = fs::read_to_string(&path).map_err(GcavError::io(&path))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| GcavError::Json {
                path: path.clone(),
                source,
            })?;
        serde_json::from_value(v["rows"].clone()).map_err(|source| GcavError::Json { path, source })
    }

    pub fn report_stem(&self) -> String {
        match &self.report.timestamp {
            Some(ts) => format!("report_{}_{ts}", self.cfg.model_name),
            None => format!("report_{}", self.cfg.model_name),
        }
    }

    /// Builds the comparison report from stored artifacts.
    pub fn build_report(&self) -> Result<ComparisonReport> {
        self.store.require("score/tgcav")?;
        let (world, _, _, _, tcav, tgcav) = self.tables("report")?;
        let mut report = build_report(&self.cfg.model_name, &tcav, &tgcav, &world)?;
        report.attack = self.attack_rows()?;
        Ok(report)
    }

    fn stage_report(&mut self) -> Result<()> {
        let report = self.build_report()?;
        let stem = self.report_stem();
        let mut written = Vec::new();
        if self.report.csv {
            let path = self.out_dir().join(format!("{stem}.csv"));
            let mut bytes = Vec::new();
            write_report_csv(&report, &mut bytes).map_err(GcavError::io(&path))?;
            write_file(&path, &bytes)?;
            written.push(path);
        }
        if self.report.json {
            let path = self.out_dir().join(format!("{stem}.json"));
            let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
            write_file(&path, text.as_bytes())?;
            written.push(path);
        }
        if self.report.svg {
            for method in [Method::Tcav, Method::Tgcav] {
                let path = self.out_dir().join(format!("{stem}_{method}.svg"));
                write_file(&path, render_svg(&report, method).as_bytes())?;
                written.push(path);
            }
        }
        self.store.commit(self.store.writer("report")?)?;
        self.files.extend(written);
        Ok(())
    }
}
