//! Stage computations on in-memory values. Each stage draws randomness only
//! from its own named streams, so a stage produces the same bytes whether its
//! inputs were just computed or loaded back from the artifact store.

use crate::align::{train_stage2, EmbeddingGrid, ProjectionHead, RandomGrid, Stage2Output};
use crate::autoencoder::{train_stage1, LayerAutoencoder, Stage1Report};
use crate::cav::{run_baseline, Baseline, CavSet, ClassGradients, ProbeBank, ScoreTable};
use crate::error::{GcavError, Result};
use crate::eval::tgcav_table;
use crate::fusion::{fuse_grid, train_stage3, FusionModule, GlobalCav, Stage3Output};
use crate::par::par_map;
use crate::probe::{
    concept_probe_set, generate_world, random_probe_set, train_target, TargetModel, TargetReport,
    World,
};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

use super::config::PipelineConfig;

pub fn gen(cfg: &PipelineConfig) -> Result<(World, ProbeBank)> {
    let streams = SeedStreams::new(cfg.seed);
    let world = generate_world(&cfg.world, &streams)?;
    let concepts = world
        .concept_ids()
        .iter()
        .map(|c| concept_probe_set(&world, c, &streams))
        .collect::<Result<_>>()?;
    let randoms = (0..=cfg.runs)
        .map(|i| random_probe_set(&world, i, &streams))
        .collect();
    Ok((world, ProbeBank { concepts, randoms }))
}

pub fn target(cfg: &PipelineConfig, world: &World) -> Result<(TargetModel, TargetReport)> {
    let streams = SeedStreams::new(cfg.seed);
    let mut model = TargetModel::new(&cfg.target, &mut streams.stream("target/init"))?;
    let report = train_target(
        &mut model,
        &world.dataset,
        &cfg.target_training,
        &mut streams.stream("target/shuffle"),
    )?;
    Ok((model, report))
}

pub fn gradients(
    cfg: &PipelineConfig,
    model: &TargetModel,
    world: &World,
) -> Result<ClassGradients> {
    ClassGradients::compute(model, &world.dataset, &cfg.target.instrumented)
}

pub fn cavs(
    cfg: &PipelineConfig,
    model: &TargetModel,
    bank: &ProbeBank,
    grads: &ClassGradients,
) -> Result<Baseline> {
    run_baseline(model, bank, grads, cfg.runs, &cfg.cav, cfg.threads())
}

/// Untrained autoencoders. Every layer restarts the same stream, so layers of
/// equal width start from identical weights and their embeddings begin in a
/// common frame.
pub fn init_autoencoders(cfg: &PipelineConfig, cavs: &CavSet) -> Vec<LayerAutoencoder> {
    let streams = SeedStreams::new(cfg.seed);
    cavs.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let d = cavs.concept[l][0][0].vector.len();
            LayerAutoencoder::new(layer, d, &cfg.autoencoder, &mut streams.stream("ae/init"))
        })
        .collect()
}

/// All concept and random CAVs of layer `l` as rows, concept rows first in
/// (concept, run) order.
pub fn layer_corpus(cavs: &CavSet, l: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = cavs.concept[l]
        .iter()
        .flatten()
        .chain(&cavs.random[l])
        .map(|v| v.vector.clone())
        .collect();
    Ok(Tensor::from_rows(&rows)?)
}

pub fn autoencoders(
    cfg: &PipelineConfig,
    cavs: &CavSet,
) -> Result<(Vec<LayerAutoencoder>, Vec<Stage1Report>)> {
    let init = init_autoencoders(cfg, cavs);
    let jobs: Vec<(usize, LayerAutoencoder)> = init.into_iter().enumerate().collect();
    let out = par_map(&jobs, cfg.threads(), |(l, ae)| -> Result<_> {
        let mut ae = ae.clone();
        let report = train_stage1(&mut ae, &layer_corpus(cavs, *l)?, &cfg.autoencoder)?;
        Ok((ae, report))
    })?;
    Ok(out.into_iter().unzip())
}

/// Stage-1 embeddings of every concept and random CAV.
pub fn embed(aes: &[LayerAutoencoder], cavs: &CavSet) -> Result<(EmbeddingGrid, RandomGrid)> {
    let (c_n, r_n, l_n) = (cavs.concepts.len(), cavs.runs, cavs.layers.len());
    let d = aes
        .first()
        .map(|a| a.d_embed)
        .ok_or_else(|| GcavError::invalid("embed", "no autoencoders"))?;
    let mut z = vec![0.0f32; c_n * r_n * l_n * d];
    let mut zr = vec![0.0f32; l_n * r_n * d];
    for (l, ae) in aes.iter().enumerate() {
        let e = ae.encode_rows(&layer_corpus(cavs, l)?)?;
        for c in 0..c_n {
            for r in 0..r_n {
                let row = (c * r_n + r) * l_n + l;
                z[row * d..(row + 1) * d].copy_from_slice(e.row(c * r_n + r));
            }
        }
        for r in 0..r_n {
            let row = l * r_n + r;
            zr[row * d..(row + 1) * d].copy_from_slice(e.row(c_n * r_n + r));
        }
    }
    Ok((
        EmbeddingGrid::new(
            cavs.concepts.clone(),
            cavs.layers.clone(),
            r_n,
            Tensor::new(&[c_n * r_n * l_n, d], z)?,
        )?,
        RandomGrid::new(cavs.layers.clone(), r_n, Tensor::new(&[l_n * r_n, d], zr)?)?,
    ))
}

pub fn init_head(cfg: &PipelineConfig) -> ProjectionHead {
    ProjectionHead::new(
        cfg.autoencoder.d_embed,
        &mut SeedStreams::new(cfg.seed).stream("align/init"),
    )
}

pub fn align(
    cfg: &PipelineConfig,
    grid: &EmbeddingGrid,
    random: &RandomGrid,
) -> Result<(ProjectionHead, Stage2Output)> {
    let mut head = init_head(cfg);
    let mut rng = SeedStreams::new(cfg.seed).stream("align/pairs");
    let out = train_stage2(&mut head, grid, random, &cfg.align, &mut rng)?;
    Ok((head, out))
}

pub fn init_fusion(cfg: &PipelineConfig) -> Result<FusionModule> {
    FusionModule::new(
        cfg.target.instrumented.len(),
        cfg.autoencoder.d_embed,
        cfg.fusion.heads,
        cfg.fusion.ffn_mult,
        &mut SeedStreams::new(cfg.seed).stream("fuse/init"),
    )
}

pub fn fuse(
    cfg: &PipelineConfig,
    aligned: &EmbeddingGrid,
    aes: &[LayerAutoencoder],
    grads: &ClassGradients,
) -> Result<(FusionModule, Stage3Output)> {
    let streams = SeedStreams::new(cfg.seed);
    let mut fm = init_fusion(cfg)?;
    let out = train_stage3(
        &mut fm,
        aligned,
        aes,
        grads,
        &cfg.fusion,
        &mut streams.stream("fuse/batch"),
        &mut streams.stream("fuse/dropout"),
    )?;
    Ok((fm, out))
}

pub fn score(
    gcavs: &[GlobalCav],
    aligned: &EmbeddingGrid,
    aes: &[LayerAutoencoder],
    grads: &ClassGradients,
) -> Result<ScoreTable> {
    tgcav_table(gcavs, &aligned.concepts, aligned.runs, aes, grads)
}

/// Trained stages 1–3 and the resulting TGCAV grid.
#[derive(Debug, Clone)]
pub struct GcavStages {
    pub autoencoders: Vec<LayerAutoencoder>,
    pub stage1: Vec<Stage1Report>,
    pub head: ProjectionHead,
    pub stage2: Stage2Output,
    pub fusion: FusionModule,
    pub stage3: Stage3Output,
    pub table: ScoreTable,
}

/// Stages 1–3 plus TGCAV scoring from a CAV set.
pub fn gcav_stages(
    cfg: &PipelineConfig,
    cavs: &CavSet,
    grads: &ClassGradients,
) -> Result<GcavStages> {
    let (autoencoders, stage1) = autoencoders(cfg, cavs)?;
    let (grid, random) = embed(&autoencoders, cavs)?;
    let (head, stage2) = align(cfg, &grid, &random)?;
    let (fusion, stage3) = fuse(cfg, &stage2.aligned, &autoencoders, grads)?;
    let table = score(&stage3.gcavs, &stage2.aligned, &autoencoders, grads)?;
    Ok(GcavStages {
        autoencoders,
        stage1,
        head,
        stage2,
        fusion,
        stage3,
        table,
    })
}

/// Global CAVs of a frozen stage-1/2/3 stack for a new CAV set.
pub fn frozen_gcavs(
    cavs: &CavSet,
    aes: &[LayerAutoencoder],
    head: &ProjectionHead,
    fusion: &FusionModule,
) -> Result<(EmbeddingGrid, Vec<GlobalCav>)> {
    let (grid, _) = embed(aes, cavs)?;
    let aligned = EmbeddingGrid::new(
        grid.concepts.clone(),
        grid.layers.clone(),
        grid.runs,
        head.project(&grid.z)?,
    )?;
    let gcavs = fuse_grid(fusion, &aligned)?;
    Ok((aligned, gcavs))
}
