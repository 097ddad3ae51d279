//! Desk-scale experiments on synthetic corpora: stamp removal with paired
//! ground truth, and an end-to-end run over separable synthetic writers.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::grid::{run_grid, ExperimentGrid, GridReport, ModelSpec};
use crate::backbone::{build_backbone, finetune, Arch, InputVariant, TinyConfig, TrainConfig};
use crate::cleaner::{clean, train_cleaner_with, CleanerModel, CleanerTrainConfig};
use crate::dataset::{build_manifest, split_verification_users, Layout, Setup};
use crate::error::{Error, Result};
use crate::imaging::{load_signature, InputSpec, Polarity, Source};
use crate::synth::{psnr, stamp_corpus, write_writer_corpus, GlyphConfig, StampConfig, WriterCorpusConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampExperimentConfig {
    /// Clean glyphs generated; half are stamped for domain X.
    pub n_signatures: usize,
    pub n_held_out: usize,
    /// Paired images, disjoint from the held-out set, that pick the epoch.
    #[serde(default = "default_validation")]
    pub n_validation: usize,
    pub glyph: GlyphConfig,
    pub stamp: StampConfig,
    pub cleaner: CleanerTrainConfig,
    pub seed: u64,
}

fn default_validation() -> usize {
    20
}

impl Default for StampExperimentConfig {
    fn default() -> Self {
        let glyph = GlyphConfig {
            height: 32,
            width: 64,
            ..GlyphConfig::default()
        };
        Self {
            n_signatures: 200,
            n_held_out: 40,
            n_validation: default_validation(),
            cleaner: CleanerTrainConfig {
                epochs: 8,
                batch_size: 1,
                input_size: (glyph.height, glyph.width),
                ..CleanerTrainConfig::default()
            },
            glyph,
            stamp: StampConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampExperimentReport {
    pub n_train_stamped: usize,
    pub n_train_clean: usize,
    pub n_held_out: usize,
    /// Epoch whose weights scored best on the validation pairs.
    pub selected_epoch: Option<usize>,
    pub psnr_validation: f64,
    /// Mean PSNR of the stamped input against its clean ground truth.
    pub psnr_stamped: f64,
    pub psnr_cleaned: f64,
    /// Cleaning an already clean image, against itself.
    pub psnr_clean_passthrough: f64,
    pub gain_db: f64,
    pub train_seconds: f64,
}

/// Trains the cleaner on disjoint, unpaired halves of a synthetic corpus and
/// scores it on held-out stamped images with known clean versions.
pub fn run_stamp_experiment(cfg: &StampExperimentConfig, out_dir: Option<&Path>) -> Result<(CleanerModel, StampExperimentReport)> {
    if cfg.n_signatures < 2 || cfg.n_held_out == 0 {
        return Err(Error::validation("need >= 2 training signatures and >= 1 held-out pair"));
    }
    let corpus = stamp_corpus(cfg.n_signatures, &cfg.glyph, &cfg.stamp, cfg.seed)?;
    let half = cfg.n_signatures / 2;
    let clean_set: Vec<_> = corpus[..half].iter().map(|p| p.clean.clone()).collect();
    let stamped: Vec<_> = corpus[half..].iter().map(|p| p.stamped.clone()).collect();
    let held = stamp_corpus(cfg.n_held_out, &cfg.glyph, &cfg.stamp, cfg.seed ^ 0x5eed_0f_0ff)?;
    let val = stamp_corpus(cfg.n_validation, &cfg.glyph, &cfg.stamp, cfg.seed ^ 0x7a1_1da7e)?;
    let val_psnr = |m: &CleanerModel| -> Result<f64> {
        let mut sum = 0.0;
        for pair in &val {
            sum += psnr(clean(m, &pair.stamped)?.pixels(), pair.clean.pixels());
        }
        Ok(sum / val.len().max(1) as f64)
    };

    let t = Instant::now();
    let mut best: Option<(f64, CleanerModel)> = None;
    let last = train_cleaner_with(&stamped, &clean_set, &cfg.cleaner, out_dir, &mut |m| {
        if val.is_empty() {
            return Ok(());
        }
        let p = val_psnr(m)?;
        log::info!("cleaner epoch {:?}: validation PSNR {p:.2} dB", m.meta.epoch);
        if best.as_ref().is_none_or(|(b, _)| p > *b) {
            best = Some((p, m.clone()));
        }
        Ok(())
    })?;
    let train_seconds = t.elapsed().as_secs_f64();
    let (psnr_validation, model) = match best {
        Some(b) => b,
        None => (f64::NAN, last),
    };
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }

    let (mut ps, mut pc, mut pp) = (0.0, 0.0, 0.0);
    for pair in &held {
        let truth = pair.clean.pixels();
        ps += psnr(pair.stamped.pixels(), truth);
        pc += psnr(clean(&model, &pair.stamped)?.pixels(), truth);
        pp += psnr(clean(&model, &pair.clean)?.pixels(), truth);
    }
    let n = held.len() as f64;
    let report = StampExperimentReport {
        n_train_stamped: stamped.len(),
        n_train_clean: clean_set.len(),
        n_held_out: held.len(),
        selected_epoch: model.meta.epoch,
        psnr_validation,
        psnr_stamped: ps / n,
        psnr_cleaned: pc / n,
        psnr_clean_passthrough: pp / n,
        gain_db: (pc - ps) / n,
        train_seconds,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("stamp_experiment.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableExperimentConfig {
    pub corpus: WriterCorpusConfig,
    /// Writers held out for verification; the rest train the backbone.
    pub n_test_writers: usize,
    pub tiny: TinyConfig,
    pub backbone: TrainConfig,
    pub seed: u64,
}

impl Default for SeparableExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: WriterCorpusConfig {
                writers: 40,
                references_per_writer: 6,
                targets_per_writer: 2,
                glyph: GlyphConfig {
                    height: 32,
                    width: 64,
                    ..GlyphConfig::default()
                },
                stamp: StampConfig::default(),
                seed: 7,
            },
            n_test_writers: 20,
            tiny: TinyConfig::default(),
            backbone: TrainConfig {
                batch_size: 32,
                lr_init: 1e-3,
                momentum: 0.9,
                patience: 3,
                seed: 0,
                max_epochs: 15,
                weight_decay: 0.0,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableExperimentReport {
    pub train_writers: usize,
    pub test_writers: usize,
    pub best_epoch: Option<usize>,
    pub train_seconds: f64,
    pub eer: BTreeMap<String, f64>,
    pub grid: GridReport,
}

/// Writes a writer corpus, fine-tunes a tiny backbone on the training
/// writers' unstamped images and evaluates every setup on the rest.
pub fn run_separable_experiment(
    cfg: &SeparableExperimentConfig,
    cleaner: &CleanerModel,
    work_dir: &Path,
) -> Result<SeparableExperimentReport> {
    let root = work_dir.join("corpus");
    write_writer_corpus(&root, &cfg.corpus)?;
    let manifest = build_manifest(&root, &Layout::UserDirs)?;
    let n_train = cfg
        .corpus
        .writers
        .checked_sub(cfg.n_test_writers)
        .filter(|n| *n >= 2)
        .ok_or_else(|| Error::validation("need >= 2 training writers besides the test writers"))?;
    let split = split_verification_users(&manifest, n_train, cfg.seed)?;

    // per training writer: last reference for validation, the rest for training
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (user, entries) in manifest.by_user() {
        if !split.train.contains(&user.to_string()) {
            continue;
        }
        let usable: Vec<_> = entries.iter().filter(|e| e.source != Source::TargetStamped).collect();
        for (i, e) in usable.iter().enumerate() {
            let img = load_signature(Path::new(&e.path), Polarity::Original)?;
            if i == 0 { val.push(img) } else { train.push(img) }
        }
    }
    let input = InputSpec::grayscale(cfg.corpus.glyph.height, cfg.corpus.glyph.width);
    let arch = Arch::Tiny(cfg.tiny.clone());
    let model = build_backbone(&arch, split.train.len(), input, InputVariant::Raw, cfg.seed)?;
    let t = Instant::now();
    let model = finetune(model, &train, &val, &split.test, &cfg.backbone)?;
    let train_seconds = t.elapsed().as_secs_f64();
    model.save(&work_dir.join("backbone"))?;

    let grid = ExperimentGrid {
        setups: vec![Setup::S1, Setup::S2, Setup::S3, Setup::S4, Setup::S5],
        models: vec![ModelSpec {
            name: "tiny".into(),
            arch,
            variant: InputVariant::Raw,
            checkpoint: None,
        }],
        seeds: vec![cfg.seed],
        output_dir: work_dir.join("grid"),
        test_users: Some(split.test.clone()),
        cache_dir: None,
    };
    let best_epoch = model.meta.best_epoch;
    let backbones = BTreeMap::from([("tiny".to_string(), model)]);
    let report = run_grid(&grid, &manifest, Some(cleaner), &backbones)?;
    Ok(SeparableExperimentReport {
        train_writers: split.train.len(),
        test_writers: split.test.len(),
        best_epoch,
        train_seconds,
        eer: report.table.iter().map(|(s, m)| (s.clone(), m["tiny"])).collect(),
        grid: report,
    })
}
