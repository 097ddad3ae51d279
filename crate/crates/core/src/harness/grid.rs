//! Setup-by-model evaluation grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_batch, Arch, BackboneModel, FeatureVector, InputVariant};
use crate::dataset::{
    assemble_setup, generate_pairs, generate_reference_pairs, DatasetManifest, ImageCleaner, PairRecord, Setup,
};
use crate::error::{Error, Result};
use crate::imaging::{load_signature, Polarity, Source};
use crate::verifier::{evaluate, render_roc_png, score_pairs, write_report_json, write_scores_csv, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Column name in the output table.
    pub name: String,
    pub arch: Arch,
    #[serde(default)]
    pub variant: InputVariant,
    /// Backbone checkpoint directory, used by the CLI loader.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub setups: Vec<Setup>,
    pub models: Vec<ModelSpec>,
    /// Negative-sampling seeds; cell EERs are averaged over them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Writers to evaluate on; all writers in the manifest when absent.
    #[serde(default)]
    pub test_users: Option<Vec<String>>,
    /// Where cleaned images are cached; `output_dir/cleaned` by default.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.setups.is_empty() || self.models.is_empty() {
            return Err(Error::validation("grid needs at least one setup and one model"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("grid needs at least one seed"));
        }
        let names: BTreeSet<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.models.len() {
            return Err(Error::validation("model names must be unique"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub setup: Setup,
    pub model: String,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Mean EER over seeds, by setup then model.
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

impl GridReport {
    pub fn eer(&self, setup: Setup, model: &str) -> Option<f64> {
        self.table.get(&setup.to_string())?.get(model).copied()
    }
}

/// Pair pool for one seed: reference/target pairs for both target pools
/// when the manifest has them, plus all-pairs for the Tobacco-style setup.
fn pair_pool(manifest: &DatasetManifest, users: &[String], setups: &[Setup], seed: u64) -> Result<Vec<PairRecord>> {
    let mut pool = Vec::new();
    let wants = |src: Source| setups.iter().any(|s| s.target_source() == Some(src));
    for src in [Source::TargetUnstamped, Source::TargetStamped] {
        if wants(src) {
            pool.extend(generate_reference_pairs(manifest, users, src, None, seed)?);
        }
    }
    if setups.contains(&Setup::Tobacco) {
        pool.extend(generate_pairs(manifest, users, seed)?);
    }
    Ok(pool)
}

fn file_stem(setup: Setup, model: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{setup}_{model}_seed{s}"),
        None => format!("{setup}_{model}"),
    }
}

/// Embeds every path not already in `memo`.
fn embed_paths(model: &BackboneModel, paths: &BTreeSet<&str>, memo: &mut HashMap<String, FeatureVector>) -> Result<()> {
    let todo: Vec<&str> = paths.iter().copied().filter(|p| !memo.contains_key(*p)).collect();
    let images = todo
        .iter()
        .map(|p| load_signature(Path::new(p), Polarity::Original))
        .collect::<Result<Vec<_>>>()?;
    for (p, f) in todo.into_iter().zip(extract_batch(model, &images)) {
        memo.insert(p.to_string(), f?);
    }
    Ok(())
}

/// Evaluates every (setup, model, seed) cell and writes `eer_table.csv`
/// (setups as rows, models as columns), `cells.json`, and per-cell ROC
/// JSON/PNG plus scores under `output_dir`.
pub fn run_grid(
    grid: &ExperimentGrid,
    manifest: &DatasetManifest,
    cleaner: Option<&dyn ImageCleaner>,
    backbones: &BTreeMap<String, BackboneModel>,
) -> Result<GridReport> {
    grid.validate()?;
    let missing: Vec<String> = grid
        .setups
        .iter()
        .flat_map(|s| grid.models.iter().map(move |m| (s, m)))
        .filter(|(s, m)| !backbones.contains_key(&m.name) || (s.needs_cleaner() && cleaner.is_none()))
        .map(|(s, m)| {
            let what = if backbones.contains_key(&m.name) { "cleaner" } else { "backbone" };
            format!("{s} x {} ({what})", m.name)
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!("missing models for cells: {}", missing.join(", "))));
    }
    for m in &grid.models {
        let b = &backbones[&m.name];
        if b.meta.arch.to_string() != m.arch.to_string() || b.meta.input_variant != m.variant {
            return Err(Error::validation(format!(
                "backbone '{}' is {}/{} but the grid asks for {}/{}",
                m.name, b.meta.arch, b.meta.input_variant, m.arch, m.variant
            )));
        }
    }
    let users: Vec<String> = match &grid.test_users {
        Some(u) => u.clone(),
        None => manifest.users().into_iter().collect(),
    };
    let out = &grid.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cache = grid.cache_dir.clone().unwrap_or_else(|| out.join("cleaned"));
    let mut memo: BTreeMap<&str, HashMap<String, FeatureVector>> = BTreeMap::new();
    let mut cells = Vec::new();
    let suffix = grid.seeds.len() > 1;

    for &seed in &grid.seeds {
        let pool = pair_pool(manifest, &users, &grid.setups, seed)?;
        for &setup in &grid.setups {
            let pairs = match setup {
                Setup::Tobacco => pool.iter().filter(|p| p.setup == Setup::Tobacco).cloned().collect(),
                _ => {
                    let routed: Vec<PairRecord> = pool.iter().filter(|p| p.setup != Setup::Tobacco).cloned().collect();
                    assemble_setup(manifest, &routed, setup, cleaner, &cache)?
                }
            };
            let paths: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.ref_path.as_str(), p.target_path.as_str()]).collect();
            let mut curves = Vec::new();
            for m in &grid.models {
                let feats = memo.entry(m.name.as_str()).or_default();
                embed_paths(&backbones[&m.name], &paths, feats)?;
                let scores = score_pairs(&pairs, feats)?;
                let report = evaluate(&scores)?;
                let stem = file_stem(setup, &m.name, suffix.then_some(seed));
                write_report_json(&out.join(format!("roc_{stem}.json")), &report)?;
                write_scores_csv(&out.join(format!("scores_{stem}.csv")), &scores)?;
                curves.push((m.name.clone(), report.roc.clone()));
                render_roc_png(&out.join(format!("roc_{stem}.png")), &[(m.name.as_str(), report.roc.as_slice())])?;
                cells.push(GridCell {
                    setup,
                    model: m.name.clone(),
                    seed,
                    report,
                });
            }
            if curves.len() > 1 {
                let refs: Vec<(&str, &[_])> = curves.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
                let name = match suffix {
                    true => format!("roc_{setup}_all_seed{seed}.png"),
                    false => format!("roc_{setup}_all.png"),
                };
                render_roc_png(&out.join(name), &refs)?;
            }
        }
    }

    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for s in &grid.setups {
        for m in &grid.models {
            let e: Vec<f64> = cells
                .iter()
                .filter(|c| c.setup == *s && c.model == m.name)
                .map(|c| c.report.eer)
                .collect();
            table
                .entry(s.to_string())
                .or_default()
                .insert(m.name.clone(), e.iter().sum::<f64>() / e.len() as f64);
        }
    }
    let report = GridReport { cells, table };
    write_table_csv(&out.join("eer_table.csv"), grid, &report)?;
    let cells_path = out.join("cells.json");
    std::fs::write(&cells_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&cells_path, e))?;
    Ok(report)
}

fn write_table_csv(path: &Path, grid: &ExperimentGrid, report: &GridReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["setup".to_string()];
    header.extend(grid.models.iter().map(|m| m.name.clone()));
    w.write_record(&header)?;
    for s in &grid.setups {
        let mut row = vec![s.to_string()];
        for m in &grid.models {
            row.push(format!("{:.2}", report.eer(*s, &m.name).unwrap_or(f64::NAN)));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
