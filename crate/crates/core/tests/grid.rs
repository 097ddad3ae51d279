use std::collections::BTreeMap;
use std::path::Path;

use sigverify::backbone::{build_backbone, Arch, BackboneModel, InputVariant, TinyConfig};
use sigverify::dataset::{build_manifest, DatasetManifest, Layout, Setup};
use sigverify::harness::{run_grid, ExperimentGrid, ModelSpec};
use sigverify::imaging::InputSpec;
use sigverify::synth::{write_writer_corpus, GlyphConfig, WriterCorpusConfig};

fn corpus(root: &Path) -> DatasetManifest {
    let cfg = WriterCorpusConfig {
        writers: 5,
        references_per_writer: 3,
        targets_per_writer: 2,
        glyph: GlyphConfig {
            height: 24,
            width: 48,
            ..GlyphConfig::default()
        },
        seed: 3,
        ..WriterCorpusConfig::default()
    };
    write_writer_corpus(root, &cfg).unwrap();
    build_manifest(root, &Layout::UserDirs).unwrap()
}

fn tiny() -> Arch {
    Arch::Tiny(TinyConfig {
        conv_channels: vec![4, 8],
        embed_width: 16,
        identity_embed: false,
    })
}

fn models() -> (Vec<ModelSpec>, BTreeMap<String, BackboneModel>) {
    let mut specs = Vec::new();
    let mut nets = BTreeMap::new();
    for (name, seed) in [("a", 1), ("b", 2)] {
        let m = build_backbone(&tiny(), 5, InputSpec::grayscale(24, 48), InputVariant::Raw, seed).unwrap();
        specs.push(ModelSpec {
            name: name.into(),
            arch: tiny(),
            variant: InputVariant::Raw,
            checkpoint: None,
        });
        nets.insert(name.to_string(), m);
    }
    (specs, nets)
}

fn grid(out: &Path, setups: Vec<Setup>, specs: Vec<ModelSpec>) -> ExperimentGrid {
    ExperimentGrid {
        setups,
        models: specs,
        seeds: vec![0],
        output_dir: out.to_path_buf(),
        test_users: None,
        cache_dir: None,
    }
}

#[test]
fn two_by_two_grid_writes_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"));
    let (specs, nets) = models();
    let out = dir.path().join("out");
    let report = run_grid(&grid(&out, vec![Setup::S1, Setup::S3], specs), &manifest, None, &nets).unwrap();

    assert_eq!(report.cells.len(), 4);
    for s in ["S1", "S3"] {
        for m in ["a", "b"] {
            for ext in ["json", "png"] {
                assert!(out.join(format!("roc_{s}_{m}.{ext}")).is_file(), "roc_{s}_{m}.{ext}");
            }
            assert!(out.join(format!("scores_{s}_{m}.csv")).is_file());
            let eer = report.table[s][m];
            assert!((0.0..=1.0).contains(&eer));
        }
        assert!(out.join(format!("roc_{s}_all.png")).is_file());
    }
    let table = std::fs::read_to_string(out.join("eer_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "setup,a,b");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("S1,"));
}

#[test]
fn grid_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"));
    let (specs, nets) = models();
    let run = |name: &str| {
        let out = dir.path().join(name);
        run_grid(&grid(&out, vec![Setup::S1, Setup::S3], specs.clone()), &manifest, None, &nets).unwrap();
        (
            std::fs::read_to_string(out.join("eer_table.csv")).unwrap(),
            std::fs::read_to_string(out.join("scores_S3_b.csv")).unwrap(),
        )
    };
    assert_eq!(run("one"), run("two"));
}

#[test]
fn missing_cleaner_is_reported_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"));
    let (specs, nets) = models();
    let err = run_grid(&grid(&dir.path().join("out"), vec![Setup::S1, Setup::S4], specs), &manifest, None, &nets)
        .unwrap_err()
        .to_string();
    assert!(err.contains("S4 x a (cleaner)") && err.contains("S4 x b (cleaner)"), "{err}");
    assert!(!err.contains("S1"), "{err}");
}

#[test]
fn missing_backbone_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"));
    let (specs, mut nets) = models();
    nets.remove("b");
    let err = run_grid(&grid(&dir.path().join("out"), vec![Setup::S1], specs), &manifest, None, &nets)
        .unwrap_err()
        .to_string();
    assert!(err.contains("S1 x b (backbone)"), "{err}");
}

#[test]
fn multiple_seeds_average_the_eer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"));
    let (specs, nets) = models();
    let out = dir.path().join("out");
    let mut g = grid(&out, vec![Setup::S1], specs);
    g.seeds = vec![0, 1, 2];
    let report = run_grid(&g, &manifest, None, &nets).unwrap();
    assert_eq!(report.cells.len(), 6);
    let cells: Vec<f64> = report.cells.iter().filter(|c| c.model == "a").map(|c| c.report.eer).collect();
    let mean = cells.iter().sum::<f64>() / 3.0;
    assert!((report.table["S1"]["a"] - mean).abs() < 1e-12);
    assert!(out.join("roc_S1_a_seed2.json").is_file());
}

#[test]
fn grid_section_parses_from_toml() {
    let text = r#"
[grid]
setups = ["S1", "S3", "S4"]
seeds = [0, 1]
output_dir = "runs/grid"

[[grid.models]]
name = "vgg"
arch = { name = "vgg_like" }
variant = "raw"
checkpoint = "models/vgg"
"#;
    let cfg = sigverify::harness::Config::parse(text, "grid.toml").unwrap();
    let grid = cfg.grid.unwrap();
    assert_eq!(grid.setups, vec![Setup::S1, Setup::S3, Setup::S4]);
    assert_eq!(grid.models[0].arch, Arch::VggLike);
    assert_eq!(grid.models[0].variant, InputVariant::Raw);
    assert_eq!(grid.seeds, vec![0, 1]);
}
