//! Python bindings: manifests and pairs, the cleaner, backbones and the
//! verification metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sigverify::backbone::{build_backbone, extract_features, Arch, BackboneModel, FeatureVector, InputVariant};
use sigverify::cleaner::{clean, CleanerModel, CleanerTrainConfig};
use sigverify::dataset::{self, DatasetManifest, Label, Layout, PairRecord};
use sigverify::imaging::{load_signature, InputSpec, Polarity, SignatureImage};
use sigverify::verifier::{self, ScoreRecord};

fn err(e: sigverify::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn label(is_match: bool) -> Label {
    if is_match {
        Label::Match
    } else {
        Label::Mismatch
    }
}

fn scores(similarities: &[f64], is_match: &[bool]) -> PyResult<Vec<ScoreRecord>> {
    if similarities.len() != is_match.len() {
        return Err(PyValueError::new_err("similarities and labels differ in length"));
    }
    Ok(similarities
        .iter()
        .zip(is_match)
        .enumerate()
        .map(|(i, (&s, &m))| ScoreRecord::new(i.to_string(), s, label(m)))
        .collect())
}

fn to_image(rows: Vec<Vec<f64>>) -> PyResult<SignatureImage> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let px = Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    SignatureImage::new(px, Polarity::Original).map_err(err)
}

fn to_rows(img: &SignatureImage) -> Vec<Vec<f64>> {
    img.pixels().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Cosine similarity of two feature vectors.
#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    verifier::cosine_similarity(&FeatureVector::new(a, "py"), &FeatureVector::new(b, "py")).map_err(err)
}

/// Global EER over scores; returns (eer, threshold, far, frr).
#[pyfunction]
fn compute_eer(similarities: Vec<f64>, is_match: Vec<bool>) -> PyResult<(f64, f64, f64, f64)> {
    let r = verifier::compute_eer_global(&scores(&similarities, &is_match)?).map_err(err)?;
    Ok((r.eer, r.threshold, r.far, r.frr))
}

/// ROC points as (threshold, tpr, fpr), one per distinct threshold.
#[pyfunction]
fn compute_roc(similarities: Vec<f64>, is_match: Vec<bool>) -> PyResult<Vec<(f64, f64, f64)>> {
    let roc = verifier::compute_roc(&scores(&similarities, &is_match)?).map_err(err)?;
    Ok(roc.into_iter().map(|p| (p.threshold, p.tpr, p.fpr)).collect())
}

/// Writes a synthetic writer corpus; returns the number of images.
#[pyfunction]
#[pyo3(signature = (root, writers=20, seed=0))]
fn write_synthetic_corpus(root: PathBuf, writers: usize, seed: u64) -> PyResult<usize> {
    let cfg = sigverify::synth::WriterCorpusConfig {
        writers,
        seed,
        ..Default::default()
    };
    sigverify::synth::write_writer_corpus(&root, &cfg).map_err(err)
}

#[pyclass(name = "Manifest", frozen)]
struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    /// Indexes a `<root>/<user>/<source>/` tree.
    #[staticmethod]
    fn build(root: PathBuf) -> PyResult<Self> {
        let inner = dataset::build_manifest(&root, &Layout::UserDirs).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DatasetManifest::read_csv(&path).map_err(err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(err)
    }

    fn users(&self) -> Vec<String> {
        self.inner.users().into_iter().collect()
    }

    /// (path, user_id, source) per entry.
    fn entries(&self) -> Vec<(String, String, String)> {
        self.inner
            .entries
            .iter()
            .map(|e| (e.path.clone(), e.user_id.clone(), e.source.as_str().to_string()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    /// Splits writers into (train, test) for verification.
    fn split_users(&self, n_train: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
        let s = dataset::split_verification_users(&self.inner, n_train, seed).map_err(err)?;
        Ok((s.train, s.test))
    }

    /// Reference/target pairs as (pair_id, ref_path, target_path, is_match).
    #[pyo3(signature = (users, stamped=false, seed=0))]
    fn reference_pairs(&self, users: Vec<String>, stamped: bool, seed: u64) -> PyResult<Vec<(String, String, String, bool)>> {
        let src = if stamped {
            sigverify::imaging::Source::TargetStamped
        } else {
            sigverify::imaging::Source::TargetUnstamped
        };
        let pairs = dataset::generate_reference_pairs(&self.inner, &users, src, None, seed).map_err(err)?;
        Ok(pairs.into_iter().map(pair_tuple).collect())
    }
}

fn pair_tuple(p: PairRecord) -> (String, String, String, bool) {
    (p.pair_id, p.ref_path, p.target_path, p.label == Label::Match)
}

#[pyclass(name = "Cleaner", frozen)]
struct PyCleaner {
    inner: CleanerModel,
}

#[pymethods]
impl PyCleaner {
    /// Freshly initialized cleaner; its generator starts as the identity.
    #[staticmethod]
    #[pyo3(signature = (height=64, width=64, seed=0))]
    fn untrained(height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let cfg = CleanerTrainConfig {
            input_size: (height, width),
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: CleanerModel::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CleanerModel::load(&dir).map_err(err)?,
        })
    }

    /// Cleans a grayscale image given as rows of values in [0, 1].
    fn clean(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = clean(&self.inner, &to_image(rows)?).map_err(err)?;
        Ok(to_rows(&out))
    }

    fn clean_file(&self, input: PathBuf, output: PathBuf) -> PyResult<()> {
        let img = load_signature(&input, Polarity::Original).map_err(err)?;
        let out = clean(&self.inner, &img).map_err(err)?;
        sigverify::imaging::save_signature(&out, &output).map_err(err)
    }

    fn config_hash(&self) -> String {
        self.inner.meta.config_hash.clone()
    }
}

#[pyclass(name = "Backbone", frozen)]
struct PyBackbone {
    inner: BackboneModel,
}

#[pymethods]
impl PyBackbone {
    /// Untrained network; `arch` is "tiny", "vgg_like" or "resnet_like".
    #[staticmethod]
    #[pyo3(signature = (arch, n_classes, height, width, seed=0))]
    fn build(arch: &str, n_classes: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(err)?;
        let input = match arch {
            Arch::Tiny(_) => InputSpec::grayscale(height, width),
            _ => InputSpec::imagenet(height, width),
        };
        let inner = build_backbone(&arch, n_classes, input, InputVariant::Raw, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: BackboneModel::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn feature_dim(&self) -> PyResult<usize> {
        self.inner.descriptor.feature_dim().map_err(err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.meta.model_id.clone()
    }

    fn extract(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let t = self.inner.preprocess(&to_image(rows)?);
        Ok(extract_features(&self.inner, &t).map_err(err)?.values)
    }

    fn extract_file(&self, path: PathBuf) -> PyResult<Vec<f64>> {
        let img = load_signature(&path, Polarity::Original).map_err(err)?;
        Ok(extract_features(&self.inner, &self.inner.preprocess(&img)).map_err(err)?.values)
    }

    /// Scores pairs of image paths by cosine similarity of their features.
    fn score_pairs(&self, pairs: Vec<(String, String, String, bool)>) -> PyResult<Vec<f64>> {
        let mut feats: HashMap<String, FeatureVector> = HashMap::new();
        for (_, a, b, _) in &pairs {
            for p in [a, b] {
                if !feats.contains_key(p) {
                    let img = load_signature(p.as_ref(), Polarity::Original).map_err(err)?;
                    let f = extract_features(&self.inner, &self.inner.preprocess(&img)).map_err(err)?;
                    feats.insert(p.clone(), f);
                }
            }
        }
        pairs
            .iter()
            .map(|(_, a, b, _)| verifier::cosine_similarity(&feats[a], &feats[b]).map_err(err))
            .collect()
    }
}

#[pymodule]
#[pyo3(name = "sigverify")]
fn sigverify_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_roc, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyCleaner>()?;
    m.add_class::<PyBackbone>()?;
    Ok(())
}
