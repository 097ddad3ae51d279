//! Pair scoring by cosine similarity, ROC curves and the global equal error
//! rate.
//!
//! Decision rule everywhere: a pair is predicted `match` iff
//! `similarity >= threshold`.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureVector;
use crate::dataset::{Label, PairRecord};
use crate::error::{Error, Result};

pub const DECISION_RULE: &str = "match iff similarity >= threshold";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub similarity: f64,
    pub label: Label,
}

impl ScoreRecord {
    /// Clamps the similarity into [-1, 1].
    pub fn new(pair_id: impl Into<String>, similarity: f64, label: Label) -> Self {
        Self {
            pair_id: pair_id.into(),
            similarity: similarity.clamp(-1.0, 1.0),
            label,
        }
    }
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm feature vector".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Scores each pair from a path-keyed feature table, preserving order.
pub fn score_pairs(pairs: &[PairRecord], features: &HashMap<String, FeatureVector>) -> Result<Vec<ScoreRecord>> {
    pairs
        .par_iter()
        .map(|p| {
            let lookup = |path: &str| {
                features.get(path).ok_or_else(|| Error::MissingFeature {
                    pair_id: p.pair_id.clone(),
                    path: path.to_string(),
                })
            };
            let a = lookup(&p.ref_path)?;
            let b = lookup(&p.target_path)?;
            Ok(ScoreRecord::new(p.pair_id.clone(), cosine_similarity(a, b)?, p.label))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(rename = "t", with = "threshold_serde")]
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Similarities split by label, each sorted ascending.
struct Split {
    matches: Vec<f64>,
    mismatches: Vec<f64>,
}

impl Split {
    fn new(scores: &[ScoreRecord]) -> Result<Self> {
        let mut matches = Vec::new();
        let mut mismatches = Vec::new();
        for s in scores {
            if s.similarity.is_nan() {
                return Err(Error::validation(format!("NaN similarity for {}", s.pair_id)));
            }
            match s.label {
                Label::Match => matches.push(s.similarity),
                Label::Mismatch => mismatches.push(s.similarity),
            }
        }
        if matches.is_empty() || mismatches.is_empty() {
            return Err(Error::validation(
                "need at least one match and one mismatch score",
            ));
        }
        matches.sort_by(f64::total_cmp);
        mismatches.sort_by(f64::total_cmp);
        Ok(Self { matches, mismatches })
    }

    /// Count of values `>= t` in an ascending slice.
    fn at_or_above(sorted: &[f64], t: f64) -> usize {
        sorted.len() - sorted.partition_point(|&v| v < t)
    }

    /// (false accepts, false rejects) at `t`.
    fn errors_at(&self, t: f64) -> (usize, usize) {
        let fa = Self::at_or_above(&self.mismatches, t);
        let fr = self.matches.len() - Self::at_or_above(&self.matches, t);
        (fa, fr)
    }

    fn distinct_sorted(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.matches.iter().chain(&self.mismatches).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

/// False accept and false reject rates at `t`.
pub fn far_frr(scores: &[ScoreRecord], t: f64) -> Result<(f64, f64)> {
    let split = Split::new(scores)?;
    let (fa, fr) = split.errors_at(t);
    Ok((
        fa as f64 / split.mismatches.len() as f64,
        fr as f64 / split.matches.len() as f64,
    ))
}

/// ROC over `+inf`, every distinct score (descending) and `-inf`.
pub fn compute_roc(scores: &[ScoreRecord]) -> Result<Vec<RocPoint>> {
    let split = Split::new(scores)?;
    let (p, n) = (split.matches.len() as f64, split.mismatches.len() as f64);
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(split.distinct_sorted().into_iter().rev());
    thresholds.push(f64::NEG_INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            tpr: Split::at_or_above(&split.matches, t) as f64 / p,
            fpr: Split::at_or_above(&split.mismatches, t) as f64 / n,
        })
        .collect())
}

/// Candidate thresholds: `-inf`, midpoints of consecutive distinct scores,
/// `+inf`, ascending.
pub fn eer_candidates(scores: &[ScoreRecord]) -> Vec<f64> {
    let mut all: Vec<f64> = scores.iter().map(|s| s.similarity).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    out.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Global EER: the candidate threshold minimizing |FAR - FRR| (lowest
/// threshold on ties), reporting the mean of FAR and FRR there.
pub fn compute_eer_global(scores: &[ScoreRecord]) -> Result<EerResult> {
    let split = Split::new(scores)?;
    let (np, nn) = (split.matches.len() as u128, split.mismatches.len() as u128);
    let mut best: Option<(u128, f64, usize, usize)> = None;
    for t in eer_candidates(scores) {
        let (fa, fr) = split.errors_at(t);
        // |fa/nn - fr/np| scaled by nn*np, compared exactly
        let gap = (fa as u128 * np).abs_diff(fr as u128 * nn);
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, fa, fr));
        }
    }
    let (_, threshold, fa, fr) = best.expect("candidate list is never empty");
    let far = fa as f64 / nn as f64;
    let frr = fr as f64 / np as f64;
    Ok(EerResult {
        eer: (far + frr) / 2.0,
        threshold,
        far,
        frr,
    })
}

/// Fraction of records whose thresholded decision agrees with the label.
pub fn accuracy_at_threshold(scores: &[ScoreRecord], t: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .filter(|s| (s.similarity >= t) == (s.label == Label::Match))
        .count();
    correct as f64 / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    /// Two-decimal rendering of `eer` for tables.
    pub eer_display: String,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub decision_rule: String,
    pub n_match: usize,
    pub n_mismatch: usize,
    pub roc: Vec<RocPoint>,
}

pub fn evaluate(scores: &[ScoreRecord]) -> Result<EvalReport> {
    let eer = compute_eer_global(scores)?;
    let roc = compute_roc(scores)?;
    let n_match = scores.iter().filter(|s| s.label == Label::Match).count();
    Ok(EvalReport {
        eer: eer.eer,
        eer_display: format!("{:.2}", eer.eer),
        threshold: eer.threshold,
        far: eer.far,
        frr: eer.frr,
        decision_rule: DECISION_RULE.to_string(),
        n_match,
        n_mismatch: scores.len() - n_match,
        roc,
    })
}

pub fn write_scores_csv(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["pair_id", "similarity", "label"])?;
    for s in scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map(|s: ScoreRecord| ScoreRecord::new(s.pair_id, s.similarity, s.label)).map_err(Error::from))
        .collect()
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}

/// Renders TPR (y) against FPR (x) with the chance diagonal.
pub fn render_roc_png(path: &Path, curves: &[(&str, &[RocPoint])]) -> Result<()> {
    const SIZE: u32 = 400;
    const MARGIN: u32 = 40;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = (SIZE - 2 * MARGIN) as f64;
    let to_px = |fpr: f64, tpr: f64| -> (i64, i64) {
        (
            (MARGIN as f64 + fpr * span).round() as i64,
            (SIZE as f64 - MARGIN as f64 - tpr * span).round() as i64,
        )
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    draw_line(&mut img, to_px(1.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    draw_line(&mut img, to_px(0.0, 1.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([180, 180, 180]));
    for tick in 1..10 {
        let v = tick as f64 / 10.0;
        let (x, y) = to_px(v, 0.0);
        draw_line(&mut img, (x, y), (x, y + 4), axis);
        let (x, y) = to_px(0.0, v);
        draw_line(&mut img, (x - 4, y), (x, y), axis);
    }
    const PALETTE: [[u8; 3]; 6] = [
        [31, 119, 180],
        [214, 39, 40],
        [44, 160, 44],
        [255, 127, 14],
        [148, 103, 189],
        [23, 190, 207],
    ];
    for (i, (_, pts)) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for w in pts.windows(2) {
            draw_line(&mut img, to_px(w[0].fpr, w[0].tpr), to_px(w[1].fpr, w[1].tpr), color);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Finite thresholds as numbers, infinite ones as `"+inf"` / `"-inf"`.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
        if t.is_finite() {
            s.serialize_f64(*t)
        } else if *t > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "+inf" | "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad threshold '{other}'"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), "m")
    }

    fn rec(i: usize, s: f64, l: Label) -> ScoreRecord {
        ScoreRecord::new(format!("p{i}"), s, l)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&fv(&[1.0, 2.0]), &fv(&[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        let hand = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let c = cosine_similarity(&fv(&[1.0, 2.0, 3.0]), &fv(&[4.0, 5.0, 6.0])).unwrap();
        assert!((c - 0.974631).abs() < 1e-6);
        assert!((c - hand).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&fv(&[0.0, 0.0]), &fv(&[1.0, 0.0])),
            Err(Error::DegenerateEmbedding(_))
        ));
        assert!(matches!(
            cosine_similarity(&fv(&[1.0]), &fv(&[1.0, 0.0])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn score_pairs_order_and_missing() {
        let mut feats = HashMap::new();
        feats.insert("a".to_string(), fv(&[1.0, 0.0]));
        feats.insert("b".to_string(), fv(&[1.0, 0.01]));
        feats.insert("c".to_string(), fv(&[0.0, 1.0]));
        let pair = |id: &str, r: &str, t: &str, l| PairRecord {
            pair_id: id.into(),
            ref_path: r.into(),
            target_path: t.into(),
            label: l,
            setup: crate::dataset::Setup::Tobacco,
        };
        let pairs = vec![
            pair("x", "a", "b", Label::Match),
            pair("y", "a", "c", Label::Mismatch),
            pair("z", "b", "c", Label::Mismatch),
        ];
        let s = score_pairs(&pairs, &feats).unwrap();
        assert_eq!(s.iter().map(|r| r.pair_id.as_str()).collect::<Vec<_>>(), ["x", "y", "z"]);
        assert!(s[0].similarity > 0.999);
        for (r, p) in s.iter().zip(&pairs) {
            let direct = cosine_similarity(&feats[&p.ref_path], &feats[&p.target_path]).unwrap();
            assert_eq!(r.similarity, direct);
        }
        let bad = vec![pair("w", "a", "missing", Label::Match)];
        match score_pairs(&bad, &feats) {
            Err(Error::MissingFeature { pair_id, .. }) => assert_eq!(pair_id, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn separated_scores() {
        let s: Vec<_> = (0..4)
            .map(|i| rec(i, 0.9, Label::Match))
            .chain((4..8).map(|i| rec(i, 0.1, Label::Mismatch)))
            .collect();
        let roc = compute_roc(&s).unwrap();
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let e = compute_eer_global(&s).unwrap();
        assert_eq!(e.eer, 0.0);
        assert_eq!(accuracy_at_threshold(&s, e.threshold), 1.0);
        assert_eq!(accuracy_at_threshold(&s, f64::INFINITY), 0.5);
    }

    #[test]
    fn identical_scores_roc() {
        let s = vec![rec(0, 0.4, Label::Match), rec(1, 0.4, Label::Mismatch), rec(2, 0.4, Label::Mismatch)];
        let roc = compute_roc(&s).unwrap();
        let mut distinct: Vec<(u64, u64)> = roc.iter().map(|p| (p.fpr.to_bits(), p.tpr.to_bits())).collect();
        distinct.dedup();
        assert_eq!(distinct, vec![(0f64.to_bits(), 0f64.to_bits()), (1f64.to_bits(), 1f64.to_bits())]);
    }

    #[test]
    fn small_eer_example() {
        // matches {0.9, 0.2}, mismatches {0.8, 0.1}: midpoints 0.15, 0.5, 0.85.
        // At t = 0.5 FAR = FRR = 1/2, the only zero-gap candidate.
        let s = vec![
            rec(0, 0.9, Label::Match),
            rec(1, 0.2, Label::Match),
            rec(2, 0.8, Label::Mismatch),
            rec(3, 0.1, Label::Mismatch),
        ];
        let e = compute_eer_global(&s).unwrap();
        assert_eq!(e.threshold, 0.5);
        assert_eq!((e.far, e.frr, e.eer), (0.5, 0.5, 0.5));
    }

    #[test]
    fn single_class_rejected() {
        let s = vec![rec(0, 0.9, Label::Match)];
        assert!(compute_eer_global(&s).is_err());
        assert!(compute_roc(&s).is_err());
    }

    #[test]
    fn report_json_infinite_thresholds() {
        let s = vec![rec(0, 0.9, Label::Match), rec(1, 0.1, Label::Mismatch)];
        let r = evaluate(&s).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"+inf\"") && text.contains("\"-inf\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn scores_csv_roundtrip_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![rec(0, 0.9, Label::Match), rec(1, -0.3, Label::Mismatch)];
        let p = dir.path().join("scores.csv");
        write_scores_csv(&p, &s).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("pair_id,similarity,label\n"));
        assert_eq!(read_scores_csv(&p).unwrap(), s);
        let roc = compute_roc(&s).unwrap();
        let png = dir.path().join("roc.png");
        render_roc_png(&png, &[("s1", &roc)]).unwrap();
        assert!(png.exists());
    }
}
