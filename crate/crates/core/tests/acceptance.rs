//! One pass/fail line per acceptance criterion. Runs as a plain binary so
//! every criterion reports even when an earlier one fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigverify::backbone::FeatureVector;
use sigverify::cleaner::{
    adversarial_loss, adversarial_loss_grad, cycle_loss, cycle_loss_backward, CleanerModel, CleanerTrainConfig,
};
use sigverify::dataset::{
    build_manifest, generate_pairs, split_representation, split_verification_users, DatasetManifest, Label, Layout,
    ManifestEntry, SplitUnit,
};
use sigverify::harness::experiments::{
    run_separable_experiment, run_stamp_experiment, SeparableExperimentConfig, StampExperimentConfig,
};
use sigverify::harness::{humaneval_report, majority_vote, plan_humaneval, Decision, HumanEvalConfig, HumanVote};
use sigverify::imaging::Source;
use sigverify::nn::{Init, LayerSpec, NamedSpec, PadMode, Sequential, Tensor};
use sigverify::verifier::{compute_eer_global, compute_roc, cosine_similarity, ScoreRecord};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = rng.gen_range(2..=500);
    let levels = rng.gen_range(1..=20);
    let mut s: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let label = if rng.gen_bool(0.5) { Label::Match } else { Label::Mismatch };
            // half the sets draw from a small grid, forcing ties and duplicates
            let v = if n % 2 == 0 {
                rng.gen_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0
            } else {
                rng.gen_range(-1.0..1.0)
            };
            ScoreRecord::new(format!("p{i}"), v, label)
        })
        .collect();
    s[0].label = Label::Match;
    s[1].label = Label::Mismatch;
    s
}

/// Exhaustive search over every midpoint, using exact rational comparison.
fn brute_eer(s: &[ScoreRecord]) -> (f64, f64, f64, f64) {
    let mut v: Vec<f64> = s.iter().map(|r| r.similarity).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    let mut cands = vec![f64::NEG_INFINITY];
    for i in 1..v.len() {
        cands.push(v[i - 1] + (v[i] - v[i - 1]) / 2.0);
    }
    cands.push(f64::INFINITY);
    let np = s.iter().filter(|r| r.label == Label::Match).count() as i128;
    let nn = s.len() as i128 - np;
    let mut best: Option<(i128, f64, i128, i128)> = None;
    for t in cands {
        let mut fa = 0i128;
        let mut fr = 0i128;
        for r in s {
            match r.label {
                Label::Mismatch if r.similarity >= t => fa += 1,
                Label::Match if r.similarity < t => fr += 1,
                _ => {}
            }
        }
        let gap = (fa * np - fr * nn).abs();
        if best.map_or(true, |b| gap < b.0) {
            best = Some((gap, t, fa, fr));
        }
    }
    let (_, t, fa, fr) = best.unwrap();
    let far = fa as f64 / nn as f64;
    let frr = fr as f64 / np as f64;
    ((far + frr) / 2.0, t, far, frr)
}

fn eer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sets: Vec<_> = (0..200).map(|_| random_scores(&mut rng)).collect();
    let t = Instant::now();
    let mut bad = 0;
    for s in &sets {
        let got = compute_eer_global(s).map_err(|e| e.to_string())?;
        let (eer, thr, far, frr) = brute_eer(s);
        if got.eer != eer || got.threshold != thr || got.far != far || got.frr != frr {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(bad == 0 && secs < 5.0, format!("200 sets, {bad} mismatches, {secs:.2}s (limit 5s)"))
}

fn roc_counting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sets: Vec<_> = (0..50).map(|_| random_scores(&mut rng)).collect();
    let t = Instant::now();
    let (mut bad, mut nonmono, mut points) = (0, 0, 0);
    for s in &sets {
        let roc = compute_roc(s).map_err(|e| e.to_string())?;
        let np = s.iter().filter(|r| r.label == Label::Match).count() as f64;
        let nn = s.len() as f64 - np;
        for p in &roc {
            let tp = s.iter().filter(|r| r.label == Label::Match && r.similarity >= p.threshold).count() as f64;
            let fp = s.iter().filter(|r| r.label == Label::Mismatch && r.similarity >= p.threshold).count() as f64;
            if tp / np != p.tpr || fp / nn != p.fpr {
                bad += 1;
            }
        }
        points += roc.len();
        let ends = roc.first().map(|p| (p.tpr, p.fpr)) == Some((0.0, 0.0))
            && roc.last().map(|p| (p.tpr, p.fpr)) == Some((1.0, 1.0));
        if !ends || roc.windows(2).any(|w| w[1].tpr < w[0].tpr || w[1].fpr < w[0].fpr || w[1].threshold >= w[0].threshold) {
            nonmono += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        bad == 0 && nonmono == 0 && secs < 5.0,
        format!("50 sets, {points} points, {bad} count mismatches, {nonmono} non-monotone, {secs:.2}s (limit 5s)"),
    )
}

fn cosine_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let feats: Vec<Vec<f64>> = (0..60).map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let fv = |v: &[f64], c: f64| FeatureVector::new(v.iter().map(|x| x * c).collect(), "m");
    let mut worst_sym = 0.0f64;
    let mut worst_self = 0.0f64;
    for a in &feats {
        worst_self = worst_self.max((cosine_similarity(&fv(a, 1.0), &fv(a, 1.0)).unwrap() - 1.0).abs());
        for b in &feats {
            let ab = cosine_similarity(&fv(a, 1.0), &fv(b, 1.0)).unwrap();
            let ba = cosine_similarity(&fv(b, 1.0), &fv(a, 1.0)).unwrap();
            worst_sym = worst_sym.max((ab - ba).abs());
        }
    }
    // writer = index / 3
    let eer_at = |c: f64| {
        let mut s = Vec::new();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let label = if i / 3 == j / 3 { Label::Match } else { Label::Mismatch };
                let sim = cosine_similarity(&fv(&feats[i], c), &fv(&feats[j], c)).unwrap();
                s.push(ScoreRecord::new(format!("{i}-{j}"), sim, label));
            }
        }
        compute_eer_global(&s).unwrap().eer
    };
    let base = eer_at(1.0);
    let drift = [0.1, 10.0].iter().map(|&c| (eer_at(c) - base).abs()).fold(0.0, f64::max);
    check(
        worst_sym == 0.0 && worst_self < 1e-12 && drift <= 1e-12,
        format!("symmetry gap {worst_sym:e}, |self-1| {worst_self:e}, EER drift over c in {{0.1,1,10}} {drift:e}"),
    )
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn flat_grads(net: &Sequential) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.grad.iter().copied().collect::<Vec<_>>()).collect()
}

/// Central differences of `f` over every parameter of `net`.
fn numeric_grads(net: &Sequential, f: impl Fn(&Sequential) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::new();
    let shapes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    for (pi, len) in shapes.into_iter().enumerate() {
        for k in 0..len {
            let mut plus = net.clone();
            plus.params_mut()[pi].value.as_slice_mut().unwrap()[k] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].value.as_slice_mut().unwrap()[k] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // 2-parameter discriminator: sigmoid(w * x + b)
    let d_specs = vec![
        NamedSpec::new("fc", LayerSpec::Linear { in_features: 1, out_features: 1, init: Init::Xavier }),
        NamedSpec::new("p", LayerSpec::Sigmoid),
    ];
    let mut d = Sequential::from_specs(&d_specs, 3).map_err(|e| e.to_string())?;
    let real = Tensor::from_shape_fn((6, 1, 1, 1), |_| rng.gen_range(0.5..1.5));
    let fake = Tensor::from_shape_fn((6, 1, 1, 1), |_| rng.gen_range(-1.5..0.5));
    let adv = |net: &Sequential| {
        let pr: Vec<f64> = net.forward(&real).iter().copied().collect();
        let pf: Vec<f64> = net.forward(&fake).iter().copied().collect();
        adversarial_loss(&pr, &pf).unwrap()
    };
    d.zero_grad();
    let pr = d.forward_train(&real);
    let (_, gr, _) = adversarial_loss_grad(&pr.iter().copied().collect::<Vec<_>>(), &[0.5]).unwrap();
    d.backward(&Tensor::from_shape_vec(pr.raw_dim(), gr).unwrap());
    let pf = d.forward_train(&fake);
    let (_, _, gf) = adversarial_loss_grad(&[0.5], &pf.iter().copied().collect::<Vec<_>>()).unwrap();
    d.backward(&Tensor::from_shape_vec(pf.raw_dim(), gf).unwrap());
    let e_adv = rel_err(&flat_grads(&d), &numeric_grads(&d, adv));

    // 10-parameter 3x3 conv generators
    let conv = |seed: u64| {
        let spec = vec![NamedSpec::new(
            "c",
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                pad_mode: PadMode::Zero,
                bias: true,
                init: Init::Normal { std: 0.4 },
            },
        )];
        Sequential::from_specs(&spec, seed).unwrap()
    };
    let (mut g, mut f) = (conv(5), conv(6));
    let x = Tensor::from_shape_fn((2, 1, 4, 4), |_| rng.gen());
    let y = Tensor::from_shape_fn((2, 1, 4, 4), |_| rng.gen());
    g.zero_grad();
    f.zero_grad();
    cycle_loss_backward(&mut g, &mut f, &x, &y).map_err(|e| e.to_string())?;
    let e_g = rel_err(&flat_grads(&g), &numeric_grads(&g, |gn| cycle_loss(gn, &f, &x, &y).unwrap()));
    let e_f = rel_err(&flat_grads(&f), &numeric_grads(&f, |fnet| cycle_loss(&g, fnet, &x, &y).unwrap()));

    let id = CleanerModel::new(CleanerTrainConfig::default()).map_err(|e| e.to_string())?;
    let big = Tensor::from_shape_fn((2, 1, 16, 16), |_| rng.gen());
    let zero = cycle_loss(&id.g, &id.f, &big, &big).map_err(|e| e.to_string())?;
    let worst = e_adv.max(e_g).max(e_f);
    check(
        worst < 1e-4 && zero == 0.0,
        format!(
            "rel err adversarial {e_adv:.1e} (2 params), cycle G {e_g:.1e} / F {e_f:.1e} (20 params), identity cycle loss {zero}"
        ),
    )
}

fn out_dir(name: &str) -> PathBuf {
    let base = std::env::var_os("ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("sigverify-acceptance-{}", std::process::id())));
    let d = base.join(name);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn stamp_removal() -> (Outcome, Option<CleanerModel>) {
    let cfg = StampExperimentConfig::default();
    match run_stamp_experiment(&cfg, Some(&out_dir("stamp"))) {
        Err(e) => (Err(e.to_string()), None),
        Ok((model, r)) => {
            let need = r.psnr_stamped + 3.0;
            let outcome = check(
                r.psnr_cleaned >= need && r.train_seconds <= 7200.0,
                format!(
                    "held-out PSNR stamped {:.2} dB -> cleaned {:.2} dB (gain {:+.2}, need +3.00); clean input passthrough {:.2} dB; {} unpaired images/domain, epoch {} picked on validation, trained {:.0}s CPU",
                    r.psnr_stamped, r.psnr_cleaned, r.gain_db, r.psnr_clean_passthrough, r.n_train_clean, r.selected_epoch.map_or("none".into(), |e| e.to_string()), r.train_seconds
                ),
            );
            (outcome, Some(model))
        }
    }
}

fn separable(cleaner: Option<&CleanerModel>) -> Outcome {
    let cleaner = cleaner.ok_or("no cleaner from the stamp-removal run")?;
    let cfg = SeparableExperimentConfig::default();
    let r = run_separable_experiment(&cfg, cleaner, &out_dir("separable")).map_err(|e| e.to_string())?;
    let e = |s: &str| r.eer.get(s).copied().unwrap_or(f64::NAN);
    let table: Vec<String> = r.eer.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    check(
        e("S1") < 0.05 && e("S3") > e("S4") && r.train_seconds <= 600.0,
        format!(
            "EER {}; need S1 < 0.05 and S3 > S4; {} test writers, backbone trained {:.0}s (limit 600s)",
            table.join(", "),
            r.test_writers,
            r.train_seconds
        ),
    )
}

fn synthetic_manifest(rng: &mut ChaCha8Rng) -> DatasetManifest {
    let users = rng.gen_range(4..15);
    let mut entries = Vec::new();
    for u in 0..users {
        for k in 0..rng.gen_range(1..8) {
            entries.push(ManifestEntry {
                path: format!("u{u}/s{k}.png"),
                user_id: format!("u{u}"),
                source: Source::Reference,
                has_stamp: None,
            });
        }
    }
    DatasetManifest::new("synthetic", entries).unwrap()
}

fn split_pair_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bad = Vec::new();
    for seed in 0..1000u64 {
        let m = synthetic_manifest(&mut rng);
        let users = m.users().len();
        let n_train = rng.gen_range(1..users);
        let v = split_verification_users(&m, n_train, seed).map_err(|e| e.to_string())?;
        let tr: BTreeSet<&String> = v.train.iter().collect();
        if v.test.iter().any(|u| tr.contains(u)) || tr.len() + v.test.len() != users {
            bad.push(format!("seed {seed}: verification split overlaps"));
        }
        let r = split_representation(&m, (0.6, 0.2, 0.2), seed, SplitUnit::User).map_err(|e| e.to_string())?;
        let sets = [&r.train, &r.val, &r.test].map(|s| s.iter().collect::<BTreeSet<_>>());
        if !sets[0].is_disjoint(&sets[1]) || !sets[0].is_disjoint(&sets[2]) || !sets[1].is_disjoint(&sets[2]) {
            bad.push(format!("seed {seed}: representation split overlaps"));
        }

        let Ok(pairs) = generate_pairs(&m, &v.test, seed) else {
            // every test writer has a single image: no positives to pair
            continue;
        };
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for e in &m.entries {
            if v.test.contains(&e.user_id) {
                *counts.entry(&e.user_id).or_default() += 1;
            }
        }
        let want: u64 = counts.values().map(|&n| n * (n.saturating_sub(1)) / 2).sum();
        let lookup: HashMap<&str, &str> = m.entries.iter().map(|e| (e.path.as_str(), e.user_id.as_str())).collect();
        let pos = pairs.iter().filter(|p| p.label == Label::Match).count() as u64;
        let neg = pairs.len() as u64 - pos;
        let labels_ok = pairs
            .iter()
            .all(|p| (lookup[p.ref_path.as_str()] == lookup[p.target_path.as_str()]) == (p.label == Label::Match));
        if pos != want || neg != pos || !labels_ok {
            bad.push(format!("seed {seed}: {pos} positives (want {want}), {neg} negatives"));
        }
    }
    check(bad.is_empty(), match bad.first() {
        None => "1000 seeds: splits disjoint, positives = sum C(n_u,2), |neg| = |pos|".into(),
        Some(b) => format!("{} failures, first: {b}", bad.len()),
    })
}

fn humaneval_arithmetic() -> Outcome {
    let pool = |tag: &str| -> Vec<sigverify::dataset::PairRecord> {
        (0..400)
            .map(|i| sigverify::dataset::PairRecord {
                pair_id: format!("{tag}{i}"),
                ref_path: format!("{tag}r{i}.png"),
                target_path: format!("{tag}t{i}.png"),
                label: if i % 2 == 0 { Label::Match } else { Label::Mismatch },
                setup: sigverify::dataset::Setup::S1,
            })
            .collect()
    };
    let (ps, pu) = (pool("s"), pool("u"));
    let raters: Vec<String> = (0..18).map(|i| format!("r{i:02}")).collect();
    let plan = plan_humaneval(&ps, &pu, &raters, &HumanEvalConfig::default()).map_err(|e| e.to_string())?;
    let loads: BTreeSet<usize> = raters.iter().map(|r| plan.pairs_for(r).unwrap().len()).collect();
    let mut per_pair: HashMap<&str, usize> = HashMap::new();
    for r in &raters {
        for it in plan.pairs_for(r).unwrap() {
            *per_pair.entry(&it.pair_id).or_default() += 1;
        }
    }
    let counts_ok = plan.items.len() == 360
        && plan.subsets.len() == 6
        && loads == BTreeSet::from([60])
        && per_pair.len() == 360
        && per_pair.values().all(|&c| c == 3)
        && plan.expected_votes() == 1080;

    use Decision::*;
    let table_ok = (0..8u8).all(|bits| {
        let v: Vec<Decision> = (0..3).map(|b| if bits >> b & 1 == 1 { Same } else { Different }).collect();
        majority_vote(&v).unwrap() == if bits.count_ones() >= 2 { Same } else { Different }
    });

    // rater r00..r17: every fifth rater answers wrongly; hand-count the expected accuracies
    let truth: HashMap<String, Label> = ps.iter().chain(&pu).map(|p| (p.pair_id.clone(), p.label)).collect();
    let wrong = |r: &str| r[1..].parse::<usize>().unwrap() % 5 == 0;
    let mut votes = Vec::new();
    let (mut ind_ok, mut maj_ok) = (0usize, 0usize);
    let mut by_pair: HashMap<String, Vec<bool>> = HashMap::new();
    for r in &raters {
        for it in plan.pairs_for(r).unwrap() {
            let correct = if truth[&it.pair_id] == Label::Match { Same } else { Different };
            let d = if wrong(r) { if correct == Same { Different } else { Same } } else { correct };
            ind_ok += (d == correct) as usize;
            by_pair.entry(it.pair_id.clone()).or_default().push(d == correct);
            votes.push(HumanVote { rater_id: r.clone(), pair_id: it.pair_id.clone(), decision: d, timestamp: 0 });
        }
    }
    for v in by_pair.values() {
        maj_ok += (v.iter().filter(|&&b| b).count() >= 2) as usize;
    }
    let rep = humaneval_report(&plan, &votes, &truth, &BTreeMap::new()).map_err(|e| e.to_string())?;
    let report_ok = rep.individual_accuracy == ind_ok as f64 / 1080.0 && rep.majority_accuracy == maj_ok as f64 / 360.0;
    check(
        counts_ok && table_ok && report_ok,
        format!(
            "360 pairs, 6 subsets, 18 raters x {:?} pairs, 3 votes/pair, {} votes; truth table {}; report {:.4}/{:.4} vs hand count {:.4}/{:.4}",
            loads,
            plan.expected_votes(),
            if table_ok { "8/8" } else { "mismatch" },
            rep.majority_accuracy,
            rep.individual_accuracy,
            maj_ok as f64 / 360.0,
            ind_ok as f64 / 1080.0
        ),
    )
}

/// Needs `TOBACCO800_ROOT` and `TOBACCO800_ANNOTATIONS`; optional
/// `TOBACCO800_EXCLUSIONS` and `TOBACCO800_TEST_USERS` (one id per line).
fn tobacco() -> Option<Outcome> {
    let root = PathBuf::from(std::env::var_os("TOBACCO800_ROOT")?);
    let annotations = PathBuf::from(std::env::var_os("TOBACCO800_ANNOTATIONS")?);
    let exclusions = std::env::var_os("TOBACCO800_EXCLUSIONS").map(PathBuf::from);
    let run = || -> Outcome {
        let m = build_manifest(&root, &Layout::Tobacco800 { annotations, exclusions }).map_err(|e| e.to_string())?;
        let users = m.users().len();
        let test: Vec<String> = match std::env::var_os("TOBACCO800_TEST_USERS") {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| e.to_string())?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
            None => split_verification_users(&m, 60, 0).map_err(|e| e.to_string())?.test,
        };
        let pairs = generate_pairs(&m, &test, 0).map_err(|e| e.to_string())?;
        let pos = pairs.iter().filter(|p| p.label == Label::Match).count();
        check(
            m.entries.len() == 746 && users == 130 && pos == 166 && pairs.len() == 332,
            format!("{} signatures / {users} users; {pos} positives / {} pairs", m.entries.len(), pairs.len()),
        )
    };
    Some(run())
}

fn main() {
    // positional arguments select criteria by substring, like libtest filters
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        match run() {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}")
            }
        }
    };
    report("eer-oracle", &mut eer_oracle);
    report("roc-counting", &mut roc_counting);
    report("cosine-invariants", &mut cosine_invariants);
    report("loss-gradients", &mut gradient_checks);
    report("split-pair-invariants", &mut split_pair_invariants);
    report("humaneval-arithmetic", &mut humaneval_arithmetic);
    let mut cleaner = None;
    report("stamp-removal", &mut || {
        let (o, m) = stamp_removal();
        cleaner = m;
        o
    });
    report("separable-end-to-end", &mut || match &cleaner {
        Some(c) => separable(Some(c)),
        None => {
            let (_, m) = stamp_removal();
            separable(m.as_ref())
        }
    });
    if wanted("tobacco800") {
        match tobacco() {
            Some(o) => report("tobacco800", &mut || o.clone()),
            None => println!("SKIP  tobacco800: set TOBACCO800_ROOT and TOBACCO800_ANNOTATIONS to run"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
