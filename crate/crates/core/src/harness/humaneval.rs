//! Subjective evaluation protocol: pair selection, subset/rater assignment,
//! vote aggregation and the human-vs-model accuracy report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, PairRecord};
use crate::error::{Error, Result};
use crate::verifier::{accuracy_at_threshold, compute_eer_global, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalConfig {
    pub n_pairs: usize,
    /// Share of pairs drawn from the stamped pool.
    pub stamped_fraction: f64,
    pub n_subsets: usize,
    pub raters_per_pair: usize,
    /// Share of `match` pairs within each pool; `None` samples uniformly,
    /// keeping the pool's own ratio in expectation.
    #[serde(default)]
    pub match_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for HumanEvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 360,
            stamped_fraction: 0.5,
            n_subsets: 6,
            raters_per_pair: 3,
            match_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Stamped,
    Unstamped,
}

/// What a rater is shown. Carries no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub pair_id: String,
    pub ref_path: String,
    pub target_path: String,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvalPlan {
    pub items: Vec<PlanItem>,
    pub n_subsets: usize,
    pub raters_per_pair: usize,
    pub rater_ids: Vec<String>,
    /// Pair indices into `items`, one list per subset.
    pub subsets: Vec<Vec<usize>>,
    /// Subset indices per rater.
    pub assignments: BTreeMap<String, Vec<usize>>,
    pub seed: u64,
}

impl HumanEvalPlan {
    pub fn pairs_for(&self, rater: &str) -> Option<Vec<&PlanItem>> {
        self.assignments.get(rater).map(|subs| {
            subs.iter()
                .flat_map(|&s| self.subsets[s].iter().map(|&i| &self.items[i]))
                .collect()
        })
    }

    pub fn expected_votes(&self) -> usize {
        self.items.len() * self.raters_per_pair
    }

    /// Brute-force recount of the three counting invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.items.len();
        if self.n_subsets == 0 || n % self.n_subsets != 0 {
            return Err(Error::validation(format!(
                "|pairs| = {n} is not divisible by n_subsets = {}",
                self.n_subsets
            )));
        }
        let ids: HashSet<&str> = self.items.iter().map(|i| i.pair_id.as_str()).collect();
        if ids.len() != n {
            return Err(Error::validation("duplicate pair ids in plan"));
        }
        let mut per_pair: HashMap<&str, HashSet<&str>> = HashMap::new();
        let mut per_rater: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.rater_ids {
            let items = self
                .pairs_for(r)
                .ok_or_else(|| Error::validation(format!("rater {r} has no assignment")))?;
            per_rater.insert(r, items.len());
            for it in items {
                if !per_pair.entry(&it.pair_id).or_default().insert(r) {
                    return Err(Error::validation(format!("rater {r} sees {} twice", it.pair_id)));
                }
            }
        }
        for it in &self.items {
            let k = per_pair.get(it.pair_id.as_str()).map_or(0, |s| s.len());
            if k != self.raters_per_pair {
                return Err(Error::validation(format!(
                    "pair {} has {k} raters, expected {}",
                    it.pair_id, self.raters_per_pair
                )));
            }
        }
        let load = n * self.raters_per_pair / self.rater_ids.len().max(1);
        if let Some((r, c)) = per_rater.iter().find(|(_, &c)| c != load) {
            return Err(Error::validation(format!("rater {r} has {c} pairs, expected {load}")));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        plan.check()?;
        Ok(plan)
    }
}

fn select<'a>(pool: &'a [PairRecord], k: usize, match_fraction: Option<f64>, rng: &mut ChaCha8Rng, name: &str) -> Result<Vec<&'a PairRecord>> {
    let short = |have: usize, want: usize, what: &str| {
        Error::validation(format!("{name} pool has {have} {what} pairs, plan needs {want}"))
    };
    match match_fraction {
        None => {
            if pool.len() < k {
                return Err(short(pool.len(), k, "candidate"));
            }
            Ok(pool.choose_multiple(rng, k).collect())
        }
        Some(f) => {
            let km = (f * k as f64).round() as usize;
            let (m, n): (Vec<&PairRecord>, Vec<&PairRecord>) = pool.iter().partition(|p| p.label == Label::Match);
            if m.len() < km {
                return Err(short(m.len(), km, "match"));
            }
            if n.len() < k - km {
                return Err(short(n.len(), k - km, "mismatch"));
            }
            let mut out: Vec<&PairRecord> = m.choose_multiple(rng, km).copied().collect();
            out.extend(n.choose_multiple(rng, k - km).copied());
            Ok(out)
        }
    }
}

/// Draws the pairs, splits them into equal subsets and assigns subset slots
/// to raters round-robin, so every subset gets `raters_per_pair` distinct
/// raters and every rater the same load.
pub fn plan_humaneval(
    pairs_stamped: &[PairRecord],
    pairs_unstamped: &[PairRecord],
    raters: &[String],
    cfg: &HumanEvalConfig,
) -> Result<HumanEvalPlan> {
    let (n, s, k, r) = (cfg.n_pairs, cfg.n_subsets, cfg.raters_per_pair, raters.len());
    if n == 0 || s == 0 || k == 0 || r == 0 {
        return Err(Error::validation("n_pairs, n_subsets, raters_per_pair and raters must be positive"));
    }
    if n % s != 0 {
        return Err(Error::validation(format!("|pairs| mod n_subsets = {n} mod {s} != 0")));
    }
    if (s * k) % r != 0 {
        return Err(Error::validation(format!(
            "|raters| * load = |pairs| * raters_per_pair fails: {s} subsets * {k} raters per pair do not divide evenly among {r} raters"
        )));
    }
    if k > r {
        return Err(Error::validation(format!("raters_per_pair {k} exceeds rater count {r}")));
    }
    if raters.iter().collect::<HashSet<_>>().len() != r {
        return Err(Error::validation("rater ids must be distinct"));
    }
    if !(0.0..=1.0).contains(&cfg.stamped_fraction) || cfg.match_fraction.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::validation("fractions must lie in [0, 1]"));
    }
    let n_stamped = (cfg.stamped_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items: Vec<PlanItem> = Vec::with_capacity(n);
    for (pool, count, cond, name) in [
        (pairs_stamped, n_stamped, Condition::Stamped, "stamped"),
        (pairs_unstamped, n - n_stamped, Condition::Unstamped, "unstamped"),
    ] {
        for p in select(pool, count, cfg.match_fraction, &mut rng, name)? {
            items.push(PlanItem {
                pair_id: p.pair_id.clone(),
                ref_path: p.ref_path.clone(),
                target_path: p.target_path.clone(),
                condition: cond,
            });
        }
    }
    if items.iter().map(|i| &i.pair_id).collect::<HashSet<_>>().len() != n {
        return Err(Error::validation("stamped and unstamped pools share pair ids"));
    }
    items.shuffle(&mut rng);
    let per = n / s;
    let subsets: Vec<Vec<usize>> = (0..s).map(|j| (j * per..(j + 1) * per).collect()).collect();
    let mut assignments: BTreeMap<String, Vec<usize>> = raters.iter().map(|r| (r.clone(), Vec::new())).collect();
    for slot in 0..s * k {
        assignments.get_mut(&raters[slot % r]).expect("known rater").push(slot / k);
    }
    let plan = HumanEvalPlan {
        items,
        n_subsets: s,
        raters_per_pair: k,
        rater_ids: raters.to_vec(),
        subsets,
        assignments,
        seed: cfg.seed,
    };
    plan.check()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Same,
    Different,
}

impl Decision {
    pub fn is_correct(self, label: Label) -> bool {
        matches!((self, label), (Decision::Same, Label::Match) | (Decision::Different, Label::Mismatch))
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Same => "same",
            Decision::Different => "different",
        })
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "same" => Ok(Decision::Same),
            "different" => Ok(Decision::Different),
            other => Err(Error::validation(format!("unknown decision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanVote {
    pub rater_id: String,
    pub pair_id: String,
    pub decision: Decision,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn majority_vote(votes: &[Decision]) -> Result<Decision> {
    if votes.len() % 2 == 0 {
        return Err(Error::validation(format!(
            "majority vote needs an odd number of votes, got {}",
            votes.len()
        )));
    }
    let same = votes.iter().filter(|&&d| d == Decision::Same).count();
    Ok(if 2 * same > votes.len() { Decision::Same } else { Decision::Different })
}

pub fn write_votes_csv(path: &Path, votes: &[HumanVote]) -> Result<()> {
    std::fs::write(path, votes_csv(votes)?).map_err(|e| Error::io(path, e))
}

pub fn votes_csv(votes: &[HumanVote]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["rater_id", "pair_id", "decision", "timestamp"])?;
    for v in votes {
        w.serialize(v)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_votes_csv(path: &Path) -> Result<Vec<HumanVote>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub eer: f64,
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalReport {
    pub n_pairs: usize,
    pub n_votes: usize,
    pub majority_accuracy: f64,
    pub individual_accuracy: f64,
    /// Accuracy at the EER threshold fitted on the same pairs.
    pub models: BTreeMap<String, ModelAccuracy>,
    pub by_condition: BTreeMap<String, ConditionAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAccuracy {
    pub n_pairs: usize,
    pub majority_accuracy: f64,
    pub individual_accuracy: f64,
}

/// Majority-vote, pooled-individual and per-model accuracies on the
/// planned pairs. Every planned (rater, pair) vote must be present.
pub fn humaneval_report(
    plan: &HumanEvalPlan,
    votes: &[HumanVote],
    ground_truth: &HashMap<String, Label>,
    model_scores: &BTreeMap<String, Vec<ScoreRecord>>,
) -> Result<HumanEvalReport> {
    let mut by_key: HashMap<(&str, &str), Decision> = HashMap::new();
    for v in votes {
        if by_key.insert((&v.rater_id, &v.pair_id), v.decision).is_some() {
            return Err(Error::validation(format!(
                "duplicate vote by {} on {}",
                v.rater_id, v.pair_id
            )));
        }
    }
    let mut gaps = Vec::new();
    let mut per_pair: HashMap<&str, Vec<Decision>> = HashMap::new();
    for r in &plan.rater_ids {
        for it in plan.pairs_for(r).unwrap_or_default() {
            match by_key.get(&(r.as_str(), it.pair_id.as_str())) {
                Some(&d) => per_pair.entry(&it.pair_id).or_default().push(d),
                None => gaps.push(format!("({r}, {})", it.pair_id)),
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::validation(format!("missing votes: {}", gaps.join(", "))));
    }
    if by_key.len() != plan.expected_votes() {
        return Err(Error::validation(format!(
            "{} votes recorded for {} planned slots",
            by_key.len(),
            plan.expected_votes()
        )));
    }

    let mut tallies: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
    let (mut maj_ok, mut ind_ok, mut ind_n) = (0, 0, 0);
    for it in &plan.items {
        let label = *ground_truth
            .get(&it.pair_id)
            .ok_or_else(|| Error::validation(format!("no ground truth for {}", it.pair_id)))?;
        let ds = &per_pair[it.pair_id.as_str()];
        let m = majority_vote(ds)?.is_correct(label) as usize;
        let i = ds.iter().filter(|d| d.is_correct(label)).count();
        maj_ok += m;
        ind_ok += i;
        ind_n += ds.len();
        let key = match it.condition {
            Condition::Stamped => "stamped",
            Condition::Unstamped => "unstamped",
        };
        let t = tallies.entry(key.to_string()).or_default();
        t.0 += 1;
        t.1 += m;
        t.2 += i;
        t.3 += ds.len();
    }

    let planned: HashSet<&str> = plan.items.iter().map(|i| i.pair_id.as_str()).collect();
    let mut models = BTreeMap::new();
    for (name, scores) in model_scores {
        let subset: Vec<ScoreRecord> = scores.iter().filter(|s| planned.contains(s.pair_id.as_str())).cloned().collect();
        if subset.len() != planned.len() {
            return Err(Error::validation(format!(
                "model {name} scores {} of {} planned pairs",
                subset.len(),
                planned.len()
            )));
        }
        let eer = compute_eer_global(&subset)?;
        models.insert(
            name.clone(),
            ModelAccuracy {
                eer: eer.eer,
                threshold: eer.threshold,
                accuracy: accuracy_at_threshold(&subset, eer.threshold),
            },
        );
    }
    let n = plan.items.len();
    Ok(HumanEvalReport {
        n_pairs: n,
        n_votes: ind_n,
        majority_accuracy: maj_ok as f64 / n as f64,
        individual_accuracy: ind_ok as f64 / ind_n as f64,
        models,
        by_condition: tallies
            .into_iter()
            .map(|(k, (np, m, i, nv))| {
                (
                    k,
                    ConditionAccuracy {
                        n_pairs: np,
                        majority_accuracy: m as f64 / np as f64,
                        individual_accuracy: i as f64 / nv as f64,
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Setup;

    pub(crate) fn pool(tag: &str, n: usize) -> Vec<PairRecord> {
        (0..n)
            .map(|i| PairRecord {
                pair_id: format!("{tag}{i}"),
                ref_path: format!("r{i}.png"),
                target_path: format!("{tag}{i}.png"),
                label: if i % 2 == 0 { Label::Match } else { Label::Mismatch },
                setup: Setup::S1,
            })
            .collect()
    }

    fn raters(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("rater{i:02}")).collect()
    }

    #[test]
    fn default_plan_counts() {
        let plan = plan_humaneval(&pool("s", 400), &pool("u", 400), &raters(18), &HumanEvalConfig::default()).unwrap();
        assert_eq!(plan.items.len(), 360);
        assert_eq!(plan.subsets.len(), 6);
        assert!(plan.subsets.iter().all(|s| s.len() == 60));
        assert_eq!(plan.expected_votes(), 1080);
        for r in &plan.rater_ids {
            assert_eq!(plan.pairs_for(r).unwrap().len(), 60);
        }
        assert_eq!(plan.items.iter().filter(|i| i.condition == Condition::Stamped).count(), 180);
    }

    #[test]
    fn small_plan_and_errors() {
        let cfg = HumanEvalConfig {
            n_pairs: 40,
            n_subsets: 2,
            raters_per_pair: 2,
            ..Default::default()
        };
        let plan = plan_humaneval(&pool("s", 30), &pool("u", 30), &raters(4), &cfg).unwrap();
        assert!(plan.rater_ids.iter().all(|r| plan.pairs_for(r).unwrap().len() == 20));

        assert!(plan_humaneval(&pool("s", 30), &pool("u", 30), &raters(5), &cfg).is_err());
        let odd = HumanEvalConfig { n_pairs: 41, ..cfg.clone() };
        assert!(plan_humaneval(&pool("s", 30), &pool("u", 30), &raters(4), &odd).is_err());
        assert!(plan_humaneval(&pool("s", 5), &pool("u", 30), &raters(4), &cfg).is_err());
    }

    #[test]
    fn balance_parameter() {
        let cfg = HumanEvalConfig {
            n_pairs: 40,
            n_subsets: 2,
            raters_per_pair: 1,
            match_fraction: Some(0.25),
            ..Default::default()
        };
        let gt: HashMap<String, Label> = pool("s", 40).into_iter().chain(pool("u", 40)).map(|p| (p.pair_id, p.label)).collect();
        let plan = plan_humaneval(&pool("s", 40), &pool("u", 40), &raters(2), &cfg).unwrap();
        let matches = plan.items.iter().filter(|i| gt[&i.pair_id] == Label::Match).count();
        assert_eq!(matches, 10);
    }

    #[test]
    fn majority_truth_table() {
        use Decision::*;
        for bits in 0..8u8 {
            let votes: Vec<Decision> = (0..3).map(|b| if bits >> b & 1 == 1 { Same } else { Different }).collect();
            let want = if bits.count_ones() >= 2 { Same } else { Different };
            assert_eq!(majority_vote(&votes).unwrap(), want, "{votes:?}");
        }
        assert!(majority_vote(&[Same, Different]).is_err());
        assert!(majority_vote(&[]).is_err());
    }
}
