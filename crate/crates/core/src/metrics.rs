//! Offline ranking and classification metrics.
//!
//! Every reduction runs in a fixed order so reports are bit-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored test instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub user: usize,
    /// Candidate group: a positive and the negatives sampled for it.
    pub group: usize,
    pub item: usize,
    pub score: f64,
    pub label: bool,
    pub valid_len: usize,
}

/// Pairwise AUC via rank sums; ties count one half.
pub fn auc_of(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedMetric("auc: no positive instances"));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("auc: no negative instances"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // 2 × rank sum of positives, with midranks for tied runs
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, midrank (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u128;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * tied_pos;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R − p(p+1)/2, so 2U = 2R − p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

pub fn auc(instances: &[ScoredInstance]) -> Result<f64> {
    let scores: Vec<f64> = instances.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = instances.iter().map(|s| s.label).collect();
    auc_of(&scores, &labels)
}

/// Instances grouped by a key, groups in ascending key order.
fn grouped<K: Ord + Copy>(instances: &[ScoredInstance], key: impl Fn(&ScoredInstance) -> K) -> BTreeMap<K, Vec<&ScoredInstance>> {
    let mut out: BTreeMap<K, Vec<&ScoredInstance>> = BTreeMap::new();
    for s in instances {
        out.entry(key(s)).or_default().push(s);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaucWeight {
    /// Number of positives (clicks) of the user.
    #[default]
    Clicks,
    /// Number of scored instances of the user.
    Impressions,
}

/// Weighted mean of per-user AUC; users whose AUC is undefined are left out.
pub fn gauc_weighted(instances: &[ScoredInstance], weight: GaucWeight) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for rows in grouped(instances, |s| s.user).values() {
        let scores: Vec<f64> = rows.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = rows.iter().map(|s| s.label).collect();
        if let Ok(a) = auc_of(&scores, &labels) {
            let w = match weight {
                GaucWeight::Clicks => labels.iter().filter(|&&y| y).count(),
                GaucWeight::Impressions => labels.len(),
            } as f64;
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("gauc: no user with both positives and negatives"));
    }
    Ok(num / den)
}

pub fn gauc(instances: &[ScoredInstance]) -> Result<f64> {
    gauc_weighted(instances, GaucWeight::Clicks)
}

/// 1-based rank of the positive in each candidate group, by descending score.
/// Ties go to the lower item index. Groups without exactly one positive are
/// skipped.
pub fn positive_ranks(instances: &[ScoredInstance]) -> Vec<usize> {
    grouped(instances, |s| s.group)
        .values()
        .filter_map(|rows| {
            let mut pos = rows.iter().filter(|s| s.label);
            let p = pos.next()?;
            if pos.next().is_some() {
                return None;
            }
            let ahead = rows
                .iter()
                .filter(|s| !s.label)
                .filter(|s| s.score > p.score || (s.score == p.score && s.item < p.item))
                .count();
            Some(ahead + 1)
        })
        .collect()
}

fn mean_or_undefined(values: impl Iterator<Item = f64>, what: &'static str) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(what));
    }
    Ok(sum / count as f64)
}

pub fn mrr_from_ranks(ranks: &[usize]) -> Result<f64> {
    mean_or_undefined(ranks.iter().map(|&r| 1.0 / r as f64), "mrr: no candidate groups")
}

pub fn ndcg_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    mean_or_undefined(
        ranks.iter().map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }),
        "ndcg: no candidate groups",
    )
}

pub fn mrr(instances: &[ScoredInstance]) -> Result<f64> {
    mrr_from_ranks(&positive_ranks(instances))
}

pub fn ndcg_at_k(instances: &[ScoredInstance], k: usize) -> Result<f64> {
    ndcg_from_ranks(&positive_ranks(instances), k)
}

/// Largest candidate group size; MRR and NDCG depend on it.
pub fn candidate_set_size(instances: &[ScoredInstance]) -> usize {
    grouped(instances, |s| s.group).values().map(Vec::len).max().unwrap_or(0)
}

/// One row of the length breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub users: usize,
    pub min_len: f64,
    pub max_len: f64,
    pub gauc: Option<f64>,
}

/// Users ordered by mean history length (then user index) and cut into
/// `groups` equal-frequency buckets; the first `users % groups` buckets take
/// one extra user. Users with equal length can therefore straddle a bucket
/// boundary.
pub fn length_breakdown(instances: &[ScoredInstance], groups: usize) -> Vec<LengthBucket> {
    assert!(groups >= 1);
    let per_user = grouped(instances, |s| s.user);
    let mut users: Vec<(f64, usize)> = per_user
        .iter()
        .map(|(&u, rows)| (rows.iter().map(|s| s.valid_len as f64).sum::<f64>() / rows.len() as f64, u))
        .collect();
    users.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let base = users.len() / groups;
    let extra = users.len() % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for b in 0..groups {
        let size = base + usize::from(b < extra);
        let chunk = &users[start..start + size];
        start += size;
        let rows: Vec<ScoredInstance> = chunk.iter().flat_map(|(_, u)| per_user[u].iter().map(|s| (*s).clone())).collect();
        out.push(LengthBucket {
            users: chunk.len(),
            min_len: chunk.first().map_or(0.0, |c| c.0),
            max_len: chunk.last().map_or(0.0, |c| c.0),
            gauc: gauc(&rows).ok(),
        });
    }
    out
}

/// Summary of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: usize,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub mrr: Option<f64>,
    pub ndcg_at_2: Option<f64>,
    pub candidate_set_size: usize,
}

pub const METRICS_SCHEMA: &str = "surge-metrics/1";

impl MetricReport {
    pub fn compute(instances: &[ScoredInstance]) -> Self {
        let ranks = positive_ranks(instances);
        Self {
            instances: instances.len(),
            auc: auc(instances).ok(),
            gauc: gauc(instances).ok(),
            mrr: mrr_from_ranks(&ranks).ok(),
            ndcg_at_2: ndcg_from_ranks(&ranks, 2).ok(),
            candidate_set_size: candidate_set_size(instances),
        }
    }

    /// `key = value` lines; undefined metrics print as `undefined`.
    pub fn to_text(&self, prefix: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}instances = {}", self.instances);
        let _ = writeln!(s, "{prefix}auc = {}", fmt(self.auc));
        let _ = writeln!(s, "{prefix}gauc = {}", fmt(self.gauc));
        let _ = writeln!(s, "{prefix}mrr = {}", fmt(self.mrr));
        let _ = writeln!(s, "{prefix}ndcg@2 = {}", fmt(self.ndcg_at_2));
        let _ = writeln!(s, "{prefix}candidate_set_size = {}", self.candidate_set_size);
        s
    }
}

/// Result of [`paired_bootstrap`].
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub observed: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Fraction of resamples with a non-positive difference.
    pub p_not_better: f64,
}

/// Paired bootstrap over users of `metric(a) − metric(b)`. Both score sets
/// must cover the same users. Resamples with an undefined metric are dropped.
pub fn paired_bootstrap(
    a: &[ScoredInstance],
    b: &[ScoredInstance],
    metric: impl Fn(&[ScoredInstance]) -> Result<f64>,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let ga = grouped(a, |s| s.user);
    let gb = grouped(b, |s| s.user);
    if ga.keys().ne(gb.keys()) {
        return Err(Error::Data("paired bootstrap needs the same users in both runs".into()));
    }
    let users: Vec<usize> = ga.keys().copied().collect();
    let observed = metric(a)? - metric(b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut ra = Vec::new();
        let mut rb = Vec::new();
        for copy in 0..users.len() {
            let u = users[rng.gen_range(0..users.len())];
            // each drawn copy becomes its own user so per-user metrics stay paired
            let tag = |s: &&ScoredInstance| ScoredInstance { user: copy, group: s.group * users.len() + copy, ..(*s).clone() };
            ra.extend(ga[&u].iter().map(tag));
            rb.extend(gb[&u].iter().map(tag));
        }
        if let (Ok(x), Ok(y)) = (metric(&ra), metric(&rb)) {
            diffs.push(x - y);
        }
    }
    if diffs.is_empty() {
        return Err(Error::UndefinedMetric("bootstrap: every resample undefined"));
    }
    diffs.sort_by(f64::total_cmp);
    let pick = |q: f64| diffs[((q * (diffs.len() - 1) as f64).round() as usize).min(diffs.len() - 1)];
    Ok(BootstrapResult {
        observed,
        mean: diffs.iter().sum::<f64>() / diffs.len() as f64,
        lower: pick(0.025),
        upper: pick(0.975),
        p_not_better: diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / diffs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_assume, proptest};

    fn inst(user: usize, group: usize, item: usize, score: f64, label: bool) -> ScoredInstance {
        ScoredInstance { user, group, item, score, label, valid_len: 1 }
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_of(&[1.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc_of(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc_of(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert!(matches!(auc_of(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc_of(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_brute_force_on_quantised_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.gen_range(2..=200);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auc_of(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let base = auc_of(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc_of(&mapped, &labels).unwrap(), base);
        }
    }

    #[test]
    fn gauc_examples() {
        // user 0: 2 positives above 1 negative → 1.0; user 1: tie → 0.5
        let rows = vec![
            inst(0, 0, 1, 0.9, true),
            inst(0, 0, 2, 0.8, true),
            inst(0, 0, 3, 0.1, false),
            inst(1, 1, 1, 0.5, true),
            inst(1, 1, 2, 0.5, false),
        ];
        assert!((gauc(&rows).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let single: Vec<_> = rows[..3].to_vec();
        assert_eq!(gauc(&single).unwrap(), auc(&single).unwrap());
        // impressions: weights 3 and 2
        assert!((gauc_weighted(&rows, GaucWeight::Impressions).unwrap() - (3.0 + 1.0) / 5.0).abs() < 1e-12);
        // user without negatives is dropped
        let mut more = rows.clone();
        more.push(inst(2, 2, 1, 0.0, true));
        assert_eq!(gauc(&more).unwrap(), gauc(&rows).unwrap());
    }

    #[test]
    fn gauc_between_user_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut rows = Vec::new();
            for u in 0..rng.gen_range(1..6) {
                for k in 0..rng.gen_range(2..10) {
                    rows.push(inst(u, u, k, rng.gen_range(0.0..1.0), k % 2 == 0));
                }
            }
            let per_user: Vec<f64> = grouped(&rows, |s| s.user)
                .values()
                .filter_map(|r| {
                    let r: Vec<ScoredInstance> = r.iter().map(|s| (*s).clone()).collect();
                    auc(&r).ok()
                })
                .collect();
            let g = gauc(&rows).unwrap();
            let lo = per_user.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per_user.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
        }
    }

    #[test]
    fn ranking_examples() {
        let top = vec![inst(0, 0, 1, 0.9, true), inst(0, 0, 2, 0.1, false)];
        assert_eq!(mrr(&top).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&top, 2).unwrap(), 1.0);
        let second = vec![inst(0, 0, 1, 0.5, true), inst(0, 0, 2, 0.7, false), inst(0, 0, 3, 0.1, false)];
        assert_eq!(mrr(&second).unwrap(), 0.5);
        assert!((ndcg_at_k(&second, 2).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((mrr_from_ranks(&[1, 4]).unwrap() - 0.625).abs() < 1e-12);
        assert_eq!(ndcg_from_ranks(&[3], 2).unwrap(), 0.0);
        assert!(mrr_from_ranks(&[]).is_err());
    }

    #[test]
    fn ties_go_to_lower_item_index() {
        let low_positive = vec![inst(0, 0, 2, 0.5, true), inst(0, 0, 7, 0.5, false)];
        assert_eq!(positive_ranks(&low_positive), vec![1]);
        let high_positive = vec![inst(0, 0, 9, 0.5, true), inst(0, 0, 7, 0.5, false)];
        assert_eq!(positive_ranks(&high_positive), vec![2]);
    }

    #[test]
    fn ranking_bounds_and_k_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let mut rows = Vec::new();
            for g in 0..rng.gen_range(1..8) {
                for k in 0..rng.gen_range(1..6) {
                    rows.push(inst(g, g, k, (rng.gen_range(0..5) as f64) / 5.0, k == 0));
                }
            }
            let m = mrr(&rows).unwrap();
            assert!((0.0..=1.0).contains(&m));
            let mut prev = 0.0;
            for k in 1..6 {
                let n = ndcg_at_k(&rows, k).unwrap();
                assert!((0.0..=1.0).contains(&n) && n >= prev);
                prev = n;
            }
        }
    }

    #[test]
    fn quintiles_of_ten_users() {
        let rows: Vec<ScoredInstance> = (0..10)
            .flat_map(|u| {
                [true, false].map(|y| ScoredInstance { user: u, group: u, item: usize::from(!y), score: 0.5, label: y, valid_len: u + 1 })
            })
            .collect();
        let buckets = length_breakdown(&rows, 5);
        let ranges: Vec<(f64, f64)> = buckets.iter().map(|b| (b.min_len, b.max_len)).collect();
        assert_eq!(ranges, vec![(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0), (9.0, 10.0)]);
        assert!(buckets.iter().all(|b| b.users == 2 && b.gauc == Some(0.5)));
    }

    #[test]
    fn equal_lengths_still_form_five_buckets() {
        let rows: Vec<ScoredInstance> = (0..12)
            .flat_map(|u| [true, false].map(|y| ScoredInstance { user: u, group: u, item: 0, score: 0.1, label: y, valid_len: 4 }))
            .collect();
        let sizes: Vec<usize> = length_breakdown(&rows, 5).iter().map(|b| b.users).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
    }

    #[test]
    fn planted_length_gradient_is_recovered() {
        // longer histories get cleaner scores, so bucket GAUC must rise
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rows = Vec::new();
        for u in 0..500 {
            let len = 1 + u % 50;
            let noise = (60 - len) as f64 / 50.0;
            for k in 0..6 {
                let label = k < 3;
                let signal = if label { 0.5 } else { 0.0 };
                rows.push(ScoredInstance { user: u, group: u, item: k, score: signal + noise * rng.gen_range(-1.0..1.0), label, valid_len: len });
            }
        }
        let g: Vec<f64> = length_breakdown(&rows, 5).iter().map(|b| b.gauc.unwrap()).collect();
        assert!(g.windows(2).all(|w| w[0] < w[1]), "{g:?}");
    }

    #[test]
    fn bootstrap_detects_a_clear_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut good = Vec::new();
        let mut bad = Vec::new();
        for u in 0..60 {
            for k in 0..4 {
                let label = k % 2 == 0;
                let noise: f64 = rng.gen_range(-1.0..1.0);
                good.push(inst(u, u, k, noise + if label { 1.5 } else { 0.0 }, label));
                bad.push(inst(u, u, k, noise, label));
            }
        }
        let r = paired_bootstrap(&good, &bad, auc, 200, 1).unwrap();
        assert!(r.observed > 0.1 && r.lower > 0.0 && r.p_not_better == 0.0);
        assert!(paired_bootstrap(&good, &good[..4], auc, 10, 1).is_err());
    }

    #[test]
    fn report_text_has_one_metric_per_line() {
        let r = MetricReport::compute(&[inst(0, 0, 1, 0.9, true), inst(0, 0, 2, 0.1, false)]);
        let text = r.to_text("test.");
        assert!(text.contains("test.auc = 1.000000"));
        assert_eq!(text.lines().count(), 6);
        let none = MetricReport::compute(&[inst(0, 0, 1, 0.9, true)]);
        assert!(none.to_text("").contains("auc = undefined"));
    }
}
