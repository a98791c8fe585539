//! Post-hoc analysis of learned per-token coefficients: rank correlation with token
//! frequency and per-tag averages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::types::TokenId;

pub const UNTAGGED: &str = "untagged";
pub const DEFAULT_MIN_GROUP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub source: String,
}

impl FrequencyTable {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Reads `token_id<TAB>count` lines; absent ids count 0.
    pub fn load(path: impl AsRef<Path>, vocab_size: usize, source: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut counts = vec![0; vocab_size];
        let mut seen = vec![false; vocab_size];
        for (id, value, line) in parse_pairs(&text, vocab_size)? {
            let c = value.trim().parse::<u64>().map_err(|e| Error::Parse {
                line,
                detail: format!("count: {e}"),
            })?;
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Parse {
                    line,
                    detail: format!("token {id} listed twice"),
                });
            }
            counts[id] = c;
        }
        Ok(Self {
            counts,
            source: source.to_string(),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, c) in self.counts.iter().enumerate() {
            writeln!(out, "{id}\t{c}").unwrap();
        }
        out
    }
}

fn parse_pairs(text: &str, vocab_size: usize) -> Result<Vec<(TokenId, &str, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, value) = raw.split_once('\t').ok_or_else(|| Error::Parse {
            line,
            detail: "expected token_id<TAB>value".into(),
        })?;
        let id = id.trim().parse::<usize>().map_err(|e| Error::Parse {
            line,
            detail: format!("token id: {e}"),
        })?;
        if id >= vocab_size {
            return Err(Error::TokenOutOfRange { token: id, vocab_size });
        }
        out.push((id, value, line));
    }
    Ok(out)
}

/// Exact occurrence counts of a token sequence.
pub fn token_frequency(tokens: &[TokenId], vocab_size: usize, source: &str) -> Result<FrequencyTable> {
    let mut counts = vec![0u64; vocab_size];
    for &t in tokens {
        *counts
            .get_mut(t)
            .ok_or(Error::TokenOutOfRange { token: t, vocab_size })? += 1;
    }
    Ok(FrequencyTable {
        counts,
        source: source.to_string(),
    })
}

/// Counts of the datastore's value tokens.
pub fn datastore_frequency(ds: &Datastore, vocab_size: usize) -> Result<FrequencyTable> {
    let values: Vec<TokenId> = ds.values().collect();
    token_frequency(&values, vocab_size, "datastore")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagMap {
    tags: Vec<String>,
}

impl TagMap {
    pub fn new(tags: Vec<String>) -> Self {
        Self { tags }
    }

    pub fn uniform(vocab_size: usize, tag: &str) -> Self {
        Self {
            tags: vec![tag.to_string(); vocab_size],
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, token: TokenId) -> &str {
        &self.tags[token]
    }

    /// Parses `token_id<TAB>tag` lines; tokens not listed are untagged.
    pub fn parse(text: &str, vocab_size: usize) -> Result<Self> {
        let mut tags: Vec<Option<String>> = vec![None; vocab_size];
        for (id, value, line) in parse_pairs(text, vocab_size)? {
            let tag = value.trim();
            if tag.is_empty() {
                return Err(Error::Parse {
                    line,
                    detail: "empty tag".into(),
                });
            }
            if tags[id].replace(tag.to_string()).is_some() {
                return Err(Error::Parse {
                    line,
                    detail: format!("token {id} tagged twice"),
                });
            }
        }
        Ok(Self {
            tags: tags
                .into_iter()
                .map(|t| t.unwrap_or_else(|| UNTAGGED.to_string()))
                .collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>, vocab_size: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, vocab_size)
    }
}

/// Fractional ranks starting at 1; tied values share the mean of their positions.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // positions i..j hold equal values; 1-based ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t-approximation with n − 2 degrees of freedom.
    pub p_value: f64,
    /// The p-value is below the smallest positive f64 and reads as 0.
    pub underflow: bool,
}

/// Spearman rank correlation with midrank ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("NaN in input".into()));
    }
    let rho = pearson(&midranks(xs), &midranks(ys))
        .ok_or_else(|| Error::DegenerateInput("one argument is constant".into()))?;
    let nu = (xs.len() - 2) as f64;
    // with t = rho·sqrt(nu/(1-rho²)), nu/(nu+t²) simplifies to 1 - rho²
    let x = (1.0 - rho * rho).max(0.0);
    let p_value = if x == 0.0 {
        0.0
    } else {
        beta_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
    };
    Ok(Spearman {
        rho,
        p_value,
        underflow: p_value < f64::MIN_POSITIVE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagGroup {
    pub tag: String,
    pub mean_lambda: f64,
    pub count: usize,
    /// Share of token frequency (or of the vocabulary, without frequencies) in this tag.
    pub freq_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Retained groups in tag order.
    pub groups: Vec<TagGroup>,
    pub omitted_count: usize,
    pub omitted_sum: f64,
}

impl GroupReport {
    /// Global mean rebuilt from the groups plus the omitted mass.
    pub fn reconstructed_mean(&self) -> f64 {
        let total: f64 = self.groups.iter().map(|g| g.mean_lambda * g.count as f64).sum::<f64>() + self.omitted_sum;
        let n = self.groups.iter().map(|g| g.count).sum::<usize>() + self.omitted_count;
        total / n as f64
    }
}

/// Mean coefficient per tag, dropping tags with fewer than `min_group` tokens.
pub fn group_lambda(
    lambda_eff: &[f64],
    tags: &TagMap,
    min_group: usize,
    freq: Option<&FrequencyTable>,
) -> Result<GroupReport> {
    if lambda_eff.len() != tags.len() {
        return Err(Error::DimensionMismatch {
            expected: tags.len(),
            found: lambda_eff.len(),
        });
    }
    if let Some(l) = lambda_eff.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidConfig(format!("coefficient {l} not in [0,1]")));
    }
    if let Some(f) = freq {
        if f.len() != tags.len() {
            return Err(Error::DimensionMismatch {
                expected: tags.len(),
                found: f.len(),
            });
        }
    }
    let mut members: BTreeMap<&str, Vec<TokenId>> = BTreeMap::new();
    for tok in 0..tags.len() {
        members.entry(tags.tag(tok)).or_default().push(tok);
    }
    let freq_total = freq.map(|f| f.total()).filter(|&t| t > 0);
    let mut report = GroupReport {
        groups: Vec::new(),
        omitted_count: 0,
        omitted_sum: 0.0,
    };
    for (tag, toks) in members {
        let sum: f64 = toks.iter().map(|&t| lambda_eff[t]).sum();
        if toks.len() < min_group {
            report.omitted_count += toks.len();
            report.omitted_sum += sum;
            continue;
        }
        let freq_share = match (freq, freq_total) {
            (Some(f), Some(total)) => toks.iter().map(|&t| f.counts[t]).sum::<u64>() as f64 / total as f64,
            _ => toks.len() as f64 / tags.len() as f64,
        };
        report.groups.push(TagGroup {
            tag: tag.to_string(),
            mean_lambda: sum / toks.len() as f64,
            count: toks.len(),
            freq_share,
        });
    }
    Ok(report)
}

pub const CORRELATION_CSV_HEADER: &str = "source,rho,p_value,note";
pub const GROUPS_CSV_HEADER: &str = "tag,mean_lambda,count,freq_share";

/// One row per frequency source; failed correlations keep their row with the error noted.
pub fn correlation_csv(rows: &[(String, Result<Spearman>)]) -> String {
    let mut out = format!("{CORRELATION_CSV_HEADER}\n");
    for (source, r) in rows {
        match r {
            Ok(s) => {
                let note = if s.underflow { "p_underflow" } else { "" };
                writeln!(out, "{source},{:.12},{:e},{note}", s.rho, s.p_value).unwrap();
            }
            Err(Error::DegenerateInput(_)) => writeln!(out, "{source},,,degenerate_input").unwrap(),
            Err(e) => writeln!(out, "{source},,,error: {}", e.to_string().replace(',', ";")).unwrap(),
        }
    }
    out
}

pub fn groups_csv(report: &GroupReport) -> String {
    let mut out = format!("{GROUPS_CSV_HEADER}\n");
    for g in &report.groups {
        writeln!(out, "{},{:.12},{},{:.12}", g.tag, g.mean_lambda, g.count, g.freq_share).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    /// Quadratic midrank oracle: 1 + #smaller + (#equal - 1)/2, then textbook Pearson.
    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let equal = v.iter().filter(|b| *b == a).count() as f64;
                    1.0 + less + (equal - 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(xs), rank(ys));
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn frequency_examples() {
        let t = token_frequency(&[0, 0, 1], 4, "seq").unwrap();
        assert_eq!(t.counts, vec![2, 1, 0, 0]);
        assert_eq!(token_frequency(&[], 3, "seq").unwrap().counts, vec![0, 0, 0]);
        assert!(matches!(
            token_frequency(&[5], 3, "seq"),
            Err(Error::TokenOutOfRange { token: 5, .. })
        ));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        let xs = [1.0, 2.0, 2.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        assert_relative_eq!(
            spearman(&xs, &ys).unwrap().rho,
            brute_spearman(&xs, &ys),
            epsilon = 1e-12
        );
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn midranks_of_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn p_value_matches_student_t() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..30).map(|i| ((i * 17) % 30) as f64 + 0.3 * i as f64).collect();
        let s = spearman(&xs, &ys).unwrap();
        let nu = 28.0;
        let t = s.rho * (nu / (1.0 - s.rho * s.rho)).sqrt();
        let oracle = 2.0 * StudentsT::new(0.0, 1.0, nu).unwrap().cdf(-t.abs());
        assert_relative_eq!(s.p_value, oracle, max_relative = 1e-8);
        assert!(!s.underflow);
    }

    #[test]
    fn perfect_correlation_flags_underflow() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let s = spearman(&xs, &xs).unwrap();
        assert_eq!(s.p_value, 0.0);
        assert!(s.underflow);
    }

    #[test]
    fn group_examples() {
        let tags = TagMap::uniform(4, "noun");
        let lam = [0.1, 0.2, 0.3, 0.6];
        let r = group_lambda(&lam, &tags, 1, None).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_relative_eq!(r.groups[0].mean_lambda, 0.3, epsilon = 1e-15);

        let tags = TagMap::new(vec!["a".into(), "a".into(), "b".into()]);
        let r = group_lambda(&[0.1, 0.3, 0.2], &tags, 1, None).unwrap();
        assert_relative_eq!(r.groups[0].mean_lambda, 0.2, epsilon = 1e-15);
        assert_relative_eq!(r.groups[1].mean_lambda, 0.2, epsilon = 1e-15);

        let mut names = vec!["small".to_string(); 9];
        names.extend(vec!["big".to_string(); 12]);
        let lam: Vec<f64> = (0..21).map(|i| i as f64 / 21.0).collect();
        let r = group_lambda(&lam, &TagMap::new(names), DEFAULT_MIN_GROUP, None).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].tag, "big");
        assert_eq!(r.omitted_count, 9);
        assert!(group_lambda(&[1.5], &TagMap::uniform(1, "x"), 1, None).is_err());
    }

    #[test]
    fn freq_share_uses_frequencies() {
        let tags = TagMap::new(vec!["a".into(), "a".into(), "b".into()]);
        let freq = token_frequency(&[0, 0, 1, 2], 3, "seq").unwrap();
        let r = group_lambda(&[0.1, 0.3, 0.2], &tags, 1, Some(&freq)).unwrap();
        assert_relative_eq!(r.groups[0].freq_share, 0.75);
        assert_relative_eq!(r.groups[1].freq_share, 0.25);
    }

    #[test]
    fn tag_and_frequency_files() {
        let tags = TagMap::parse("0\tNOUN\n2\tVERB\n\n", 4).unwrap();
        assert_eq!(tags.tag(0), "NOUN");
        assert_eq!(tags.tag(1), UNTAGGED);
        assert!(matches!(TagMap::parse("0 NOUN", 4), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            TagMap::parse("0\tA\n0\tB", 4),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(TagMap::parse("9\tA", 4), Err(Error::TokenOutOfRange { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("freq.tsv");
        let table = token_frequency(&[0, 1, 1, 3], 4, "x").unwrap();
        std::fs::write(&path, table.to_tsv()).unwrap();
        assert_eq!(FrequencyTable::load(&path, 4, "x").unwrap(), table);
    }

    #[test]
    fn csv_layout() {
        let ok = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        let bad = spearman(&[1.0; 4], &[1.0, 3.0, 2.0, 4.0]);
        let csv = correlation_csv(&[("datastore".into(), ok), ("pretraining".into(), bad)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CORRELATION_CSV_HEADER);
        assert!(lines[1].starts_with("datastore,0.8"));
        assert_eq!(lines[2], "pretraining,,,degenerate_input");
    }

    fn tied_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..6).prop_map(f64::from), 8)
    }

    proptest! {
        #[test]
        fn matches_bruteforce(xs in tied_vec(), ys in tied_vec()) {
            match spearman(&xs, &ys) {
                Ok(s) => prop_assert!((s.rho - brute_spearman(&xs, &ys)).abs() <= 1e-12),
                Err(Error::DegenerateInput(_)) => prop_assert!(
                    xs.iter().all(|x| *x == xs[0]) || ys.iter().all(|y| *y == ys[0])),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn symmetric_and_monotone_invariant(xs in tied_vec(), ys in tied_vec()) {
            if let Ok(s) = spearman(&xs, &ys) {
                let swapped = spearman(&ys, &xs).unwrap();
                prop_assert!((s.rho - swapped.rho).abs() <= 1e-12);
                let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
                prop_assert!((spearman(&neg, &ys).unwrap().rho + s.rho).abs() <= 1e-12);
                let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                prop_assert!((spearman(&ex, &ys).unwrap().rho - s.rho).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&s.p_value));
            }
            if xs.iter().any(|x| *x != xs[0]) {
                prop_assert!((spearman(&xs, &xs).unwrap().rho - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn groups_reconstruct_global_mean(
            lam in prop::collection::vec(0.0f64..=1.0, 1..80),
            tag_ids in prop::collection::vec(0usize..5, 80),
            min_group in 0usize..12,
        ) {
            let tags = TagMap::new(tag_ids[..lam.len()].iter().map(|t| format!("g{t}")).collect());
            let r = group_lambda(&lam, &tags, min_group, None).unwrap();
            let mean = lam.iter().sum::<f64>() / lam.len() as f64;
            prop_assert!((r.reconstructed_mean() - mean).abs() <= 1e-12);
        }
    }
}
