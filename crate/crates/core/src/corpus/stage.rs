//! Multi-stage curricula: each stage draws its own per-source token budgets
//! and owns a contiguous range of chunks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBudget {
    pub source: String,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub id: u32,
    pub budgets: Vec<SourceBudget>,
    /// Half-open chunk index range.
    pub chunk_start: u32,
    pub chunk_end: u32,
}

impl Stage {
    pub fn total_tokens(&self) -> u64 {
        self.budgets.iter().map(|b| b.tokens).sum()
    }

    pub fn n_chunks(&self) -> u32 {
        self.chunk_end - self.chunk_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn n_chunks(&self) -> u32 {
        self.stages.last().map_or(0, |s| s.chunk_end)
    }

    pub fn stage_of_chunk(&self, chunk: u32) -> Option<&Stage> {
        self.stages
            .iter()
            .find(|s| (s.chunk_start..s.chunk_end).contains(&chunk))
    }
}

/// Builds the stage plan.
///
/// `stage_budgets[s]` maps source name to the tokens stage `s` draws from
/// it; `available` gives each source's total token supply. Stages draw from
/// a source sequentially, so the sum of a source's budgets across all
/// stages must fit its supply. Chunks are apportioned to stages in
/// proportion to stage token totals by largest remainder, with every stage
/// receiving at least one chunk.
pub fn build_stage_plan(
    stage_budgets: &[BTreeMap<String, u64>],
    available: &[(String, u64)],
    n_chunks: u32,
) -> Result<StagePlan> {
    if stage_budgets.is_empty() {
        return Err(Error::Invalid("stage plan needs at least one stage".into()));
    }
    if (n_chunks as usize) < stage_budgets.len() {
        return Err(Error::Invalid(format!(
            "{n_chunks} chunks cannot cover {} stages",
            stage_budgets.len()
        )));
    }

    let mut requested: BTreeMap<&str, u64> = BTreeMap::new();
    for budgets in stage_budgets {
        for (name, &tokens) in budgets {
            if !available.iter().any(|(n, _)| n == name) {
                return Err(Error::Invalid(format!("stage references unknown source `{name}`")));
            }
            *requested.entry(name.as_str()).or_default() += tokens;
        }
    }
    for (name, supply) in available {
        let want = requested.get(name.as_str()).copied().unwrap_or(0);
        if want > *supply {
            return Err(Error::OverBudget {
                source_name: name.clone(),
                requested: want,
                available: *supply,
            });
        }
    }

    let totals: Vec<u64> = stage_budgets.iter().map(|b| b.values().sum()).collect();
    if let Some(s) = totals.iter().position(|&t| t == 0) {
        return Err(Error::Invalid(format!("stage {s} draws no tokens")));
    }
    let counts = apportion(&totals, n_chunks);

    let mut stages = Vec::with_capacity(stage_budgets.len());
    let mut start = 0u32;
    for (id, (budgets, count)) in stage_budgets.iter().zip(counts).enumerate() {
        // budgets listed in source declaration order
        let ordered = available
            .iter()
            .filter_map(|(name, _)| {
                budgets.get(name).map(|&tokens| SourceBudget {
                    source: name.clone(),
                    tokens,
                })
            })
            .filter(|b| b.tokens > 0)
            .collect();
        stages.push(Stage {
            id: id as u32,
            budgets: ordered,
            chunk_start: start,
            chunk_end: start + count,
        });
        start += count;
    }
    Ok(StagePlan { stages })
}

/// Largest-remainder apportionment of `n` seats with a floor of one each.
fn apportion(weights: &[u64], n: u32) -> Vec<u32> {
    let total: u128 = weights.iter().map(|&w| u128::from(w)).sum();
    let mut seats: Vec<u32> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let exact = u128::from(w) * u128::from(n);
        let floor = (exact / total) as u32;
        seats.push(floor.max(1));
        remainders.push((exact % total, i));
    }
    let assigned: u32 = seats.iter().sum();
    if assigned < n {
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in remainders.iter().cycle().take((n - assigned) as usize) {
            seats[i] += 1;
        }
    } else {
        // floors of one may overshoot; take back from the largest
        let mut excess = assigned - n;
        while excess > 0 {
            let i = (0..seats.len()).max_by_key(|&i| (seats[i], std::cmp::Reverse(i))).unwrap();
            seats[i] -= 1;
            excess -= 1;
        }
    }
    debug_assert_eq!(seats.iter().sum::<u32>(), n);
    seats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budgets(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(n, t)| (n.to_string(), *t)).collect()
    }

    #[test]
    fn single_stage_covers_all_chunks() {
        let avail = vec![("a".to_string(), 100), ("b".to_string(), 50)];
        let plan = build_stage_plan(&[budgets(&[("a", 100), ("b", 50)])], &avail, 7).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert_eq!((plan.stages[0].chunk_start, plan.stages[0].chunk_end), (0, 7));
    }

    #[test]
    fn two_equal_stages() {
        let avail = vec![("a".to_string(), 100)];
        let plan =
            build_stage_plan(&[budgets(&[("a", 50)]), budgets(&[("a", 50)])], &avail, 10).unwrap();
        assert_eq!((plan.stages[0].chunk_start, plan.stages[0].chunk_end), (0, 5));
        assert_eq!((plan.stages[1].chunk_start, plan.stages[1].chunk_end), (5, 10));
    }

    #[test]
    fn three_stage_ratio() {
        // 345 : 927 : 100 over 360 chunks
        let avail = vec![("slim".to_string(), 1000), ("code".to_string(), 1000)];
        let plan = build_stage_plan(
            &[
                budgets(&[("slim", 345)]),
                budgets(&[("slim", 345), ("code", 582)]),
                budgets(&[("code", 90), ("slim", 10)]),
            ],
            &avail,
            360,
        )
        .unwrap();
        let sizes: Vec<u32> = plan.stages.iter().map(Stage::n_chunks).collect();
        // 360·345/1372 = 90.5, 360·927/1372 = 243.2, 360·100/1372 = 26.2
        assert_eq!(sizes, vec![91, 243, 26]);
        assert_eq!(plan.n_chunks(), 360);
        // stage 3 lists budgets in declaration order
        assert_eq!(plan.stages[2].budgets[0].source, "slim");
    }

    #[test]
    fn over_budget_names_source() {
        let avail = vec![("web".to_string(), 10), ("code".to_string(), 10)];
        let err = build_stage_plan(&[budgets(&[("web", 5), ("code", 11)])], &avail, 2).unwrap_err();
        match err {
            Error::OverBudget { source_name, .. } => assert_eq!(source_name, "code"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn apportion_floors() {
        assert_eq!(apportion(&[1, 1000], 3), vec![1, 2]);
        assert_eq!(apportion(&[1, 1, 1], 3), vec![1, 1, 1]);
        assert_eq!(apportion(&[5, 5], 10), vec![5, 5]);
    }
}
