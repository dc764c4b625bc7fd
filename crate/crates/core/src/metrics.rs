//! Scoring of revocation decisions against ground-truth roles.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fl::RunLog;

/// Cumulative revocation counts at one window boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    /// Last round of the window.
    pub round: usize,
    pub revoked: usize,
    pub revoked_malicious: usize,
    /// `None` while nothing has been revoked.
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseScore {
    pub windows: Vec<WindowScore>,
    pub max_recall: f64,
    /// Earliest window boundary reaching `max_recall`.
    pub round_of_max_recall: Option<usize>,
    pub precision_at_max_recall: Option<f64>,
    /// First boundary by which every malicious client was revoked.
    pub time_to_purge: Option<usize>,
    pub revoked_honest: usize,
    pub revoked_malicious: usize,
}

impl DefenseScore {
    /// Every malicious client revoked and no honest one.
    pub fn is_perfect(&self) -> bool {
        self.time_to_purge.is_some() && self.revoked_honest == 0
    }
}

/// Formats an optional metric, printing `n/a` when undefined.
pub struct Metric(pub Option<f64>);

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.3}"),
            None => f.write_str("n/a"),
        }
    }
}

/// Scores a revocation history. `history` lists `(round, revoked clients)`;
/// `boundaries` are the rounds at which cumulative scores are taken. With
/// no malicious clients, recall is 1 from the first boundary on.
pub fn defense_metrics(
    history: &[(usize, Vec<usize>)],
    boundaries: &[usize],
    malicious: &BTreeSet<usize>,
) -> DefenseScore {
    let mut windows = Vec::with_capacity(boundaries.len());
    let mut revoked: BTreeSet<usize> = BTreeSet::new();
    let mut events = history.iter().peekable();
    for &round in boundaries {
        while let Some((_, clients)) = events.next_if(|(r, _)| *r <= round) {
            revoked.extend(clients.iter().copied());
        }
        let hits = revoked.intersection(malicious).count();
        windows.push(WindowScore {
            round,
            revoked: revoked.len(),
            revoked_malicious: hits,
            precision: (!revoked.is_empty()).then(|| hits as f64 / revoked.len() as f64),
            recall: if malicious.is_empty() { 1.0 } else { hits as f64 / malicious.len() as f64 },
        });
    }
    for (_, clients) in events {
        revoked.extend(clients.iter().copied());
    }
    let max_recall = windows.iter().map(|w| w.recall).fold(0.0, f64::max);
    let best = windows.iter().find(|w| w.recall == max_recall);
    let revoked_malicious = revoked.intersection(malicious).count();
    DefenseScore {
        max_recall,
        round_of_max_recall: best.map(|w| w.round),
        precision_at_max_recall: best.and_then(|w| w.precision),
        time_to_purge: windows.iter().find(|w| w.recall == 1.0).map(|w| w.round),
        revoked_honest: revoked.len() - revoked_malicious,
        revoked_malicious,
        windows,
    }
}

/// Window boundaries `W-1, 2W-1, ...` of a run of `rounds` rounds.
pub fn window_boundaries(rounds: usize, window: usize) -> Vec<usize> {
    (1..=rounds / window).map(|i| i * window - 1).collect()
}

/// [`defense_metrics`] over a run log.
pub fn score_run(log: &RunLog, window: usize, malicious: &BTreeSet<usize>) -> DefenseScore {
    defense_metrics(&log.revocations(), &window_boundaries(log.records.len(), window), malicious)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        ids.into_iter().collect()
    }

    #[test]
    fn clean_purge_by_round_thirty() {
        let malicious = set(0..10);
        let history = vec![(9, (0..6).collect()), (29, (6..10).collect())];
        let s = defense_metrics(&history, &window_boundaries(100, 10), &malicious);
        assert_eq!(s.precision_at_max_recall, Some(1.0));
        assert_eq!(s.round_of_max_recall, Some(29));
        assert_eq!(s.time_to_purge, Some(29));
        assert!(s.is_perfect());
        assert_eq!(s.windows[1].recall, 0.6);
    }

    #[test]
    fn honest_revocations_dilute_precision() {
        let malicious = set(0..10);
        let history = vec![(9, (0..19).collect())];
        let s = defense_metrics(&history, &[9, 19], &malicious);
        assert!((s.precision_at_max_recall.unwrap() - 10.0 / 19.0).abs() < 1e-15);
        assert_eq!(s.revoked_honest, 9);
        assert!(!s.is_perfect());
    }

    #[test]
    fn no_revocations_leave_precision_undefined() {
        let s = defense_metrics(&[], &[9, 19], &set(0..3));
        assert_eq!((s.max_recall, s.precision_at_max_recall, s.time_to_purge), (0.0, None, None));
        assert_eq!(Metric(s.precision_at_max_recall).to_string(), "n/a");
        assert_eq!(Metric(Some(0.5)).to_string(), "0.500");
    }

    #[test]
    fn recall_is_cumulative_and_max_taken_early() {
        let malicious = set([1, 2]);
        let history = vec![(9, vec![1]), (19, vec![7]), (29, vec![2]), (39, vec![8])];
        let s = defense_metrics(&history, &[9, 19, 29, 39], &malicious);
        let recalls: Vec<f64> = s.windows.iter().map(|w| w.recall).collect();
        assert_eq!(recalls, vec![0.5, 0.5, 1.0, 1.0]);
        assert_eq!(s.round_of_max_recall, Some(29));
        assert_eq!(s.precision_at_max_recall, Some(2.0 / 3.0));
        assert_eq!(s.revoked_honest, 2);
    }

    #[test]
    fn boundaries_follow_the_window() {
        assert_eq!(window_boundaries(30, 10), vec![9, 19, 29]);
        assert_eq!(window_boundaries(25, 10), vec![9, 19]);
    }
}
