//! The reward ledger behind the fix prompts.
//!
//! The score interpolated into fix prompts is settled here, never taken from
//! the model's self-reported numbers. Point rules: +1 per vulnerability
//! actually fixed, +1 bonus when a fix round leaves the follow-up check
//! clean, -1 per claimed fix that is still found or per newly introduced
//! finding. Settlement is retrospective: a fix round's claims are scored only
//! once the next identification or analyzer check has run.

use serde::{Deserialize, Serialize};

use crate::types::Cwe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreEventKind {
    FixCredit,
    AllFixedBonus,
    Penalty,
}

impl ScoreEventKind {
    pub fn delta(self) -> i64 {
        match self {
            ScoreEventKind::FixCredit | ScoreEventKind::AllFixedBonus => 1,
            ScoreEventKind::Penalty => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub iteration: u32,
    pub kind: ScoreEventKind,
    pub cwe: Option<Cwe>,
    pub delta: i64,
}

/// Ordered ledger of score events for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreLedger {
    pub current: i64,
    pub events: Vec<ScoreEvent>,
}

impl ScoreLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, iteration: u32, kind: ScoreEventKind, cwe: Option<Cwe>) -> &ScoreEvent {
        let delta = kind.delta();
        self.events.push(ScoreEvent {
            iteration,
            kind,
            cwe,
            delta,
        });
        self.current += delta;
        self.events.last().expect("just pushed")
    }

    /// Settle one fix round against the check that followed it.
    ///
    /// `claimed_fixed` is what the model said it fixed, `found_before` is
    /// what the preceding check had reported, and `next_check_found` is what
    /// the follow-up identification or analyzer scan still sees. Returns the
    /// events appended by this settlement.
    pub fn settle_round(
        &mut self,
        iteration: u32,
        claimed_fixed: &[Cwe],
        found_before: &[Cwe],
        next_check_found: &[Cwe],
    ) -> Vec<ScoreEvent> {
        let start = self.events.len();
        for &cwe in claimed_fixed {
            if next_check_found.contains(&cwe) {
                self.push(iteration, ScoreEventKind::Penalty, Some(cwe));
            } else {
                self.push(iteration, ScoreEventKind::FixCredit, Some(cwe));
            }
        }
        for &cwe in next_check_found {
            if !found_before.contains(&cwe) {
                self.push(iteration, ScoreEventKind::Penalty, Some(cwe));
            }
        }
        if next_check_found.is_empty() {
            self.push(iteration, ScoreEventKind::AllFixedBonus, None);
        }
        self.events[start..].to_vec()
    }

    /// Decimal text of the current score, as interpolated into prompts.
    pub fn render_score(&self) -> String {
        self.current.to_string()
    }

    /// Recompute the score from the event list. Always equals `current`.
    pub fn replay_sum(&self) -> i64 {
        self.events.iter().map(|e| e.delta).sum()
    }
}
