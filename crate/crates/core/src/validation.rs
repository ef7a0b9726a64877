//! Two-stage expert review of taxonomy drafts.
//!
//! A draft moves `Draft -> StructuralReview -> DomainReview -> Approved`.
//! Any reject or revise sends it to `Revising`; a revised draft re-enters at
//! `StructuralReview` in a new round. Every state change is recorded as a
//! [`ReviewEvent`], and replaying the log reproduces the board exactly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::FeatureWeight;

pub const STRUCTURAL_CATEGORY_CRITERION: &str = "feature-words-describe-persona";
pub const STRUCTURAL_TAXONOMY_CRITERION: &str = "taxonomy-coherence-and-hierarchy";
pub const DOMAIN_CATEGORY_CRITERION: &str = "scenario-relevance";
pub const DOMAIN_TAXONOMY_CRITERION: &str = "counter-examples-and-boundaries";

/// Sentinel used in item ids for taxonomy-level items.
pub const TAXONOMY_ITEM: &str = "_taxonomy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Structural,
    DomainExpert,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Structural => "structural",
            Stage::DomainExpert => "domain_expert",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoardState {
    Draft,
    StructuralReview,
    DomainReview,
    Revising,
    Approved,
}

impl BoardState {
    pub fn stage(self) -> Option<Stage> {
        match self {
            BoardState::StructuralReview => Some(Stage::Structural),
            BoardState::DomainReview => Some(Stage::DomainExpert),
            _ => None,
        }
    }
}

impl fmt::Display for BoardState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("state serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Reject,
    Revise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Approved,
    Rejected,
    Revised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub reviewer_id: String,
    pub stage: Stage,
    pub item_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub comment: String,
    /// Proposed weights for the item's category (replace by token).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight_edits: Vec<FeatureWeight>,
    /// Counter-example or scenario the taxonomy should handle; domain stage only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub challenge: Option<String>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub draft_id: String,
    pub round: u32,
    pub stage: Stage,
    /// `None` for the taxonomy-level item.
    pub category_id: Option<String>,
    pub criterion: String,
    pub status: ItemStatus,
    pub decisions: Vec<ReviewDecision>,
}

impl ReviewItem {
    fn approvals(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.decision == Decision::Approve)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Opened {
        draft_id: String,
        category_ids: Vec<String>,
        quorum: u32,
        timestamp: u64,
    },
    Submitted {
        timestamp: u64,
    },
    Decided(ReviewDecision),
    Resubmitted {
        draft_id: String,
        category_ids: Vec<String>,
        timestamp: u64,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReviewError {
    #[error("cannot {action} while board is {state}")]
    InvalidTransition { state: BoardState, action: &'static str },
    #[error("unknown review item {0}")]
    UnknownItem(String),
    #[error("item {item_id} belongs to the {item_stage} stage, decision was made as {decision_stage}")]
    WrongStage {
        item_id: String,
        item_stage: Stage,
        decision_stage: Stage,
    },
    #[error("reviewer {reviewer_id} already decided on {item_id}")]
    Conflict { reviewer_id: String, item_id: String },
    #[error("reject and revise decisions need a comment")]
    MissingComment,
    #[error("challenges are only accepted at the domain-expert stage")]
    ChallengeNotAllowed,
    #[error("a draft must have at least one category")]
    NoCategories,
    #[error("quorum must be at least 1")]
    InvalidQuorum,
    #[error("event log must start with an open event")]
    MissingOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewBoard {
    pub draft_id: String,
    pub category_ids: Vec<String>,
    pub state: BoardState,
    pub round: u32,
    pub quorum: u32,
    /// Items from every round; the current ones have `round == self.round`.
    pub items: Vec<ReviewItem>,
    pub events: Vec<ReviewEvent>,
}

fn item_id(draft_id: &str, stage: Stage, category: Option<&str>) -> String {
    format!("{draft_id}:{stage}:{}", category.unwrap_or(TAXONOMY_ITEM))
}

impl ReviewBoard {
    pub fn open(
        draft_id: impl Into<String>,
        category_ids: Vec<String>,
        quorum: u32,
        timestamp: u64,
    ) -> Result<Self, ReviewError> {
        let draft_id = draft_id.into();
        if category_ids.is_empty() {
            return Err(ReviewError::NoCategories);
        }
        if quorum == 0 {
            return Err(ReviewError::InvalidQuorum);
        }
        Ok(Self {
            events: vec![ReviewEvent::Opened {
                draft_id: draft_id.clone(),
                category_ids: category_ids.clone(),
                quorum,
                timestamp,
            }],
            draft_id,
            category_ids,
            state: BoardState::Draft,
            round: 0,
            quorum,
            items: Vec::new(),
        })
    }

    /// Rebuilds a board from its event log.
    pub fn replay(events: &[ReviewEvent]) -> Result<Self, ReviewError> {
        let (first, rest) = events.split_first().ok_or(ReviewError::MissingOpen)?;
        let ReviewEvent::Opened {
            draft_id,
            category_ids,
            quorum,
            timestamp,
        } = first
        else {
            return Err(ReviewError::MissingOpen);
        };
        let mut board = Self::open(draft_id.clone(), category_ids.clone(), *quorum, *timestamp)?;
        for ev in rest {
            board.apply(ev.clone())?;
        }
        Ok(board)
    }

    pub fn apply(&mut self, event: ReviewEvent) -> Result<(), ReviewError> {
        match event {
            ReviewEvent::Opened { .. } => Err(ReviewError::InvalidTransition {
                state: self.state,
                action: "open",
            }),
            ReviewEvent::Submitted { timestamp } => self.submit(timestamp),
            ReviewEvent::Decided(d) => self.decide(d),
            ReviewEvent::Resubmitted {
                draft_id,
                category_ids,
                timestamp,
            } => self.resubmit(draft_id, category_ids, timestamp),
        }
    }

    /// Draft -> StructuralReview.
    pub fn submit(&mut self, timestamp: u64) -> Result<(), ReviewError> {
        if self.state != BoardState::Draft {
            return Err(ReviewError::InvalidTransition {
                state: self.state,
                action: "submit",
            });
        }
        self.enter_stage(Stage::Structural);
        self.events.push(ReviewEvent::Submitted { timestamp });
        Ok(())
    }

    /// Revising -> StructuralReview with a revised draft, starting a new round.
    pub fn resubmit(
        &mut self,
        draft_id: impl Into<String>,
        category_ids: Vec<String>,
        timestamp: u64,
    ) -> Result<(), ReviewError> {
        if self.state != BoardState::Revising {
            return Err(ReviewError::InvalidTransition {
                state: self.state,
                action: "resubmit",
            });
        }
        if category_ids.is_empty() {
            return Err(ReviewError::NoCategories);
        }
        let draft_id = draft_id.into();
        self.draft_id = draft_id.clone();
        self.category_ids = category_ids.clone();
        self.round += 1;
        self.enter_stage(Stage::Structural);
        self.events.push(ReviewEvent::Resubmitted {
            draft_id,
            category_ids,
            timestamp,
        });
        Ok(())
    }

    fn enter_stage(&mut self, stage: Stage) {
        self.state = match stage {
            Stage::Structural => BoardState::StructuralReview,
            Stage::DomainExpert => BoardState::DomainReview,
        };
        let (cat_criterion, tax_criterion) = match stage {
            Stage::Structural => (STRUCTURAL_CATEGORY_CRITERION, STRUCTURAL_TAXONOMY_CRITERION),
            Stage::DomainExpert => (DOMAIN_CATEGORY_CRITERION, DOMAIN_TAXONOMY_CRITERION),
        };
        let targets = self
            .category_ids
            .iter()
            .map(|c| (Some(c.clone()), cat_criterion))
            .chain(std::iter::once((None, tax_criterion)));
        let new: Vec<_> = targets
            .map(|(category_id, criterion)| ReviewItem {
                item_id: item_id(&self.draft_id, stage, category_id.as_deref()),
                draft_id: self.draft_id.clone(),
                round: self.round,
                stage,
                category_id,
                criterion: criterion.to_string(),
                status: ItemStatus::Pending,
                decisions: Vec::new(),
            })
            .collect();
        self.items.extend(new);
    }

    pub fn decide(&mut self, decision: ReviewDecision) -> Result<(), ReviewError> {
        let Some(stage) = self.state.stage() else {
            return Err(ReviewError::InvalidTransition {
                state: self.state,
                action: "decide",
            });
        };
        let round = self.round;
        let idx = self
            .items
            .iter()
            .position(|i| i.item_id == decision.item_id && i.round == round)
            .ok_or_else(|| ReviewError::UnknownItem(decision.item_id.clone()))?;
        let item = &self.items[idx];
        if item.stage != stage || decision.stage != item.stage {
            return Err(ReviewError::WrongStage {
                item_id: item.item_id.clone(),
                item_stage: item.stage,
                decision_stage: decision.stage,
            });
        }
        if item.decisions.iter().any(|d| d.reviewer_id == decision.reviewer_id) {
            return Err(ReviewError::Conflict {
                reviewer_id: decision.reviewer_id,
                item_id: decision.item_id,
            });
        }
        if decision.decision != Decision::Approve && decision.comment.trim().is_empty() {
            return Err(ReviewError::MissingComment);
        }
        if decision.challenge.is_some() && stage != Stage::DomainExpert {
            return Err(ReviewError::ChallengeNotAllowed);
        }

        self.events.push(ReviewEvent::Decided(decision.clone()));
        let quorum = self.quorum as usize;
        let item = &mut self.items[idx];
        let kind = decision.decision;
        item.decisions.push(decision);
        match kind {
            Decision::Reject => {
                item.status = ItemStatus::Rejected;
                self.state = BoardState::Revising;
            }
            Decision::Revise => {
                item.status = ItemStatus::Revised;
                self.state = BoardState::Revising;
            }
            Decision::Approve => {
                if item.approvals() >= quorum {
                    item.status = ItemStatus::Approved;
                }
                if self.current_items().all(|i| i.status == ItemStatus::Approved) {
                    match stage {
                        Stage::Structural => self.enter_stage(Stage::DomainExpert),
                        Stage::DomainExpert => self.state = BoardState::Approved,
                    }
                }
            }
        }
        Ok(())
    }

    pub fn current_items(&self) -> impl Iterator<Item = &ReviewItem> {
        let round = self.round;
        let stage = self.state.stage();
        self.items
            .iter()
            .filter(move |i| i.round == round && stage.is_none_or(|s| s == i.stage))
    }

    /// Pending items for the active stage.
    pub fn queue(&self) -> Vec<&ReviewItem> {
        match self.state.stage() {
            Some(_) => self
                .current_items()
                .filter(|i| i.status == ItemStatus::Pending)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn item(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.iter().rev().find(|i| i.item_id == item_id)
    }

    /// Decisions from the current round that sent the board to revision.
    pub fn revision_requests(&self) -> Vec<&ReviewDecision> {
        self.items
            .iter()
            .filter(|i| i.round == self.round)
            .flat_map(|i| &i.decisions)
            .filter(|d| d.decision != Decision::Approve)
            .collect()
    }

    /// Challenges raised in the current round; each one schedules a refinement.
    pub fn pending_challenges(&self) -> Vec<&str> {
        if self.state != BoardState::Revising {
            return Vec::new();
        }
        self.revision_requests()
            .into_iter()
            .filter_map(|d| d.challenge.as_deref())
            .collect()
    }

    pub fn is_approved(&self) -> bool {
        self.state == BoardState::Approved
    }

    /// Checks the approval invariant: an approved board has every current
    /// item approved by at least `quorum` reviewers at both stages.
    pub fn audit(&self) -> Result<(), String> {
        if self.state != BoardState::Approved {
            return Ok(());
        }
        let k = self.category_ids.len();
        for stage in [Stage::Structural, Stage::DomainExpert] {
            let items: Vec<_> = self
                .items
                .iter()
                .filter(|i| i.round == self.round && i.stage == stage)
                .collect();
            if items.len() != k + 1 {
                return Err(format!("{stage}: expected {} items, found {}", k + 1, items.len()));
            }
            for i in items {
                if i.status != ItemStatus::Approved || i.approvals() < self.quorum as usize {
                    return Err(format!("{} approved without quorum", i.item_id));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decision(reviewer: &str, stage: Stage, item: &str, d: Decision) -> ReviewDecision {
        ReviewDecision {
            reviewer_id: reviewer.into(),
            stage,
            item_id: item.into(),
            decision: d,
            comment: "looks fine".into(),
            weight_edits: vec![],
            challenge: None,
            timestamp: 1,
        }
    }

    fn approve_all(board: &mut ReviewBoard, reviewer: &str) {
        let stage = board.state.stage().unwrap();
        let ids: Vec<String> = board.queue().iter().map(|i| i.item_id.clone()).collect();
        for id in ids {
            board
                .decide(decision(reviewer, stage, &id, Decision::Approve))
                .unwrap();
        }
    }

    fn five() -> Vec<String> {
        ["a", "b", "c", "d", "e"].map(String::from).to_vec()
    }

    #[test]
    fn happy_path_reaches_approved() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        assert_eq!(b.queue().len(), 6);
        approve_all(&mut b, "s1");
        assert_eq!(b.state, BoardState::DomainReview);
        assert_eq!(b.queue().len(), 6);
        approve_all(&mut b, "e1");
        assert!(b.is_approved());
        b.audit().unwrap();
        assert_eq!(ReviewBoard::replay(&b.events).unwrap(), b);
    }

    #[test]
    fn reject_sends_to_revising_and_resubmit_starts_new_round() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        let mut rej = decision("s1", Stage::Structural, "d0:structural:c", Decision::Reject);
        rej.comment = "overlaps with b".into();
        b.decide(rej).unwrap();
        assert_eq!(b.state, BoardState::Revising);
        assert!(b.pending_challenges().is_empty());
        assert!(b.submit(2).is_err());
        b.resubmit("d1", five(), 3).unwrap();
        assert_eq!((b.state, b.round), (BoardState::StructuralReview, 1));
        assert!(b.queue().iter().all(|i| i.draft_id == "d1"));
    }

    #[test]
    fn reject_without_comment_is_invalid() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        let mut rej = decision("s1", Stage::Structural, "d0:structural:a", Decision::Reject);
        rej.comment = " ".into();
        assert_eq!(b.decide(rej), Err(ReviewError::MissingComment));
        assert_eq!(b.state, BoardState::StructuralReview);
    }

    #[test]
    fn double_decision_is_conflict() {
        let mut b = ReviewBoard::open("d0", five(), 2, 0).unwrap();
        b.submit(1).unwrap();
        let d = decision("s1", Stage::Structural, "d0:structural:a", Decision::Approve);
        b.decide(d.clone()).unwrap();
        assert!(matches!(b.decide(d), Err(ReviewError::Conflict { .. })));
    }

    #[test]
    fn quorum_needs_k_approvals() {
        let mut b = ReviewBoard::open("d0", vec!["a".into()], 2, 0).unwrap();
        b.submit(1).unwrap();
        approve_all(&mut b, "s1");
        assert_eq!(b.state, BoardState::StructuralReview);
        approve_all(&mut b, "s2");
        assert_eq!(b.state, BoardState::DomainReview);
    }

    #[test]
    fn challenge_only_at_domain_stage() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        let mut c = decision("s1", Stage::Structural, "d0:structural:_taxonomy", Decision::Revise);
        c.challenge = Some("shift workers".into());
        assert_eq!(b.decide(c), Err(ReviewError::ChallengeNotAllowed));
        approve_all(&mut b, "s1");
        let mut c = decision("e1", Stage::DomainExpert, "d0:domain_expert:_taxonomy", Decision::Revise);
        c.challenge = Some("shift workers".into());
        b.decide(c).unwrap();
        assert_eq!(b.state, BoardState::Revising);
        assert_eq!(b.pending_challenges(), ["shift workers"]);
    }

    #[test]
    fn wrong_stage_and_unknown_item() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        assert!(matches!(
            b.decide(decision("e", Stage::DomainExpert, "d0:structural:a", Decision::Approve)),
            Err(ReviewError::WrongStage { .. })
        ));
        assert!(matches!(
            b.decide(decision("s", Stage::Structural, "nope", Decision::Approve)),
            Err(ReviewError::UnknownItem(_))
        ));
    }

    #[test]
    fn decisions_rejected_outside_review() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        assert!(matches!(
            b.decide(decision("s", Stage::Structural, "d0:structural:a", Decision::Approve)),
            Err(ReviewError::InvalidTransition { .. })
        ));
    }

    #[test]
    fn replay_requires_open() {
        assert_eq!(ReviewBoard::replay(&[]), Err(ReviewError::MissingOpen));
        assert_eq!(
            ReviewBoard::replay(&[ReviewEvent::Submitted { timestamp: 0 }]),
            Err(ReviewError::MissingOpen)
        );
    }

    #[test]
    fn event_log_round_trips_through_json() {
        let mut b = ReviewBoard::open("d0", five(), 1, 0).unwrap();
        b.submit(1).unwrap();
        approve_all(&mut b, "s1");
        let json = serde_json::to_string(&b.events).unwrap();
        let events: Vec<ReviewEvent> = serde_json::from_str(&json).unwrap();
        assert_eq!(ReviewBoard::replay(&events).unwrap(), b);
    }

    #[derive(Debug, Clone)]
    enum Action {
        Submit,
        Resubmit,
        Decide { reviewer: u8, stage: bool, item: u8, kind: u8, comment: bool, challenge: bool },
    }

    fn action() -> impl Strategy<Value = Action> {
        prop_oneof![
            1 => Just(Action::Submit),
            1 => Just(Action::Resubmit),
            8 => (0u8..3, any::<bool>(), 0u8..4, 0u8..3, any::<bool>(), any::<bool>()).prop_map(
                |(reviewer, stage, item, kind, comment, challenge)| Action::Decide {
                    reviewer, stage, item, kind, comment, challenge
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn random_sequences_keep_invariants(actions in prop::collection::vec(action(), 0..60), quorum in 1u32..3) {
            let cats = vec!["a".to_string(), "b".to_string(), "c".to_string()];
            let mut b = ReviewBoard::open("d0", cats.clone(), quorum, 0).unwrap();
            let mut t = 0;
            for a in actions {
                t += 1;
                let _ = match a {
                    Action::Submit => b.submit(t),
                    Action::Resubmit => b.resubmit(format!("d{t}"), cats.clone(), t),
                    Action::Decide { reviewer, stage, item, kind, comment, challenge } => {
                        let stage = if stage { Stage::Structural } else { Stage::DomainExpert };
                        let cat = cats.get(item as usize).map(String::as_str);
                        b.decide(ReviewDecision {
                            reviewer_id: format!("r{reviewer}"),
                            stage,
                            item_id: item_id(&b.draft_id, stage, cat),
                            decision: [Decision::Approve, Decision::Reject, Decision::Revise][kind as usize],
                            comment: if comment { "c".into() } else { String::new() },
                            weight_edits: vec![],
                            challenge: challenge.then(|| "x".to_string()),
                            timestamp: t,
                        })
                    }
                };
                prop_assert!(b.audit().is_ok(), "{:?}", b.audit());
            }
            prop_assert_eq!(ReviewBoard::replay(&b.events).unwrap(), b);
        }
    }
}
