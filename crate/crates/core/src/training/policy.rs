use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroundingModel, Group};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "freezing_param")]
    Freezing,
    #[serde(alias = "full_param")]
    Full,
    #[serde(alias = "partial_param")]
    Partial,
    DomainAdapter,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Freezing,
        PolicyKind::DomainAdapter,
        PolicyKind::Partial,
        PolicyKind::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Freezing => "freezing",
            PolicyKind::Full => "full",
            PolicyKind::Partial => "partial",
            PolicyKind::DomainAdapter => "domain_adapter",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freezing" | "freezing_param" => Ok(PolicyKind::Freezing),
            "full" | "full_param" => Ok(PolicyKind::Full),
            "partial" | "partial_param" => Ok(PolicyKind::Partial),
            "domain_adapter" | "domain-adapter" => Ok(PolicyKind::DomainAdapter),
            other => Err(Error::Config(format!(
                "unknown policy `{other}` (expected freezing, full, partial, or domain_adapter)"
            ))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameters receive gradients.
///
/// The vision encoder, language encoder, and caption decoder are frozen
/// under every policy; the score head and prefix projection always train.
/// Only the domain encoder's treatment varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPolicy {
    pub kind: PolicyKind,
    /// Trailing blocks unfrozen by [`PolicyKind::Partial`].
    pub partial_layers: usize,
}

impl TrainingPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            partial_layers: 2,
        }
    }
}

impl Default for TrainingPolicy {
    fn default() -> Self {
        Self::new(PolicyKind::DomainAdapter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub group: Group,
    pub elements: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub total: usize,
    pub trainable: usize,
}

/// Per-parameter and per-group element counts with trainable flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLedger {
    pub entries: Vec<LedgerEntry>,
    pub groups: Vec<GroupSummary>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

impl ParamLedger {
    pub fn from_model(model: &GroundingModel) -> Self {
        let mut entries = Vec::new();
        model.visit_groups(&mut |group, p| {
            entries.push(LedgerEntry {
                name: p.name().to_owned(),
                group,
                elements: p.elem_count(),
                trainable: p.trainable(),
            })
        });
        let groups = Group::ALL
            .iter()
            .filter(|g| entries.iter().any(|e| e.group == **g))
            .map(|&group| {
                let members = entries.iter().filter(|e| e.group == group);
                GroupSummary {
                    group,
                    total: members.clone().map(|e| e.elements).sum(),
                    trainable: members.filter(|e| e.trainable).map(|e| e.elements).sum(),
                }
            })
            .collect();
        let trainable = entries.iter().filter(|e| e.trainable).map(|e| e.elements).sum();
        let total: usize = entries.iter().map(|e| e.elements).sum();
        Self {
            entries,
            groups,
            trainable,
            frozen: total - trainable,
            total,
        }
    }

    pub fn group(&self, group: Group) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == group)
    }

    /// Trainable elements inside the domain-specific encoder (base and adapters).
    pub fn encoder_trainable(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.group.is_domain())
            .map(|g| g.trainable)
            .sum()
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20} {:>12} {:>12}\n", "group", "total", "trainable");
        for g in &self.groups {
            out += &format!("{:<20} {:>12} {:>12}\n", g.group.name(), g.total, g.trainable);
        }
        out += &format!("{:<20} {:>12} {:>12}\n", "all", self.total, self.trainable);
        out += &format!("{:<20} {:>12}\n", "domain encoder", self.encoder_trainable());
        out
    }
}

/// Sets every parameter's trainable flag according to `policy`.
pub fn apply_policy(model: &mut GroundingModel, policy: &TrainingPolicy) -> Result<ParamLedger> {
    let n_layers = model.config().vision.n_layers;
    match policy.kind {
        PolicyKind::DomainAdapter if model.domain.adapters().is_none() => {
            return Err(Error::Config(
                "domain_adapter policy needs an adapter-bearing domain encoder".into(),
            ))
        }
        PolicyKind::Partial if policy.partial_layers == 0 || policy.partial_layers > n_layers => {
            return Err(Error::Config(format!(
                "partial_layers must be in 1..={n_layers}, got {}",
                policy.partial_layers
            )))
        }
        _ => {}
    }
    let unfrozen: Vec<String> = (n_layers.saturating_sub(policy.partial_layers)..n_layers)
        .map(|l| format!("domain.blocks.{l}."))
        .collect();
    model.visit_groups_mut(&mut |group, p| {
        let on = match group {
            Group::VisionEncoder | Group::LanguageEncoder | Group::CaptionDecoder => false,
            Group::ScoreHead | Group::PrefixProjection => true,
            Group::DomainEncoder => match policy.kind {
                PolicyKind::Full => true,
                PolicyKind::Partial => unfrozen.iter().any(|u| p.name().starts_with(u)),
                _ => false,
            },
            Group::DomainAdapters => policy.kind == PolicyKind::DomainAdapter,
        };
        p.set_trainable(on);
    });
    Ok(ParamLedger::from_model(model))
}
