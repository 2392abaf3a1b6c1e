use serde::{Deserialize, Serialize};

use super::{Role, Usage};
use crate::money::{CostModel, Money};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleUsage {
    pub slm: Usage,
    pub llm: Usage,
}

impl RoleUsage {
    pub fn get(&self, role: Role) -> Usage {
        match role {
            Role::Slm => self.slm,
            Role::Llm => self.llm,
        }
    }

    pub fn add(&mut self, role: Role, usage: Usage) {
        match role {
            Role::Slm => self.slm += usage,
            Role::Llm => self.llm += usage,
        }
    }

    pub fn merge(&mut self, other: &RoleUsage) {
        self.slm += other.slm;
        self.llm += other.llm;
    }

    pub fn dollars(&self, cm: &CostModel) -> Money {
        cm.llm_charge(self.llm.input_tokens, self.llm.output_tokens)
            + cm.slm_charge(self.slm.input_tokens, self.slm.output_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub role: Role,
    pub usage: Usage,
    pub charge: Money,
}

/// Accumulated token usage per role, priced with a fixed [`CostModel`].
///
/// The event log is optional so long-running processes can keep totals only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    cost: CostModel,
    totals: RoleUsage,
    charged: Money,
    events: Option<Vec<UsageEvent>>,
}

impl UsageLedger {
    pub fn new(cost: CostModel) -> Self {
        Self { cost, totals: RoleUsage::default(), charged: Money::ZERO, events: Some(Vec::new()) }
    }

    pub fn totals_only(cost: CostModel) -> Self {
        Self { events: None, ..Self::new(cost) }
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn charge_for(&self, role: Role, usage: Usage) -> Money {
        match role {
            Role::Slm => self.cost.slm_charge(usage.input_tokens, usage.output_tokens),
            Role::Llm => self.cost.llm_charge(usage.input_tokens, usage.output_tokens),
        }
    }

    /// Adds `usage` to the role's totals and returns the charge.
    pub fn record(&mut self, role: Role, usage: Usage) -> Money {
        let charge = self.charge_for(role, usage);
        self.totals.add(role, usage);
        self.charged += charge;
        if let Some(events) = &mut self.events {
            events.push(UsageEvent { role, usage, charge });
        }
        charge
    }

    pub fn record_all(&mut self, usage: &RoleUsage) -> Money {
        self.record(Role::Slm, usage.slm) + self.record(Role::Llm, usage.llm)
    }

    pub fn totals(&self) -> &RoleUsage {
        &self.totals
    }

    pub fn usage(&self, role: Role) -> Usage {
        self.totals.get(role)
    }

    /// Dollar total recomputed from token totals and prices.
    pub fn dollars(&self) -> Money {
        self.totals.dollars(&self.cost)
    }

    /// Running sum of the per-call charges.
    pub fn charged(&self) -> Money {
        self.charged
    }

    pub fn events(&self) -> Option<&[UsageEvent]> {
        self.events.as_deref()
    }

    /// True when totals, running charges and the event log all agree.
    pub fn is_conserved(&self) -> bool {
        let from_events = match &self.events {
            Some(ev) => ev.iter().map(|e| e.charge).sum(),
            None => self.charged,
        };
        self.dollars() == self.charged && from_events == self.charged
    }
}
