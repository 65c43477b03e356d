//! Training modes: the ablation ladder from a shared-advantage baseline up to
//! the full method, each behind [`TrainingMode`] and looked up by name.

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::error::{CoreError, Result};
use crate::objective::{AdvantageSet, NftConfig};
use crate::rewards::RewardVector;

pub trait TrainingMode: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Turns one group's raw rewards into per-rollout optimality probabilities.
    fn advantages(&self, rewards: &[RewardVector], nft: &NftConfig) -> Result<AdvantageSet>;

    /// Partial detach of shallow A2V keys/values during training.
    fn gradient_surgery(&self) -> bool {
        false
    }

    /// Attention-derived weights on the video loss instead of uniform ones.
    fn region_weighting(&self) -> bool {
        false
    }
}

/// Baseline: all rewards summed into one advantage shared by both branches.
#[derive(Debug, Default)]
pub struct SharedAdvantage;

impl TrainingMode for SharedAdvantage {
    fn name(&self) -> &'static str {
        "shared-advantage"
    }

    fn description(&self) -> &'static str {
        "single advantage from the summed rewards, used by both branches"
    }

    fn advantages(&self, rewards: &[RewardVector], nft: &NftConfig) -> Result<AdvantageSet> {
        Ok(AdvantageSet::shared(rewards, nft))
    }
}

#[derive(Debug, Default)]
pub struct RoutingOnly;

impl TrainingMode for RoutingOnly {
    fn name(&self) -> &'static str {
        "routing-only"
    }

    fn description(&self) -> &'static str {
        "per-reward advantages routed to their branches; sync broadcast to both"
    }

    fn advantages(&self, rewards: &[RewardVector], nft: &NftConfig) -> Result<AdvantageSet> {
        AdvantageSet::routed(rewards, nft)
    }
}

#[derive(Debug, Default)]
pub struct RoutingSurgery;

impl TrainingMode for RoutingSurgery {
    fn name(&self) -> &'static str {
        "routing-surgery"
    }

    fn description(&self) -> &'static str {
        "advantage routing plus partial detach of shallow A2V keys/values"
    }

    fn advantages(&self, rewards: &[RewardVector], nft: &NftConfig) -> Result<AdvantageSet> {
        AdvantageSet::routed(rewards, nft)
    }

    fn gradient_surgery(&self) -> bool {
        true
    }
}

/// Routing, gradient surgery and region-weighted video loss together.
#[derive(Debug, Default)]
pub struct OmniNft;

impl TrainingMode for OmniNft {
    fn name(&self) -> &'static str {
        "omninft"
    }

    fn description(&self) -> &'static str {
        "routing, gradient surgery and region-wise reweighting"
    }

    fn advantages(&self, rewards: &[RewardVector], nft: &NftConfig) -> Result<AdvantageSet> {
        AdvantageSet::routed(rewards, nft)
    }

    fn gradient_surgery(&self) -> bool {
        true
    }

    fn region_weighting(&self) -> bool {
        true
    }
}

/// Name → mode lookup. Aliases resolve to a registered canonical name.
#[derive(Debug, Default)]
pub struct ModeRegistry {
    modes: BTreeMap<&'static str, Box<dyn TrainingMode>>,
    aliases: BTreeMap<&'static str, &'static str>,
}

impl ModeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the four built-in modes and the `+routing-only` /
    /// `+routing+surgery` spellings of the ladder.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register(Box::new(SharedAdvantage));
        r.register(Box::new(RoutingOnly));
        r.register(Box::new(RoutingSurgery));
        r.register(Box::new(OmniNft));
        r.alias("vanilla", "shared-advantage");
        r.alias("+routing-only", "routing-only");
        r.alias("+routing+surgery", "routing-surgery");
        r
    }

    /// Adds or replaces a mode under its own name.
    pub fn register(&mut self, mode: Box<dyn TrainingMode>) {
        self.modes.insert(mode.name(), mode);
    }

    pub fn alias(&mut self, alias: &'static str, target: &'static str) {
        self.aliases.insert(alias, target);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainingMode> {
        let canonical = self.aliases.get(name).copied().unwrap_or(name);
        self.modes
            .get(canonical)
            .map(|m| m.as_ref())
            .ok_or_else(|| CoreError::UnknownMode {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.modes.keys().copied().collect()
    }
}
