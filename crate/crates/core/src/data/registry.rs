use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Evaluation group a game belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Id,
    NearOod,
    FarOod,
}

impl Distribution {
    pub const ALL: [Distribution; 3] = [Distribution::Id, Distribution::NearOod, Distribution::FarOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Id => "id",
            Distribution::NearOod => "near_ood",
            Distribution::FarOod => "far_ood",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "id" => Ok(Distribution::Id),
            "near_ood" | "nearood" => Ok(Distribution::NearOod),
            "far_ood" | "farood" => Ok(Distribution::FarOod),
            other => Err(Error::InvalidArgument(format!("unknown distribution `{other}`"))),
        }
    }
}

const ID_GAMES: [&str; 50] = [
    "AirRaid", "Amidar", "Asteroids", "Atlantis", "BankHeist", "BattleZone", "Berzerk", "Bowling", "Boxing",
    "Breakout", "Carnival", "Centipede", "ChopperCommand", "CrazyClimber", "DemonAttack", "DoubleDunk",
    "ElevatorAction", "Enduro", "FishingDerby", "Freeway", "Frostbite", "Gopher", "Gravitar", "Hero", "IceHockey",
    "Jamesbond", "Kangaroo", "Krull", "KungFuMaster", "MontezumaRevenge", "MsPacman", "NameThisGame", "Phoenix",
    "Pitfall", "PrivateEye", "Qbert", "RoadRunner", "Robotank", "Skiing", "Solaris", "SpaceInvaders", "StarGunner",
    "Tennis", "TimePilot", "Tutankham", "UpNDown", "VideoPinball", "WizardOfWor", "YarsRevenge", "Zaxxon",
];

const NEAR_OOD_GAMES: [&str; 10] = [
    "Alien", "Assault", "Asterix", "BeamRider", "JourneyEscape", "Pong", "Pooyan", "Riverraid", "Seaquest", "Venture",
];

const FAR_OOD_GAMES: [&str; 5] = ["BasicMath", "HumanCannonball", "Klax", "Othello", "Surround"];

/// Game lists per evaluation distribution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GameRegistry {
    groups: BTreeMap<Distribution, Vec<String>>,
}

impl GameRegistry {
    /// The 50 / 10 / 5 split used throughout the experiments.
    pub fn builtin() -> Self {
        let to_vec = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::new(to_vec(&ID_GAMES), to_vec(&NEAR_OOD_GAMES), to_vec(&FAR_OOD_GAMES))
            .expect("builtin lists are disjoint")
    }

    pub fn new(id: Vec<String>, near: Vec<String>, far: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in id.iter().chain(&near).chain(&far) {
            if !seen.insert(g.as_str()) {
                return Err(Error::InvalidArgument(format!("game `{g}` listed in more than one distribution")));
            }
        }
        let mut groups = BTreeMap::new();
        groups.insert(Distribution::Id, id);
        groups.insert(Distribution::NearOod, near);
        groups.insert(Distribution::FarOod, far);
        Ok(Self { groups })
    }

    pub fn games(&self, d: Distribution) -> &[String] {
        &self.groups[&d]
    }

    pub fn distribution_of(&self, game: &str) -> Option<Distribution> {
        self.groups.iter().find(|(_, gs)| gs.iter().any(|g| g == game)).map(|(d, _)| *d)
    }

    pub fn contains(&self, game: &str) -> bool {
        self.distribution_of(game).is_some()
    }
}
