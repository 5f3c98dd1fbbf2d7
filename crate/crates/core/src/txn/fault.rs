use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Protocol points at which a crash can be injected during commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    BeforePrepare,
    AfterVoteBeforeDecision,
    AfterCommitRecordBeforePhase2,
    MidPhase2OneCommitted,
    AfterPhase2BeforeEnd,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 5] = [
        CrashPoint::BeforePrepare,
        CrashPoint::AfterVoteBeforeDecision,
        CrashPoint::AfterCommitRecordBeforePhase2,
        CrashPoint::MidPhase2OneCommitted,
        CrashPoint::AfterPhase2BeforeEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrashPoint::BeforePrepare => "before_prepare",
            CrashPoint::AfterVoteBeforeDecision => "after_vote_before_decision",
            CrashPoint::AfterCommitRecordBeforePhase2 => "after_commit_record_before_phase2",
            CrashPoint::MidPhase2OneCommitted => "mid_phase2_one_committed",
            CrashPoint::AfterPhase2BeforeEnd => "after_phase2_before_end",
        }
    }
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CrashPoint::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown crash point `{s}`"))
    }
}

/// What crashes when the point is reached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultTarget {
    Coordinator,
    Rm(String),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Coordinator => f.write_str("coordinator"),
            FaultTarget::Rm(id) => f.write_str(id),
        }
    }
}

impl From<&str> for FaultTarget {
    fn from(s: &str) -> Self {
        if s == "coordinator" {
            FaultTarget::Coordinator
        } else {
            FaultTarget::Rm(s.to_string())
        }
    }
}

/// A single crash injection, written `<target>@<point>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub point: CrashPoint,
}

impl FaultSpec {
    pub fn new(target: impl Into<FaultTarget>, point: CrashPoint) -> Self {
        FaultSpec {
            target: target.into(),
            point,
        }
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.target, self.point)
    }
}

impl FromStr for FaultSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (target, point) = s
            .rsplit_once('@')
            .ok_or_else(|| format!("fault `{s}` is not of the form <target>@<point>"))?;
        if target.is_empty() {
            return Err(format!("fault `{s}` has an empty target"));
        }
        Ok(FaultSpec::new(target, point.parse()?))
    }
}

impl Serialize for FaultSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FaultSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}
