use super::MethodError;

/// Number of consensus rounds `t(k)` performed at iteration `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusSchedule {
    /// `t(k) = rounds`
    Constant { rounds: u64 },
    /// `t(k) = k + 1` (NEAR-DGD⁺; every iteration mixes at least once).
    Increasing,
    /// `t(k) = initial · 2^⌊k / period⌋`, saturating at `u64::MAX`.
    Doubling { initial: u64, period: u64 },
}

impl ConsensusSchedule {
    pub fn constant(rounds: u64) -> Result<Self, MethodError> {
        let s = Self::Constant { rounds };
        s.validate()?;
        Ok(s)
    }

    pub fn doubling(initial: u64, period: u64) -> Result<Self, MethodError> {
        let s = Self::Doubling { initial, period };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MethodError> {
        match *self {
            Self::Constant { rounds: 0 } => Err(MethodError::BadSchedule(
                "constant schedules need at least one round".into(),
            )),
            Self::Doubling { initial, period } if initial == 0 || period == 0 => {
                Err(MethodError::BadSchedule(
                    "doubling schedules need initial >= 1 and period >= 1".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn rounds_at(&self, k: u64) -> u64 {
        match *self {
            Self::Constant { rounds } => rounds,
            Self::Increasing => k.saturating_add(1),
            Self::Doubling { initial, period } => {
                let doublings = k / period;
                if doublings >= 64 {
                    u64::MAX
                } else {
                    initial.saturating_mul(1u64 << doublings)
                }
            }
        }
    }

    /// `Σ_{k < iterations} t(k)`, saturating.
    pub fn total_rounds(&self, iterations: u64) -> u64 {
        (0..iterations).fold(0u64, |acc, k| acc.saturating_add(self.rounds_at(k)))
    }

    /// Short identifier used in file names, following the `(a,b,×2)`
    /// naming of nested-consensus variants.
    pub fn label(&self) -> String {
        match *self {
            Self::Constant { rounds } => format!("{rounds}"),
            Self::Increasing => "plus".to_string(),
            Self::Doubling { initial, period } => format!("{initial}_{period}_x2"),
        }
    }
}
