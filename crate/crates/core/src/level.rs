use core::fmt;

/// Number of intervertebral disc levels graded per study.
pub const NUM_LEVELS: usize = 5;
/// Number of severity classes.
pub const NUM_CLASSES: usize = 3;

/// Lumbar intervertebral disc level, ordered cranial to caudal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Level {
    L1L2,
    L2L3,
    L3L4,
    L4L5,
    L5S1,
}

impl Level {
    pub const ALL: [Level; NUM_LEVELS] =
        [Level::L1L2, Level::L2L3, Level::L3L4, Level::L4L5, Level::L5S1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1L2 => "L1/L2",
            Level::L2L3 => "L2/L3",
            Level::L3L4 => "L3/L4",
            Level::L4L5 => "L4/L5",
            Level::L5S1 => "L5/S1",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        Self::ALL.iter().copied().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stenosis severity. The discriminant is the class index used by the loss
/// weights and the model heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Grade {
    NormalMild = 0,
    Moderate = 1,
    Severe = 2,
}

impl Grade {
    pub const ALL: [Grade; NUM_CLASSES] = [Grade::NormalMild, Grade::Moderate, Grade::Severe];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::NormalMild => "normal_mild",
            Grade::Moderate => "moderate",
            Grade::Severe => "severe",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
