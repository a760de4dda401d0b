//! Layer-selection strategies: which teacher layer each student layer is
//! matched to.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Forward,
    Reverse,
    AllToOne,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Forward,
        Strategy::Reverse,
        Strategy::AllToOne,
        Strategy::Random,
    ];

    /// The strategies that actually match hidden states.
    pub const MATCHING: [Strategy; 4] = [
        Strategy::Forward,
        Strategy::Reverse,
        Strategy::AllToOne,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Forward => "forward",
            Strategy::Reverse => "reverse",
            Strategy::AllToOne => "all_to_one",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || (s == "all-to-one" && *st == Strategy::AllToOne))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Student-to-teacher layer pairs, 1-based on both sides.
///
/// Fields are private: a mapping is fixed once selected and is serialized
/// as its explicit pair list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMapping")]
pub struct LayerMapping {
    pairs: Vec<(usize, usize)>,
    strategy: Strategy,
    random_seed: Option<u64>,
}

#[derive(Deserialize)]
struct RawMapping {
    pairs: Vec<(usize, usize)>,
    strategy: Strategy,
    random_seed: Option<u64>,
}

impl TryFrom<RawMapping> for LayerMapping {
    type Error = Error;

    fn try_from(raw: RawMapping) -> Result<Self> {
        LayerMapping::from_pairs(raw.pairs, raw.strategy, raw.random_seed)
    }
}

impl LayerMapping {
    /// Checks the depth-independent invariants: student indices start at 1
    /// and strictly ascend, teacher indices are >= 1, and `none` is empty.
    pub fn from_pairs(pairs: Vec<(usize, usize)>, strategy: Strategy, random_seed: Option<u64>) -> Result<Self> {
        if strategy == Strategy::None && !pairs.is_empty() {
            return Err(Error::Contract("the none strategy has no pairs".into()));
        }
        if pairs.iter().any(|&(s, t)| s == 0 || t == 0) {
            return Err(Error::Contract(format!("layer indices are 1-based: {pairs:?}")));
        }
        if pairs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Contract(format!("student layers must ascend: {pairs:?}")));
        }
        Ok(LayerMapping {
            pairs,
            strategy,
            random_seed,
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn random_seed(&self) -> Option<u64> {
        self.random_seed
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Checks that every index fits the given depths.
    pub fn validate(&self, student_depth: usize, teacher_depth: usize) -> Result<()> {
        match self
            .pairs
            .iter()
            .find(|&&(s, t)| s > student_depth || t > teacher_depth)
        {
            Some(&(s, t)) => Err(Error::Contract(format!(
                "pair ({s}, {t}) outside a {student_depth}-layer student / {teacher_depth}-layer teacher"
            ))),
            None => Ok(()),
        }
    }
}

/// Teacher layers `ceil(i * teacher / student)` for `i = 1..=student`.
pub fn evenly_spaced(student_depth: usize, teacher_depth: usize) -> Vec<usize> {
    (1..=student_depth)
        .map(|i| (i * teacher_depth).div_ceil(student_depth))
        .collect()
}

pub fn middle_layer(teacher_depth: usize) -> usize {
    teacher_depth.div_ceil(2)
}

pub fn select_layers(
    strategy: Strategy,
    student_depth: usize,
    teacher_depth: usize,
    seed: Option<u64>,
) -> Result<LayerMapping> {
    if student_depth == 0 {
        return Err(Error::Config("student depth must be at least 1".into()));
    }
    if student_depth > teacher_depth {
        return Err(Error::Unsupported(format!(
            "student depth {student_depth} exceeds teacher depth {teacher_depth}"
        )));
    }
    let students = 1..=student_depth;
    let teachers = match strategy {
        Strategy::None => Vec::new(),
        Strategy::Forward => evenly_spaced(student_depth, teacher_depth),
        Strategy::Reverse => {
            let mut t = evenly_spaced(student_depth, teacher_depth);
            t.reverse();
            t
        }
        Strategy::AllToOne => vec![middle_layer(teacher_depth); student_depth],
        Strategy::Random => {
            let seed = seed.ok_or_else(|| Error::Contract("random strategy needs a seed".into()))?;
            let mut t = evenly_spaced(student_depth, teacher_depth);
            t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            t
        }
    };
    let random_seed = if strategy == Strategy::Random { seed } else { None };
    LayerMapping::from_pairs(students.zip(teachers).collect(), strategy, random_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(strategy: Strategy, ls: usize, lt: usize) -> Vec<(usize, usize)> {
        select_layers(strategy, ls, lt, Some(1)).unwrap().pairs().to_vec()
    }

    #[test]
    fn three_of_twelve() {
        assert_eq!(pairs(Strategy::Forward, 3, 12), [(1, 4), (2, 8), (3, 12)]);
        assert_eq!(pairs(Strategy::Reverse, 3, 12), [(1, 12), (2, 8), (3, 4)]);
        assert_eq!(pairs(Strategy::AllToOne, 3, 12), [(1, 6), (2, 6), (3, 6)]);
        assert!(pairs(Strategy::None, 3, 12).is_empty());
    }

    #[test]
    fn nine_of_twelve() {
        assert_eq!(
            pairs(Strategy::Forward, 9, 12),
            [
                (1, 2),
                (2, 3),
                (3, 4),
                (4, 6),
                (5, 7),
                (6, 8),
                (7, 10),
                (8, 11),
                (9, 12)
            ]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            select_layers(Strategy::Forward, 4, 3, None),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            select_layers(Strategy::Random, 3, 12, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn serialized_as_pair_list() {
        let m = select_layers(Strategy::Random, 3, 12, Some(7)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"pairs\":[["), "{json}");
        let back: LayerMapping = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"pairs":[[2,1],[1,3]],"strategy":"forward","random_seed":null}"#;
        assert!(serde_json::from_str::<LayerMapping>(bad).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("sideways".parse::<Strategy>().is_err());
    }
}
