use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How subjects are assigned to test sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitKind {
    /// Partition the subjects into `folds` groups, `repetitions` times with fresh shuffles.
    KfoldSubjects { repetitions: usize },
    /// `folds` repetitions, each testing on `test_size` randomly drawn subjects. With
    /// `disjoint` the draws come from one shuffled pool so no subject is tested twice.
    RandomSubjects { test_size: usize, disjoint: bool },
    /// Every subject is the test set exactly once.
    Loso,
}

impl FromStr for SplitKind {
    type Err = Error;

    /// Accepts `kfold`, `kfold:<reps>`, `random:<test_size>`, `random-disjoint:<test_size>`, `loso`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>, default: Option<usize>| -> Result<usize> {
            match a {
                Some(a) => a
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad split argument {a:?}"))),
                None => default
                    .ok_or_else(|| Error::InvalidArgument(format!("split kind {s:?} needs an argument"))),
            }
        };
        match head.trim() {
            "kfold" | "kfold_subjects" => Ok(SplitKind::KfoldSubjects {
                repetitions: num(arg, Some(1))?,
            }),
            "random" => Ok(SplitKind::RandomSubjects {
                test_size: num(arg, None)?,
                disjoint: false,
            }),
            "random-disjoint" => Ok(SplitKind::RandomSubjects {
                test_size: num(arg, None)?,
                disjoint: true,
            }),
            "loso" => Ok(SplitKind::Loso),
            other => Err(Error::InvalidArgument(format!("unknown split kind {other:?}"))),
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitKind::KfoldSubjects { repetitions } => write!(f, "kfold:{repetitions}"),
            SplitKind::RandomSubjects {
                test_size,
                disjoint: false,
            } => write!(f, "random:{test_size}"),
            SplitKind::RandomSubjects {
                test_size,
                disjoint: true,
            } => write!(f, "random-disjoint:{test_size}"),
            SplitKind::Loso => write!(f, "loso"),
        }
    }
}

/// Extra knobs; kept separate so the common call stays short.
#[derive(Clone, Debug, Default)]
pub struct SplitOptions {
    /// Subjects removed before planning (e.g. recordings with technical problems).
    pub exclude: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub repetition: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Builds a deterministic subject-level split plan.
///
/// `folds_or_reps` is the fold count for `KfoldSubjects` and `Loso` (where it must equal
/// the subject count, or be 0 to mean "one per subject") and the repetition count for
/// `RandomSubjects`.
pub fn make_split_plan(
    subjects: &[String],
    kind: SplitKind,
    folds_or_reps: usize,
    seed: u64,
) -> Result<SplitPlan> {
    make_split_plan_with(subjects, kind, folds_or_reps, seed, &SplitOptions::default())
}

pub fn make_split_plan_with(
    subjects: &[String],
    kind: SplitKind,
    folds_or_reps: usize,
    seed: u64,
    opts: &SplitOptions,
) -> Result<SplitPlan> {
    let excluded: BTreeSet<&str> = opts.exclude.iter().map(String::as_str).collect();
    let pool: Vec<String> = subjects
        .iter()
        .filter(|s| !excluded.contains(s.as_str()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let s = pool.len();
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 subjects are required, got {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complement = |test: &[String]| -> Vec<String> {
        let t: BTreeSet<&String> = test.iter().collect();
        pool.iter().filter(|x| !t.contains(x)).cloned().collect()
    };
    let mut folds = Vec::new();
    match kind {
        SplitKind::Loso => {
            if folds_or_reps != 0 && folds_or_reps != s {
                return Err(Error::InvalidArgument(format!(
                    "loso needs folds = subject count ({s}), got {folds_or_reps}"
                )));
            }
            for (i, subj) in pool.iter().enumerate() {
                let test = vec![subj.clone()];
                folds.push(Fold {
                    index: i,
                    repetition: 0,
                    train: complement(&test),
                    test,
                });
            }
        }
        SplitKind::KfoldSubjects { repetitions } => {
            let k = folds_or_reps;
            if k < 2 || k > s {
                return Err(Error::InvalidArgument(format!(
                    "kfold needs 2 <= folds <= subjects ({s}), got {k}"
                )));
            }
            if repetitions == 0 {
                return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
            }
            for rep in 0..repetitions {
                let mut order = pool.clone();
                order.shuffle(&mut rng);
                // first (s % k) folds take one extra subject
                let base = s / k;
                let extra = s % k;
                let mut start = 0;
                for f in 0..k {
                    let len = base + usize::from(f < extra);
                    let mut test = order[start..start + len].to_vec();
                    test.sort();
                    start += len;
                    folds.push(Fold {
                        index: folds.len(),
                        repetition: rep,
                        train: complement(&test),
                        test,
                    });
                }
            }
        }
        SplitKind::RandomSubjects {
            test_size,
            disjoint,
        } => {
            let reps = folds_or_reps;
            if reps == 0 {
                return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
            }
            if test_size == 0 || test_size >= s {
                return Err(Error::InvalidArgument(format!(
                    "test size must lie in [1, {}), got {test_size}",
                    s
                )));
            }
            if disjoint && reps * test_size > s {
                return Err(Error::InvalidArgument(format!(
                    "{reps} disjoint draws of {test_size} need {} subjects, have {s}",
                    reps * test_size
                )));
            }
            let mut shared = pool.clone();
            shared.shuffle(&mut rng);
            for rep in 0..reps {
                let mut test = if disjoint {
                    shared[rep * test_size..(rep + 1) * test_size].to_vec()
                } else {
                    let mut order = pool.clone();
                    order.shuffle(&mut rng);
                    order.truncate(test_size);
                    order
                };
                test.sort();
                folds.push(Fold {
                    index: rep,
                    repetition: rep,
                    train: complement(&test),
                    test,
                });
            }
        }
    }
    Ok(SplitPlan { kind, folds, seed })
}

impl SplitPlan {
    pub fn subjects(&self) -> BTreeSet<String> {
        self.folds
            .iter()
            .flat_map(|f| f.train.iter().chain(f.test.iter()).cloned())
            .collect()
    }

    /// Plain-text manifest: a header comment, then `index<TAB>train<TAB>test` per fold with
    /// comma-separated subject lists.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("# kind={} seed={}\n", self.kind, self.seed);
        for f in &self.folds {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                f.index,
                f.train.join(","),
                f.test.join(",")
            ));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<SplitPlan> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty split manifest".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::InvalidArgument("split manifest header missing".into()))?;
        let mut kind = None;
        let mut seed = None;
        for part in header.split_whitespace() {
            match part.split_once('=') {
                Some(("kind", v)) => kind = Some(v.parse::<SplitKind>()?),
                Some(("seed", v)) => {
                    seed = Some(v.parse::<u64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad seed {v:?} in split manifest"))
                    })?)
                }
                _ => return Err(Error::InvalidArgument(format!("bad header token {part:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::InvalidArgument("manifest lacks kind".into()))?;
        let seed = seed.ok_or_else(|| Error::InvalidArgument("manifest lacks seed".into()))?;
        let split_list = |s: &str| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            }
        };
        let mut folds = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidArgument(format!("bad manifest line {line:?}")));
            }
            let index = cols[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad fold index {:?}", cols[0])))?;
            folds.push(Fold {
                index,
                repetition: 0,
                train: split_list(cols[1]),
                test: split_list(cols[2]),
            });
        }
        // repetitions are implied by fold order for kfold plans
        if let SplitKind::KfoldSubjects { repetitions } = kind {
            if repetitions > 0 && folds.len() % repetitions == 0 {
                let per = folds.len() / repetitions;
                for f in &mut folds {
                    f.repetition = f.index / per.max(1);
                }
            }
        } else if let SplitKind::RandomSubjects { .. } = kind {
            for f in &mut folds {
                f.repetition = f.index;
            }
        }
        Ok(SplitPlan { kind, folds, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("S{i:03}")).collect()
    }

    fn assert_disjoint(plan: &SplitPlan) {
        for f in &plan.folds {
            let train: BTreeSet<_> = f.train.iter().collect();
            assert!(f.test.iter().all(|t| !train.contains(t)), "fold {}", f.index);
            assert_eq!(f.train.len() + f.test.len(), plan.subjects().len());
        }
    }

    #[test]
    fn loso_nine_subjects() {
        let plan = make_split_plan(&subjects(9), SplitKind::Loso, 9, 0).unwrap();
        assert_eq!(plan.folds.len(), 9);
        assert!(plan.folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 8));
        let tested: BTreeSet<_> = plan.folds.iter().map(|f| f.test[0].clone()).collect();
        assert_eq!(tested.len(), 9);
        assert_disjoint(&plan);
    }

    #[test]
    fn loso_rejects_wrong_fold_count() {
        assert!(make_split_plan(&subjects(9), SplitKind::Loso, 5, 0).is_err());
    }

    #[test]
    fn two_subject_kfold() {
        let kind = SplitKind::KfoldSubjects { repetitions: 1 };
        let plan = make_split_plan(&subjects(2), kind, 2, 3).unwrap();
        assert_eq!(plan.folds.len(), 2);
        let mut tested: Vec<_> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort();
        assert_eq!(tested, subjects(2));
        assert_disjoint(&plan);
    }

    #[test]
    fn too_few_subjects() {
        assert!(make_split_plan(&subjects(1), SplitKind::Loso, 0, 0).is_err());
    }

    #[test]
    fn unknown_kind_string() {
        assert!("bootstrap".parse::<SplitKind>().is_err());
        assert_eq!("loso".parse::<SplitKind>().unwrap(), SplitKind::Loso);
    }

    #[test]
    fn exclusion_list_applies() {
        let opts = SplitOptions {
            exclude: vec!["S001".into()],
        };
        let plan = make_split_plan_with(&subjects(4), SplitKind::Loso, 0, 0, &opts).unwrap();
        assert_eq!(plan.folds.len(), 3);
        assert!(!plan.subjects().contains("S001"));
    }

    #[test]
    fn manifest_round_trip() {
        let kind = SplitKind::KfoldSubjects { repetitions: 2 };
        let plan = make_split_plan(&subjects(7), kind, 3, 11).unwrap();
        let back = SplitPlan::from_manifest(&plan.to_manifest()).unwrap();
        assert_eq!(back, plan);
    }
}
