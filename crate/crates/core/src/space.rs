//! Attribute/object vocabularies and the seen/unseen composition splits.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// An attribute-object composition, by vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Pair { attr, obj }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.attr, self.obj)
    }
}

/// Which candidate compositions are scored at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// Seen test pairs plus the known unseen test pairs.
    ClosedWorld,
    /// Every attribute-object pair.
    OpenWorld,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ClosedWorld => "cw",
            Setting::OpenWorld => "ow",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cw" | "closed" | "closed-world" => Ok(Setting::ClosedWorld),
            "ow" | "open" | "open-world" => Ok(Setting::OpenWorld),
            other => Err(Error::Config(format!("unknown setting {other:?}, expected cw or ow"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionSpace {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub train_seen: BTreeSet<Pair>,
    pub val_seen: BTreeSet<Pair>,
    pub val_unseen: BTreeSet<Pair>,
    pub test_seen: BTreeSet<Pair>,
    pub test_unseen: BTreeSet<Pair>,
}

impl CompositionSpace {
    /// Builds and validates a space. Every split is checked against the
    /// vocabulary sizes and seen/unseen sets must be disjoint.
    pub fn new(
        attributes: Vec<String>,
        objects: Vec<String>,
        train_seen: BTreeSet<Pair>,
        val_seen: BTreeSet<Pair>,
        val_unseen: BTreeSet<Pair>,
        test_seen: BTreeSet<Pair>,
        test_unseen: BTreeSet<Pair>,
    ) -> Result<Self> {
        let space = CompositionSpace {
            attributes,
            objects,
            train_seen,
            val_seen,
            val_unseen,
            test_seen,
            test_unseen,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn num_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() || self.objects.is_empty() {
            return Err(Error::Data("attribute and object lists must be nonempty".into()));
        }
        check_unique("attribute", &self.attributes)?;
        check_unique("object", &self.objects)?;
        let (m, n) = (self.num_attrs(), self.num_objs());
        for (name, set) in self.splits() {
            if let Some(p) = set.iter().find(|p| p.attr >= m || p.obj >= n) {
                return Err(Error::Data(format!(
                    "pair {} in {name} is outside the {m}x{n} vocabulary",
                    self.pair_name(*p)
                )));
            }
        }
        let checks = [
            ("train_seen", &self.train_seen, "val_unseen", &self.val_unseen),
            ("train_seen", &self.train_seen, "test_unseen", &self.test_unseen),
            ("val_seen", &self.val_seen, "val_unseen", &self.val_unseen),
            ("test_seen", &self.test_seen, "test_unseen", &self.test_unseen),
        ];
        for (a_name, a, b_name, b) in checks {
            if let Some(p) = a.intersection(b).next() {
                return Err(Error::Data(format!(
                    "pair {} appears in both {a_name} and {b_name}",
                    self.pair_name(*p)
                )));
            }
        }
        Ok(())
    }

    fn splits(&self) -> [(&'static str, &BTreeSet<Pair>); 5] {
        [
            ("train_seen", &self.train_seen),
            ("val_seen", &self.val_seen),
            ("val_unseen", &self.val_unseen),
            ("test_seen", &self.test_seen),
            ("test_unseen", &self.test_unseen),
        ]
    }

    pub fn pair_name(&self, p: Pair) -> String {
        let a = self.attributes.get(p.attr).map_or("?", String::as_str);
        let o = self.objects.get(p.obj).map_or("?", String::as_str);
        format!("{a},{o}")
    }

    /// A composition counts as seen when it labels training images.
    pub fn is_seen(&self, p: Pair) -> bool {
        self.train_seen.contains(&p)
    }

    /// All `M x N` pairs, attribute-major.
    pub fn open_world(&self) -> Vec<Pair> {
        (0..self.num_attrs())
            .flat_map(|a| (0..self.num_objs()).map(move |o| Pair::new(a, o)))
            .collect()
    }

    /// Test seen pairs plus test unseen pairs, attribute-major.
    pub fn closed_world(&self) -> Vec<Pair> {
        self.test_seen.union(&self.test_unseen).copied().collect()
    }

    pub fn candidates(&self, setting: Setting) -> Vec<Pair> {
        match setting {
            Setting::ClosedWorld => self.closed_world(),
            Setting::OpenWorld => self.open_world(),
        }
    }

    /// Training-time composition candidates: the seen pairs, or the full
    /// product when `full_product` is set.
    pub fn train_candidates(&self, full_product: bool) -> Vec<Pair> {
        if full_product {
            self.open_world()
        } else {
            self.train_seen.iter().copied().collect()
        }
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Data(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn set(pairs: &[(usize, usize)]) -> BTreeSet<Pair> {
        pairs.iter().map(|&(a, o)| Pair::new(a, o)).collect()
    }

    fn toy() -> CompositionSpace {
        CompositionSpace::new(
            names("a", 2),
            names("o", 3),
            set(&[(0, 0), (1, 1), (0, 2)]),
            set(&[(0, 0)]),
            set(&[(1, 0)]),
            set(&[(1, 1), (0, 2)]),
            set(&[(1, 2)]),
        )
        .unwrap()
    }

    #[test]
    fn closed_world_is_subset_of_open_world() {
        let s = toy();
        let ow = s.open_world();
        assert_eq!(ow.len(), 6);
        let cw = s.closed_world();
        assert_eq!(cw, vec![Pair::new(0, 2), Pair::new(1, 1), Pair::new(1, 2)]);
        assert!(cw.iter().all(|p| ow.contains(p)));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let err = CompositionSpace::new(
            names("a", 2),
            names("o", 2),
            set(&[(0, 0)]),
            set(&[]),
            set(&[]),
            set(&[(0, 0)]),
            set(&[(0, 0)]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("a0,o0"), "{err}");
    }

    #[test]
    fn out_of_range_pair_is_rejected() {
        let err = CompositionSpace::new(
            names("a", 1),
            names("o", 1),
            set(&[(0, 1)]),
            set(&[]),
            set(&[]),
            set(&[]),
            set(&[]),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = CompositionSpace::new(
            vec!["x".into(), "x".into()],
            names("o", 1),
            set(&[]),
            set(&[]),
            set(&[]),
            set(&[]),
            set(&[]),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn setting_parses() {
        assert_eq!("CW".parse::<Setting>().unwrap(), Setting::ClosedWorld);
        assert_eq!("ow".parse::<Setting>().unwrap(), Setting::OpenWorld);
        assert!("both".parse::<Setting>().is_err());
    }
}
