//! The eight transformations, path replay and certificate checking.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::expr::{Expr, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transformation {
    Commute = 0,
    AssocToRight = 1,
    AssocToLeft = 2,
    Distribute = 3,
    Factor = 4,
    FocusUp = 5,
    FocusLeft = 6,
    FocusRight = 7,
}

pub const TRANSFORMATION_COUNT: usize = 8;

impl Transformation {
    /// Canonical order; the index doubles as the classifier label.
    pub const ALL: [Transformation; TRANSFORMATION_COUNT] = [
        Transformation::Commute,
        Transformation::AssocToRight,
        Transformation::AssocToLeft,
        Transformation::Distribute,
        Transformation::Factor,
        Transformation::FocusUp,
        Transformation::FocusLeft,
        Transformation::FocusRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Transformation> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Transformation::Commute => "commute",
            Transformation::AssocToRight => "assoc_right",
            Transformation::AssocToLeft => "assoc_left",
            Transformation::Distribute => "distribute",
            Transformation::Factor => "factor",
            Transformation::FocusUp => "focus_up",
            Transformation::FocusLeft => "focus_left",
            Transformation::FocusRight => "focus_right",
        }
    }

    pub fn is_navigation(self) -> bool {
        matches!(
            self,
            Transformation::FocusUp | Transformation::FocusLeft | Transformation::FocusRight
        )
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

impl fmt::Display for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown transformation `{0}`")]
pub struct UnknownTransformation(pub String);

impl FromStr for Transformation {
    type Err = UnknownTransformation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transformation::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| UnknownTransformation(s.to_string()))
    }
}

/// A set of transformations stored as a bit mask over canonical indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TransformationSet(pub u8);

impl TransformationSet {
    pub fn insert(&mut self, t: Transformation) {
        self.0 |= t.bit();
    }

    pub fn contains(self, t: Transformation) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Transformation> {
        Transformation::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl FromIterator<Transformation> for TransformationSet {
    fn from_iter<I: IntoIterator<Item = Transformation>>(iter: I) -> Self {
        let mut s = TransformationSet::default();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

/// Applies `t` at the focus, or returns `None` when its pattern does not match.
pub fn apply(e: &Expr, t: Transformation) -> Option<Expr> {
    match t {
        Transformation::FocusUp => focus_up(e),
        _ => at_focus(e, &|inner| rewrite_focused(inner, t)),
    }
}

// Rebuilds `e` with the focus node replaced by `f(child of focus)`.
fn at_focus(e: &Expr, f: &dyn Fn(&Expr) -> Option<Expr>) -> Option<Expr> {
    match e {
        Expr::Var(_) => None,
        Expr::Focus(inner) => f(inner),
        Expr::Add(l, r) | Expr::Mul(l, r) => {
            let op = e.as_binary().unwrap().0;
            if let Some(nl) = at_focus(l, f) {
                Some(Expr::binary(op, nl, (**r).clone()))
            } else {
                at_focus(r, f).map(|nr| Expr::binary(op, (**l).clone(), nr))
            }
        }
    }
}

fn rewrite_focused(inner: &Expr, t: Transformation) -> Option<Expr> {
    let (op, l, r) = inner.as_binary()?;
    let out = match t {
        Transformation::Commute => Expr::binary(op, r.clone(), l.clone()),
        Transformation::AssocToRight => {
            let (lop, e1, e2) = l.as_binary()?;
            if lop != op {
                return None;
            }
            Expr::binary(op, e1.clone(), Expr::binary(op, e2.clone(), r.clone()))
        }
        Transformation::AssocToLeft => {
            let (rop, e2, e3) = r.as_binary()?;
            if rop != op {
                return None;
            }
            Expr::binary(op, Expr::binary(op, l.clone(), e2.clone()), e3.clone())
        }
        Transformation::Distribute => {
            if op != Op::Mul {
                return None;
            }
            let (Op::Add, e2, e3) = r.as_binary()? else {
                return None;
            };
            Expr::add(
                Expr::mul(l.clone(), e2.clone()),
                Expr::mul(l.clone(), e3.clone()),
            )
        }
        Transformation::Factor => {
            if op != Op::Add {
                return None;
            }
            let (Op::Mul, e1, e2) = l.as_binary()? else {
                return None;
            };
            let (Op::Mul, e1b, e3) = r.as_binary()? else {
                return None;
            };
            if e1 != e1b {
                return None;
            }
            Expr::mul(e1.clone(), Expr::add(e2.clone(), e3.clone()))
        }
        Transformation::FocusLeft => {
            return Some(Expr::binary(op, Expr::focus(l.clone()), r.clone()));
        }
        Transformation::FocusRight => {
            return Some(Expr::binary(op, l.clone(), Expr::focus(r.clone())));
        }
        Transformation::FocusUp => unreachable!("handled by focus_up"),
    };
    Some(Expr::focus(out))
}

fn focus_up(e: &Expr) -> Option<Expr> {
    let (op, l, r) = e.as_binary()?;
    match (l, r) {
        (Expr::Focus(x), _) => Some(Expr::focus(Expr::binary(op, (**x).clone(), r.clone()))),
        (_, Expr::Focus(x)) => Some(Expr::focus(Expr::binary(op, l.clone(), (**x).clone()))),
        _ => {
            if let Some(nl) = focus_up(l) {
                Some(Expr::binary(op, nl, r.clone()))
            } else {
                focus_up(r).map(|nr| Expr::binary(op, l.clone(), nr))
            }
        }
    }
}

/// All applicable transformations with their results, in canonical order.
pub fn neighbors(e: &Expr) -> Vec<(Transformation, Expr)> {
    Transformation::ALL
        .iter()
        .filter_map(|&t| apply(e, t).map(|n| (t, n)))
        .collect()
}

/// The transformation undoing `t` when applied to `apply(e, t)`.
///
/// `FocusUp` has two inverses; which one depends on where the focus came from.
pub fn inverse(e: &Expr, t: Transformation) -> Option<Transformation> {
    use Transformation::*;
    Some(match t {
        Commute => Commute,
        AssocToRight => AssocToLeft,
        AssocToLeft => AssocToRight,
        Distribute => Factor,
        Factor => Distribute,
        FocusLeft | FocusRight => FocusUp,
        FocusUp => {
            if focus_is_left_child(e)? {
                FocusLeft
            } else {
                FocusRight
            }
        }
    })
}

// Whether the focus sits in the left slot of its parent; None at the root.
fn focus_is_left_child(e: &Expr) -> Option<bool> {
    let (_, l, r) = e.as_binary()?;
    match (l, r) {
        (Expr::Focus(_), _) => Some(true),
        (_, Expr::Focus(_)) => Some(false),
        _ => focus_is_left_child(l).or_else(|| focus_is_left_child(r)),
    }
}

/// An ordered sequence of transformations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct RewritePath(pub Vec<Transformation>);

impl RewritePath {
    pub fn new(steps: Vec<Transformation>) -> Self {
        RewritePath(steps)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn steps(&self) -> &[Transformation] {
        &self.0
    }

    /// One transformation name per line, each line newline-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.0 {
            s.push_str(t.name());
            s.push('\n');
        }
        s
    }

    /// Inverse of [`RewritePath::to_text`]; blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Self, UnknownTransformation> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()
            .map(RewritePath)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {index} ({step}) is not applicable")]
pub struct StepFailed {
    pub index: usize,
    pub step: Transformation,
}

pub fn apply_path(e: &Expr, path: &RewritePath) -> Result<Expr, StepFailed> {
    let mut cur = e.clone();
    for (index, &step) in path.0.iter().enumerate() {
        cur = apply(&cur, step).ok_or(StepFailed { index, step })?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid(InvalidReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidReason {
    /// The path replays but ends on a different expression.
    Mismatch { reached: Expr },
    StepFailed(StepFailed),
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Valid => write!(f, "Valid"),
            Verdict::Invalid(InvalidReason::Mismatch { reached }) => {
                write!(f, "Invalid(mismatch: path ends at {reached})")
            }
            Verdict::Invalid(InvalidReason::StepFailed(s)) => {
                write!(f, "Invalid(StepFailed({}): {} not applicable)", s.index, s.step)
            }
        }
    }
}

/// Replays `path` from `source` and compares the result with `target`.
pub fn check_certificate(source: &Expr, target: &Expr, path: &RewritePath) -> Verdict {
    match apply_path(source, path) {
        Ok(reached) if &reached == target => Verdict::Valid,
        Ok(reached) => Verdict::Invalid(InvalidReason::Mismatch { reached }),
        Err(e) => Verdict::Invalid(InvalidReason::StepFailed(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use Transformation::*;

    fn p(s: &str) -> Expr {
        parse(s).unwrap()
    }

    fn applied(s: &str, t: Transformation) -> Option<String> {
        apply(&p(s), t).map(|e| e.to_string())
    }

    #[test]
    fn rule_instances() {
        assert_eq!(applied("(F (+ a b))", Commute).as_deref(), Some("(F (+ b a))"));
        assert_eq!(
            applied("(F (+ (* a b) (* a c)))", Factor).as_deref(),
            Some("(F (* a (+ b c)))")
        );
        assert_eq!(applied("(F (+ (* a b) (* b c)))", Factor), None);
        assert_eq!(applied("(* (F a) b)", FocusUp).as_deref(), Some("(F (* a b))"));
        assert_eq!(applied("(* a (F b))", FocusUp).as_deref(), Some("(F (* a b))"));
        assert_eq!(applied("(F a)", Commute), None);
        assert_eq!(
            applied("(F (* a (+ b c)))", Distribute).as_deref(),
            Some("(F (+ (* a b) (* a c)))")
        );
        assert_eq!(
            applied("(F (+ (+ a b) c))", AssocToRight).as_deref(),
            Some("(F (+ a (+ b c)))")
        );
        assert_eq!(
            applied("(F (* a (* b c)))", AssocToLeft).as_deref(),
            Some("(F (* (* a b) c))")
        );
        assert_eq!(applied("(F (* a b))", FocusLeft).as_deref(), Some("(* (F a) b)"));
        assert_eq!(applied("(F (* a b))", FocusRight).as_deref(), Some("(* a (F b))"));
    }

    #[test]
    fn rules_fire_only_at_the_focus() {
        assert_eq!(
            applied("(+ c (F (+ a b)))", Commute).as_deref(),
            Some("(+ c (F (+ b a)))")
        );
        assert_eq!(applied("(F (+ c (+ a b)))", Factor), None);
        assert_eq!(
            applied("(* (+ (F a) b) c)", FocusUp).as_deref(),
            Some("(* (F (+ a b)) c)")
        );
    }

    #[test]
    fn associativity_needs_matching_operators() {
        assert_eq!(applied("(F (+ (* a b) c))", AssocToRight), None);
        assert_eq!(applied("(F (* a (+ b c)))", AssocToLeft), None);
    }

    #[test]
    fn only_left_distribution() {
        assert_eq!(applied("(F (* (+ a b) c))", Distribute), None);
        assert_eq!(applied("(F (+ (* b a) (* c a)))", Factor), None);
    }

    #[test]
    fn neighbor_enumeration() {
        assert!(neighbors(&p("(F a)")).is_empty());
        let ns = neighbors(&p("(F (+ a b))"));
        let kinds: Vec<_> = ns.iter().map(|(t, _)| *t).collect();
        assert_eq!(kinds, vec![Commute, FocusLeft, FocusRight]);
        for (t, n) in &ns {
            assert_eq!(apply(&p("(F (+ a b))"), *t).as_ref(), Some(n));
        }
        assert_eq!(
            neighbors(&p("(* (F a) b)")).into_iter().map(|(t, _)| t).collect::<Vec<_>>(),
            vec![FocusUp]
        );
    }

    #[test]
    fn paths_and_certificates() {
        let e = p("(F (+ a b))");
        assert_eq!(apply_path(&e, &RewritePath::default()).unwrap(), e);
        assert_eq!(apply_path(&e, &RewritePath::new(vec![Commute, Commute])).unwrap(), e);

        let target = p("(F (+ b a))");
        assert_eq!(check_certificate(&e, &target, &RewritePath::new(vec![Commute])), Verdict::Valid);
        assert!(matches!(
            check_certificate(&e, &target, &RewritePath::default()),
            Verdict::Invalid(InvalidReason::Mismatch { .. })
        ));
        let v = check_certificate(&e, &target, &RewritePath::new(vec![FocusLeft, Commute, FocusUp]));
        assert_eq!(
            v,
            Verdict::Invalid(InvalidReason::StepFailed(StepFailed { index: 1, step: Commute }))
        );
        assert_eq!(v.to_string(), "Invalid(StepFailed(1): commute not applicable)");
    }

    #[test]
    fn path_text_format() {
        let path = RewritePath::new(Transformation::ALL.to_vec());
        let text = path.to_text();
        assert_eq!(
            text,
            "commute\nassoc_right\nassoc_left\ndistribute\nfactor\nfocus_up\nfocus_left\nfocus_right\n"
        );
        assert_eq!(RewritePath::from_text(&text).unwrap(), path);
        assert_eq!(RewritePath::from_text("").unwrap(), RewritePath::default());
        assert!(RewritePath::from_text("commute\nswap\n").is_err());
    }

    #[test]
    fn focus_up_inverse_depends_on_side() {
        let left = p("(* (F a) b)");
        let right = p("(* a (F b))");
        assert_eq!(inverse(&left, FocusUp), Some(FocusLeft));
        assert_eq!(inverse(&right, FocusUp), Some(FocusRight));
        assert_eq!(inverse(&p("(F a)"), FocusUp), None);
    }

    #[test]
    fn transformation_set_ops() {
        let s: TransformationSet = [Factor, Commute].into_iter().collect();
        assert_eq!(s.len(), 2);
        assert!(s.contains(Factor) && !s.contains(FocusUp));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![Commute, Factor]);
    }
}
