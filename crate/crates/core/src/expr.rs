//! Focused arithmetic expressions.
//!
//! An expression is a binary tree over `+`, `*` and the variables `a`, `b`,
//! `c`, carrying exactly one focus marker `F`. Rewrites only ever fire at the
//! focus, and navigation moves it around.
//!
//! The text form is a prefix s-expression:
//!
//! ```text
//! expr := 'a' | 'b' | 'c' | '(' ('+' | '*') expr expr ')' | '(' 'F' expr ')'
//! ```

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at token {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("expected exactly one focus marker, found {0}")]
    FocusCount(usize),
    #[error("infeasible height range {lo}..={hi}: a focused expression has height at least 1")]
    InfeasibleRange { lo: usize, hi: usize },
    #[error("malformed post-order sequence: {0}")]
    PostOrder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    A,
    B,
    C,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::A, Var::B, Var::C];

    pub fn name(self) -> char {
        match self {
            Var::A => 'a',
            Var::B => 'b',
            Var::C => 'c',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Binary operator of an expression node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Mul,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Focus(Box<Expr>),
}

/// Node labels with their fixed one-hot slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Add = 0,
    Mul = 1,
    Focus = 2,
    A = 3,
    B = 4,
    C = 5,
}

/// Width of the one-hot node encoding.
pub const SYMBOL_COUNT: usize = 6;

impl Symbol {
    pub const ALL: [Symbol; SYMBOL_COUNT] = [
        Symbol::Add,
        Symbol::Mul,
        Symbol::Focus,
        Symbol::A,
        Symbol::B,
        Symbol::C,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Symbol> {
        Symbol::ALL.get(index).copied()
    }

    pub fn arity(self) -> usize {
        match self {
            Symbol::Add | Symbol::Mul => 2,
            Symbol::Focus => 1,
            Symbol::A | Symbol::B | Symbol::C => 0,
        }
    }

    pub fn one_hot(self) -> [f64; SYMBOL_COUNT] {
        let mut v = [0.0; SYMBOL_COUNT];
        v[self.index()] = 1.0;
        v
    }

    fn of_var(v: Var) -> Symbol {
        match v {
            Var::A => Symbol::A,
            Var::B => Symbol::B,
            Var::C => Symbol::C,
        }
    }
}

impl Expr {
    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(l: Expr, r: Expr) -> Expr {
        Expr::Add(Box::new(l), Box::new(r))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(l: Expr, r: Expr) -> Expr {
        Expr::Mul(Box::new(l), Box::new(r))
    }

    pub fn focus(e: Expr) -> Expr {
        Expr::Focus(Box::new(e))
    }

    pub fn binary(op: Op, l: Expr, r: Expr) -> Expr {
        match op {
            Op::Add => Expr::add(l, r),
            Op::Mul => Expr::mul(l, r),
        }
    }

    /// Splits a binary node into its operator and operands.
    pub fn as_binary(&self) -> Option<(Op, &Expr, &Expr)> {
        match self {
            Expr::Add(l, r) => Some((Op::Add, l, r)),
            Expr::Mul(l, r) => Some((Op::Mul, l, r)),
            _ => None,
        }
    }

    pub fn symbol(&self) -> Symbol {
        match self {
            Expr::Var(v) => Symbol::of_var(*v),
            Expr::Add(..) => Symbol::Add,
            Expr::Mul(..) => Symbol::Mul,
            Expr::Focus(_) => Symbol::Focus,
        }
    }

    /// Number of nodes, focus marker included.
    pub fn length(&self) -> usize {
        match self {
            Expr::Var(_) => 1,
            Expr::Focus(e) => 1 + e.length(),
            Expr::Add(l, r) | Expr::Mul(l, r) => 1 + l.length() + r.length(),
        }
    }

    /// Longest root-to-leaf path, counted in edges.
    pub fn height(&self) -> usize {
        match self {
            Expr::Var(_) => 0,
            Expr::Focus(e) => 1 + e.height(),
            Expr::Add(l, r) | Expr::Mul(l, r) => 1 + l.height().max(r.height()),
        }
    }

    pub fn focus_count(&self) -> usize {
        match self {
            Expr::Var(_) => 0,
            Expr::Focus(e) => 1 + e.focus_count(),
            Expr::Add(l, r) | Expr::Mul(l, r) => l.focus_count() + r.focus_count(),
        }
    }

    /// True when the tree carries exactly one focus marker.
    pub fn is_well_formed(&self) -> bool {
        self.focus_count() == 1
    }

    /// The same tree with the focus marker erased.
    pub fn defocused(&self) -> Expr {
        match self {
            Expr::Var(v) => Expr::Var(*v),
            Expr::Focus(e) => e.defocused(),
            Expr::Add(l, r) => Expr::add(l.defocused(), r.defocused()),
            Expr::Mul(l, r) => Expr::mul(l.defocused(), r.defocused()),
        }
    }

    /// Value in the ring of integers modulo `modulus`, with the focus marker
    /// acting as the identity.
    pub fn evaluate(&self, assignment: &Assignment, modulus: u64) -> u64 {
        match self {
            Expr::Var(v) => assignment.get(*v) % modulus,
            Expr::Focus(e) => e.evaluate(assignment, modulus),
            Expr::Add(l, r) => {
                let s = l.evaluate(assignment, modulus) as u128
                    + r.evaluate(assignment, modulus) as u128;
                (s % modulus as u128) as u64
            }
            Expr::Mul(l, r) => {
                let p = l.evaluate(assignment, modulus) as u128
                    * r.evaluate(assignment, modulus) as u128;
                (p % modulus as u128) as u64
            }
        }
    }

    /// Moves the focus to the node with the given pre-order index, counted
    /// over the focus-free tree. Returns `None` if the index is out of range.
    pub fn refocused(&self, index: usize) -> Option<Expr> {
        fn go(e: &Expr, k: &mut usize) -> Option<Expr> {
            if *k == 0 {
                return Some(Expr::focus(e.clone()));
            }
            *k -= 1;
            let (op, l, r) = e.as_binary()?;
            if let Some(nl) = go(l, k) {
                return Some(Expr::binary(op, nl, r.clone()));
            }
            go(r, k).map(|nr| Expr::binary(op, l.clone(), nr))
        }
        let mut k = index;
        go(&self.defocused(), &mut k)
    }

    pub fn encode_postorder(&self) -> PostOrderSeq {
        let mut seq = PostOrderSeq::with_capacity(self.length());
        self.push_postorder(&mut seq);
        seq
    }

    fn push_postorder(&self, seq: &mut PostOrderSeq) {
        match self {
            Expr::Var(_) => {}
            Expr::Focus(e) => e.push_postorder(seq),
            Expr::Add(l, r) | Expr::Mul(l, r) => {
                l.push_postorder(seq);
                r.push_postorder(seq);
            }
        }
        let sym = self.symbol();
        seq.values.push(sym);
        seq.arities.push(sym.arity() as u8);
    }
}

/// Values of `a`, `b` and `c` for modular evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment(pub [u64; 3]);

impl Assignment {
    pub fn get(&self, v: Var) -> u64 {
        self.0[v.index()]
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, modulus: u64) -> Assignment {
        Assignment([
            rng.gen_range(0..modulus),
            rng.gen_range(0..modulus),
            rng.gen_range(0..modulus),
        ])
    }
}

/// The Mersenne prime 2^61 - 1.
pub const DEFAULT_MODULUS: u64 = (1 << 61) - 1;

/// Post-order node values and arities of a tree.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PostOrderSeq {
    pub values: Vec<Symbol>,
    pub arities: Vec<u8>,
}

impl PostOrderSeq {
    pub fn with_capacity(n: usize) -> Self {
        PostOrderSeq {
            values: Vec::with_capacity(n),
            arities: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rebuilds the tree with an operand stack.
    pub fn decode(&self) -> Result<Expr, ExprError> {
        if self.values.len() != self.arities.len() {
            return Err(ExprError::PostOrder("values and arities differ in length".into()));
        }
        let mut stack: Vec<Expr> = Vec::new();
        for (i, (&sym, &arity)) in self.values.iter().zip(&self.arities).enumerate() {
            if sym.arity() != arity as usize {
                return Err(ExprError::PostOrder(format!(
                    "step {i}: arity {arity} does not match symbol {sym:?}"
                )));
            }
            if stack.len() < arity as usize {
                return Err(ExprError::PostOrder(format!("step {i}: operand stack underflow")));
            }
            let node = match sym {
                Symbol::A => Expr::Var(Var::A),
                Symbol::B => Expr::Var(Var::B),
                Symbol::C => Expr::Var(Var::C),
                Symbol::Focus => Expr::focus(stack.pop().unwrap()),
                Symbol::Add | Symbol::Mul => {
                    let r = stack.pop().unwrap();
                    let l = stack.pop().unwrap();
                    if sym == Symbol::Add {
                        Expr::add(l, r)
                    } else {
                        Expr::mul(l, r)
                    }
                }
            };
            stack.push(node);
        }
        match stack.len() {
            1 => Ok(stack.pop().unwrap()),
            n => Err(ExprError::PostOrder(format!("{n} trees left on the stack"))),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Focus(e) => write!(f, "(F {e})"),
            Expr::Add(l, r) => write!(f, "(+ {l} {r})"),
            Expr::Mul(l, r) => write!(f, "(* {l} {r})"),
        }
    }
}

impl FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

/// Parses the s-expression form and checks the single-focus invariant.
pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let tokens = tokenize(text);
    let mut parser = Parser { tokens, pos: 0 };
    let e = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(parser.error("trailing input"));
    }
    match e.focus_count() {
        1 => Ok(e),
        n => Err(ExprError::FocusCount(n)),
    }
}

fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(&text[s..i]);
            }
            if !ch.is_whitespace() {
                tokens.push(&text[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(&text[s..]);
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn next(&mut self) -> Result<&'a str, ExprError> {
        let tok = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.error("unexpected end of input"))?;
        self.pos += 1;
        Ok(tok)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        match self.next()? {
            "a" => Ok(Expr::Var(Var::A)),
            "b" => Ok(Expr::Var(Var::B)),
            "c" => Ok(Expr::Var(Var::C)),
            "(" => {
                let head = self.next()?;
                let e = match head {
                    "+" => {
                        let l = self.expr()?;
                        Expr::add(l, self.expr()?)
                    }
                    "*" => {
                        let l = self.expr()?;
                        Expr::mul(l, self.expr()?)
                    }
                    "F" => Expr::focus(self.expr()?),
                    other => {
                        self.pos -= 1;
                        return Err(self.error(&format!("unknown operator `{other}`")));
                    }
                };
                match self.next()? {
                    ")" => Ok(e),
                    _ => {
                        self.pos -= 1;
                        Err(self.error("expected `)`"))
                    }
                }
            }
            other => {
                self.pos -= 1;
                Err(self.error(&format!("unexpected token `{other}`")))
            }
        }
    }
}

/// Random focused expression with height in `heights`, focus at the root.
pub fn random_expr<R: Rng + ?Sized>(
    heights: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<Expr, ExprError> {
    let (lo, hi) = (*heights.start(), *heights.end());
    if lo < 1 || lo > hi {
        return Err(ExprError::InfeasibleRange { lo, hi });
    }
    let h = rng.gen_range(lo..=hi);
    Ok(Expr::focus(random_body(h - 1, rng)))
}

/// Seeded convenience wrapper around [`random_expr`].
pub fn gen_random_expr(heights: RangeInclusive<usize>, seed: u64) -> Result<Expr, ExprError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_expr(heights, &mut rng)
}

// Focus-free tree of exactly `height`.
fn random_body<R: Rng + ?Sized>(height: usize, rng: &mut R) -> Expr {
    if height == 0 {
        return Expr::Var(Var::ALL[rng.gen_range(0..3)]);
    }
    let tall = random_body(height - 1, rng);
    let other_height = rng.gen_range(0..height);
    let other = random_body(other_height, rng);
    let (l, r) = if rng.gen_bool(0.5) {
        (tall, other)
    } else {
        (other, tall)
    };
    let op = if rng.gen_bool(0.5) { Op::Add } else { Op::Mul };
    Expr::binary(op, l, r)
}
