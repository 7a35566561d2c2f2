//! Regex syntax trees used as language seeds.
//!
//! The operator set is deliberately small: lowercase literals, concatenation,
//! alternation and bounded repetition. Every tree has a canonical string form
//! which [`parse`] maps back to the identical tree.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;

/// Largest repetition bound accepted anywhere in a seed.
pub const MAX_REPEAT_BOUND: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Node {
    Literal(char),
    Concat(Vec<Node>),
    Alt(Vec<Node>),
    Repeat { inner: Box<Node>, min: u8, max: u8 },
}

impl Node {
    /// Nesting depth; a literal has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Node::Literal(_) => 0,
            Node::Concat(c) | Node::Alt(c) => 1 + c.iter().map(Node::depth).max().unwrap_or(0),
            Node::Repeat { inner, .. } => 1 + inner.depth(),
        }
    }

    /// Checks the structural invariants against a grammar.
    pub fn validate(&self, grammar: &GrammarConfig) -> Result<(), SynthError> {
        if self.depth() > grammar.max_depth as usize {
            return Err(SynthError::Grammar(format!(
                "depth {} exceeds {}",
                self.depth(),
                grammar.max_depth
            )));
        }
        self.validate_nodes(grammar)
    }

    fn validate_nodes(&self, grammar: &GrammarConfig) -> Result<(), SynthError> {
        match self {
            Node::Literal(c) => {
                if !c.is_ascii_lowercase() {
                    return Err(SynthError::Grammar(format!("literal {c:?} is not a lowercase letter")));
                }
            }
            Node::Concat(children) | Node::Alt(children) => {
                let n = children.len();
                if n < grammar.min_children as usize || n > grammar.max_children as usize {
                    return Err(SynthError::Grammar(format!(
                        "{n} children outside [{}, {}]",
                        grammar.min_children, grammar.max_children
                    )));
                }
                for c in children {
                    c.validate_nodes(grammar)?;
                }
            }
            Node::Repeat { inner, min, max } => {
                if min > max || *max > grammar.max_repeat {
                    return Err(SynthError::Grammar(format!("bad repeat bounds {{{min},{max}}}")));
                }
                inner.validate_nodes(grammar)?;
            }
        }
        Ok(())
    }

    /// Draws one string: uniform branch choice, uniform repeat count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut String) {
        match self {
            Node::Literal(c) => out.push(*c),
            Node::Concat(children) => {
                for c in children {
                    c.sample(rng, out);
                }
            }
            Node::Alt(children) => {
                let i = rng.gen_range(0..children.len());
                children[i].sample(rng, out);
            }
            Node::Repeat { inner, min, max } => {
                let n = rng.gen_range(*min..=*max);
                for _ in 0..n {
                    inner.sample(rng, out);
                }
            }
        }
    }

    /// Length of the shortest string in the language.
    pub fn min_len(&self) -> usize {
        match self {
            Node::Literal(_) => 1,
            Node::Concat(c) => c.iter().map(Node::min_len).sum(),
            Node::Alt(c) => c.iter().map(Node::min_len).min().unwrap_or(0),
            Node::Repeat { inner, min, .. } => *min as usize * inner.min_len(),
        }
    }

    /// Whether the whole of `text` is in the language of this tree.
    pub fn matches(&self, text: &str) -> bool {
        let chars: Vec<char> = text.chars().collect();
        self.ends_from(&chars, 0).contains(&chars.len())
    }

    /// All end offsets reachable by matching this node starting at `start`.
    fn ends_from(&self, s: &[char], start: usize) -> BTreeSet<usize> {
        match self {
            Node::Literal(c) => {
                let mut out = BTreeSet::new();
                if s.get(start) == Some(c) {
                    out.insert(start + 1);
                }
                out
            }
            Node::Concat(children) => {
                let mut cur: BTreeSet<usize> = [start].into();
                for c in children {
                    cur = cur.iter().flat_map(|&p| c.ends_from(s, p)).collect();
                    if cur.is_empty() {
                        break;
                    }
                }
                cur
            }
            Node::Alt(children) => children.iter().flat_map(|c| c.ends_from(s, start)).collect(),
            Node::Repeat { inner, min, max } => {
                let mut out = BTreeSet::new();
                let mut cur: BTreeSet<usize> = [start].into();
                for k in 0..=*max {
                    if k >= *min {
                        out.extend(cur.iter().copied());
                    }
                    if k == *max {
                        break;
                    }
                    cur = cur.iter().flat_map(|&p| inner.ends_from(s, p)).collect();
                    if cur.is_empty() {
                        break;
                    }
                }
                out
            }
        }
    }

    fn fmt_atom(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Literal(c) => write!(f, "{c}"),
            other => write!(f, "({other})"),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Literal(c) => write!(f, "{c}"),
            Node::Concat(children) => {
                for c in children {
                    match c {
                        Node::Alt(_) | Node::Concat(_) => c.fmt_atom(f)?,
                        _ => write!(f, "{c}")?,
                    }
                }
                Ok(())
            }
            Node::Alt(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str("|")?;
                    }
                    match c {
                        Node::Alt(_) => c.fmt_atom(f)?,
                        _ => write!(f, "{c}")?,
                    }
                }
                Ok(())
            }
            Node::Repeat { inner, min, max } => {
                inner.fmt_atom(f)?;
                write!(f, "{{{min},{max}}}")
            }
        }
    }
}

/// Parses the canonical string form (also accepts `{n}` for `{n,n}`).
pub fn parse(src: &str) -> Result<Node, SynthError> {
    let chars: Vec<char> = src.chars().collect();
    let mut p = Parser { s: &chars, pos: 0 };
    let node = p.alt()?;
    if p.pos != chars.len() {
        return Err(p.err("unexpected character"));
    }
    Ok(node)
}

struct Parser<'a> {
    s: &'a [char],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> SynthError {
        SynthError::Parse {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.s.get(self.pos).copied()
    }

    fn alt(&mut self) -> Result<Node, SynthError> {
        let mut branches = vec![self.concat()?];
        while self.peek() == Some('|') {
            self.pos += 1;
            branches.push(self.concat()?);
        }
        Ok(if branches.len() == 1 {
            branches.pop().unwrap()
        } else {
            Node::Alt(branches)
        })
    }

    fn concat(&mut self) -> Result<Node, SynthError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == '|' || c == ')' {
                break;
            }
            items.push(self.repeat()?);
        }
        match items.len() {
            0 => Err(self.err("empty expression")),
            1 => Ok(items.pop().unwrap()),
            _ => Ok(Node::Concat(items)),
        }
    }

    fn repeat(&mut self) -> Result<Node, SynthError> {
        let mut node = self.atom()?;
        while self.peek() == Some('{') {
            self.pos += 1;
            let min = self.number()?;
            let max = if self.peek() == Some(',') {
                self.pos += 1;
                self.number()?
            } else {
                min
            };
            if self.peek() != Some('}') {
                return Err(self.err("expected '}'"));
            }
            self.pos += 1;
            if min > max {
                return Err(self.err("repeat min exceeds max"));
            }
            node = Node::Repeat {
                inner: Box::new(node),
                min,
                max,
            };
        }
        Ok(node)
    }

    fn number(&mut self) -> Result<u8, SynthError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits: String = self.s[start..self.pos].iter().collect();
        digits.parse().map_err(|_| self.err("expected a small integer"))
    }

    fn atom(&mut self) -> Result<Node, SynthError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.alt()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_lowercase() => {
                self.pos += 1;
                Ok(Node::Literal(c))
            }
            _ => Err(self.err("expected a letter or '('")),
        }
    }
}

/// Bounds for randomly constructed seed trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    /// Letters literals are drawn from.
    pub alphabet: String,
    pub max_depth: u8,
    pub min_children: u8,
    pub max_children: u8,
    pub max_repeat: u8,
    /// Relative weights for literal / concat / alternation / repeat children.
    pub weights: [f64; 4],
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            alphabet: ('a'..='z').collect(),
            max_depth: 3,
            min_children: 2,
            max_children: 6,
            max_repeat: MAX_REPEAT_BOUND,
            weights: [0.55, 0.1, 0.2, 0.15],
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.alphabet.is_empty() || !self.alphabet.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(SynthError::Grammar("alphabet must be non-empty lowercase letters".into()));
        }
        if self.max_depth > 3 {
            return Err(SynthError::Grammar("max_depth must be at most 3".into()));
        }
        if self.min_children < 2 || self.min_children > self.max_children || self.max_children > 6 {
            return Err(SynthError::Grammar("children bounds must satisfy 2 <= min <= max <= 6".into()));
        }
        if self.max_repeat > MAX_REPEAT_BOUND {
            return Err(SynthError::Grammar(format!("max_repeat must be at most {MAX_REPEAT_BOUND}")));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::Grammar("child weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    fn literal<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        let letters: Vec<char> = self.alphabet.chars().collect();
        Node::Literal(letters[rng.gen_range(0..letters.len())])
    }

    fn children<R: Rng + ?Sized>(&self, rng: &mut R, depth_left: u8) -> Vec<Node> {
        let n = rng.gen_range(self.min_children..=self.max_children);
        (0..n).map(|_| self.node(rng, depth_left)).collect()
    }

    /// Random tree whose depth is at most `depth_left`.
    fn node<R: Rng + ?Sized>(&self, rng: &mut R, depth_left: u8) -> Node {
        if depth_left == 0 {
            return self.literal(rng);
        }
        let total: f64 = self.weights.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        let mut kind = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if x < *w {
                kind = i;
                break;
            }
            x -= w;
            kind = i;
        }
        match kind {
            0 => self.literal(rng),
            1 => Node::Concat(self.children(rng, depth_left - 1)),
            2 => Node::Alt(self.children(rng, depth_left - 1)),
            _ if self.max_repeat == 0 => self.literal(rng),
            _ => {
                let max = rng.gen_range(1..=self.max_repeat);
                let min = rng.gen_range(0..=max);
                Node::Repeat {
                    inner: Box::new(self.node(rng, depth_left - 1)),
                    min,
                    max,
                }
            }
        }
    }

    /// Random seed tree. The root is a concatenation whenever depth allows,
    /// so seeds read as short sentences rather than single tokens.
    pub fn random_tree<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        if self.max_depth == 0 {
            return self.literal(rng);
        }
        Node::Concat(self.children(rng, self.max_depth - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn display_parse_round_trip() {
        for src in ["ab|cd", "a{2,4}", "(a|b)c", "x(ab){0,3}(c|de|f)", "(a{1,2}){2,2}", "(ab)c"] {
            let node = parse(src).unwrap();
            let shown = node.to_string();
            assert_eq!(parse(&shown).unwrap(), node, "{src} -> {shown}");
        }
        assert_eq!(parse("a{3}").unwrap().to_string(), "a{3,3}");
    }

    #[test]
    fn parse_errors() {
        assert!(parse("").is_err());
        assert!(parse("a|").is_err());
        assert!(parse("(ab").is_err());
        assert!(parse("A").is_err());
        assert!(parse("a{3,1}").is_err());
    }

    #[test]
    fn matcher() {
        let n = parse("a(b|cd){1,2}e").unwrap();
        for ok in ["abe", "acde", "abbe", "acdbe", "acdcde"] {
            assert!(n.matches(ok), "{ok}");
        }
        for bad in ["ae", "abbbe", "ab", "acbe", ""] {
            assert!(!n.matches(bad), "{bad}");
        }
        assert!(parse("a{0,2}").unwrap().matches(""));
    }

    #[test]
    fn random_trees_respect_grammar() {
        let g = GrammarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let t = g.random_tree(&mut rng);
            t.validate(&g).unwrap();
            assert_eq!(parse(&t.to_string()).unwrap(), t);
            let mut s = String::new();
            t.sample(&mut rng, &mut s);
            assert!(t.matches(&s), "{t} !~ {s}");
        }
    }
}
