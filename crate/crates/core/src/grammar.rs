//! Weighted context-free grammars: a line-oriented text format, random
//! expansion for corpus synthesis, and an Earley recognizer used as the
//! grammaticality metric.
//!
//! File format, one rule per line:
//!
//! ```text
//! # comment
//! S -> NP VP @2 | VP
//! NP -> the dog
//! ```
//!
//! Any symbol that appears on a left-hand side is a nonterminal; all other
//! symbols are terminals and must exist in the vocabulary. `@w` sets the
//! weight of an alternative (default 1). The first rule's left-hand side is
//! the start symbol. Empty alternatives are rejected.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::vocab::{strip_eos, Rng, TokenId, Vocabulary};

/// Expansion depth past which generation gives up.
pub const DEFAULT_DEPTH_CAP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Terminal(TokenId),
    Nonterminal(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Production {
    pub rhs: Vec<Symbol>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cfg {
    names: Vec<String>,
    index: HashMap<String, usize>,
    rules: Vec<Vec<Production>>,
    start: usize,
}

struct RawRule<'a> {
    lhs: &'a str,
    alternatives: Vec<(Vec<&'a str>, f64)>,
}

fn parse_lines(text: &str) -> Result<Vec<RawRule<'_>>> {
    let mut rules = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Grammar(format!("line {}: {msg}", lineno + 1));
        let (lhs, rhs) = line.split_once("->").ok_or_else(|| err("missing '->'"))?;
        let lhs = lhs.trim();
        if lhs.is_empty() || lhs.contains(char::is_whitespace) {
            return Err(err("left-hand side must be a single symbol"));
        }
        let mut alternatives = Vec::new();
        for alt in rhs.split('|') {
            let mut symbols: Vec<&str> = alt.split_whitespace().collect();
            let mut weight = 1.0;
            if let Some(last) = symbols.last() {
                if let Some(w) = last.strip_prefix('@') {
                    weight = w
                        .parse::<f64>()
                        .map_err(|_| err(&format!("bad weight {last:?}")))?;
                    symbols.pop();
                }
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(err("weights must be positive"));
            }
            if symbols.is_empty() {
                return Err(err("empty alternative"));
            }
            alternatives.push((symbols, weight));
        }
        rules.push(RawRule { lhs, alternatives });
    }
    if rules.is_empty() {
        return Err(Error::Grammar("grammar has no rules".into()));
    }
    Ok(rules)
}

/// Terminal strings of a grammar file, in first-appearance order. Used to
/// build a vocabulary before the grammar itself can be compiled.
pub fn terminal_strings(text: &str) -> Result<Vec<String>> {
    let rules = parse_lines(text)?;
    let nonterminals: HashSet<&str> = rules.iter().map(|r| r.lhs).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rule in &rules {
        for (symbols, _) in &rule.alternatives {
            for s in symbols {
                if !nonterminals.contains(s) && seen.insert(*s) {
                    out.push(s.to_string());
                }
            }
        }
    }
    Ok(out)
}

impl Cfg {
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let raw = parse_lines(text)?;
        let mut names: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for rule in &raw {
            if !index.contains_key(rule.lhs) {
                index.insert(rule.lhs.to_string(), names.len());
                names.push(rule.lhs.to_string());
            }
        }
        let mut rules = vec![Vec::new(); names.len()];
        for rule in &raw {
            let nt = index[rule.lhs];
            for (symbols, weight) in &rule.alternatives {
                let rhs = symbols
                    .iter()
                    .map(|s| match index.get(*s) {
                        Some(&n) => Ok(Symbol::Nonterminal(n)),
                        None => vocab
                            .id(s)
                            .map(Symbol::Terminal)
                            .ok_or_else(|| Error::Grammar(format!("terminal {s:?} not in vocabulary"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                rules[nt].push(Production {
                    rhs,
                    weight: *weight,
                });
            }
        }
        Ok(Cfg {
            names,
            index,
            rules,
            start: 0,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, nt: usize) -> &str {
        &self.names[nt]
    }

    pub fn productions(&self, nt: usize) -> &[Production] {
        &self.rules[nt]
    }

    pub fn terminals(&self) -> BTreeSet<TokenId> {
        self.rules
            .iter()
            .flatten()
            .flat_map(|p| p.rhs.iter())
            .filter_map(|s| match s {
                Symbol::Terminal(t) => Some(*t),
                Symbol::Nonterminal(_) => None,
            })
            .collect()
    }

    /// Writes the grammar back in file format.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (nt, prods) in self.rules.iter().enumerate() {
            let alts: Vec<String> = prods
                .iter()
                .map(|p| {
                    let mut s: Vec<String> = p
                        .rhs
                        .iter()
                        .map(|sym| match sym {
                            Symbol::Terminal(t) => vocab.token(*t).unwrap_or("<unk>").to_string(),
                            Symbol::Nonterminal(n) => self.names[*n].clone(),
                        })
                        .collect();
                    if p.weight != 1.0 {
                        s.push(format!("@{}", p.weight));
                    }
                    s.join(" ")
                })
                .collect();
            out.push_str(&format!("{} -> {}\n", self.names[nt], alts.join(" | ")));
        }
        out
    }

    /// Random leftmost expansion of `nt`, choosing alternatives in
    /// proportion to their weights. One uniform draw per expansion.
    pub fn expand(&self, nt: usize, rng: &mut Rng, depth_cap: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        self.expand_into(nt, rng, 0, depth_cap, &mut out)?;
        Ok(out)
    }

    fn expand_into(
        &self,
        nt: usize,
        rng: &mut Rng,
        depth: usize,
        cap: usize,
        out: &mut Vec<TokenId>,
    ) -> Result<()> {
        if depth > cap {
            return Err(Error::GrammarDepthExceeded(cap));
        }
        let prods = &self.rules[nt];
        let total: f64 = prods.iter().map(|p| p.weight).sum();
        let mut u = rng.uniform() * total;
        let mut chosen = &prods[prods.len() - 1];
        for p in prods {
            if u < p.weight {
                chosen = p;
                break;
            }
            u -= p.weight;
        }
        for sym in &chosen.rhs {
            match *sym {
                Symbol::Terminal(t) => out.push(t),
                Symbol::Nonterminal(n) => self.expand_into(n, rng, depth + 1, cap, out)?,
            }
        }
        Ok(())
    }

    /// Earley recognition of `tokens` (a trailing EOS is ignored) from the
    /// start symbol.
    pub fn recognizes(&self, tokens: &[TokenId]) -> bool {
        self.recognizes_from(self.start, tokens)
    }

    pub fn recognizes_from(&self, root: usize, tokens: &[TokenId]) -> bool {
        let tokens = strip_eos(tokens);
        if tokens.is_empty() {
            return false;
        }
        let n = tokens.len();
        let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
        let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
        let push = |chart: &mut Vec<Vec<Item>>, seen: &mut Vec<HashSet<Item>>, i: usize, item: Item| {
            if seen[i].insert(item) {
                chart[i].push(item);
            }
        };
        for p in 0..self.rules[root].len() {
            push(&mut chart, &mut seen, 0, Item::new(root, p, 0, 0));
        }
        for i in 0..=n {
            let mut k = 0;
            while k < chart[i].len() {
                let item = chart[i][k];
                k += 1;
                let rhs = &self.rules[item.nt][item.prod].rhs;
                match rhs.get(item.dot) {
                    Some(Symbol::Nonterminal(next)) => {
                        for p in 0..self.rules[*next].len() {
                            push(&mut chart, &mut seen, i, Item::new(*next, p, 0, i));
                        }
                    }
                    Some(Symbol::Terminal(t)) => {
                        if i < n && tokens[i] == *t {
                            push(&mut chart, &mut seen, i + 1, item.advance());
                        }
                    }
                    None => {
                        // No empty productions exist, so origin < i and the
                        // origin column is complete.
                        let waiting: Vec<Item> = chart[item.origin]
                            .iter()
                            .filter(|w| {
                                self.rules[w.nt][w.prod].rhs.get(w.dot)
                                    == Some(&Symbol::Nonterminal(item.nt))
                            })
                            .copied()
                            .collect();
                        for w in waiting {
                            push(&mut chart, &mut seen, i, w.advance());
                        }
                    }
                }
            }
        }
        chart[n].iter().any(|it| {
            it.nt == root && it.origin == 0 && it.dot == self.rules[root][it.prod].rhs.len()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Item {
    nt: usize,
    prod: usize,
    dot: usize,
    origin: usize,
}

impl Item {
    fn new(nt: usize, prod: usize, dot: usize, origin: usize) -> Self {
        Item {
            nt,
            prod,
            dot,
            origin,
        }
    }

    fn advance(self) -> Self {
        Item {
            dot: self.dot + 1,
            ..self
        }
    }
}

/// Convenience wrapper matching the metric's signature.
pub fn parse(grammar: &Cfg, tokens: &[TokenId]) -> bool {
    grammar.recognizes(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
S -> A B | B A @2
A -> x | x A
B -> y | z
";

    fn toy() -> (Vocabulary, Cfg) {
        let vocab = Vocabulary::new(terminal_strings(TOY).unwrap()).unwrap();
        let g = Cfg::from_text(TOY, &vocab).unwrap();
        (vocab, g)
    }

    /// Every terminal string of length <= max_len derivable from `nt`,
    /// computed by exhaustive leftmost derivation.
    fn language(g: &Cfg, max_len: usize) -> HashSet<Vec<TokenId>> {
        let mut out = HashSet::new();
        let mut stack = vec![vec![Symbol::Nonterminal(g.start())]];
        while let Some(form) = stack.pop() {
            let terminals = form
                .iter()
                .filter(|s| matches!(s, Symbol::Terminal(_)))
                .count();
            // No empty productions: every symbol yields at least one token.
            if form.len() > max_len || terminals > max_len {
                continue;
            }
            match form.iter().position(|s| matches!(s, Symbol::Nonterminal(_))) {
                None => {
                    out.insert(
                        form.iter()
                            .map(|s| match s {
                                Symbol::Terminal(t) => *t,
                                _ => unreachable!(),
                            })
                            .collect(),
                    );
                }
                Some(pos) => {
                    let Symbol::Nonterminal(nt) = form[pos] else { unreachable!() };
                    for p in g.productions(nt) {
                        let mut next = form[..pos].to_vec();
                        next.extend(&p.rhs);
                        next.extend(&form[pos + 1..]);
                        stack.push(next);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn recognizer_agrees_with_enumeration() {
        let (vocab, g) = toy();
        let lang = language(&g, 5);
        let terms: Vec<TokenId> = ["x", "y", "z"].iter().map(|t| vocab.id(t).unwrap()).collect();
        let mut all: Vec<Vec<TokenId>> = vec![vec![]];
        for _ in 0..5 {
            let mut next = Vec::new();
            for s in &all {
                for &t in &terms {
                    let mut s2 = s.clone();
                    s2.push(t);
                    next.push(s2);
                }
            }
            for s in &next {
                assert_eq!(g.recognizes(s), lang.contains(s), "{}", vocab.decode(s));
            }
            all = next;
        }
    }

    #[test]
    fn empty_and_eos_handling() {
        let (vocab, g) = toy();
        assert!(!g.recognizes(&[]));
        let mut s = vocab.encode("x y").unwrap().into_ids();
        assert!(g.recognizes(&s));
        s.push(crate::vocab::EOS);
        assert!(g.recognizes(&s));
    }

    #[test]
    fn expansion_is_in_language_and_weighted() {
        let (_, g) = toy();
        let mut rng = Rng::new(3);
        let mut b_first = 0;
        for _ in 0..3000 {
            let s = g.expand(g.start(), &mut rng, DEFAULT_DEPTH_CAP).unwrap();
            assert!(g.recognizes(&s));
            if g.recognizes_from(g.nonterminal("B").unwrap(), &s[..1]) {
                b_first += 1;
            }
        }
        let f = b_first as f64 / 3000.0;
        assert!((f - 2.0 / 3.0).abs() < 0.03, "{f}");
    }

    #[test]
    fn depth_cap_is_enforced() {
        let text = "S -> a S | a S";
        let vocab = Vocabulary::new(terminal_strings(text).unwrap()).unwrap();
        let g = Cfg::from_text(text, &vocab).unwrap();
        assert!(matches!(
            g.expand(0, &mut Rng::new(1), 10),
            Err(Error::GrammarDepthExceeded(10))
        ));
    }

    #[test]
    fn rejects_bad_files() {
        let vocab = Vocabulary::new(["a"]).unwrap();
        assert!(Cfg::from_text("S a", &vocab).is_err());
        assert!(Cfg::from_text("S -> b", &vocab).is_err());
        assert!(Cfg::from_text("S -> a | ", &vocab).is_err());
        assert!(Cfg::from_text("S -> a @-1", &vocab).is_err());
        assert!(Cfg::from_text("", &vocab).is_err());
    }

    #[test]
    fn text_round_trip() {
        let (vocab, g) = toy();
        let back = Cfg::from_text(&g.to_text(&vocab), &vocab).unwrap();
        assert_eq!(back, g);
    }
}
