//! Query/document normalization: regex tokenization, stop-word removal,
//! suffix stemming and n-gram generation.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::ToolError;

/// Shipped stop-word list, one word per line.
pub const STOP_WORDS: &str = include_str!("../../fixtures/text/stopwords.txt");
/// Shipped stemming rules, `suffix<TAB>replacement<TAB>min-stem-len` per line.
pub const STEM_RULES: &str = include_str!("../../fixtures/text/stem_rules.tsv");

/// Iteration cap for stemming; every non-identity rule shortens the token so
/// this is never reached with a sane table.
const MAX_STEM_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemRule {
    pub suffix: String,
    pub replacement: String,
    /// Minimum length of what remains after removing the suffix.
    pub min_stem_len: usize,
}

impl StemRule {
    fn eligible(&self, token: &str) -> bool {
        token.ends_with(&self.suffix) && token.len() - self.suffix.len() >= self.min_stem_len
    }

    fn is_identity(&self) -> bool {
        self.suffix == self.replacement
    }
}

/// Parses the rule table format. Blank lines and `#` comments are skipped.
pub fn parse_stem_rules(text: &str) -> Result<Vec<StemRule>, ToolError> {
    let mut rules = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols[0].is_empty() {
            return Err(ToolError::spec(format!(
                "stem rule line {}: expected suffix<TAB>replacement<TAB>min-stem-len",
                lineno + 1
            )));
        }
        let min_stem_len = cols[2]
            .trim()
            .parse()
            .map_err(|_| ToolError::spec(format!("stem rule line {}: bad min-stem-len '{}'", lineno + 1, cols[2])))?;
        if cols[1].len() > cols[0].len() || (cols[1].len() == cols[0].len() && cols[0] != cols[1]) {
            return Err(ToolError::spec(format!(
                "stem rule line {}: replacement must be shorter than the suffix or identical to it",
                lineno + 1
            )));
        }
        rules.push(StemRule { suffix: cols[0].to_string(), replacement: cols[1].to_string(), min_stem_len });
    }
    Ok(rules)
}

pub fn parse_stop_words(text: &str) -> HashSet<String> {
    text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9]+").unwrap())
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_regex().find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

/// Normalized terms and the phrases built from them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Normalized {
    pub terms: Vec<String>,
    pub bigrams: Vec<String>,
    pub trigrams: Vec<String>,
}

impl Normalized {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Bigrams followed by trigrams.
    pub fn phrases(&self) -> impl Iterator<Item = &String> {
        self.bigrams.iter().chain(self.trigrams.iter())
    }
}

#[derive(Debug, Clone)]
pub struct TextNormalizer {
    stop_words: HashSet<String>,
    rules: Vec<StemRule>,
}

impl Default for TextNormalizer {
    fn default() -> Self {
        Self::shipped().clone()
    }
}

impl TextNormalizer {
    pub fn new(stop_words: HashSet<String>, mut rules: Vec<StemRule>) -> Self {
        // Longest suffix first; the table order breaks no ties because
        // suffixes are unique.
        rules.sort_by_key(|r| std::cmp::Reverse(r.suffix.len()));
        Self { stop_words, rules }
    }

    /// The normalizer built from the shipped fixture files.
    pub fn shipped() -> &'static TextNormalizer {
        static SHIPPED: OnceLock<TextNormalizer> = OnceLock::new();
        SHIPPED.get_or_init(|| {
            TextNormalizer::new(
                parse_stop_words(STOP_WORDS),
                parse_stem_rules(STEM_RULES).expect("shipped stem rules parse"),
            )
        })
    }

    pub fn stop_words(&self) -> &HashSet<String> {
        &self.stop_words
    }

    pub fn rules(&self) -> &[StemRule] {
        &self.rules
    }

    pub fn is_stop_word(&self, token: &str) -> bool {
        self.stop_words.contains(token)
    }

    /// One rewrite: the longest eligible rule, or `None` when no rule is
    /// eligible or the winner is an identity row.
    pub fn stem_step<'a>(&'a self, token: &str) -> Option<(&'a StemRule, String)> {
        let rule = self.rules.iter().find(|r| r.eligible(token))?;
        if rule.is_identity() {
            return None;
        }
        let mut out = token[..token.len() - rule.suffix.len()].to_string();
        out.push_str(&rule.replacement);
        Some((rule, out))
    }

    /// Rewrites until no rule fires, which makes every stem a fixed point.
    pub fn stem(&self, token: &str) -> String {
        let mut current = token.to_string();
        for _ in 0..MAX_STEM_STEPS {
            match self.stem_step(&current) {
                Some((_, next)) => current = next,
                None => break,
            }
        }
        current
    }

    pub fn normalize(&self, text: &str) -> Normalized {
        let terms: Vec<String> = tokenize(text)
            .into_iter()
            .filter(|t| !self.is_stop_word(t))
            .map(|t| self.stem(&t))
            .filter(|t| !t.is_empty() && !self.is_stop_word(t))
            .collect();
        let bigrams = terms.windows(2).map(|w| w.join(" ")).collect();
        let trigrams = terms.windows(3).map(|w| w.join(" ")).collect();
        Normalized { terms, bigrams, trigrams }
    }
}

/// Normalizes with the shipped stop words and rules.
pub fn normalize_text(text: &str) -> Normalized {
    TextNormalizer::shipped().normalize(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_tables_have_expected_sizes() {
        let n = TextNormalizer::shipped();
        assert_eq!(n.stop_words().len(), 50);
        assert_eq!(n.rules().len(), 20);
    }

    #[test]
    fn example_sentence() {
        let out = normalize_text("Searching the databases");
        assert_eq!(out.terms, ["search", "databas"]);
        assert_eq!(out.bigrams, ["search databas"]);
        assert!(out.trigrams.is_empty());
    }

    #[test]
    fn empty_and_all_stop_words() {
        assert!(normalize_text("").is_empty());
        assert!(normalize_text("the a of").is_empty());
        assert!(normalize_text("  ,;  ").is_empty());
    }

    #[test]
    fn trigrams_cover_three_token_windows() {
        let out = normalize_text("search scientific literature articles");
        assert_eq!(out.terms, ["search", "scientific", "literatur", "articl"]);
        assert_eq!(out.trigrams, ["search scientific literatur", "scientific literatur articl"]);
    }

    #[test]
    fn underscores_split_names() {
        assert_eq!(normalize_text("protein_lookup").terms, ["protein", "lookup"]);
    }

    #[test]
    fn malformed_rule_lines_are_rejected() {
        assert!(parse_stem_rules("ing\t\n").is_err());
        assert!(parse_stem_rules("ing\t\tx\n").is_err());
        assert!(parse_stem_rules("s\tss\t1\n").is_err());
        assert_eq!(parse_stem_rules("# c\n\ning\t\t3\n").unwrap().len(), 1);
    }
}
