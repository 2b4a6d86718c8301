//! Lightweight text analysis: tokenization, content-word flags, lemmas and
//! named entities.
//!
//! [`RuleAnalyzer`] is a deterministic rule-based default. Richer analyzers can
//! be plugged in through [`TextAnalyzer`]; every proxy formula only depends on
//! the trait.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Byte offsets into the analyzed text.
    pub start: usize,
    pub end: usize,
    /// Carries at least one alphanumeric character.
    pub is_word: bool,
    pub is_content: bool,
    pub lemma: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityLabel {
    Person,
    Org,
    Gpe,
    Loc,
    Norp,
    Event,
    WorkOfArt,
    Law,
    Product,
    Fac,
    Language,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub text: String,
    pub label: EntityLabel,
    pub start: usize,
    pub end: usize,
}

pub trait TextAnalyzer: Send + Sync {
    fn version(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn entities(&self, text: &str) -> Vec<Entity>;

    fn content_lemmas(&self, text: &str) -> Vec<String> {
        self.tokenize(text)
            .into_iter()
            .filter(|t| t.is_content)
            .map(|t| t.lemma)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleAnalyzer;

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+(?:['\u{2019}]\w+)*|[^\w\s]").unwrap())
}

const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "also",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "don't",
    "down",
    "during",
    "each",
    "even",
    "few",
    "for",
    "from",
    "further",
    "get",
    "got",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "i'm",
    "if",
    "in",
    "into",
    "is",
    "it",
    "it's",
    "its",
    "itself",
    "just",
    "know",
    "let",
    "like",
    "me",
    "might",
    "more",
    "most",
    "much",
    "must",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "oh",
    "ok",
    "okay",
    "on",
    "once",
    "one",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "really",
    "right",
    "said",
    "same",
    "say",
    "says",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "that's",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "there's",
    "these",
    "they",
    "thing",
    "things",
    "think",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "us",
    "very",
    "want",
    "was",
    "we",
    "we're",
    "well",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "yeah",
    "yes",
    "you",
    "you're",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word.to_lowercase().replace('\u{2019}', "'").as_str())
}

const GPE: &[&str] = &[
    "america",
    "united states",
    "u.s",
    "usa",
    "canada",
    "mexico",
    "china",
    "india",
    "japan",
    "germany",
    "france",
    "britain",
    "england",
    "russia",
    "brazil",
    "europe",
    "california",
    "texas",
    "new york",
    "chicago",
    "washington",
    "london",
    "paris",
    "boston",
    "ohio",
    "florida",
];
const NORP: &[&str] = &[
    "american",
    "americans",
    "democrat",
    "democrats",
    "republican",
    "republicans",
    "european",
    "europeans",
    "christian",
    "christians",
    "muslim",
    "muslims",
    "chinese",
    "canadian",
    "canadians",
    "conservative",
    "conservatives",
    "liberal",
    "liberals",
];
const LANGUAGE: &[&str] = &[
    "english", "spanish", "french", "german", "mandarin", "arabic",
];
const LOC: &[&str] = &[
    "pacific",
    "atlantic",
    "midwest",
    "africa",
    "asia",
    "mississippi",
];
const ORG_MARKERS: &[&str] = &[
    "inc",
    "corp",
    "company",
    "university",
    "college",
    "congress",
    "senate",
    "court",
    "department",
    "agency",
    "association",
    "council",
    "institute",
    "bank",
    "party",
    "commission",
    "board",
    "foundation",
    "school",
];
const LAW_MARKERS: &[&str] = &["act", "amendment", "constitution", "code", "law"];
const EVENT_MARKERS: &[&str] = &["war", "olympics", "revolution", "depression", "election"];
const FAC_MARKERS: &[&str] = &[
    "bridge", "airport", "highway", "street", "stadium", "hospital",
];
const HONORIFICS: &[&str] = &["mr", "mrs", "ms", "dr", "professor", "senator", "judge"];

/// Suffix-stripping lemmatizer: plural and simple verb inflections, never
/// shortening a stem below four characters.
pub fn lemmatize(word: &str) -> String {
    let mut w = word.to_lowercase().replace('\u{2019}', "'");
    if let Some(stem) = w.strip_suffix("'s") {
        w = stem.to_string();
    }
    let n = w.chars().count();
    let undouble = |s: &str| -> String {
        let cs: Vec<char> = s.chars().collect();
        let k = cs.len();
        if k >= 5 && cs[k - 1] == cs[k - 2] && !"aeioulsz".contains(cs[k - 1]) {
            cs[..k - 1].iter().collect()
        } else {
            s.to_string()
        }
    };
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    if n > 4
        && (w.ends_with("sses") || w.ends_with("shes") || w.ends_with("ches") || w.ends_with("xes"))
    {
        return w[..w.len() - 2].to_string();
    }
    if n > 4 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_string();
    }
    if n >= 7 && w.ends_with("ing") {
        return undouble(&w[..w.len() - 3]);
    }
    if n >= 6 && w.ends_with("ed") && !w.ends_with("eed") {
        return undouble(&w[..w.len() - 2]);
    }
    w
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

fn is_acronym(tok: &str) -> bool {
    let letters: Vec<char> = tok.chars().filter(|c| c.is_alphabetic()).collect();
    letters.len() >= 2
        && letters.iter().all(|c| c.is_uppercase())
        && tok.chars().all(|c| c.is_alphanumeric())
}

fn label_for(words: &[&str], after_honorific: bool) -> EntityLabel {
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let joined = lower.join(" ");
    let has = |list: &[&str]| lower.iter().any(|w| list.contains(&w.as_str()));
    if after_honorific {
        EntityLabel::Person
    } else if GPE.contains(&joined.as_str()) {
        EntityLabel::Gpe
    } else if NORP.contains(&joined.as_str()) {
        EntityLabel::Norp
    } else if LANGUAGE.contains(&joined.as_str()) {
        EntityLabel::Language
    } else if LOC.contains(&joined.as_str()) {
        EntityLabel::Loc
    } else if has(LAW_MARKERS) {
        EntityLabel::Law
    } else if has(EVENT_MARKERS) {
        EntityLabel::Event
    } else if has(FAC_MARKERS) {
        EntityLabel::Fac
    } else if has(ORG_MARKERS) || words.iter().all(|w| is_acronym(w)) {
        EntityLabel::Org
    } else if words.len() >= 2 {
        EntityLabel::Person
    } else {
        EntityLabel::Org
    }
}

fn in_gazetteer(word: &str) -> bool {
    let w = word.to_lowercase();
    GPE.contains(&w.as_str())
        || NORP.contains(&w.as_str())
        || LANGUAGE.contains(&w.as_str())
        || LOC.contains(&w.as_str())
}

impl TextAnalyzer for RuleAnalyzer {
    fn version(&self) -> &str {
        "rule-analyzer/1"
    }

    fn tokenize(&self, text: &str) -> Vec<Token> {
        token_re()
            .find_iter(text)
            .map(|m| {
                let s = m.as_str();
                let is_word = s.chars().any(char::is_alphanumeric);
                let has_letter = s.chars().any(char::is_alphabetic);
                let is_content = is_word && has_letter && !is_stopword(s) && s.chars().count() > 1;
                Token {
                    text: s.to_string(),
                    start: m.start(),
                    end: m.end(),
                    is_word,
                    is_content,
                    lemma: if is_word { lemmatize(s) } else { s.to_string() },
                }
            })
            .collect()
    }

    fn entities(&self, text: &str) -> Vec<Entity> {
        let tokens = self.tokenize(text);
        let mut out = Vec::new();
        let mut i = 0;
        let mut sentence_start = true;
        let mut prev_honorific = false;
        while i < tokens.len() {
            let t = &tokens[i];
            if !t.is_word {
                sentence_start = matches!(t.text.as_str(), "." | "!" | "?") && !prev_honorific;
                prev_honorific = prev_honorific && t.text == ".";
                i += 1;
                continue;
            }
            let starts_run =
                (is_capitalized(&t.text) && !is_stopword(&t.text)) || is_acronym(&t.text);
            if !starts_run {
                sentence_start = false;
                prev_honorific = false;
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < tokens.len()
                && tokens[j].is_word
                && (is_capitalized(&tokens[j].text) || is_acronym(&tokens[j].text))
                && !is_stopword(&tokens[j].text)
            {
                j += 1;
            }
            if sentence_start && j - i > 1 && !in_gazetteer(&t.text) && !is_acronym(&t.text) {
                i += 1;
            }
            let words: Vec<&str> = tokens[i..j].iter().map(|t| t.text.as_str()).collect();
            let honorific_lead = HONORIFICS.contains(&words[0].to_lowercase().as_str());
            let run_words: &[&str] = if honorific_lead {
                &words[1..]
            } else {
                &words[..]
            };
            let run_start = if honorific_lead { i + 1 } else { i };
            let sentence_initial_single = sentence_start
                && words.len() == 1
                && !in_gazetteer(words[0])
                && !is_acronym(words[0]);
            if !run_words.is_empty() && !sentence_initial_single {
                let start = tokens[run_start].start;
                let end = tokens[j - 1].end;
                out.push(Entity {
                    text: text[start..end].to_string(),
                    label: label_for(run_words, prev_honorific || honorific_lead),
                    start,
                    end,
                });
                prev_honorific = false;
            } else {
                prev_honorific = honorific_lead;
            }
            sentence_start = false;
            i = j;
        }
        out
    }
}
