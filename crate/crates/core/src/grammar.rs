// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive subject-verb agreement pairs in parameterized toy languages.
//!
//! Every sentence instantiates the fixed six-slot template
//! `D N_subj R V_embed D_obj N_obj`; the model is asked for the verb that
//! follows. Tokenization is word-level over a closed vocabulary, so each
//! word is exactly one token and clean/corrupted pairs stay position aligned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSequence};

/// Slot roles of the sentence template, in order.
pub const TEMPLATE_ROLES: [&str; 6] = ["D", "N_subj", "R", "V_embed", "D_obj", "N_obj"];
pub const TEMPLATE_LEN: usize = TEMPLATE_ROLES.len();
pub const SUBJECT_SLOT: usize = 1;
const DET_SLOT: usize = 0;
const REL_SLOT: usize = 2;
const VERB_SLOT: usize = 3;
const OBJ_DET_SLOT: usize = 4;
const OBJ_SLOT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Number {
    Sing,
    Plur,
}

impl Number {
    pub fn flip(self) -> Self {
        match self {
            Number::Sing => Number::Plur,
            Number::Plur => Number::Sing,
        }
    }

    /// -1 for singular, +1 for plural.
    pub fn sign(self) -> f64 {
        match self {
            Number::Sing => -1.0,
            Number::Plur => 1.0,
        }
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Number::Sing => "sing",
            Number::Plur => "plur",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumberPair<T> {
    pub sing: T,
    pub plur: T,
}

impl<T> NumberPair<T> {
    pub fn get(&self, n: Number) -> &T {
        match n {
            Number::Sing => &self.sing,
            Number::Plur => &self.plur,
        }
    }
}

impl<T: PartialEq> NumberPair<T> {
    fn invariant(&self) -> bool {
        self.sing == self.plur
    }
}

fn pair(sing: &str, plur: &str) -> NumberPair<String> {
    NumberPair { sing: sing.into(), plur: plur.into() }
}

/// Lexicon and morphology of one toy language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub vocab: BTreeMap<String, TokenId>,
    /// Identical forms when the language does not mark number on determiners.
    pub determiners: NumberPair<String>,
    /// Fills the `D_obj` slot ("the", Spanish "al"); number invariant.
    pub object_determiner: String,
    pub subject_nouns: Vec<NumberPair<String>>,
    pub object_nouns: Vec<String>,
    pub relativizer: String,
    /// Identical forms for number-invariant verbs.
    pub embedded_verbs: Vec<NumberPair<String>>,
    pub answer_verbs: NumberPair<TokenId>,
    pub marks_embedded_verb: bool,
    pub marks_determiner: bool,
}

impl LanguageSpec {
    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.vocab.get(word).copied().ok_or_else(|| Error::InvalidLanguage(format!("word `{word}` missing from vocab of {}", self.name)))
    }

    fn word_of(&self, id: TokenId) -> Option<&str> {
        self.vocab.iter().find(|(_, &v)| v == id).map(|(w, _)| w.as_str())
    }

    pub fn combinations(&self) -> usize {
        self.subject_nouns.len() * self.object_nouns.len() * self.embedded_verbs.len()
    }

    /// Checks single-token words, distinct ids, and marking flags.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidLanguage(format!("{}: {m}", self.name)));
        let ids: BTreeSet<_> = self.vocab.values().collect();
        if ids.len() != self.vocab.len() {
            return fail("two words share a token id".into());
        }
        if let Some(w) = self.vocab.keys().find(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return fail(format!("`{w}` is not a single word"));
        }
        if self.subject_nouns.is_empty() || self.object_nouns.is_empty() || self.embedded_verbs.is_empty() {
            return fail("lexicon lists must be nonempty".into());
        }
        let mut words: Vec<&str> = vec![&self.determiners.sing, &self.determiners.plur, &self.object_determiner, &self.relativizer];
        for p in self.subject_nouns.iter().chain(&self.embedded_verbs) {
            words.push(&p.sing);
            words.push(&p.plur);
        }
        words.extend(self.object_nouns.iter().map(String::as_str));
        for w in &words {
            self.id(w)?;
        }
        for p in &self.subject_nouns {
            if p.invariant() {
                return fail(format!("subject noun `{}` does not mark number", p.sing));
            }
        }
        if self.marks_determiner == self.determiners.invariant() {
            return fail("determiner forms disagree with marks_determiner".into());
        }
        if self.embedded_verbs.iter().any(|v| v.invariant() == self.marks_embedded_verb) {
            return fail("embedded verb forms disagree with marks_embedded_verb".into());
        }
        if self.answer_verbs.invariant() {
            return fail("answer verbs must differ".into());
        }
        // subject noun forms may not double as any other slot filler
        let subj: BTreeSet<&str> = self.subject_nouns.iter().flat_map(|p| [p.sing.as_str(), p.plur.as_str()]).collect();
        if subj.len() != 2 * self.subject_nouns.len() {
            return fail("subject noun forms repeat".into());
        }
        if self.object_nouns.iter().any(|o| subj.contains(o.as_str())) {
            return fail("object and subject noun lists overlap".into());
        }
        Ok(())
    }

    fn instantiate(&self, subj: usize, obj: usize, verb: usize, number: Number) -> Result<(TokenSequence, Vec<String>)> {
        let words = [
            self.determiners.get(number).clone(),
            self.subject_nouns[subj].get(number).clone(),
            self.relativizer.clone(),
            self.embedded_verbs[verb].get(number).clone(),
            self.object_determiner.clone(),
            self.object_nouns[obj].clone(),
        ];
        let ids = words.iter().map(|w| self.id(w)).collect::<Result<Vec<_>>>()?;
        Ok((TokenSequence::new(ids), words.to_vec()))
    }

    /// Token positions whose form depends on subject number.
    pub fn number_marked_slots(&self) -> Vec<usize> {
        let mut slots = Vec::new();
        if self.marks_determiner {
            slots.push(DET_SLOT);
        }
        slots.push(SUBJECT_SLOT);
        if self.marks_embedded_verb {
            slots.push(VERB_SLOT);
        }
        slots
    }

    /// Number of the subject in a template instantiation.
    pub fn subject_number(&self, tokens: &TokenSequence) -> Result<Number> {
        self.parse(tokens).map(|p| p.number)
    }

    fn parse(&self, tokens: &TokenSequence) -> Result<Parsed> {
        let ids = tokens.ids();
        if ids.len() != TEMPLATE_LEN {
            return Err(Error::TemplateMismatch {
                position: ids.len().min(TEMPLATE_LEN),
                reason: format!("expected {TEMPLATE_LEN} tokens, got {}", ids.len()),
            });
        }
        let word = |pos: usize| {
            self.word_of(ids[pos]).ok_or_else(|| Error::TemplateMismatch {
                position: pos,
                reason: format!("token {} is not in the {} vocabulary", ids[pos], self.name),
            })
        };
        let mismatch = |pos: usize, what: &str| Error::TemplateMismatch {
            position: pos,
            reason: format!("expected {what} ({})", TEMPLATE_ROLES[pos]),
        };

        let noun = word(SUBJECT_SLOT)?;
        let (subj, number) = self
            .subject_nouns
            .iter()
            .enumerate()
            .find_map(|(i, p)| {
                if p.sing == noun {
                    Some((i, Number::Sing))
                } else if p.plur == noun {
                    Some((i, Number::Plur))
                } else {
                    None
                }
            })
            .ok_or_else(|| mismatch(SUBJECT_SLOT, "a subject noun"))?;
        if word(DET_SLOT)? != self.determiners.get(number) {
            return Err(mismatch(DET_SLOT, &format!("the {number} determiner")));
        }
        if word(REL_SLOT)? != self.relativizer {
            return Err(mismatch(REL_SLOT, "the relativizer"));
        }
        let v = word(VERB_SLOT)?;
        let verb = self
            .embedded_verbs
            .iter()
            .position(|p| p.get(number) == v)
            .ok_or_else(|| mismatch(VERB_SLOT, &format!("a {number} embedded verb")))?;
        if word(OBJ_DET_SLOT)? != self.object_determiner {
            return Err(mismatch(OBJ_DET_SLOT, "the object determiner"));
        }
        let o = word(OBJ_SLOT)?;
        let obj = self.object_nouns.iter().position(|x| x == o).ok_or_else(|| mismatch(OBJ_SLOT, "an object noun"))?;
        Ok(Parsed { subj, obj, verb, number })
    }
}

struct Parsed {
    subj: usize,
    obj: usize,
    verb: usize,
    number: Number,
}

/// Flips the subject number of a template instantiation.
///
/// The subject noun always changes; the determiner and embedded verb change
/// only when the language marks number on them.
pub fn corrupt(clean: &TokenSequence, spec: &LanguageSpec) -> Result<TokenSequence> {
    let p = spec.parse(clean)?;
    Ok(spec.instantiate(p.subj, p.obj, p.verb, p.number.flip())?.0)
}

/// Clean and corrupted sentences that differ only in subject number.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub clean: TokenSequence,
    pub corrupted: TokenSequence,
    /// Verb agreeing with the clean subject.
    pub g: TokenId,
    /// Verb agreeing with the corrupted subject.
    pub b: TokenId,
    pub subject_number_clean: Number,
    pub subject_position: usize,
    /// Words of the clean sentence.
    pub token_labels: Vec<String>,
}

impl ContrastivePair {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn last_pos(&self) -> usize {
        self.clean.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Fraction of template combinations reserved for each of validation and test.
pub const HELD_OUT_FRACTION: f64 = 0.2;

/// A fixed-template set of contrastive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub language: String,
    pub split: Split,
    pub seed: u64,
    pub pairs: Vec<ContrastivePair>,
}

impl Dataset {
    /// Checks non-emptiness and uniform length.
    pub fn new(language: String, split: Split, seed: u64, pairs: Vec<ContrastivePair>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyDataset)?.len();
        for p in &pairs {
            for len in [p.clean.len(), p.corrupted.len()] {
                if len != first {
                    return Err(Error::RaggedDataset { first, other: len });
                }
            }
        }
        Ok(Self { language, split, seed, pairs })
    }

    pub fn seq_len(&self) -> usize {
        self.pairs[0].len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs whose clean subject has number `n`.
    pub fn with_number(&self, n: Number) -> impl Iterator<Item = &ContrastivePair> {
        self.pairs.iter().filter(move |p| p.subject_number_clean == n)
    }
}

fn split_combinations(spec: &LanguageSpec, seed: u64) -> [Vec<(usize, usize, usize)>; 3] {
    let mut all = Vec::with_capacity(spec.combinations());
    for s in 0..spec.subject_nouns.len() {
        for o in 0..spec.object_nouns.len() {
            for v in 0..spec.embedded_verbs.len() {
                all.push((s, o, v));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let held = (all.len() as f64 * HELD_OUT_FRACTION).floor() as usize;
    let test = all.split_off(all.len() - held);
    let validation = all.split_off(all.len() - held);
    [all, validation, test]
}

/// Generates `n` pairs from the `split` partition of the lexicon.
///
/// Subject number alternates singular/plural. Each template combination
/// serves at most twice (once per clean number), so a split holds
/// `2 * combinations_in_split` distinct pairs.
pub fn generate_dataset(spec: &LanguageSpec, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let parts = split_combinations(spec, seed);
    let pool = &parts[match split {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }];
    if n > 2 * pool.len() {
        return Err(Error::LexiconTooSmall { requested: n, available: 2 * pool.len(), split: split.to_string() });
    }
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let (combo, number) = if i < pool.len() {
            (pool[i], if i % 2 == 0 { Number::Sing } else { Number::Plur })
        } else {
            let j = i - pool.len();
            (pool[j], if j % 2 == 0 { Number::Plur } else { Number::Sing })
        };
        let (s, o, v) = combo;
        let (clean, labels) = spec.instantiate(s, o, v, number)?;
        let (corrupted, _) = spec.instantiate(s, o, v, number.flip())?;
        pairs.push(ContrastivePair {
            clean,
            corrupted,
            g: *spec.answer_verbs.get(number),
            b: *spec.answer_verbs.get(number.flip()),
            subject_number_clean: number,
            subject_position: SUBJECT_SLOT,
            token_labels: labels,
        });
    }
    Dataset::new(spec.name.clone(), split, seed, pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum AlignmentIssue {
    LengthMismatch { clean_len: usize, corrupted_len: usize, positions: Vec<usize> },
    AnswerCollision { token: TokenId },
    LabelCount { labels: usize, tokens: usize },
    EmptySequence,
    SubjectPosition { position: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub passed: bool,
    pub issues: Vec<AlignmentIssue>,
}

/// Structural checks on a pair; never errors, always reports.
pub fn validate_alignment(pair: &ContrastivePair) -> AlignmentReport {
    let mut issues = Vec::new();
    let (c, k) = (pair.clean.len(), pair.corrupted.len());
    if c == 0 || k == 0 {
        issues.push(AlignmentIssue::EmptySequence);
    }
    if c != k {
        issues.push(AlignmentIssue::LengthMismatch { clean_len: c, corrupted_len: k, positions: (c.min(k)..c.max(k)).collect() });
    }
    if pair.g == pair.b {
        issues.push(AlignmentIssue::AnswerCollision { token: pair.g });
    }
    if pair.token_labels.len() != c {
        issues.push(AlignmentIssue::LabelCount { labels: pair.token_labels.len(), tokens: c });
    }
    if pair.subject_position >= c {
        issues.push(AlignmentIssue::SubjectPosition { position: pair.subject_position });
    }
    AlignmentReport { passed: issues.is_empty(), issues }
}

/// Positions where clean and corrupted differ.
pub fn differing_positions(pair: &ContrastivePair) -> Vec<usize> {
    pair.clean.ids().iter().zip(pair.corrupted.ids()).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect()
}

/// Shared closed vocabulary for the two built-in toy languages.
#[derive(Debug, Clone)]
pub struct ToyLexicon {
    pub english: LanguageSpec,
    pub spanish: LanguageSpec,
    /// Token id to word.
    pub vocab: Vec<String>,
}

impl ToyLexicon {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn language(&self, name: &str) -> Option<&LanguageSpec> {
        match name {
            "english" => Some(&self.english),
            "spanish" => Some(&self.spanish),
            _ => None,
        }
    }
}

/// Filler tokens shared by both languages; never part of a template.
const SHARED_FILLERS: &[&str] = &["<unk>", ".", ",", "and", "is", "are", "was", "were", "de", "se", "en", "y", "es", "son", "fue"];

struct RawLanguage {
    name: &'static str,
    determiners: (&'static str, &'static str),
    object_determiner: &'static str,
    subjects: &'static [(&'static str, &'static str)],
    objects: &'static [&'static str],
    relativizer: &'static str,
    verbs: &'static [(&'static str, &'static str)],
    answers: (&'static str, &'static str),
}

const ENGLISH: RawLanguage = RawLanguage {
    name: "english",
    determiners: ("The", "The"),
    object_determiner: "the",
    subjects: &[
        ("executive", "executives"),
        ("senator", "senators"),
        ("doctor", "doctors"),
        ("teacher", "teachers"),
        ("lawyer", "lawyers"),
        ("farmer", "farmers"),
        ("painter", "painters"),
        ("officer", "officers"),
        ("student", "students"),
        ("surgeon", "surgeons"),
        ("banker", "bankers"),
        ("dancer", "dancers"),
    ],
    objects: &["manager", "author", "pilot", "guard", "chef", "nurse", "actor", "judge", "clerk", "poet", "mayor", "driver"],
    relativizer: "that",
    verbs: &[
        ("embarrassed", "embarrassed"),
        ("admired", "admired"),
        ("helped", "helped"),
        ("liked", "liked"),
        ("hated", "hated"),
        ("called", "called"),
        ("thanked", "thanked"),
        ("followed", "followed"),
        ("praised", "praised"),
        ("blamed", "blamed"),
    ],
    answers: ("has", "have"),
};

const SPANISH: RawLanguage = RawLanguage {
    name: "spanish",
    determiners: ("El", "Los"),
    object_determiner: "al",
    subjects: &[
        ("ingeniero", "ingenieros"),
        ("médico", "médicos"),
        ("abogado", "abogados"),
        ("maestro", "maestros"),
        ("escritor", "escritores"),
        ("pintor", "pintores"),
        ("granjero", "granjeros"),
        ("soldado", "soldados"),
        ("vecino", "vecinos"),
        ("ministro", "ministros"),
        ("piloto", "pilotos"),
        ("alcalde", "alcaldes"),
    ],
    objects: &[
        "cantante",
        "periodista",
        "camarero",
        "banquero",
        "jardinero",
        "carpintero",
        "panadero",
        "sacerdote",
        "bombero",
        "cartero",
        "profesor",
        "juez",
    ],
    relativizer: "que",
    verbs: &[
        ("ayudó", "ayudaron"),
        ("admiró", "admiraron"),
        ("llamó", "llamaron"),
        ("saludó", "saludaron"),
        ("conoció", "conocieron"),
        ("visitó", "visitaron"),
        ("escuchó", "escucharon"),
        ("buscó", "buscaron"),
        ("miró", "miraron"),
        ("encontró", "encontraron"),
    ],
    answers: ("era", "eran"),
};

fn build_language(raw: &RawLanguage, vocab: &mut Vec<String>) -> LanguageSpec {
    let mut own = BTreeMap::new();
    let mut intern = |w: &str| -> TokenId {
        let id = match vocab.iter().position(|v| v == w) {
            Some(i) => i,
            None => {
                vocab.push(w.to_string());
                vocab.len() - 1
            }
        } as TokenId;
        own.insert(w.to_string(), id);
        id
    };
    intern(raw.determiners.0);
    intern(raw.determiners.1);
    for (s, p) in raw.subjects {
        intern(s);
        intern(p);
    }
    intern(raw.relativizer);
    for (s, p) in raw.verbs {
        intern(s);
        intern(p);
    }
    intern(raw.object_determiner);
    for o in raw.objects {
        intern(o);
    }
    let g = intern(raw.answers.0);
    let b = intern(raw.answers.1);
    let marks_embedded_verb = raw.verbs.iter().any(|(s, p)| s != p);
    LanguageSpec {
        name: raw.name.to_string(),
        vocab: own,
        determiners: pair(raw.determiners.0, raw.determiners.1),
        object_determiner: raw.object_determiner.to_string(),
        subject_nouns: raw.subjects.iter().map(|(s, p)| pair(s, p)).collect(),
        object_nouns: raw.objects.iter().map(|s| s.to_string()).collect(),
        relativizer: raw.relativizer.to_string(),
        embedded_verbs: raw.verbs.iter().map(|(s, p)| pair(s, p)).collect(),
        answer_verbs: NumberPair { sing: g, plur: b },
        marks_embedded_verb,
        marks_determiner: raw.determiners.0 != raw.determiners.1,
    }
}

/// The English-like and Spanish-like languages over one shared vocabulary.
pub fn toy_lexicon() -> ToyLexicon {
    let mut vocab: Vec<String> = SHARED_FILLERS.iter().map(|s| s.to_string()).collect();
    let english = build_language(&ENGLISH, &mut vocab);
    let spanish = build_language(&SPANISH, &mut vocab);
    ToyLexicon { english, spanish, vocab }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(spec: &LanguageSpec, seq: &TokenSequence) -> Vec<String> {
        seq.ids().iter().map(|&i| spec.word_of(i).unwrap().to_string()).collect()
    }

    #[test]
    fn builtin_languages_are_valid_and_disjoint() {
        let lex = toy_lexicon();
        lex.english.validate().unwrap();
        lex.spanish.validate().unwrap();
        let en: BTreeSet<_> = lex.english.vocab.values().collect();
        let es: BTreeSet<_> = lex.spanish.vocab.values().collect();
        assert!(en.is_disjoint(&es));
        assert!(!lex.english.marks_determiner && !lex.english.marks_embedded_verb);
        assert!(lex.spanish.marks_determiner && lex.spanish.marks_embedded_verb);
    }

    #[test]
    fn english_example_sentence() {
        let lex = toy_lexicon();
        let en = &lex.english;
        let (clean, _) = en.instantiate(0, 0, 0, Number::Sing).unwrap();
        assert_eq!(words(en, &clean).join(" "), "The executive that embarrassed the manager");
        let corrupted = corrupt(&clean, en).unwrap();
        assert_eq!(words(en, &corrupted).join(" "), "The executives that embarrassed the manager");
        let diff: Vec<usize> = (0..6).filter(|&i| clean.ids()[i] != corrupted.ids()[i]).collect();
        assert_eq!(diff, vec![SUBJECT_SLOT]);
        assert_eq!(en.answer_verbs.sing, en.id("has").unwrap());
        assert_eq!(en.answer_verbs.plur, en.id("have").unwrap());
    }

    #[test]
    fn spanish_example_sentence() {
        let lex = toy_lexicon();
        let es = &lex.spanish;
        let (clean, _) = es.instantiate(0, 0, 0, Number::Sing).unwrap();
        assert_eq!(words(es, &clean).join(" "), "El ingeniero que ayudó al cantante");
        let corrupted = corrupt(&clean, es).unwrap();
        assert_eq!(words(es, &corrupted).join(" "), "Los ingenieros que ayudaron al cantante");
        assert_eq!(es.word_of(es.answer_verbs.sing), Some("era"));
        assert_eq!(es.word_of(es.answer_verbs.plur), Some("eran"));
    }

    #[test]
    fn generated_pairs_carry_the_right_answers() {
        let lex = toy_lexicon();
        for spec in [&lex.english, &lex.spanish] {
            let ds = generate_dataset(spec, 40, 3, Split::Train).unwrap();
            for p in &ds.pairs {
                assert_eq!(spec.subject_number(&p.clean).unwrap(), p.subject_number_clean);
                assert_eq!(p.g, *spec.answer_verbs.get(p.subject_number_clean));
                assert_eq!(p.b, *spec.answer_verbs.get(p.subject_number_clean.flip()));
                assert_eq!(differing_positions(p), spec.number_marked_slots());
                assert!(validate_alignment(p).passed);
            }
        }
    }

    #[test]
    fn corrupt_is_an_involution_and_rejects_garbage() {
        let lex = toy_lexicon();
        let es = &lex.spanish;
        let ds = generate_dataset(es, 10, 1, Split::Test).unwrap();
        for p in &ds.pairs {
            assert_eq!(corrupt(&corrupt(&p.clean, es).unwrap(), es).unwrap(), p.clean);
        }
        let mut bad = ds.pairs[0].clean.clone();
        bad.0.swap(0, 2);
        assert!(matches!(corrupt(&bad, es), Err(Error::TemplateMismatch { .. })));
        let short = TokenSequence::new(ds.pairs[0].clean.ids()[..4].to_vec());
        assert!(corrupt(&short, es).is_err());
        // English tokens are not Spanish
        let en_ds = generate_dataset(&lex.english, 2, 1, Split::Test).unwrap();
        assert!(corrupt(&en_ds.pairs[0].clean, es).is_err());
    }

    #[test]
    fn determinism_and_balance() {
        let lex = toy_lexicon();
        let a = generate_dataset(&lex.english, 10, 42, Split::Validation).unwrap();
        let b = generate_dataset(&lex.english, 10, 42, Split::Validation).unwrap();
        assert_eq!(a, b);
        for n in [1, 2, 7, 100, 289, 576] {
            let ds = generate_dataset(&lex.spanish, n, 9, Split::Test).unwrap();
            let sing = ds.with_number(Number::Sing).count() as i64;
            let plur = ds.with_number(Number::Plur).count() as i64;
            assert!((sing - plur).abs() <= 1, "n={n}");
        }
        assert!(generate_dataset(&lex.spanish, 577, 9, Split::Test).is_err());
    }

    #[test]
    fn splits_are_disjoint_in_combinations() {
        let lex = toy_lexicon();
        let spec = &lex.spanish;
        let key = |p: &ContrastivePair| {
            let parsed = spec.parse(&p.clean).unwrap();
            (parsed.subj, parsed.obj, parsed.verb)
        };
        let sets: Vec<BTreeSet<_>> = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .map(|&s| {
                let cap = 2 * split_combinations(spec, 5)[s as usize].len();
                generate_dataset(spec, cap, 5, s).unwrap().pairs.iter().map(key).collect()
            })
            .collect();
        assert!(sets[0].is_disjoint(&sets[1]));
        assert!(sets[0].is_disjoint(&sets[2]));
        assert!(sets[1].is_disjoint(&sets[2]));
        assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), spec.combinations());
    }

    #[test]
    fn too_many_pairs_is_an_error() {
        let lex = toy_lexicon();
        let cap = 2 * (lex.english.combinations() as f64 * HELD_OUT_FRACTION).floor() as usize;
        assert!(generate_dataset(&lex.english, cap, 0, Split::Test).is_ok());
        assert!(matches!(generate_dataset(&lex.english, cap + 1, 0, Split::Test), Err(Error::LexiconTooSmall { .. })));
    }

    #[test]
    fn alignment_failures_are_reported() {
        let lex = toy_lexicon();
        let ds = generate_dataset(&lex.english, 2, 0, Split::Train).unwrap();
        let mut p = ds.pairs[0].clone();
        p.corrupted.0.pop();
        let r = validate_alignment(&p);
        assert!(!r.passed);
        assert!(matches!(
            &r.issues[0],
            AlignmentIssue::LengthMismatch { positions, .. } if positions == &vec![5]
        ));
        let mut p = ds.pairs[0].clone();
        p.b = p.g;
        let r = validate_alignment(&p);
        assert_eq!(r.issues, vec![AlignmentIssue::AnswerCollision { token: p.g }]);
    }

    #[test]
    fn language_spec_json_round_trip() {
        let lex = toy_lexicon();
        let s = serde_json::to_string(&lex.spanish).unwrap();
        let back: LanguageSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, lex.spanish);
    }

    #[test]
    fn invalid_specs_rejected() {
        let lex = toy_lexicon();
        let mut s = lex.english.clone();
        s.marks_determiner = true;
        assert!(s.validate().is_err());
        let mut s = lex.english.clone();
        s.object_nouns.push("executive".into());
        assert!(s.validate().is_err());
        let mut s = lex.spanish.clone();
        s.vocab.insert("extra".into(), s.answer_verbs.sing);
        assert!(s.validate().is_err());
    }
}
