//! Instruction parsing.
//!
//! Templated instructions are chunked into one action phrase (verb + object)
//! followed by zero or more relation phrases (preposition + entity). Entity
//! spans are matched left-to-right against the lexicon using longest match;
//! the lexicon forbids any entity name that is a token prefix of another, so
//! the match is unique.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("no lexicon entry matches `{0}`")]
    UnknownObject(String),
    #[error("preposition `{0}` has no object")]
    DanglingPreposition(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexiconError {
    #[error("lexicon list `{0}` is empty")]
    EmptyList(&'static str),
    #[error("token `{0}` must be non-empty lowercase alphanumeric")]
    BadToken(String),
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
    #[error("entity `{0}` is a prefix of entity `{1}`")]
    PrefixConflict(String, String),
    #[error("entity `{0}` contains the preposition `{1}`")]
    PrepositionInEntity(String, String),
    #[error("`{0}` is both a verb and a preposition")]
    VerbIsPreposition(String),
    #[error("unknown template slot `{0}`")]
    UnknownSlot(String),
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize(raw: &str) -> Result<Vec<String>, ParseError> {
    let cleaned: String = raw
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(ParseError::EmptyInstruction);
    }
    Ok(tokens)
}

/// On-disk form of a lexicon: entity names are space-separated strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconSpec {
    pub verbs: Vec<String>,
    pub prepositions: Vec<String>,
    pub objects: Vec<String>,
    pub containers: Vec<String>,
    #[serde(default)]
    pub locations: Vec<String>,
}

impl Default for LexiconSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            verbs: s(&["pick", "place", "move", "push"]),
            prepositions: s(&["into", "near", "to", "from"]),
            objects: s(&[
                "red block",
                "blue block",
                "yellow block",
                "green block",
                "water bottle",
                "pepsi can",
                "brown chip bag",
                "plastic bottle",
            ]),
            containers: s(&["bottom drawer", "top drawer", "middle drawer"]),
            locations: s(&["the left corner", "the right corner"]),
        }
    }
}

/// Category of a lexicon entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    Object,
    Container,
    Location,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    verbs: Vec<String>,
    prepositions: Vec<String>,
    objects: Vec<Vec<String>>,
    containers: Vec<Vec<String>>,
    locations: Vec<Vec<String>>,
    vocabulary: Vec<String>,
    version_hash: String,
}

fn valid_token(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

impl Lexicon {
    pub fn new(spec: &LexiconSpec) -> Result<Self, LexiconError> {
        let split = |names: &[String]| -> Vec<Vec<String>> {
            names
                .iter()
                .map(|n| n.split_whitespace().map(str::to_owned).collect())
                .collect()
        };
        let verbs = spec.verbs.clone();
        let prepositions = spec.prepositions.clone();
        let objects = split(&spec.objects);
        let containers = split(&spec.containers);
        let locations = split(&spec.locations);

        for (name, list) in [("verbs", &verbs), ("prepositions", &prepositions)] {
            if list.is_empty() {
                return Err(LexiconError::EmptyList(name));
            }
            let mut seen = BTreeSet::new();
            for t in list {
                if !valid_token(t) {
                    return Err(LexiconError::BadToken(t.clone()));
                }
                if !seen.insert(t) {
                    return Err(LexiconError::Duplicate(t.clone()));
                }
            }
        }
        if objects.is_empty() {
            return Err(LexiconError::EmptyList("objects"));
        }
        if containers.is_empty() {
            return Err(LexiconError::EmptyList("containers"));
        }
        for v in &verbs {
            if prepositions.contains(v) {
                return Err(LexiconError::VerbIsPreposition(v.clone()));
            }
        }

        let entities: Vec<&Vec<String>> =
            objects.iter().chain(&containers).chain(&locations).collect();
        for (i, e) in entities.iter().enumerate() {
            let joined = e.join(" ");
            if e.is_empty() {
                return Err(LexiconError::BadToken(joined));
            }
            for t in e.iter() {
                if !valid_token(t) {
                    return Err(LexiconError::BadToken(t.clone()));
                }
                if prepositions.contains(t) {
                    return Err(LexiconError::PrepositionInEntity(joined.clone(), t.clone()));
                }
            }
            for (j, other) in entities.iter().enumerate() {
                if i == j {
                    continue;
                }
                if e == other {
                    return Err(LexiconError::Duplicate(joined));
                }
                if other.len() > e.len() && other[..e.len()] == e[..] {
                    return Err(LexiconError::PrefixConflict(joined, other.join(" ")));
                }
            }
        }

        let mut vocabulary: Vec<String> = Vec::new();
        let mut push = |t: &String| {
            if !vocabulary.contains(t) {
                vocabulary.push(t.clone());
            }
        };
        verbs.iter().for_each(&mut push);
        prepositions.iter().for_each(&mut push);
        entities.iter().flat_map(|e| e.iter()).for_each(&mut push);

        let mut hasher = Sha256::new();
        for (tag, list) in [
            ("verbs", vec![verbs.join(" ")]),
            ("prepositions", vec![prepositions.join(" ")]),
            ("objects", spec.objects.clone()),
            ("containers", spec.containers.clone()),
            ("locations", spec.locations.clone()),
        ] {
            hasher.update(tag.as_bytes());
            for item in list {
                hasher.update([0x1f]);
                hasher.update(item.as_bytes());
            }
            hasher.update([0x1e]);
        }
        let version_hash = hex::encode(&hasher.finalize()[..16]);

        Ok(Self {
            verbs,
            prepositions,
            objects,
            containers,
            locations,
            vocabulary,
            version_hash,
        })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn prepositions(&self) -> &[String] {
        &self.prepositions
    }

    pub fn objects(&self) -> &[Vec<String>] {
        &self.objects
    }

    pub fn containers(&self) -> &[Vec<String>] {
        &self.containers
    }

    pub fn locations(&self) -> &[Vec<String>] {
        &self.locations
    }

    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    /// Every distinct token, in a fixed order (verbs, prepositions, entity tokens).
    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.vocabulary.iter().position(|t| t == token)
    }

    pub fn is_verb(&self, t: &str) -> bool {
        self.verbs.iter().any(|v| v == t)
    }

    pub fn is_preposition(&self, t: &str) -> bool {
        self.prepositions.iter().any(|p| p == t)
    }

    fn entities(&self) -> impl Iterator<Item = (EntityKind, &Vec<String>)> {
        self.objects
            .iter()
            .map(|e| (EntityKind::Object, e))
            .chain(self.containers.iter().map(|e| (EntityKind::Container, e)))
            .chain(self.locations.iter().map(|e| (EntityKind::Location, e)))
    }

    /// Longest entity that is a prefix of `span`.
    pub fn longest_entity(&self, span: &[String]) -> Option<(EntityKind, usize)> {
        self.entities()
            .filter(|(_, e)| e.len() <= span.len() && span[..e.len()] == e[..])
            .map(|(k, e)| (k, e.len()))
            .max_by_key(|&(_, len)| len)
    }

    pub fn entity_kind(&self, name: &[String]) -> Option<EntityKind> {
        self.entities().find(|(_, e)| e[..] == name[..]).map(|(k, _)| k)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new(&LexiconSpec::default()).expect("default lexicon is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrimitiveKind {
    Action,
    Relation,
    GoalImage,
    GoalSketch,
}

impl PrimitiveKind {
    pub fn is_multimodal(self) -> bool {
        matches!(self, PrimitiveKind::GoalImage | PrimitiveKind::GoalSketch)
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PrimitiveKind::Action => "action",
            PrimitiveKind::Relation => "relation",
            PrimitiveKind::GoalImage => "goal_image",
            PrimitiveKind::GoalSketch => "goal_sketch",
        };
        f.write_str(s)
    }
}

/// One condition unit. Language primitives carry tokens, multimodal ones a
/// reference to an attached goal condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub tokens: Vec<String>,
    pub payload_ref: Option<String>,
}

impl Primitive {
    pub fn language(kind: PrimitiveKind, tokens: Vec<String>) -> Self {
        debug_assert!(!kind.is_multimodal() && !tokens.is_empty());
        Self {
            kind,
            tokens,
            payload_ref: None,
        }
    }

    pub fn goal(kind: PrimitiveKind, payload_ref: impl Into<String>) -> Self {
        debug_assert!(kind.is_multimodal());
        Self {
            kind,
            tokens: Vec::new(),
            payload_ref: Some(payload_ref.into()),
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Tokens after the head word (verb or preposition).
    pub fn argument(&self) -> &[String] {
        if self.tokens.is_empty() {
            &[]
        } else {
            &self.tokens[1..]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub raw: String,
    pub primitives: Vec<Primitive>,
    pub count_n: usize,
}

impl ParsedInstruction {
    pub fn action(&self) -> &Primitive {
        &self.primitives[0]
    }

    pub fn relations(&self) -> impl Iterator<Item = &Primitive> {
        self.primitives
            .iter()
            .filter(|p| p.kind == PrimitiveKind::Relation)
    }

    pub fn tokens(&self) -> Vec<String> {
        self.primitives
            .iter()
            .flat_map(|p| p.tokens.iter().cloned())
            .collect()
    }

    pub fn normalized(&self) -> String {
        self.tokens().join(" ")
    }

    /// All language tokens collapsed into a single action primitive. This is
    /// the conditioning used by the monolithic (no-parsing) baseline.
    pub fn pooled(&self) -> ParsedInstruction {
        ParsedInstruction {
            raw: self.raw.clone(),
            primitives: vec![Primitive::language(PrimitiveKind::Action, self.tokens())],
            count_n: 1,
        }
    }
}

pub fn parse(raw: &str, lex: &Lexicon) -> Result<ParsedInstruction, ParseError> {
    let tokens = normalize(raw)?;
    if !lex.is_verb(&tokens[0]) {
        return Err(ParseError::UnknownVerb(tokens[0].clone()));
    }

    // Chunk boundaries: the verb at 0 and every preposition.
    let mut heads = vec![0];
    heads.extend((1..tokens.len()).filter(|&i| lex.is_preposition(&tokens[i])));
    heads.push(tokens.len());

    let mut primitives = Vec::with_capacity(heads.len() - 1);
    for w in heads.windows(2) {
        let (start, end) = (w[0], w[1]);
        let span = &tokens[start + 1..end];
        let kind = if start == 0 {
            PrimitiveKind::Action
        } else {
            PrimitiveKind::Relation
        };
        if span.is_empty() {
            return Err(match kind {
                PrimitiveKind::Action => ParseError::UnknownObject(String::new()),
                _ => ParseError::DanglingPreposition(tokens[start].clone()),
            });
        }
        match lex.longest_entity(span) {
            Some((_, len)) if len == span.len() => {}
            _ => return Err(ParseError::UnknownObject(span.join(" "))),
        }
        primitives.push(Primitive::language(kind, tokens[start..end].to_vec()));
    }

    let count_n = primitives.len();
    Ok(ParsedInstruction {
        raw: raw.to_owned(),
        primitives,
        count_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Object,
    Container,
    Location,
}

enum TemplatePart {
    Word(String),
    Slot(Slot),
}

fn parse_template(template: &str) -> Result<Vec<TemplatePart>, LexiconError> {
    template
        .split_whitespace()
        .map(|w| match w {
            "{obj}" => Ok(TemplatePart::Slot(Slot::Object)),
            "{container}" => Ok(TemplatePart::Slot(Slot::Container)),
            "{location}" => Ok(TemplatePart::Slot(Slot::Location)),
            w if w.starts_with('{') => Err(LexiconError::UnknownSlot(w.to_owned())),
            w => Ok(TemplatePart::Word(w.to_lowercase())),
        })
        .collect()
}

/// Expand templates over the lexicon. Slots of the same category within one
/// template take distinct values. Each expansion is paired with the parse
/// implied by the template structure: every literal preposition opens a new
/// relation primitive.
pub fn enumerate_corpus(
    lex: &Lexicon,
    templates: &[&str],
) -> Result<Vec<(String, ParsedInstruction)>, LexiconError> {
    let mut out = Vec::new();
    for template in templates {
        let parts = parse_template(template)?;
        let slots: Vec<Slot> = parts
            .iter()
            .filter_map(|p| match p {
                TemplatePart::Slot(s) => Some(*s),
                _ => None,
            })
            .collect();
        let pool = |s: Slot| -> &[Vec<String>] {
            match s {
                Slot::Object => lex.objects(),
                Slot::Container => lex.containers(),
                Slot::Location => lex.locations(),
            }
        };

        let mut choice = vec![0usize; slots.len()];
        'outer: loop {
            let distinct = (0..slots.len()).all(|i| {
                (0..i).all(|j| slots[i] != slots[j] || choice[i] != choice[j])
            });
            if distinct && slots.iter().all(|&s| !pool(s).is_empty()) {
                let mut primitives: Vec<Primitive> = Vec::new();
                let mut current: Vec<String> = Vec::new();
                let mut current_kind = PrimitiveKind::Action;
                let mut slot_i = 0;
                for part in &parts {
                    let words: Vec<String> = match part {
                        TemplatePart::Word(w) => vec![w.clone()],
                        TemplatePart::Slot(s) => {
                            let e = pool(*s)[choice[slot_i]].clone();
                            slot_i += 1;
                            e
                        }
                    };
                    if let TemplatePart::Word(w) = part {
                        if lex.is_preposition(w) && !current.is_empty() {
                            primitives
                                .push(Primitive::language(current_kind, std::mem::take(&mut current)));
                            current_kind = PrimitiveKind::Relation;
                        }
                    }
                    current.extend(words);
                }
                if !current.is_empty() {
                    primitives.push(Primitive::language(current_kind, current));
                }
                let raw = primitives
                    .iter()
                    .map(Primitive::text)
                    .collect::<Vec<_>>()
                    .join(" ");
                let count_n = primitives.len();
                out.push((
                    raw.clone(),
                    ParsedInstruction {
                        raw,
                        primitives,
                        count_n,
                    },
                ));
            }
            // odometer increment, last slot fastest
            let mut k = slots.len();
            loop {
                if k == 0 {
                    break 'outer;
                }
                k -= 1;
                choice[k] += 1;
                if choice[k] < pool(slots[k]).len() {
                    break;
                }
                choice[k] = 0;
            }
        }
    }
    Ok(out)
}

/// Templates covering every registered success predicate.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "pick {obj}",
    "pick {obj} from {container}",
    "move {obj} near {obj}",
    "place {obj} into {container}",
    "push {obj} to {location}",
];
