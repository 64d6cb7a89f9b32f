use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    Adverb,
    Adjective,
}

impl PosTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "noun",
            PosTag::Verb => "verb",
            PosTag::Adverb => "adverb",
            PosTag::Adjective => "adjective",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noun" => Ok(PosTag::Noun),
            "verb" => Ok(PosTag::Verb),
            "adverb" => Ok(PosTag::Adverb),
            "adjective" => Ok(PosTag::Adjective),
            other => Err(Error::invalid(format!(
                "unknown part-of-speech tag {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymClass {
    pub id: usize,
    pub pos: PosTag,
    pub canonical: String,
    pub synonyms: Vec<String>,
}

impl SynonymClass {
    pub fn new(id: usize, pos: PosTag, canonical: &str, synonyms: &[&str]) -> Self {
        SynonymClass {
            id,
            pos,
            canonical: canonical.to_string(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Canonical word first, then synonyms in file order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

/// Word classes whose members are interchangeable without changing the
/// motion a caption describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymLexicon {
    classes: Vec<SynonymClass>,
    by_id: HashMap<usize, usize>,
    by_word: HashMap<String, usize>,
}

impl SynonymLexicon {
    pub fn new(classes: Vec<SynonymClass>) -> Result<Self> {
        let mut by_id = HashMap::new();
        let mut by_word = HashMap::new();
        for (slot, class) in classes.iter().enumerate() {
            if by_id.insert(class.id, slot).is_some() {
                return Err(Error::invalid(format!("duplicate class id {}", class.id)));
            }
            if !class.synonyms.iter().any(|s| *s != class.canonical) {
                return Err(Error::invalid(format!(
                    "class {} ({}) has no synonym distinct from its canonical word",
                    class.id, class.canonical
                )));
            }
            for word in class.words() {
                if word.is_empty()
                    || word
                        .chars()
                        .any(|c| c.is_whitespace() || c == '|' || c == ',')
                {
                    return Err(Error::invalid(format!("invalid lexicon word {word:?}")));
                }
                if let Some(prev) = by_word.insert(word.to_string(), class.id) {
                    if prev != class.id {
                        return Err(Error::invalid(format!(
                            "word {word:?} appears in classes {prev} and {}",
                            class.id
                        )));
                    }
                }
            }
        }
        Ok(SynonymLexicon {
            classes,
            by_id,
            by_word,
        })
    }

    pub fn classes(&self) -> &[SynonymClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Option<&SynonymClass> {
        self.by_id.get(&id).map(|&slot| &self.classes[slot])
    }

    pub fn class_of(&self, word: &str) -> Option<usize> {
        self.by_word.get(word).copied()
    }

    pub fn pos_of_class(&self, id: usize) -> Option<PosTag> {
        self.class(id).map(|c| c.pos)
    }

    /// All lexicon words, sorted.
    pub fn words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.by_word.keys().map(String::as_str).collect();
        w.sort_unstable();
        w
    }

    /// The built-in toy lexicon: subjects, locomotion verbs, directions,
    /// manners, and moods.
    pub fn toy() -> Self {
        use PosTag::*;
        let classes = vec![
            SynonymClass::new(0, Noun, "man", &["person", "human", "guy"]),
            SynonymClass::new(1, Noun, "woman", &["lady", "female", "gal"]),
            SynonymClass::new(2, Noun, "child", &["kid", "youngster", "toddler"]),
            SynonymClass::new(3, Verb, "walks", &["strolls", "ambles", "paces"]),
            SynonymClass::new(4, Verb, "runs", &["jogs", "sprints", "dashes"]),
            SynonymClass::new(5, Verb, "jumps", &["hops", "leaps", "bounds"]),
            SynonymClass::new(6, Verb, "crawls", &["creeps", "slithers"]),
            SynonymClass::new(7, Verb, "spins", &["twirls", "rotates", "pivots"]),
            SynonymClass::new(8, Verb, "kicks", &["punts", "boots"]),
            SynonymClass::new(9, Adverb, "forward", &["ahead", "onward", "forwards"]),
            SynonymClass::new(10, Adverb, "backward", &["backwards", "rearward", "back"]),
            SynonymClass::new(11, Adverb, "left", &["leftward", "leftwards"]),
            SynonymClass::new(12, Adverb, "right", &["rightward", "rightwards"]),
            SynonymClass::new(
                13,
                Adverb,
                "slowly",
                &["leisurely", "gradually", "unhurriedly"],
            ),
            SynonymClass::new(14, Adverb, "quickly", &["rapidly", "swiftly", "hastily"]),
            SynonymClass::new(15, Adverb, "carefully", &["cautiously", "gingerly"]),
            SynonymClass::new(16, Adjective, "happy", &["cheerful", "joyful", "glad"]),
            SynonymClass::new(17, Adjective, "angry", &["furious", "irate", "mad"]),
            SynonymClass::new(18, Adjective, "tired", &["weary", "exhausted", "drained"]),
        ];
        SynonymLexicon::new(classes).expect("built-in lexicon is valid")
    }

    /// One class per line: `class_id,pos_tag,canonical,syn1|syn2|...`.
    /// Lines starting with `#` are comments.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# class_id,pos_tag,canonical,synonyms")?;
        for c in &self.classes {
            writeln!(
                out,
                "{},{},{},{}",
                c.id,
                c.pos,
                c.canonical,
                c.synonyms.join("|")
            )?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut classes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    lineno,
                    format!("expected 4 comma-separated fields, got {}", fields.len()),
                ));
            }
            let id = fields[0]
                .parse::<usize>()
                .map_err(|e| Error::parse(lineno, format!("bad class id: {e}")))?;
            let pos = fields[1]
                .to_lowercase()
                .parse::<PosTag>()
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
            let canonical = fields[2].to_lowercase();
            let synonyms = fields[3]
                .split('|')
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect();
            classes.push(SynonymClass {
                id,
                pos,
                canonical,
                synonyms,
            });
            // Invariants are checked per line so errors carry a line number.
            SynonymLexicon::new(classes.clone())
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
        }
        SynonymLexicon::new(classes)
    }
}
