//! Synthetic paired-view grammar: English line descriptions and the regular
//! expressions they denote.
//!
//! Both views are rendered from one [`Pattern`]; [`parse_description`] reads a
//! description back into the pattern so the pairing can be checked without
//! trusting the generator.

use rand::seq::SliceRandom;
use rand::Rng;

pub const WORDS: [&str; 8] = ["cat", "dog", "sun", "red", "box", "top", "ink", "map"];
pub const LETTERS: &[u8] = b"bcdfghjkmnpqrstvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Atom {
    Digit,
    Letter,
    Capital,
    Vowel,
    Any,
    Char(u8),
    Word(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quant {
    One,
    Exactly(u8),
    AtLeast(u8),
    Plus,
    Star,
    Optional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Start,
    End,
    Contains,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub anchor: Anchor,
    pub items: Vec<(Atom, Quant)>,
}

/// One way of phrasing the grammar's pieces.
struct Phrasing {
    anchors: [&'static str; 3],
    digit: &'static str,
    letter: &'static str,
    capital: &'static str,
    vowel: &'static str,
    any: &'static str,
    char_prefix: &'static str,
    word_prefix: &'static str,
    exactly: &'static str,
    at_least: &'static str,
    plus: &'static str,
    star: &'static str,
    optional: &'static str,
    joiner: &'static str,
}

const PHRASINGS: [Phrasing; 3] = [
    Phrasing {
        anchors: ["starts with ", "ends with ", "contains "],
        digit: "a digit",
        letter: "a letter",
        capital: "a capital",
        vowel: "a vowel",
        any: "any char",
        char_prefix: "the letter ",
        word_prefix: "the word ",
        exactly: " times",
        at_least: " or more times",
        plus: " at least once",
        star: " any number of times",
        optional: " maybe",
        joiner: ", then ",
    },
    Phrasing {
        anchors: ["lines beginning with ", "lines ending in ", "lines having "],
        digit: "a number",
        letter: "a lowercase letter",
        capital: "an uppercase letter",
        vowel: "a vowel letter",
        any: "any character",
        char_prefix: "letter ",
        word_prefix: "word ",
        exactly: "x",
        at_least: "x or more",
        plus: " repeated",
        star: " zero or more times",
        optional: " optionally",
        joiner: " followed by ",
    },
    Phrasing {
        anchors: ["begins with ", "finishes with ", "includes "],
        digit: "one digit",
        letter: "one letter",
        capital: "one capital",
        vowel: "one vowel",
        any: "one char",
        char_prefix: "char ",
        word_prefix: "string ",
        exactly: " copies",
        at_least: "+ copies",
        plus: " one or more",
        star: " zero or more",
        optional: " if any",
        joiner: " and then ",
    },
];

pub fn num_phrasings() -> usize {
    PHRASINGS.len()
}

impl Pattern {
    /// Draw a pattern with between 1 and `depth` items.
    pub fn sample<R: Rng>(rng: &mut R, depth: usize) -> Pattern {
        let anchor = *[Anchor::Start, Anchor::End, Anchor::Contains].choose(rng).expect("non-empty");
        let n_items = rng.gen_range(1..=depth.max(1));
        let items = (0..n_items)
            .map(|_| {
                let atom = match rng.gen_range(0..7) {
                    0 => Atom::Digit,
                    1 => Atom::Letter,
                    2 => Atom::Capital,
                    3 => Atom::Vowel,
                    4 => Atom::Any,
                    5 => Atom::Char(*LETTERS.choose(rng).expect("non-empty")),
                    _ => Atom::Word(rng.gen_range(0..WORDS.len())),
                };
                let quant = match rng.gen_range(0..8) {
                    0 | 1 | 2 => Quant::One,
                    3 => Quant::Exactly(rng.gen_range(2..=5)),
                    4 => Quant::AtLeast(rng.gen_range(2..=5)),
                    5 => Quant::Plus,
                    6 => Quant::Star,
                    _ => Quant::Optional,
                };
                (atom, quant)
            })
            .collect();
        Pattern { anchor, items }
    }

    /// English description in phrasing `style` (0 is the canonical one).
    pub fn describe(&self, style: usize) -> String {
        let ph = &PHRASINGS[style % PHRASINGS.len()];
        let mut out = String::from(match self.anchor {
            Anchor::Start => ph.anchors[0],
            Anchor::End => ph.anchors[1],
            Anchor::Contains => ph.anchors[2],
        });
        for (i, (atom, quant)) in self.items.iter().enumerate() {
            if i > 0 {
                out.push_str(ph.joiner);
            }
            match atom {
                Atom::Digit => out.push_str(ph.digit),
                Atom::Letter => out.push_str(ph.letter),
                Atom::Capital => out.push_str(ph.capital),
                Atom::Vowel => out.push_str(ph.vowel),
                Atom::Any => out.push_str(ph.any),
                Atom::Char(c) => {
                    out.push_str(ph.char_prefix);
                    out.push(*c as char);
                }
                Atom::Word(w) => {
                    out.push_str(ph.word_prefix);
                    out.push_str(WORDS[*w]);
                }
            }
            match quant {
                Quant::One => {}
                Quant::Exactly(n) => out.push_str(&format!(" {n}{}", ph.exactly)),
                Quant::AtLeast(n) => out.push_str(&format!(" {n}{}", ph.at_least)),
                Quant::Plus => out.push_str(ph.plus),
                Quant::Star => out.push_str(ph.star),
                Quant::Optional => out.push_str(ph.optional),
            }
        }
        out
    }

    /// The regular expression this pattern denotes.
    pub fn compile(&self) -> String {
        let mut out = String::new();
        if self.anchor == Anchor::Start {
            out.push('^');
        }
        for (atom, quant) in &self.items {
            let body = match atom {
                Atom::Digit => "[0-9]".to_string(),
                Atom::Letter => "[a-z]".to_string(),
                Atom::Capital => "[A-Z]".to_string(),
                Atom::Vowel => "[aeiou]".to_string(),
                Atom::Any => ".".to_string(),
                Atom::Char(c) => (*c as char).to_string(),
                Atom::Word(w) if *quant == Quant::One => WORDS[*w].to_string(),
                Atom::Word(w) => format!("({})", WORDS[*w]),
            };
            out.push_str(&body);
            match quant {
                Quant::One => {}
                Quant::Exactly(n) => out.push_str(&format!("{{{n}}}")),
                Quant::AtLeast(n) => out.push_str(&format!("{{{n},}}")),
                Quant::Plus => out.push('+'),
                Quant::Star => out.push('*'),
                Quant::Optional => out.push('?'),
            }
        }
        if self.anchor == Anchor::End {
            out.push('$');
        }
        out
    }
}

/// Recover the pattern from a description in any phrasing.
pub fn parse_description(text: &str) -> Option<Pattern> {
    PHRASINGS.iter().find_map(|ph| parse_with(ph, text))
}

fn parse_with(ph: &Phrasing, text: &str) -> Option<Pattern> {
    let (anchor, rest) = [Anchor::Start, Anchor::End, Anchor::Contains]
        .into_iter()
        .zip(ph.anchors)
        .find_map(|(a, prefix)| text.strip_prefix(prefix).map(|r| (a, r)))?;
    let items = rest
        .split(ph.joiner)
        .map(|item| parse_item(ph, item))
        .collect::<Option<Vec<_>>>()?;
    Some(Pattern { anchor, items })
}

fn parse_item(ph: &Phrasing, item: &str) -> Option<(Atom, Quant)> {
    let (atom, rest) = parse_atom(ph, item)?;
    let quant = if rest.is_empty() {
        Quant::One
    } else if rest == ph.plus {
        Quant::Plus
    } else if rest == ph.star {
        Quant::Star
    } else if rest == ph.optional {
        Quant::Optional
    } else {
        let counted = rest.strip_prefix(' ')?;
        let digit = counted.as_bytes().first().filter(|b| b.is_ascii_digit())?;
        let n = digit - b'0';
        let suffix = &counted[1..];
        if suffix == ph.exactly {
            Quant::Exactly(n)
        } else if suffix == ph.at_least {
            Quant::AtLeast(n)
        } else {
            return None;
        }
    };
    Some((atom, quant))
}

fn parse_atom<'a>(ph: &Phrasing, item: &'a str) -> Option<(Atom, &'a str)> {
    // Longest fixed phrases first so "a vowel letter" is not read as "a vowel".
    let mut fixed = [
        (ph.digit, Atom::Digit),
        (ph.letter, Atom::Letter),
        (ph.capital, Atom::Capital),
        (ph.vowel, Atom::Vowel),
        (ph.any, Atom::Any),
    ];
    fixed.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
    for (phrase, atom) in fixed {
        if let Some(rest) = item.strip_prefix(phrase) {
            if rest.is_empty() || rest.starts_with(' ') {
                return Some((atom, rest));
            }
        }
    }
    if let Some(rest) = item.strip_prefix(ph.word_prefix) {
        for (i, w) in WORDS.iter().enumerate() {
            if let Some(r) = rest.strip_prefix(w) {
                return Some((Atom::Word(i), r));
            }
        }
    }
    let rest = item.strip_prefix(ph.char_prefix)?;
    let c = *rest.as_bytes().first()?;
    LETTERS.contains(&c).then(|| (Atom::Char(c), &rest[1..]))
}
