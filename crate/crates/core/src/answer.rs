//! Multiple-choice answer extraction from free-form model output.
//!
//! Every method funnels its final text through [`extract_choice_with_options`],
//! so one rule cascade decides what a model "answered". The cascade, first hit
//! wins:
//!
//! 1. a standalone letter `A`-`D` immediately followed by `)`
//! 2. a standalone `(X)`
//! 3. `answer is X` / `answer: X` (case-insensitive)
//! 4. the whole reply equals, or uniquely matches, one option string
//!
//! Letters are matched case-insensitively and never inside a word.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChoiceLetter {
    A,
    B,
    C,
    D,
}

impl ChoiceLetter {
    pub const ALL: [ChoiceLetter; 4] = [ChoiceLetter::A, ChoiceLetter::B, ChoiceLetter::C, ChoiceLetter::D];

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(ChoiceLetter::A),
            'B' => Some(ChoiceLetter::B),
            'C' => Some(ChoiceLetter::C),
            'D' => Some(ChoiceLetter::D),
            _ => None,
        }
    }
}

impl fmt::Display for ChoiceLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

static EXTRACTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of extraction calls made in this process.
pub fn extraction_calls() -> u64 {
    EXTRACTIONS.load(Ordering::Relaxed)
}

/// Letter-only cascade (rules 1-3). `None` means Unparsed.
pub fn extract_choice(text: &str) -> Option<ChoiceLetter> {
    extract_choice_with_options::<&str>(text, &[])
}

/// Full cascade; `options` enables rule 4 when non-empty.
pub fn extract_choice_with_options<S: AsRef<str>>(text: &str, options: &[S]) -> Option<ChoiceLetter> {
    EXTRACTIONS.fetch_add(1, Ordering::Relaxed);
    let chars: Vec<char> = text.chars().collect();
    letter_before_paren(&chars)
        .or_else(|| parenthesized_letter(&chars))
        .or_else(|| answer_phrase(&chars))
        .or_else(|| option_text_match(text, options))
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn standalone_start(chars: &[char], i: usize) -> bool {
    i == 0 || !is_word(chars[i - 1])
}

fn letter_before_paren(chars: &[char]) -> Option<ChoiceLetter> {
    (0..chars.len().saturating_sub(1)).find_map(|i| {
        let letter = ChoiceLetter::from_char(chars[i])?;
        (chars[i + 1] == ')' && standalone_start(chars, i)).then_some(letter)
    })
}

fn parenthesized_letter(chars: &[char]) -> Option<ChoiceLetter> {
    chars.windows(3).find_map(|w| match w {
        ['(', c, ')'] => ChoiceLetter::from_char(*c),
        _ => None,
    })
}

fn lower(chars: &[char]) -> Vec<char> {
    chars.iter().map(|c| c.to_lowercase().next().unwrap_or(*c)).collect()
}

fn answer_phrase(chars: &[char]) -> Option<ChoiceLetter> {
    let low = lower(chars);
    let needle: Vec<char> = "answer".chars().collect();
    let mut start = 0;
    while start + needle.len() <= low.len() {
        let Some(off) = low[start..].windows(needle.len()).position(|w| w == needle.as_slice()) else {
            break;
        };
        let at = start + off;
        start = at + 1;
        if !standalone_start(&low, at) {
            continue;
        }
        let mut j = at + needle.len();
        // whitespace and markdown emphasis, as in "**Answer:** B"
        let skip_ws = |j: &mut usize| {
            while *j < low.len() && (low[*j].is_whitespace() || low[*j] == '*') {
                *j += 1;
            }
        };
        skip_ws(&mut j);
        if j < low.len() && low[j] == ':' {
            j += 1;
        } else if low[j..].starts_with(&['i', 's']) {
            j += 2;
        } else {
            continue;
        }
        skip_ws(&mut j);
        while j < low.len() && matches!(low[j], '(' | '*' | '"' | '\'' | '[') {
            j += 1;
        }
        let Some(letter) = low.get(j).and_then(|c| ChoiceLetter::from_char(*c)) else {
            continue;
        };
        // "the answer is a knife": a lowercase article, not option A
        let article = chars[j] == 'a'
            && low.get(j + 1).is_some_and(|c| c.is_whitespace())
            && low[j + 1..].iter().find(|c| !c.is_whitespace()).is_some_and(|c| c.is_alphabetic());
        if low.get(j + 1).map_or(true, |c| !is_word(*c)) && !article {
            return Some(letter);
        }
    }
    None
}

fn normalize(s: &str) -> String {
    let mut out = String::new();
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    while out.ends_with(['.', '!']) {
        out.pop();
    }
    out
}

fn option_text_match<S: AsRef<str>>(text: &str, options: &[S]) -> Option<ChoiceLetter> {
    if options.is_empty() {
        return None;
    }
    let reply = normalize(text);
    if reply.is_empty() {
        return None;
    }
    let opts: Vec<String> = options.iter().map(|o| normalize(o.as_ref())).collect();
    let unique = |pred: &dyn Fn(&str) -> bool| {
        let mut hits = opts.iter().enumerate().filter(|(_, o)| !o.is_empty() && pred(o));
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => ChoiceLetter::from_index(i),
            _ => None,
        }
    };
    unique(&|o| o == reply)
        .or_else(|| unique(&|o| reply.contains(o)))
        .or_else(|| unique(&|o| o.contains(reply.as_str())))
}
