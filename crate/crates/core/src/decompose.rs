//! Splitting a caption into morphological entities with the LLM reasoner.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{generate_checked, ModelBackend, Query, Request};
use crate::error::{Error, Result};
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphologicalEntity {
    pub text: String,
    /// 1-based position in the decomposition.
    pub index: usize,
    pub source_caption: String,
}

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)\d+\.\s").expect("valid regex"))
}

fn leading_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+\.\s+").expect("valid regex"))
}

fn clean_item(raw: &str) -> String {
    let mut s = raw.trim();
    while let Some(m) = leading_marker().find(s) {
        s = s[m.end()..].trim_start();
    }
    s.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | ';' | ':' | '!'))
        .to_owned()
}

/// Extracts the items of a "1. foo 2. bar" list, inline or one per line.
/// Returns at most `expected_n` non-empty items in list order.
pub fn parse_numbered_list(text: &str, expected_n: usize) -> Result<Vec<String>> {
    if expected_n == 0 {
        return Err(Error::InvalidInput("expected_n must be at least 1".into()));
    }
    let starts: Vec<(usize, usize)> = marker().find_iter(text).map(|m| (m.start(), m.end())).collect();
    let mut items = Vec::new();
    for (i, &(_, content_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(text.len(), |&(s, _)| s);
        let item = clean_item(&text[content_start..end]);
        if !item.is_empty() {
            items.push(item);
        }
        if items.len() == expected_n {
            break;
        }
    }
    if items.is_empty() {
        return Err(Error::Parse(format!(
            "no numbered items in {:?}",
            truncate_chars(text, 80)
        )));
    }
    Ok(items)
}

fn truncate_chars(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn validate(caption: &str, items: &[String], m: usize) -> std::result::Result<(), String> {
    if items.len() != m {
        return Err(format!("expected {m} entities, got {}", items.len()));
    }
    for (i, item) in items.iter().enumerate() {
        if item == caption {
            return Err(format!("entity {} repeats the caption", i + 1));
        }
        if items[..i].contains(item) {
            return Err(format!("entity `{item}` listed twice"));
        }
    }
    Ok(())
}

/// Decomposes `caption` into exactly `m` entities. A malformed reply is
/// retried once with a corrective system line.
pub fn decompose_caption(
    backend: &dyn ModelBackend,
    caption: &str,
    m: usize,
) -> Result<Vec<MorphologicalEntity>> {
    if caption.trim().is_empty() {
        return Err(Error::InvalidInput("caption must be non-empty".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    let base = Request::new(
        Query::Decompose {
            caption: caption.to_owned(),
            m,
        },
        prompts::decompose_prompt(caption, m),
    );
    let mut reason = String::new();
    for attempt in 0..2 {
        let request = if attempt == 0 {
            base.clone()
        } else {
            base.clone().with_system(prompts::corrective_line(m))
        };
        let reply = generate_checked(backend, &request)?;
        let outcome = parse_numbered_list(&reply, usize::MAX)
            .map_err(|e| e.to_string())
            .and_then(|items| validate(caption, &items, m).map(|()| items));
        match outcome {
            Ok(items) => {
                return Ok(items
                    .into_iter()
                    .enumerate()
                    .map(|(i, text)| MorphologicalEntity {
                        text,
                        index: i + 1,
                        source_caption: caption.to_owned(),
                    })
                    .collect())
            }
            Err(r) => {
                log::debug!("decomposition attempt {} for {caption:?}: {r}", attempt + 1);
                reason = r;
            }
        }
    }
    Err(Error::DecompositionFailed {
        caption: caption.to_owned(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, MockEntry, MockTable};
    use crate::backends::Role;
    use proptest::prelude::*;

    #[test]
    fn inline_list() {
        assert_eq!(parse_numbered_list("1. a dog 2. a cat", 2).unwrap(), ["a dog", "a cat"]);
    }

    #[test]
    fn truncates_to_expected() {
        assert_eq!(
            parse_numbered_list("1. a dog\n2. a cat\n3. a bat", 2).unwrap(),
            ["a dog", "a cat"]
        );
    }

    #[test]
    fn no_list_is_an_error() {
        assert!(matches!(parse_numbered_list("no list here", 2), Err(Error::Parse(_))));
    }

    #[test]
    fn trims_punctuation_and_drops_empties() {
        let got = parse_numbered_list("Sure!\n1. a red ball.\n2.  \n3. grass;", 5).unwrap();
        assert_eq!(got, ["a red ball", "grass"]);
        assert_eq!(parse_numbered_list("1. 1.5 liters of water", 1).unwrap(), ["1.5 liters of water"]);
    }

    #[test]
    fn paper_example_decomposition() {
        let table = MockTable::strict().with_entry(MockEntry::decomposition(
            "bird eats snake",
            "1. bird eats 2. snake gets eaten",
        ));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        let e = decompose_caption(&llm, "bird eats snake", 2).unwrap();
        let texts: Vec<_> = e.iter().map(|x| x.text.as_str()).collect();
        assert_eq!(texts, ["bird eats", "snake gets eaten"]);
        assert_eq!(e[1].index, 2);
        assert_eq!(e[0].source_caption, "bird eats snake");
    }

    #[test]
    fn wrong_count_fails_after_one_reprompt() {
        let table = MockTable::strict()
            .with_entry(MockEntry::decomposition("c d", "1. a 2. b 3. c"));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        assert!(matches!(
            decompose_caption(&llm, "c d", 2),
            Err(Error::DecompositionFailed { .. })
        ));
        assert_eq!(llm.calls(), 2);
    }

    #[test]
    fn reprompt_can_recover() {
        let caption = "a man walks";
        // Table entries cannot tell attempts apart; answer by system line.
        struct Flaky(std::sync::atomic::AtomicUsize);
        impl ModelBackend for Flaky {
            fn identity(&self) -> String {
                "flaky".into()
            }
            fn yes_no(&self, _: &Request) -> Result<crate::backends::YesNoLogits> {
                unreachable!()
            }
            fn generate(&self, r: &Request) -> Result<String> {
                self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(if r.system.is_some() { "1. a man 2. walking" } else { "I think..." }.into())
            }
        }
        let b =Flaky(Default::default());
        let e = decompose_caption(&b, caption, 2).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(b.0.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn entity_equal_to_caption_rejected() {
        let table = MockTable::strict().with_entry(MockEntry::decomposition("x y", "1. x y 2. x"));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        assert!(decompose_caption(&llm, "x y", 2).is_err());
    }

    #[test]
    fn empty_caption_rejected() {
        let llm = MockBackend::new(MockTable::cooperative(), Role::Llm).unwrap();
        assert!(matches!(decompose_caption(&llm, " ", 2), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn cooperative_decomposition_has_m_entities(m in 1usize..=8, caption in "[a-z]{1,8}( [a-z]{1,8}){0,4}") {
            let llm = MockBackend::new(MockTable::cooperative(), Role::Llm).unwrap();
            let e = decompose_caption(&llm, &caption, m).unwrap();
            prop_assert_eq!(e.len(), m);
            let again = decompose_caption(&llm, &caption, m).unwrap();
            prop_assert_eq!(e, again);
        }

        #[test]
        fn items_never_start_with_marker(text in "([0-9]{1,2}\\.? ?[a-z ]{0,6}\n?){1,6}") {
            if let Ok(items) = parse_numbered_list(&text, 10) {
                for item in items {
                    prop_assert!(!leading_marker().is_match(&item), "{:?}", item);
                    prop_assert!(!item.is_empty());
                }
            }
        }
    }
}
