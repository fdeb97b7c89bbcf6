//! Prompt templates and their rendering.
//!
//! Templates live under `prompts/` as versioned resource files. Placeholders
//! are `{NAME}` tokens; substitution is single-pass so inserted values are
//! never re-scanned for placeholders.

use std::collections::HashMap;

use crate::image::ImageRef;

pub const DECOMPOSE_TEMPLATE: &str = include_str!("../prompts/decompose.v1.txt");
pub const EXPAND_TEMPLATE: &str = include_str!("../prompts/expand.v1.txt");
pub const VISUAL_TEMPLATE: &str = include_str!("../prompts/visual.v1.txt");
pub const ENTAIL_TEMPLATE: &str = include_str!("../prompts/entail.v1.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../prompts/judge.v1.txt");
pub const JUDGE_IMAGE_TEMPLATE: &str = include_str!("../prompts/judge_image.v1.txt");

/// Marker that stands for the image in multimodal templates.
pub const IMAGE_MARKER: &str = "<image>";

const TWO_ENTITY_SCHEMA: &str = "1. Subject 2. Object";

/// A prompt ready to be sent: the verbatim text plus an optional image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub image: Option<ImageRef>,
}

impl RenderedPrompt {
    pub fn text(text: String) -> Self {
        Self { text, image: None }
    }

    /// Splits the text around the `<image> {reference}` span so a wire
    /// client can put the image where the template places it.
    pub fn segments(&self) -> (String, String) {
        let Some(image) = &self.image else {
            return (String::new(), self.text.clone());
        };
        let span = format!("{IMAGE_MARKER} {}", image.reference());
        match self.text.find(&span) {
            Some(at) => (
                self.text[..at].trim_end().to_owned(),
                self.text[at + span.len()..].trim_start().to_owned(),
            ),
            None => (String::new(), self.text.clone()),
        }
    }
}

/// Replaces `{NAME}` placeholders from `values`. Unknown placeholders are
/// left untouched.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let map: HashMap<&str, &str> = values.iter().copied().collect();
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if map.contains_key(&after[..close]) => {
                out.push_str(map[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Output schema line for an `m`-way decomposition. `m = 2` keeps the
/// template's own "1. Subject 2. Object".
pub fn decomposition_schema(m: usize) -> String {
    if m == 2 {
        return TWO_ENTITY_SCHEMA.to_owned();
    }
    (1..=m)
        .map(|i| format!("{i}. xxx"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn decompose_prompt(caption: &str, m: usize) -> RenderedPrompt {
    let m_text = m.to_string();
    let text = render(DECOMPOSE_TEMPLATE, &[("M", &m_text), ("C", caption)]);
    let text = if m == 2 {
        text
    } else {
        text.replacen(TWO_ENTITY_SCHEMA, &decomposition_schema(m), 1)
    };
    RenderedPrompt::text(text)
}

pub fn expand_prompt(node: &str, caption: &str, s: usize) -> RenderedPrompt {
    let s_text = s.to_string();
    RenderedPrompt::text(render(
        EXPAND_TEMPLATE,
        &[("S", &s_text), ("n^l_i", node), ("C", caption)],
    ))
}

pub fn visual_prompt(image: &ImageRef, statement: &str) -> RenderedPrompt {
    RenderedPrompt {
        text: render(
            VISUAL_TEMPLATE,
            &[("I", image.reference()), ("C", statement)],
        ),
        image: Some(image.clone()),
    }
}

pub fn entail_prompt(premise: &str, hypothesis: &str) -> RenderedPrompt {
    RenderedPrompt::text(render(ENTAIL_TEMPLATE, &[("C1", premise), ("C2", hypothesis)]))
}

pub fn judge_prompt(statement: &str, conclusion: &str, image: Option<&ImageRef>) -> RenderedPrompt {
    match image {
        Some(img) => RenderedPrompt {
            text: render(
                JUDGE_IMAGE_TEMPLATE,
                &[("I", img.reference()), ("P", statement), ("H", conclusion)],
            ),
            image: Some(img.clone()),
        },
        None => RenderedPrompt::text(render(
            JUDGE_TEMPLATE,
            &[("P", statement), ("H", conclusion)],
        )),
    }
}

/// System line prepended when a list reply was malformed.
pub fn corrective_line(n: usize) -> String {
    format!(
        "Your previous reply could not be parsed. Reply only with a numbered list of {n} item(s) in the form 1. xxx 2. xxx."
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_single_pass() {
        let out = render("a {C} b {M}", &[("C", "{M}"), ("M", "2")]);
        assert_eq!(out, "a {M} b 2");
    }

    #[test]
    fn unknown_placeholders_survive() {
        assert_eq!(render("x {Q} {C}", &[("C", "y")]), "x {Q} y");
        assert_eq!(render("open { only", &[]), "open { only");
    }

    #[test]
    fn schema_generalizes_beyond_two() {
        assert_eq!(decomposition_schema(2), "1. Subject 2. Object");
        assert_eq!(decomposition_schema(3), "1. xxx 2. xxx 3. xxx");
        let p = decompose_prompt("a cat", 1);
        assert!(p.text.contains("into 1 smaller"));
        assert!(p.text.contains("\n1. xxx\n"));
    }

    #[test]
    fn visual_segments_split_at_image() {
        let img = ImageRef::new("https://x.test/a.png").unwrap();
        let p = visual_prompt(&img, "a bird");
        let (before, after) = p.segments();
        assert_eq!(before, "");
        assert_eq!(after, "Does this figure show: a bird? Please answer Yes or No.");
    }
}
