use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SemanticError;
use crate::dataio::EntityKind;

/// Text with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: EntityKind,
    pub text: String,
}

const USER_TEMPLATE: &str = "Given a user's profile and the earliest items they interacted with, \
infer their preferences. Profile: {profile}. Earliest interactions: {history}. \
Analyze the user's tastes considering {aspects}.";

const ITEM_TEMPLATE: &str = "Given an item's attributes and some of the users who interacted with it, \
describe the item. Attributes: {profile}. Interacted by: {history}. \
Analyze the item considering {aspects}.";

impl PromptTemplate {
    pub fn new(kind: EntityKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }

    /// Profile + earliest-interaction + analysis-aspect template for `kind`.
    pub fn default_for(kind: EntityKind) -> Self {
        match kind {
            EntityKind::User => Self::new(kind, USER_TEMPLATE),
            EntityKind::Item => Self::new(kind, ITEM_TEMPLATE),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (name, _) in scan(&self.text) {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_owned());
            }
        }
        out
    }

    /// Substitutes every placeholder and collapses whitespace runs.
    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<String, SemanticError> {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut last = 0;
        for (name, span) in scan(&self.text) {
            let value = values
                .get(name)
                .ok_or_else(|| SemanticError::Template(name.to_owned()))?;
            out.push_str(&self.text[last..span.0]);
            out.push_str(value);
            last = span.1;
        }
        out.push_str(&self.text[last..]);
        Ok(out.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

/// `(name, (start, end))` of every `{identifier}` occurrence.
fn scan(text: &str) -> Vec<(&str, (usize, usize))> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i;
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' && j > start + 1 {
                out.push((&text[start + 1..j], (start, j + 1)));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

pub const DEFAULT_ASPECTS_USER: &str = "genres, themes, style and mood";
pub const DEFAULT_ASPECTS_ITEM: &str = "genre, audience, themes and style";

/// Renders `tpl` for one entity.
///
/// Every feature field is available as its own placeholder, `{profile}` joins
/// all fields, `{history}` lists the interaction snippet and `{aspects}`
/// defaults to a per-kind list unless a feature named `aspects` exists.
pub fn render_prompt(
    tpl: &PromptTemplate,
    features: &[(String, String)],
    history: &[String],
) -> Result<String, SemanticError> {
    let mut values: BTreeMap<String, String> = features.iter().cloned().collect();
    let profile = if features.is_empty() {
        "unknown".to_owned()
    } else {
        features
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join("; ")
    };
    values.entry("profile".into()).or_insert(profile);
    let hist = if history.is_empty() {
        "none".to_owned()
    } else {
        history.join(", ")
    };
    values.entry("history".into()).or_insert(hist);
    let aspects = match tpl.kind {
        EntityKind::User => DEFAULT_ASPECTS_USER,
        EntityKind::Item => DEFAULT_ASPECTS_ITEM,
    };
    values.entry("aspects".into()).or_insert_with(|| aspects.to_owned());
    tpl.render(&values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn simple_substitution() {
        let t = PromptTemplate::new(EntityKind::User, "User likes {genre}");
        assert_eq!(t.render(&map(&[("genre", "jazz")])).unwrap(), "User likes jazz");
    }

    #[test]
    fn missing_value_names_placeholder() {
        let t = PromptTemplate::new(EntityKind::User, "User likes {genre}");
        match t.render(&BTreeMap::new()) {
            Err(SemanticError::Template(name)) => assert_eq!(name, "genre"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whitespace_is_normalized_and_braces_tolerated() {
        let t = PromptTemplate::new(EntityKind::Item, "  a\n\n{x}   b { not } {}\t");
        assert_eq!(t.render(&map(&[("x", "1")])).unwrap(), "a 1 b { not } {}");
        assert_eq!(t.placeholders(), vec!["x"]);
    }

    #[test]
    fn movielens_style_user_template_contains_every_field() {
        let t = PromptTemplate::new(
            EntityKind::User,
            "The user is {gender}, aged {age}, works as {occupation}, lives in {zip} and joined {joined}. \
             They watched {history}. Profile summary: {profile}. Consider {aspects}.",
        );
        let features: Vec<(String, String)> = [
            ("gender", "female"),
            ("age", "25-34"),
            ("occupation", "artist"),
            ("zip", "55455"),
            ("joined", "2000"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let history = vec!["Toy Story (1995)".to_owned(), "Heat (1995)".to_owned()];
        let text = render_prompt(&t, &features, &history).unwrap();
        for (_, v) in &features {
            assert!(text.contains(v.as_str()), "{v} missing from {text}");
        }
        assert!(text.contains("Toy Story (1995), Heat (1995)"));
    }

    #[test]
    fn default_templates_render_without_features() {
        for kind in [EntityKind::User, EntityKind::Item] {
            let text = render_prompt(&PromptTemplate::default_for(kind), &[], &[]).unwrap();
            assert!(!text.contains('{'));
        }
    }
}
