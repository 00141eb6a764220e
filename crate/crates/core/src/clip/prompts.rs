use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_SLOT: &str = "[CLASS]";

/// Prompt strings rendered from a class vocabulary and a template holding
/// exactly one `[CLASS]` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBank {
    vocabulary: Vec<String>,
    template: String,
    rendered: Vec<String>,
}

pub fn check_template(template: &str) -> Result<()> {
    if template.matches(CLASS_SLOT).count() == 1 {
        Ok(())
    } else {
        Err(Error::PromptTemplate(template.to_string()))
    }
}

impl PromptBank {
    pub fn new<S: AsRef<str>>(vocabulary: &[S], template: &str) -> Result<Self> {
        check_template(template)?;
        if vocabulary.is_empty() {
            return Err(Error::Config("prompt vocabulary is empty".into()));
        }
        let vocabulary: Vec<String> = vocabulary.iter().map(|s| s.as_ref().to_string()).collect();
        let rendered: Vec<String> = vocabulary.iter().map(|c| template.replace(CLASS_SLOT, c)).collect();
        let mut seen = HashSet::new();
        for r in &rendered {
            if !seen.insert(r.as_str()) {
                return Err(Error::DuplicatePrompt(r.clone()));
            }
        }
        Ok(Self {
            vocabulary,
            template: template.to_string(),
            rendered,
        })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }

    pub fn len(&self) -> usize {
        self.rendered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_each_class() {
        let b = PromptBank::new(&["cat", "dog"], "A photo of a [CLASS]").unwrap();
        assert_eq!(b.rendered(), ["A photo of a cat", "A photo of a dog"]);
    }

    #[test]
    fn rejects_bad_templates_and_duplicates() {
        assert!(matches!(PromptBank::new(&["cat"], "a photo"), Err(Error::PromptTemplate(_))));
        assert!(matches!(
            PromptBank::new(&["cat"], "[CLASS] and [CLASS]"),
            Err(Error::PromptTemplate(_))
        ));
        assert!(matches!(
            PromptBank::new(&["cat", "cat"], "[CLASS]"),
            Err(Error::DuplicatePrompt(_))
        ));
        assert!(PromptBank::new::<&str>(&[], "[CLASS]").is_err());
    }
}
