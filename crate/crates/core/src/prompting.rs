//! Prompt rendering.
//!
//! A prompt is the instruction, one block per prefix exemplar, and the query
//! block, joined by the template separator. An empty instruction contributes
//! no block. Placeholders are `{field}` and `{label}`; `{{` and `}}` are
//! literal braces. Rendering is byte-exact: no escaping, no whitespace
//! normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Exemplar};
use crate::seeding;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unresolvable placeholder {{{placeholder}}} in {context}")]
    Unresolvable { placeholder: String, context: String },
    #[error("{format} must reference {{label}} exactly once (found {found})")]
    LabelCount { format: &'static str, found: usize },
    #[error("query_format must not reference {{label}}")]
    LabelInQuery,
    #[error("unbalanced brace in {format} at byte {at}")]
    UnbalancedBrace { format: &'static str, at: usize },
    #[error("label {label} outside class range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown template preset {0:?}")]
    UnknownPreset(String),
}

fn default_separator() -> String {
    "\n\n".into()
}

fn default_target_prefix() -> String {
    " ".into()
}

/// Template strings as they appear in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub instruction: String,
    pub exemplar_format: String,
    pub query_format: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Prepended to a class verbalization to form the scored continuation.
    #[serde(default = "default_target_prefix")]
    pub target_prefix: String,
}

impl PromptTemplate {
    /// Default for single-sentence classification (`{sentence}` field).
    pub fn single_text() -> Self {
        Self {
            instruction: String::new(),
            exemplar_format: "{sentence}\nAnswer: {label}".into(),
            query_format: "{sentence}\nAnswer:".into(),
            separator: default_separator(),
            target_prefix: default_target_prefix(),
        }
    }

    /// Default for sentence-pair tasks (`{premise}` / `{hypothesis}` fields).
    pub fn text_pair() -> Self {
        Self {
            instruction: String::new(),
            exemplar_format: "{premise}\nQuestion: {hypothesis}\nAnswer: {label}".into(),
            query_format: "{premise}\nQuestion: {hypothesis}\nAnswer:".into(),
            separator: default_separator(),
            target_prefix: default_target_prefix(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, PromptError> {
        match name {
            "single_text" | "single-text" => Ok(Self::single_text()),
            "text_pair" | "text-pair" => Ok(Self::text_pair()),
            other => Err(PromptError::UnknownPreset(other.to_string())),
        }
    }

    pub fn digest(&self) -> String {
        seeding::json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
    Label,
}

fn parse_format(format: &'static str, src: &str) -> Result<Vec<Segment>, PromptError> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                lit.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                lit.push('}');
                i += 2;
            }
            b'{' => {
                let end = src[i + 1..]
                    .find('}')
                    .ok_or(PromptError::UnbalancedBrace { format, at: i })?;
                let name = &src[i + 1..i + 1 + end];
                if name.is_empty() || name.contains('{') {
                    return Err(PromptError::UnbalancedBrace { format, at: i });
                }
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(if name == "label" {
                    Segment::Label
                } else {
                    Segment::Field(name.to_string())
                });
                i += end + 2;
            }
            b'}' => return Err(PromptError::UnbalancedBrace { format, at: i }),
            _ => {
                // Advance by a whole UTF-8 character.
                let ch = src[i..].chars().next().expect("in bounds");
                lit.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    Ok(out)
}

/// A parsed, validated template ready for rendering.
#[derive(Debug, Clone)]
pub struct Template {
    source: PromptTemplate,
    exemplar: Vec<Segment>,
    query: Vec<Segment>,
    digest: String,
}

impl Template {
    pub fn new(source: PromptTemplate) -> Result<Self, PromptError> {
        let exemplar = parse_format("exemplar_format", &source.exemplar_format)?;
        let query = parse_format("query_format", &source.query_format)?;
        let labels = exemplar.iter().filter(|s| **s == Segment::Label).count();
        if labels != 1 {
            return Err(PromptError::LabelCount {
                format: "exemplar_format",
                found: labels,
            });
        }
        if query.contains(&Segment::Label) {
            return Err(PromptError::LabelInQuery);
        }
        let digest = source.digest();
        Ok(Self {
            source,
            exemplar,
            query,
            digest,
        })
    }

    pub fn source(&self) -> &PromptTemplate {
        &self.source
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Check every placeholder names a field the dataset declares.
    pub fn check_fields(&self, fields: &[String]) -> Result<(), PromptError> {
        for (segments, context) in [(&self.exemplar, "exemplar_format"), (&self.query, "query_format")] {
            for seg in segments {
                if let Segment::Field(name) = seg {
                    if !fields.iter().any(|f| f == name) {
                        return Err(PromptError::Unresolvable {
                            placeholder: name.clone(),
                            context: context.into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// The scored continuation for each class, in class order.
    pub fn continuations(&self, classes: &[String]) -> Vec<String> {
        classes
            .iter()
            .map(|c| format!("{}{}", self.source.target_prefix, c))
            .collect()
    }

    fn fill(
        &self,
        out: &mut String,
        segments: &[Segment],
        ex: &Exemplar,
        label: Option<&str>,
    ) -> Result<(), PromptError> {
        for seg in segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Field(name) => {
                    let value = ex.fields.get(name).ok_or_else(|| PromptError::Unresolvable {
                        placeholder: name.clone(),
                        context: format!("exemplar {}", ex.id),
                    })?;
                    out.push_str(value);
                }
                Segment::Label => out.push_str(label.expect("label segments only in exemplar blocks")),
            }
        }
        Ok(())
    }

    /// Render a single exemplar block.
    pub fn exemplar_block(&self, classes: &[String], ex: &Exemplar) -> Result<String, PromptError> {
        let mut out = String::new();
        self.fill(&mut out, &self.exemplar, ex, Some(verbalize_label(classes, ex.label)?))?;
        Ok(out)
    }
}

/// A fully rendered prompt with the identities it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub prefix_ids: Vec<String>,
    pub query_id: String,
}

/// Render `instruction ⊕ sep ⊕ block(e1) ⊕ … ⊕ sep ⊕ query`.
pub fn render(
    template: &Template,
    classes: &[String],
    prefix: &[&Exemplar],
    query: &Exemplar,
) -> Result<RenderedPrompt, PromptError> {
    let sep = &template.source.separator;
    let mut text = String::new();
    let mut first = true;
    let mut start_block = |text: &mut String| {
        if !first {
            text.push_str(sep);
        }
        first = false;
    };
    if !template.source.instruction.is_empty() {
        start_block(&mut text);
        text.push_str(&template.source.instruction);
    }
    for ex in prefix {
        start_block(&mut text);
        let label = verbalize_label(classes, ex.label)?;
        template.fill(&mut text, &template.exemplar, ex, Some(label))?;
    }
    start_block(&mut text);
    template.fill(&mut text, &template.query, query, None)?;
    Ok(RenderedPrompt {
        text,
        prefix_ids: prefix.iter().map(|e| e.id.clone()).collect(),
        query_id: query.id.clone(),
    })
}

fn verbalize_label(classes: &[String], label: usize) -> Result<&str, PromptError> {
    classes
        .get(label)
        .map(String::as_str)
        .ok_or(PromptError::LabelOutOfRange {
            label,
            classes: classes.len(),
        })
}

/// The verbalization of a class index.
pub fn verbalize(dataset: &Dataset, label: usize) -> Result<&str, PromptError> {
    verbalize_label(dataset.classes(), label)
}
