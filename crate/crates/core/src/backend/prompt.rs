//! Prompt templates with single-brace placeholders.
//!
//! `{field}` is replaced by the example's text field of that name. Literal
//! braces are written doubled: `{{` renders as `{` and `}}` as `}`.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("placeholder `{{{0}}}` names no field of the example")]
    MissingField(String),
    #[error("unterminated placeholder starting at byte {0}")]
    Unterminated(usize),
    #[error("unmatched `}}` at byte {0}")]
    StrayClose(usize),
    #[error("empty placeholder at byte {0}")]
    EmptyPlaceholder(usize),
}

enum Piece<'a> {
    Literal(&'a str),
    Field(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let bytes = template.as_bytes();
    let mut pieces = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                pieces.push(Piece::Literal(&template[literal_start..=i]));
                i += 2;
                literal_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                pieces.push(Piece::Literal(&template[literal_start..=i]));
                i += 2;
                literal_start = i;
            }
            b'{' => {
                pieces.push(Piece::Literal(&template[literal_start..i]));
                let close = template[i + 1..]
                    .find(['{', '}'])
                    .map(|off| i + 1 + off)
                    .filter(|&j| bytes[j] == b'}')
                    .ok_or(TemplateError::Unterminated(i))?;
                let name = &template[i + 1..close];
                if name.is_empty() {
                    return Err(TemplateError::EmptyPlaceholder(i));
                }
                pieces.push(Piece::Field(name));
                i = close + 1;
                literal_start = i;
            }
            b'}' => return Err(TemplateError::StrayClose(i)),
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&template[literal_start..]));
    Ok(pieces)
}

/// Field names referenced by a template, in order of first appearance.
pub fn placeholders(template: &str) -> Result<Vec<String>, TemplateError> {
    let mut names: Vec<String> = Vec::new();
    for piece in parse(template)? {
        if let Piece::Field(name) = piece {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
        }
    }
    Ok(names)
}

/// Substitutes every placeholder with the named field, verbatim.
pub fn render_prompt(
    template: &str,
    fields: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    for piece in parse(template)? {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Field(name) => out.push_str(
                fields
                    .get(name)
                    .ok_or_else(|| TemplateError::MissingField(name.to_string()))?,
            ),
        }
    }
    Ok(out)
}
