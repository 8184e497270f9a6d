use std::path::Path;

use super::{BoundingBox, GcotError, VqaRecord};
use crate::llm::ChatPrompt;

/// Line separating the system message from the user template.
pub const SECTION_SEPARATOR: &str = "----";

const PLACEHOLDERS: [&str; 4] = ["{captions}", "{objects}", "{question}", "{answer}"];

const DEFAULT_TEMPLATE: &str = include_str!("../../templates/gcot_prompt.txt");

/// The GCoT prompt: a fixed system message and a user template with
/// `{captions}`, `{objects}`, `{question}` and `{answer}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    system: String,
    user: String,
}

/// A rendered prompt plus any non-fatal warnings raised while rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptText {
    pub prompt: ChatPrompt,
    pub warnings: Vec<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, GcotError> {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut in_user = false;
        for line in text.lines() {
            if !in_user && line.trim_end() == SECTION_SEPARATOR {
                in_user = true;
            } else if in_user {
                user.push(line);
            } else {
                system.push(line);
            }
        }
        if !in_user {
            return Err(GcotError::Template(format!(
                "missing {SECTION_SEPARATOR:?} line between system and user sections"
            )));
        }
        let user = user.join("\n");
        let missing: Vec<&str> = PLACEHOLDERS.iter().copied().filter(|p| !user.contains(p)).collect();
        if !missing.is_empty() {
            return Err(GcotError::Template(format!("missing placeholders {}", missing.join(", "))));
        }
        Ok(Self {
            system: system.join("\n").trim_end().to_owned(),
            user: user.trim_end().to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GcotError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GcotError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn render(&self, r: &VqaRecord) -> PromptText {
        let mut warnings = Vec::new();
        if r.objects.is_empty() {
            warnings.push(format!("{}: no objects; Objects block is empty", r.image_id));
        }
        for obj in &r.objects {
            if !obj.bbox.within_unit_square() {
                warnings.push(format!(
                    "{}: box for {:?} lies outside [0, 1]: {}",
                    r.image_id,
                    obj.label,
                    obj.bbox.render()
                ));
            }
        }

        let captions = r.captions.join("\n");
        let objects = r
            .objects
            .iter()
            .map(|o| format!("{}: {}", o.label, o.bbox.render()))
            .collect::<Vec<_>>()
            .join(",\n");

        // Single pass so placeholder-like text inside values is left alone.
        let mut user = String::with_capacity(self.user.len() + captions.len() + objects.len());
        let mut rest = self.user.as_str();
        while let Some(open) = rest.find('{') {
            user.push_str(&rest[..open]);
            let tail = &rest[open..];
            let value = match PLACEHOLDERS.iter().find(|p| tail.starts_with(**p)) {
                Some(&"{captions}") => Some(captions.as_str()),
                Some(&"{objects}") => Some(objects.as_str()),
                Some(&"{question}") => Some(r.question.as_str()),
                Some(&"{answer}") => Some(r.answer.as_str()),
                _ => None,
            };
            match value {
                Some(v) => {
                    user.push_str(v);
                    let len = tail.find('}').unwrap() + 1;
                    rest = &tail[len..];
                }
                None => {
                    user.push('{');
                    rest = &tail[1..];
                }
            }
        }
        user.push_str(rest);

        PromptText {
            prompt: ChatPrompt::new(self.system.clone(), user),
            warnings,
        }
    }
}

/// Renders a coordinate with at least one fractional digit.
pub(crate) fn fmt_coord(v: f64) -> String {
    let s = format!("{v}");
    if s.contains(['.', 'e', 'E', 'N', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

impl BoundingBox {
    /// `[x1, y1, x2, y2]`
    pub fn render(&self) -> String {
        format!(
            "[{}, {}, {}, {}]",
            fmt_coord(self.x1),
            fmt_coord(self.y1),
            fmt_coord(self.x2),
            fmt_coord(self.y2)
        )
    }
}

pub fn build_prompt(r: &VqaRecord, template: &PromptTemplate) -> Result<PromptText, GcotError> {
    r.validate()?;
    Ok(template.render(r))
}
