//! Prompt templates for the five generation tasks plus the solver prompt.
//!
//! Template texts are fixed data: where a published source text exists the
//! template must stay byte-identical to it, including its literal slot
//! markers, so goldens can assert fidelity. Substitution replaces markers
//! in a single left-to-right pass and never rescans substituted values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    Img2Tikz,
    Img2Plot,
    Tikz2Plot,
    K12Process,
    QuestionSynth,
    Solve,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::Img2Tikz,
        TemplateId::Img2Plot,
        TemplateId::Tikz2Plot,
        TemplateId::K12Process,
        TemplateId::QuestionSynth,
        TemplateId::Solve,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateId::Img2Tikz => "IMG2TIKZ",
            TemplateId::Img2Plot => "IMG2PLOT",
            TemplateId::Tikz2Plot => "TIKZ2PLOT",
            TemplateId::K12Process => "K12_PROCESS",
            TemplateId::QuestionSynth => "QUESTION_SYNTH",
            TemplateId::Solve => "SOLVE",
        }
    }

    pub fn parse(s: &str) -> Option<TemplateId> {
        TemplateId::ALL.iter().copied().find(|t| t.name() == s)
    }
}

/// A named slot and the literal marker it replaces in the template text.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub name: &'static str,
    pub marker: &'static str,
}

/// A prompt template: optional system text, user text with slot markers.
#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub system_text: &'static str,
    pub user_text: &'static str,
    pub slots: &'static [Slot],
}

const IMG2TIKZ_USER: &str = "Please generate the corresponding TikZ code that accurately represents the visual elements in the image. TikZ is a powerful tool for creating vector graphics within LaTeX documents. Your generated code should be precise, well-structured, and should recreate the image as faithfully as possible.\n<image>";

const IMG2PLOT_USER: &str = "Please provide the Python code needed to reproduce this image.\n<image>";

const TIKZ2PLOT_SYSTEM: &str =
    "You are an expert in both LaTeX (specifically TiKZ) and Python (specifically Matplotlib).";

const TIKZ2PLOT_USER: &str = "Translate the provided TiKZ code into Python code using appropriate plotting libraries, such as Matplotlib. Pay close attention to the following requirements:\n\n1. **Avoid Overlapping**: Ensure that points, labels and text elements have different positions to avoid any overlap, enhancing readability.\n\n2. **LaTeX Formatting**: Accurately interpret and format any LaTeX equations or mathematical expressions to ensure they render correctly in the image.\n\n3. **Executable Code**: Ensure that the Python code is complete and can be executed directly without errors.\n\nHere's the TiKZ code:\n\n```latex\n[TiKZ Code]\n```\n\nMake sure to wrap your resulting Python code in the following format:\n\n```python\n[your python code here]\n```";

const K12_PROCESS_SYSTEM: &str = "You are an expert in mathematical problem-solving, LaTeX formatting, and structured data extraction. Please present all results in English and well-formatted LaTeX, converting HTML to LaTeX as needed. You will be provided with a JSON object containing the following fields: [\"question\", \"option_a\", \"option_b\", \"option_c\", \"option_d\", \"option_e\", \"answer1\", \"answer2\", \"parse\"].";

const K12_PROCESS_USER: &str = "Please process the provided JSON object by following these steps:\n\n1. **Translation:**\n   - Translate the math problem and any accompanying options into English.\n   - If the problem includes multiple-choice options, format them as a bulleted list.\n   - If no options are available, return an empty option list (`[]`).\n   - For problems with multiple sub-questions, separate each sub-question as an individual item in another list.\n\n2. **Step-by-Step Solution:**\n   - Provide a detailed, step-by-step solution to the problem, referencing \"answer1\", \"answer2\", and \"parse\".\n   - Adhere to the solution process provided by \"answer1\", \"answer2\", and \"parse\", as they are correct.\n\n3. **Short Answer:**\n   - Specify the answer(s) in a list format, where each item is a single word or phrase.\n   - Answer(s) should adhere to that provided by \"answer1\", \"answer2\", and \"parse\".\n   - For multiple-choice questions, return one of A, B, C, D, or E.\n   - For proof-based questions, return \"proven\".\n   - For problems with sub-questions, provide the answer for each sub-question in the same order as the sub-question list.\n\n**Input JSON:**\n\n```json\n[Raw Json Data]\n```";

const QUESTION_SYNTH_USER: &str = "Please create a **math reasoning question** for a K-12 audience based on the image generated by the following {} code. The question must adhere to these criteria:\n\n1. **Image Engaging**: The question must utilize visible patterns, shapes, numbers, or other elements present in the image to engage reasoning skills.\n\n2. **Single Question**: Write a single, standalone question. The question should be concise and self-contained, without any subparts. You do not need to provide an answer to the question.\n\n3. **Self-Sufficiency**: The recipient will only see the image, not the code. Include any essential details from the code (e.g., coordinates, hidden axes, specific data points, or labels) that are necessary for solving the question but may not be visible in the image.\n\n4. **Solvability**: Ensure the question can be solved using only the visible information in the image and the question text.\n\nBelow is the {} code that generates the image:\n\n```python/tikz\n[Image Code]\n```\n\n### Question:";

const SOLVE_USER: &str = "You will be given a math question about an image. The image is generated by the following [Dialect] code. Use the code to understand the image precisely; the person asking the question sees only the image.\n\n```\n[Image Code]\n```\n\nQuestion: [Question]\n\nSolve the question step by step, and end your response with the final answer on its own line in the form \\boxed{answer}.";

const TEMPLATES: [PromptTemplate; 6] = [
    PromptTemplate {
        template_id: TemplateId::Img2Tikz,
        system_text: "",
        user_text: IMG2TIKZ_USER,
        slots: &[],
    },
    PromptTemplate {
        template_id: TemplateId::Img2Plot,
        system_text: "",
        user_text: IMG2PLOT_USER,
        slots: &[],
    },
    PromptTemplate {
        template_id: TemplateId::Tikz2Plot,
        system_text: TIKZ2PLOT_SYSTEM,
        user_text: TIKZ2PLOT_USER,
        slots: &[Slot {
            name: "code",
            marker: "[TiKZ Code]",
        }],
    },
    PromptTemplate {
        template_id: TemplateId::K12Process,
        system_text: K12_PROCESS_SYSTEM,
        user_text: K12_PROCESS_USER,
        slots: &[Slot {
            name: "json",
            marker: "[Raw Json Data]",
        }],
    },
    PromptTemplate {
        template_id: TemplateId::QuestionSynth,
        system_text: "",
        user_text: QUESTION_SYNTH_USER,
        slots: &[
            Slot {
                name: "dialect_name",
                marker: "{}",
            },
            Slot {
                name: "code",
                marker: "[Image Code]",
            },
        ],
    },
    PromptTemplate {
        template_id: TemplateId::Solve,
        system_text: "",
        user_text: SOLVE_USER,
        slots: &[
            Slot {
                name: "dialect_name",
                marker: "[Dialect]",
            },
            Slot {
                name: "code",
                marker: "[Image Code]",
            },
            Slot {
                name: "question",
                marker: "[Question]",
            },
        ],
    },
];

pub fn template(id: TemplateId) -> &'static PromptTemplate {
    TEMPLATES
        .iter()
        .find(|t| t.template_id == id)
        .expect("all template ids are registered")
}

/// Fixed lead-in line of the training response for each dialect.
pub fn response_lead_in(dialect: super::Dialect) -> &'static str {
    match dialect {
        super::Dialect::Tikz => "The image can be generated using the following TikZ code:",
        super::Dialect::PlotScript => "The image can be generated using the following Python code:",
    }
}

/// Substitute every slot marker in `text`, left to right, without
/// rescanning substituted values.
fn substitute(
    text: &str,
    slots: &[Slot],
    values: &BTreeMap<String, String>,
    id: TemplateId,
) -> Result<String, GateError> {
    for slot in slots {
        if !values.contains_key(slot.name) {
            return Err(GateError::MissingSlot {
                template: id.name().to_string(),
                slot: slot.name.to_string(),
            });
        }
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        // Earliest marker occurrence in what remains of the template.
        let next = slots
            .iter()
            .filter_map(|s| rest.find(s.marker).map(|pos| (pos, s)))
            .min_by_key(|(pos, _)| *pos);
        match next {
            Some((pos, slot)) => {
                out.push_str(&rest[..pos]);
                out.push_str(&values[slot.name]);
                rest = &rest[pos + slot.marker.len()..];
            }
            None => {
                out.push_str(rest);
                return Ok(out);
            }
        }
    }
}

/// Rendered prompt, split into the message roles it will be sent as.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

impl RenderedPrompt {
    /// Single-text view: system and user joined by a blank line.
    pub fn combined(&self) -> String {
        match &self.system {
            Some(sys) => format!("{sys}\n\n{}", self.user),
            None => self.user.clone(),
        }
    }
}

/// Render a template with the given slot values.
pub fn render_parts(
    id: TemplateId,
    slots: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, GateError> {
    let t = template(id);
    let system = if t.system_text.is_empty() {
        None
    } else {
        Some(substitute(t.system_text, t.slots, slots, id)?)
    };
    let user = substitute(t.user_text, t.slots, slots, id)?;
    Ok(RenderedPrompt { system, user })
}

/// Render a template to a single text (system joined to user).
pub fn render_prompt(id: TemplateId, slots: &BTreeMap<String, String>) -> Result<String, GateError> {
    Ok(render_parts(id, slots)?.combined())
}
