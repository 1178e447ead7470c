//! Guided and blind audit prompt rendering, retrieved-context formatting and
//! token-budget fitting.
//!
//! Templates live in `templates/<TEMPLATE_ID>.txt` and are compiled in. Each
//! template is versioned by id; the golden tests pin their checksums, so any
//! wording change must come with a new id.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chunker::Tokenizer;
use crate::vectorstore::RetrievalHit;

const GUIDED_V1: &str = include_str!("../templates/GUIDED_V1.txt");
const BLIND_V1: &str = include_str!("../templates/BLIND_V1.txt");

/// Placeholder names recognised in templates.
pub const PLACEHOLDERS: [&str; 4] = ["context", "vulnerability_type", "vulnerability_description", "question"];

/// The binary-answer instruction both templates carry.
pub const BINARY_INSTRUCTION: &str = "Reply with YES or NO only.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    GuidedV1,
    BlindV1,
}

impl TemplateId {
    pub fn source(self) -> &'static str {
        match self {
            TemplateId::GuidedV1 => GUIDED_V1,
            TemplateId::BlindV1 => BLIND_V1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::GuidedV1 => "GUIDED_V1",
            TemplateId::BlindV1 => "BLIND_V1",
        }
    }

    /// Chat role the rendered prompt is sent under. The whole prompt is one
    /// message.
    pub fn message_role(self) -> &'static str {
        "user"
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("required prompt field {0} is empty")]
    MissingField(&'static str),
    #[error("prompt needs at least {minimum} tokens without the audited code, budget is {budget}")]
    BudgetTooSmall { minimum: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedPromptInputs {
    pub context_hits: Vec<RetrievalHit>,
    pub question: String,
    pub vulnerability_type: String,
    pub vulnerability_description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindPromptInputs {
    pub context_hits: Vec<RetrievalHit>,
    pub question: String,
}

/// A rendered prompt. `question_start..question_end` is the byte span of the
/// audited code inside `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub token_count: usize,
    pub truncated: bool,
    pub template_id: TemplateId,
    pub question_start: usize,
    pub question_end: usize,
}

impl AssembledPrompt {
    pub fn question(&self) -> &str {
        &self.text[self.question_start..self.question_end]
    }

    /// Everything before the audited code: instructions and context.
    pub fn preamble(&self) -> &str {
        &self.text[..self.question_start]
    }

    pub fn epilogue(&self) -> &str {
        &self.text[self.question_end..]
    }

    pub fn checksum(&self) -> String {
        crate::digest::sha256_hex(&self.text)
    }
}

enum Segment<'t> {
    Literal(&'t str),
    Slot(&'t str),
}

/// Splits a template into literals and `{name}` slots for known names.
/// Braces not forming a known placeholder stay literal.
fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    let mut literal_start = 0;
    let mut offset = 0;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let slot = PLACEHOLDERS
            .iter()
            .find(|name| after.starts_with(*name) && after[name.len()..].starts_with('}'));
        match slot {
            Some(name) => {
                let abs = offset + open;
                out.push(Segment::Literal(&template[literal_start..abs]));
                out.push(Segment::Slot(name));
                let consumed = open + 1 + name.len() + 1;
                offset += consumed;
                literal_start = offset;
                rest = &rest[consumed..];
            }
            None => {
                offset += open + 1;
                rest = &rest[open + 1..];
            }
        }
    }
    out.push(Segment::Literal(&template[literal_start..]));
    out
}

/// Substitutes placeholders in one pass (inserted values are never
/// re-scanned) and records the question span.
fn render(template: TemplateId, fill: impl Fn(&str) -> String, tokenizer: &dyn Tokenizer) -> AssembledPrompt {
    let mut text = String::new();
    let (mut q_start, mut q_end) = (0, 0);
    for seg in segments(template.source()) {
        match seg {
            Segment::Literal(s) => text.push_str(s),
            Segment::Slot(name) => {
                let value = fill(name);
                if name == "question" {
                    q_start = text.len();
                    q_end = q_start + value.len();
                }
                text.push_str(&value);
            }
        }
    }
    AssembledPrompt {
        token_count: tokenizer.count(&text),
        text,
        truncated: false,
        template_id: template,
        question_start: q_start,
        question_end: q_end,
    }
}

/// Renders the rank delimiter line for one hit.
pub fn context_delimiter(rank: usize, hit: &RetrievalHit) -> String {
    format!("----- RETRIEVED #{rank} (id={}, score={:.4}) -----", hit.id, hit.score)
}

/// Concatenates hit texts in rank order (1-based), each block starting on a
/// new line with its delimiter. No hits yields "".
pub fn format_context(hits: &[RetrievalHit]) -> String {
    let mut out = String::new();
    for (i, hit) in hits.iter().enumerate() {
        out.push('\n');
        out.push_str(&context_delimiter(i + 1, hit));
        out.push('\n');
        out.push_str(hit.text());
    }
    out
}

/// One parsed delimiter line.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMarker {
    pub rank: usize,
    pub id: String,
    pub score: f64,
}

/// Recovers `(rank, id, score)` from every delimiter line in `text`.
pub fn parse_context_markers(text: &str) -> Vec<ContextMarker> {
    text.lines()
        .filter_map(|line| {
            let body = line.strip_prefix("----- RETRIEVED #")?.strip_suffix(") -----")?;
            let (rank, rest) = body.split_once(" (id=")?;
            let (id, score) = rest.rsplit_once(", score=")?;
            Some(ContextMarker { rank: rank.parse().ok()?, id: id.to_string(), score: score.parse().ok()? })
        })
        .collect()
}

pub fn render_guided(inputs: &GuidedPromptInputs, tokenizer: &dyn Tokenizer) -> Result<AssembledPrompt, PromptError> {
    if inputs.vulnerability_type.trim().is_empty() {
        return Err(PromptError::MissingField("vulnerability_type"));
    }
    if inputs.vulnerability_description.trim().is_empty() {
        return Err(PromptError::MissingField("vulnerability_description"));
    }
    let context = format_context(&inputs.context_hits);
    Ok(render(
        TemplateId::GuidedV1,
        |name| match name {
            "context" => context.clone(),
            "vulnerability_type" => inputs.vulnerability_type.clone(),
            "vulnerability_description" => inputs.vulnerability_description.clone(),
            _ => inputs.question.clone(),
        },
        tokenizer,
    ))
}

pub fn render_blind(inputs: &BlindPromptInputs, tokenizer: &dyn Tokenizer) -> Result<AssembledPrompt, PromptError> {
    if inputs.question.is_empty() {
        return Err(PromptError::MissingField("question"));
    }
    let context = format_context(&inputs.context_hits);
    Ok(render(
        TemplateId::BlindV1,
        |name| match name {
            "context" => context.clone(),
            "question" => inputs.question.clone(),
            _ => String::new(),
        },
        tokenizer,
    ))
}

/// True if `text` contains `{name}` for any known placeholder.
pub fn has_placeholder_residue(text: &str) -> bool {
    PLACEHOLDERS.iter().any(|name| text.contains(&format!("{{{name}}}")))
}

fn with_question(prompt: &AssembledPrompt, question: &str, tokenizer: &dyn Tokenizer) -> AssembledPrompt {
    let text = format!("{}{}{}", prompt.preamble(), question, prompt.epilogue());
    AssembledPrompt {
        token_count: tokenizer.count(&text),
        text,
        truncated: true,
        template_id: prompt.template_id,
        question_start: prompt.question_start,
        question_end: prompt.question_start + question.len(),
    }
}

/// Fits `prompt` into `budget_tokens` by cutting tokens off the end of the
/// audited code. Instructions and retrieved context are never touched.
pub fn fit_to_budget(
    prompt: &AssembledPrompt,
    budget_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledPrompt, PromptError> {
    if prompt.token_count <= budget_tokens {
        return Ok(prompt.clone());
    }
    let skeleton = with_question(prompt, "", tokenizer);
    if skeleton.token_count > budget_tokens {
        return Err(PromptError::BudgetTooSmall { minimum: skeleton.token_count, budget: budget_tokens });
    }
    let q_tokens = tokenizer.encode(prompt.question());
    let mut keep = q_tokens.len().min(budget_tokens - skeleton.token_count);
    loop {
        let question = tokenizer.decode_ids(&q_tokens[..keep]).expect("ids from the same tokenizer");
        let candidate = with_question(prompt, &question, tokenizer);
        if candidate.token_count <= budget_tokens {
            return Ok(candidate);
        }
        // merges across the seam can shift the count by a few tokens
        let excess = candidate.token_count - budget_tokens;
        keep = keep.saturating_sub(excess.max(1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::CharMergeTokenizer;
    use serde_json::json;

    fn hit(id: &str, score: f64, text: &str) -> RetrievalHit {
        let mut metadata = serde_json::Map::new();
        metadata.insert("text".into(), json!(text));
        RetrievalHit { id: id.into(), score, metadata }
    }

    fn guided(question: &str, hits: Vec<RetrievalHit>) -> GuidedPromptInputs {
        GuidedPromptInputs {
            context_hits: hits,
            question: question.into(),
            vulnerability_type: "Reentrancy".into(),
            vulnerability_description: "An external call re-enters before state is updated.".into(),
        }
    }

    #[test]
    fn templates_parse_into_expected_slots() {
        let slots = |t: TemplateId| -> Vec<&str> {
            segments(t.source())
                .into_iter()
                .filter_map(|s| if let Segment::Slot(n) = s { Some(n) } else { None })
                .collect()
        };
        assert_eq!(
            slots(TemplateId::GuidedV1),
            ["context", "vulnerability_type", "vulnerability_type", "vulnerability_description", "question"]
        );
        assert_eq!(slots(TemplateId::BlindV1), ["context", "question"]);
    }

    #[test]
    fn format_context_empty_and_ranked() {
        assert_eq!(format_context(&[]), "");
        let hits: Vec<_> = (0..5).map(|i| hit(&format!("c{i}.sol:0"), 0.9 - i as f64 * 0.1, "code")).collect();
        let ctx = format_context(&hits);
        let markers = parse_context_markers(&ctx);
        assert_eq!(markers.len(), 5);
        assert_eq!(markers.iter().map(|m| m.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
        assert_eq!(markers[1].id, "c1.sol:0");
        assert!((markers[1].score - 0.8).abs() < 5e-5);
    }

    #[test]
    fn guided_contains_instruction_and_type() {
        let t = CharMergeTokenizer::new();
        let p = render_guided(&guided("contract A {}", vec![]), &t).unwrap();
        assert!(p.text.contains(BINARY_INSTRUCTION));
        assert!(p.text.contains("vulnerable to 'Reentrancy' attacks?"));
        assert!(p.text.contains("RELEVANT_VULNERABILITIES: \n\nWith this knowledge"));
        assert_eq!(p.question(), "contract A {}");
        assert!(p.text.ends_with("USER QUESTION: contract A {}"));
        assert_eq!(p.token_count, t.count(&p.text));
        assert!(!has_placeholder_residue(&p.text));
    }

    #[test]
    fn guided_missing_fields() {
        let t = CharMergeTokenizer::new();
        let mut inputs = guided("x", vec![]);
        inputs.vulnerability_description = " ".into();
        assert_eq!(render_guided(&inputs, &t), Err(PromptError::MissingField("vulnerability_description")));
        inputs.vulnerability_type.clear();
        assert_eq!(render_guided(&inputs, &t), Err(PromptError::MissingField("vulnerability_type")));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = CharMergeTokenizer::new();
        let p = render_guided(&guided("uses {context} literally", vec![hit("a:0", 1.0, "{question}")]), &t).unwrap();
        assert!(p.text.contains("uses {context} literally"));
        assert_eq!(p.question(), "uses {context} literally");
    }

    #[test]
    fn blind_has_no_type_sentences() {
        let t = CharMergeTokenizer::new();
        let p = render_blind(&BlindPromptInputs { context_hits: vec![], question: "contract B {}".into() }, &t).unwrap();
        assert!(p.text.contains("Is the following smart contract vulnerable to any attack? Reply with YES or NO only."));
        assert!(!p.text.contains('\''), "no quoted vulnerability type");
        assert!(!has_placeholder_residue(&p.text));
        assert_eq!(p.template_id, TemplateId::BlindV1);
        assert_eq!(
            render_blind(&BlindPromptInputs { context_hits: vec![], question: String::new() }, &t),
            Err(PromptError::MissingField("question"))
        );
    }

    #[test]
    fn fit_within_budget_is_identity() {
        let t = CharMergeTokenizer::new();
        let p = render_guided(&guided("contract A {}", vec![]), &t).unwrap();
        let fitted = fit_to_budget(&p, p.token_count + 500, &t).unwrap();
        assert_eq!(fitted, p);
        assert!(!fitted.truncated);
    }

    #[test]
    fn fit_truncates_question_tail() {
        let t = CharMergeTokenizer::new();
        let question = "x".repeat(1000);
        let p = render_guided(&guided(&question, vec![hit("a:0", 0.5, "ctx body")]), &t).unwrap();
        let budget = p.token_count - 100;
        let fitted = fit_to_budget(&p, budget, &t).unwrap();
        assert!(fitted.token_count <= budget);
        assert!(fitted.truncated);
        assert!(question.starts_with(fitted.question()));
        assert_eq!(fitted.question().len(), 900);
        assert_eq!(fitted.preamble(), p.preamble());
        assert_eq!(fit_to_budget(&fitted, budget, &t).unwrap(), fitted);
    }

    #[test]
    fn budget_too_small() {
        let t = CharMergeTokenizer::new();
        let p = render_guided(&guided("contract A {}", vec![]), &t).unwrap();
        assert!(matches!(fit_to_budget(&p, 10, &t), Err(PromptError::BudgetTooSmall { budget: 10, .. })));
    }
}
