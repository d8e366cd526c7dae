//! Prompt templates, stored as text files under `prompts/`.

pub const QA_EXTRACTION: &str = include_str!("../../prompts/qa_extraction.txt");
pub const AMBIGUITY: &str = include_str!("../../prompts/ambiguity.txt");
pub const QUESTION_ANSWERING: &str = include_str!("../../prompts/question_answering.txt");
pub const DUPLICATE: &str = include_str!("../../prompts/duplicate.txt");
pub const MCQA_CONVERSION: &str = include_str!("../../prompts/mcqa_conversion.txt");

/// Asked of the model under evaluation with the entity image.
pub const IDENTIFY_PROMPT: &str = "What is the object in the image? Answer with its name only.";

/// Substitutes placeholders in one left-to-right pass, so placeholder text
/// inside a substituted value is left alone.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|&(k, v)| rest.find(k).map(|i| (i, k, v)))
            .min_by_key(|&(i, k, _)| (i, std::cmp::Reverse(k.len())));
        match next {
            Some((i, k, v)) => {
                out.push_str(&rest[..i]);
                out.push_str(v);
                rest = &rest[i + k.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn qa_extraction(entity: &str, split: &str) -> String {
    render(
        QA_EXTRACTION,
        &[("<NEW ENTITY>", entity), ("<SPLIT FROM WIKIPEDIA>", split)],
    )
}

pub fn ambiguity(split: &str, question: &str) -> String {
    render(
        AMBIGUITY,
        &[("<SPLIT FROM WIKIPEDIA>", split), ("<GENERATED QUESTION>", question)],
    )
}

pub fn question_answering(question: &str) -> String {
    render(QUESTION_ANSWERING, &[("<GENERATED QUESTION>", question)])
}

pub fn duplicate(q1: &str, a1: &str, q2: &str, a2: &str) -> String {
    render(
        DUPLICATE,
        &[
            ("<GENERATED Q1>", q1),
            ("<GENERATED A1>", a1),
            ("<GENERATED Q2>", q2),
            ("<GENERATED A2>", a2),
        ],
    )
}

pub fn mcqa_conversion(text: &str, question: &str, answer: &str) -> String {
    render(
        MCQA_CONVERSION,
        &[("<TEXT>", text), ("<QUESTION>", question), ("<CORRECT ANSWER>", answer)],
    )
}
