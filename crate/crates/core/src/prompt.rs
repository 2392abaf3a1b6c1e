//! Prompt rendering shared by every backend call.
//!
//! ```text
//! Question: {query}
//! Hint: {hint}
//! ```
//!
//! The `Hint:` line is left out entirely when there is no hint.

const QUESTION: &str = "Question: ";
const HINT: &str = "\nHint: ";

pub fn render_prompt(question: &str, hint: Option<&str>) -> String {
    match hint {
        Some(h) if !h.is_empty() => format!("{QUESTION}{question}{HINT}{h}"),
        _ => format!("{QUESTION}{question}"),
    }
}

/// Inverse of [`render_prompt`]. Text without the `Question:` header is taken
/// as a bare question.
pub fn parse_prompt(rendered: &str) -> (&str, Option<&str>) {
    let body = rendered.strip_prefix(QUESTION).unwrap_or(rendered);
    match body.find(HINT) {
        Some(i) => (&body[..i], Some(&body[i + HINT.len()..])),
        None => (body, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse() {
        let p = render_prompt("What is 2+2?", Some("Add the"));
        assert_eq!(p, "Question: What is 2+2?\nHint: Add the");
        assert_eq!(parse_prompt(&p), ("What is 2+2?", Some("Add the")));
        let bare = render_prompt("What is 2+2?", None);
        assert_eq!(bare, "Question: What is 2+2?");
        assert_eq!(parse_prompt(&bare), ("What is 2+2?", None));
        assert_eq!(render_prompt("q", Some("")), "Question: q");
        assert_eq!(parse_prompt("raw text"), ("raw text", None));
    }
}
