/// Identifies the normalization below; recorded in every manifest so corpora
/// tokenized differently are never compared.
pub const TOKENIZER_VERSION: &str = "lowercase-ws-strip-final-punct/1";

/// Lowercases, strips sentence-final punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let trimmed = lowered.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '!' | '?'));
    trimmed.split_whitespace().map(str::to_string).collect()
}

pub fn join(tokens: &[impl AsRef<str>]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_final_punctuation() {
        assert_eq!(tokenize("A Dog runs.  "), vec!["a", "dog", "runs"]);
        assert_eq!(tokenize("What is it?!"), vec!["what", "is", "it"]);
        assert_eq!(tokenize("e.g. inner stays"), vec!["e.g.", "inner", "stays"]);
        assert!(tokenize(" . ").is_empty());
    }
}
