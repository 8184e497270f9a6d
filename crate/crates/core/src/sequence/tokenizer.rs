use super::SPECIAL_TOKENS;

/// Splits text into tokens. Must never emit a special token; the assembler
/// inserts those structurally.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Whitespace splitting. A word that spells a special token is escaped with
/// a leading backslash so it cannot be confused with the real marker.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                if SPECIAL_TOKENS.contains(&w) {
                    format!("\\{w}")
                } else {
                    w.to_owned()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_escapes() {
        let t = WhitespaceTokenizer;
        assert_eq!(t.tokenize("  the car\nstops "), vec!["the", "car", "stops"]);
        assert_eq!(t.tokenize("a <answer> b"), vec!["a", "\\<answer>", "b"]);
        assert!(t.tokenize(" \n").is_empty());
    }
}
