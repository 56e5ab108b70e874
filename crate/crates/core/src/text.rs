//! Whitespace-and-punctuation tokenization shared by the language model and
//! the metrics.

const TWO_CHAR_OPERATORS: [&str; 4] = ["==", "!=", "<=", ">="];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits on whitespace, then into word runs and single punctuation marks.
/// Comparison operators `==`, `!=`, `<=`, `>=` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if is_word_char(c) {
                let start = i;
                while i < chars.len() && is_word_char(chars[i]) {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
                continue;
            }
            if i + 1 < chars.len() {
                let pair: String = chars[i..i + 2].iter().collect();
                if TWO_CHAR_OPERATORS.contains(&pair.as_str()) {
                    out.push(pair);
                    i += 2;
                    continue;
                }
            }
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Joins tokens with single spaces; `tokenize` inverts it.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("x=1\ny=2"), ["x", "=", "1", "y", "=", "2"]);
        assert_eq!(
            tokenize("if a<=b: return f(a)"),
            ["if", "a", "<=", "b", ":", "return", "f", "(", "a", ")"]
        );
        assert_eq!(tokenize("a = = 1"), ["a", "=", "=", "1"]);
        assert!(tokenize("  \n\t").is_empty());
    }

    proptest! {
        #[test]
        fn round_trips_up_to_whitespace(s in "[a-c0-9_ =<>!();:+*.\\-\n]{0,40}") {
            let toks = tokenize(&s);
            prop_assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }
}
