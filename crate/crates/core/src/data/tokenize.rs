/// Characters that always stand as their own token.
pub const PUNCTUATION: [char; 6] = ['.', ',', '!', '?', '\'', '"'];

const QUESTION_WORDS: [&str; 6] = ["who", "what", "when", "where", "why", "how"];

/// Lowercases, splits on whitespace, and splits off each punctuation mark
/// as a standalone token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// True when the text contains a question mark or opens with a wh-word.
pub fn is_question(text: &str) -> bool {
    if text.contains('?') {
        return true;
    }
    tokenize(text).first().is_some_and(|t| QUESTION_WORDS.contains(&t.as_str()))
}
