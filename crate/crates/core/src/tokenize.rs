//! Whitespace and punctuation tokenization with sentence joining.

/// Marker token placed between sentences of one question.
pub const EOS_TOKEN: &str = "<EOS>";
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";

const INNER_PUNCT: &[char] = &['.', '-', '&', '\'', '/', ',', ':', '_'];

/// Splits on whitespace and breaks punctuation into its own tokens. A few
/// joiners (`.`, `-`, `&`, `'` and similar) stay inside a token when flanked
/// by alphanumerics, so "AT&T", "3.5" and "don't" survive. Case is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == EOS_TOKEN || chunk == PAD_TOKEN || chunk == UNK_TOKEN {
            out.push(chunk.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                cur.push(c);
                continue;
            }
            let joined = INNER_PUNCT.contains(&c)
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if joined {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ends_sentence(tok: &str) -> bool {
    matches!(tok, "." | "?" | "!")
}

/// Groups tokens into sentences, cutting after `.`, `?` or `!` and at
/// explicit EOS markers.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        if t == EOS_TOKEN {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        cur.push(t.clone());
        if ends_sentence(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Concatenates sentences with an EOS token between consecutive ones.
pub fn join_sentences(sentences: &[Vec<String>]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push(EOS_TOKEN.to_string());
        }
        out.extend(s.iter().cloned());
    }
    out
}

/// Tokenizes a raw question and separates its sentences with EOS.
pub fn question_tokens(text: &str) -> Vec<String> {
    join_sentences(&split_sentences(&tokenize(text)))
}
