//! Text normalization shared by both vocabularies.

/// Maps a surface token to its lemma.
pub trait Lemmatizer: Send + Sync {
    fn lemmatize(&self, token: &str) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoopLemmatizer;

impl Lemmatizer for NoopLemmatizer {
    fn lemmatize(&self, token: &str) -> String {
        token.to_string()
    }
}

/// Dictionary lookup with identity fallback.
#[derive(Clone, Debug, Default)]
pub struct DictionaryLemmatizer {
    pub table: std::collections::HashMap<String, String>,
}

impl Lemmatizer for DictionaryLemmatizer {
    fn lemmatize(&self, token: &str) -> String {
        self.table
            .get(token)
            .cloned()
            .unwrap_or_else(|| token.to_string())
    }
}

fn strip_html_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_tag = false;
    for ch in text.chars() {
        match ch {
            '<' => {
                in_tag = true;
                out.push(' ');
            }
            '>' if in_tag => in_tag = false,
            _ if !in_tag => out.push(ch),
            _ => {}
        }
    }
    out
}

fn is_url(word: &str) -> bool {
    let w = word.trim_start_matches(['(', '[', '"', '\'']);
    w.starts_with("http://") || w.starts_with("https://") || w.starts_with("www.")
}

fn is_mention(word: &str) -> bool {
    word.starts_with('@') || word.starts_with("u/") || word.starts_with("/u/")
}

fn is_entity(word: &str) -> bool {
    word.starts_with('&') && word.ends_with(';') && word.len() > 2
}

/// Lowercases and strips URLs, mentions, HTML tags and entities, punctuation
/// and emoji, then splits on whitespace. Apostrophes are dropped inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, &NoopLemmatizer)
}

pub fn tokenize_with(text: &str, lemmatizer: &dyn Lemmatizer) -> Vec<String> {
    let cleaned = strip_html_tags(text);
    let mut tokens = Vec::new();
    for word in cleaned.split_whitespace() {
        if is_url(word) || is_mention(word) || is_entity(word) {
            continue;
        }
        let mut buf = String::with_capacity(word.len());
        for ch in word.chars() {
            if ch == '\'' || ch == '\u{2019}' {
                continue;
            }
            if ch.is_alphanumeric() {
                buf.extend(ch.to_lowercase());
            } else {
                buf.push(' ');
            }
        }
        for piece in buf.split_whitespace() {
            tokens.push(lemmatizer.lemmatize(piece));
        }
    }
    tokens
}
