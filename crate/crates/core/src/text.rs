//! Case-insensitive keyword search on word boundaries.

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// True when `keyword` occurs in `text` with no letter or digit directly
/// before or after it. Both sides are compared lowercased.
pub fn contains_word(text: &str, keyword: &str) -> bool {
    let keyword = keyword.trim().to_lowercase();
    if keyword.is_empty() {
        return false;
    }
    let text = text.to_lowercase();
    let mut start = 0;
    while let Some(pos) = text[start..].find(&keyword) {
        let at = start + pos;
        let end = at + keyword.len();
        let before_ok = text[..at].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = text[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return true;
        }
        start = at + text[at..].chars().next().map_or(1, char::len_utf8);
    }
    false
}
