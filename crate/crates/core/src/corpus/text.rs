//! Report normalization.

/// Words kept per report; period tokens do not count.
pub const MAX_REPORT_WORDS: usize = 60;

/// Lowercases, drops every character outside `[a-z0-9 .]` (other whitespace
/// becomes a space), splits periods into their own tokens, collapses
/// whitespace and removes everything after the 60th word.
///
/// `"The Heart IS Enlarged."` becomes `"the heart is enlarged ."`. An empty
/// result is a valid, empty report.
pub fn preprocess_report(text: &str) -> String {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars().flat_map(char::to_lowercase) {
        match ch {
            'a'..='z' | '0'..='9' => spaced.push(ch),
            '.' => spaced.push_str(" . "),
            c if c.is_whitespace() => spaced.push(' '),
            _ => {}
        }
    }
    let mut out: Vec<&str> = Vec::new();
    let mut words = 0;
    for tok in spaced.split_whitespace() {
        if tok != "." {
            if words == MAX_REPORT_WORDS {
                break;
            }
            words += 1;
        }
        out.push(tok);
    }
    out.join(" ")
}

/// Sentences of a preprocessed report, without their period tokens. Text
/// after the last period forms a final sentence.
pub fn sentences(report: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for tok in report.split_whitespace() {
        if tok == "." {
            if !cur.is_empty() {
                out.push(cur.join(" "));
                cur.clear();
            }
        } else {
            cur.push(tok);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join(" "));
    }
    out
}
