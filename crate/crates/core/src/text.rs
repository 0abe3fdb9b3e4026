//! Small string helpers shared by prompt building and response parsing.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases and collapses whitespace runs so that two phrasings differing
/// only in case or spacing compare equal.
pub fn normalize_for_compare(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

/// Escapes the five XML special characters.
pub fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Strips a leading bullet (`-`, `*`, `•`) or ordinal (`1.`, `2)`) marker.
pub fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

/// Non-empty lines of a model reply with list markers removed.
pub fn reply_lines(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_ignores_case_and_spacing() {
        assert_eq!(normalize_for_compare("  Can I   SKIP\ta meeting? "), "can i skip a meeting?");
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(xml_escape("a < b & \"c\""), "a &lt; b &amp; &quot;c&quot;");
    }

    #[test]
    fn list_markers() {
        assert_eq!(strip_list_marker("1. first"), "first");
        assert_eq!(strip_list_marker("12) twelfth"), "twelfth");
        assert_eq!(strip_list_marker("- dash"), "dash");
        assert_eq!(strip_list_marker("2024 was a year"), "2024 was a year");
        assert_eq!(reply_lines("\n* a\n\n b \n"), ["a", "b"]);
    }
}
