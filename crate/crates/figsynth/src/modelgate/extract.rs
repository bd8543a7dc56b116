//! Extraction of fenced code blocks from model responses.

use super::Dialect;

/// Find the first fenced code block whose label matches the dialect.
///
/// Accepted fence labels are fixed per dialect by the response formats the
/// prompts mandate: `tikz` or `latex` for TikZ, `python` for plot scripts.
/// Returns the code text between the fences, or None when no matching
/// block exists.
pub fn extract_code_block(raw: &str, dialect: Dialect) -> Option<String> {
    let mut best: Option<(usize, String)> = None;
    for label in dialect.fence_labels() {
        if let Some((pos, code)) = find_fenced(raw, label) {
            match &best {
                Some((p, _)) if *p <= pos => {}
                _ => best = Some((pos, code)),
            }
        }
    }
    best.map(|(_, code)| code)
}

fn find_fenced(raw: &str, label: &str) -> Option<(usize, String)> {
    let open = format!("```{label}\n");
    let start = raw.find(&open)?;
    let body_start = start + open.len();
    let rest = &raw[body_start..];
    // The closing fence is the next "\n```"; a block that never closes is
    // not a block.
    let close = rest.find("\n```")?;
    Some((start, rest[..close].to_string()))
}

/// Re-wrap extracted code in its dialect's primary fence. `extract` of the
/// result yields the code back, which is what the training-sample
/// round-trip relies on.
pub fn wrap_code_block(code: &str, dialect: Dialect) -> String {
    format!("```{}\n{}\n```", dialect.primary_fence_label(), code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_first_matching_block() {
        let raw = "prose\n```python\na = 1\n```\nmore\n```python\nb = 2\n```\n";
        assert_eq!(
            extract_code_block(raw, Dialect::PlotScript).unwrap(),
            "a = 1"
        );
    }

    #[test]
    fn tikz_accepts_both_labels() {
        let raw = "```latex\n\\draw;\n```";
        assert_eq!(extract_code_block(raw, Dialect::Tikz).unwrap(), "\\draw;");
        let raw2 = "```tikz\n\\draw;\n```";
        assert_eq!(extract_code_block(raw2, Dialect::Tikz).unwrap(), "\\draw;");
    }

    #[test]
    fn earliest_block_wins_across_labels() {
        let raw = "```latex\nA\n```\n```tikz\nB\n```";
        assert_eq!(extract_code_block(raw, Dialect::Tikz).unwrap(), "A");
    }

    #[test]
    fn wrong_dialect_label_is_not_extracted() {
        let raw = "```python\nx\n```";
        assert!(extract_code_block(raw, Dialect::Tikz).is_none());
    }

    #[test]
    fn prose_without_fence_yields_none() {
        assert!(extract_code_block("no code here", Dialect::PlotScript).is_none());
    }

    #[test]
    fn unclosed_fence_yields_none() {
        assert!(extract_code_block("```python\nx = 1", Dialect::PlotScript).is_none());
    }

    #[test]
    fn wrap_then_extract_round_trips() {
        for code in ["x = 1", "x = 1\n", "a\nb\nc", ""] {
            let wrapped = wrap_code_block(code, Dialect::PlotScript);
            assert_eq!(
                extract_code_block(&wrapped, Dialect::PlotScript).unwrap(),
                code
            );
        }
    }

    #[test]
    fn rewrapped_extraction_is_substring_of_raw() {
        let raw = "lead-in\n```tikz\n\\draw (0,0);\n```\ntrailing";
        let code = extract_code_block(raw, Dialect::Tikz).unwrap();
        let rewrapped = format!("```tikz\n{code}\n```");
        assert!(raw.contains(&rewrapped));
    }
}
