//! Percent-delimited block framing shared by generator and judge responses.
//!
//! Backends are instructed to wrap their payload between lines of ten percent
//! signs. Models sometimes echo the instruction block before the real one, so
//! extraction always takes the last delimited region.

/// Delimiter line emitted in prompts and expected in responses.
pub const BLOCK_DELIMITER: &str = "%%%%%%%%%%";

/// A delimiter line is at least ten '%' characters and nothing else.
pub fn is_delimiter_line(line: &str) -> bool {
    let trimmed = line.trim();
    trimmed.len() >= 10 && trimmed.bytes().all(|b| b == b'%')
}

/// Content of the last region enclosed by a pair of delimiter lines, or
/// `None` when fewer than two delimiter lines exist.
pub fn last_delimited_block(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().collect();
    let delimiters: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, line)| is_delimiter_line(line).then_some(i))
        .collect();
    if delimiters.len() < 2 {
        return None;
    }
    let open = delimiters[delimiters.len() - 2];
    let close = delimiters[delimiters.len() - 1];
    Some(lines[open + 1..close].join("\n"))
}

/// Wraps content in a fresh delimiter pair, the way prompts ask for.
pub fn wrap_block(content: &str) -> String {
    format!("{BLOCK_DELIMITER}\n{content}\n{BLOCK_DELIMITER}")
}
