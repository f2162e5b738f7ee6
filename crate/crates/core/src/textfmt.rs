//! Helpers shared by the line-oriented text formats.

/// Formats `x` as a plain decimal with `digits` significant digits.
///
/// Falls back to scientific notation outside `[1e-6, 1e15)` so that tiny
/// probabilities do not turn into long runs of zeros.
pub fn format_sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x == 0.0 {
        return format!("{:.*}", digits - 1, 0.0);
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let magnitude = x.abs();
    if !(1e-6..1e15).contains(&magnitude) {
        return format!("{:.*e}", digits - 1, x);
    }
    let exponent = magnitude.log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exponent).max(0) as usize;
    format!("{:.*}", decimals, x)
}

/// Strips a trailing `#` comment and surrounding whitespace.
pub fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

/// Iterates over the meaningful lines of a document as `(line_number, tokens)`.
/// Line numbers are 1-based.
pub fn tokenized_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(idx, raw)| {
        let line = strip_comment(raw);
        if line.is_empty() {
            None
        } else {
            Some((idx + 1, line.split_whitespace().collect()))
        }
    })
}
