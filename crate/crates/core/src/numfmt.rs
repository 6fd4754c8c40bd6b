//! Fixed-precision float rendering for the line-delimited file formats.
//!
//! Output follows C's `%.Ng` rules: `N` significant digits, trailing zeros
//! stripped, scientific notation only for very small or very large
//! magnitudes. The result is always a valid JSON number.

/// Significant digits used by graph and sample files.
pub const GRAPH_DIGITS: usize = 9;
/// Significant digits used by checkpoints (exact `f64` round-trip).
pub const EXACT_DIGITS: usize = 17;

/// Renders `x` with `digits` significant digits.
///
/// Non-finite values have no JSON representation and render as `null`;
/// callers validate finiteness before writing.
pub fn format_sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if !x.is_finite() {
        return "null".to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Renders a slice as a JSON array of fixed-precision numbers.
pub fn format_array(values: &[f64], digits: usize) -> String {
    let mut out = String::with_capacity(values.len() * (digits + 4) + 2);
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_sig(*v, digits));
    }
    out.push(']');
    out
}
