//! Float formatting shared by every text artifact.

/// 17 significant digits in scientific form; parses back to the identical `f64`.
pub fn f17(x: f64) -> String {
    if x == 0.0 && x.is_sign_negative() {
        return "0.0000000000000000e0".to_string();
    }
    format!("{:.16e}", x)
}

pub fn f17_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| f17(x)).collect::<Vec<_>>().join(",")
}

pub fn parse_f64_list(s: &str) -> Option<Vec<f64>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.trim().parse::<f64>().ok()).collect()
}
