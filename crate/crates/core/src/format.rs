//! Number formatting shared by every CSV writer.

/// Formats like C's `%.10g`.
pub fn g10(v: f64) -> String {
    fmt_g(v, 10)
}

pub fn fmt_g(v: f64, precision: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Optional values render as an empty field.
pub fn g10_opt(v: Option<f64>) -> String {
    v.map(g10).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        assert_eq!(g10(0.0), "0");
        assert_eq!(g10(1.0), "1");
        assert_eq!(g10(-2.5), "-2.5");
        assert_eq!(g10(0.1), "0.1");
        assert_eq!(g10(1.0 / 3.0), "0.3333333333");
        assert_eq!(g10(123456.789), "123456.789");
        assert_eq!(g10(1e-5), "1e-05");
        assert_eq!(g10(1.5e-5), "1.5e-05");
        assert_eq!(g10(0.0001), "0.0001");
        assert_eq!(g10(1e10), "1e+10");
        assert_eq!(g10(9999999999.0), "9999999999");
        assert_eq!(g10(99999999999.0), "1e+11");
        assert_eq!(g10(std::f64::consts::PI * 1e-7), "3.141592654e-07");
        assert_eq!(g10(f64::INFINITY), "inf");
    }
}
