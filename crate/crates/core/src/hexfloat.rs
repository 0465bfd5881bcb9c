//! C99 `%a`-style hexadecimal float strings.
//!
//! Normal numbers render as `[-]0x1.<frac>p<exp>` and subnormals as
//! `[-]0x0.<frac>p-1022`, with trailing zero hex digits trimmed. Parsing
//! accepts exactly this canonical family (at most 13 fraction digits), so a
//! parse never rounds.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HexFloatError {
    #[error("malformed hex float {0:?}")]
    Malformed(String),
    #[error("hex float {0:?} is not exactly representable")]
    Inexact(String),
}

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;
const EXP_BIAS: i64 = 1023;

pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let biased = ((bits >> FRAC_BITS) & 0x7ff) as i64;
    let frac = bits & FRAC_MASK;
    if biased == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, biased - EXP_BIAS)
    };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp >= 0 { "+" } else { "-" };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

pub fn parse_f64(s: &str) -> Result<f64, HexFloatError> {
    let malformed = || HexFloatError::Malformed(s.to_string());
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let body = body.strip_prefix("0x").ok_or_else(malformed)?;
    let (mantissa, exp) = body.split_once('p').ok_or_else(malformed)?;
    let exp: i64 = exp.parse().map_err(|_| malformed())?;
    let (lead, frac_digits) = match mantissa.split_once('.') {
        Some((l, f)) if !f.is_empty() => (l, f),
        Some(_) => return Err(malformed()),
        None => (mantissa, ""),
    };
    if frac_digits.len() > 13 || !frac_digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(malformed());
    }
    let frac = if frac_digits.is_empty() {
        0
    } else {
        let v = u64::from_str_radix(frac_digits, 16).map_err(|_| malformed())?;
        v << (4 * (13 - frac_digits.len()))
    };
    let sign_bit = if negative { 1u64 << 63 } else { 0 };
    let bits = match lead {
        "1" => {
            let biased = exp + EXP_BIAS;
            if !(1..=2046).contains(&biased) {
                return Err(HexFloatError::Inexact(s.to_string()));
            }
            ((biased as u64) << FRAC_BITS) | frac
        }
        "0" => {
            if frac == 0 && exp == 0 {
                0
            } else if exp == 1 - EXP_BIAS {
                frac
            } else {
                return Err(HexFloatError::Inexact(s.to_string()));
            }
        }
        _ => return Err(malformed()),
    };
    Ok(f64::from_bits(sign_bit | bits))
}
