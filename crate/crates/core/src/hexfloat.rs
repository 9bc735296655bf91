//! Exact text encoding of `f32` values as hexadecimal floats (`0x1.8p-3`).

use crate::error::{Error, Result};

pub fn format(v: f32) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 31 == 1 { "-" } else { "" };
    let exp = ((bits >> 23) & 0xff) as i32;
    let frac = bits & 0x7f_ffff;
    if exp == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -126) } else { (1, exp - 127) };
    let digits = format!("{:06x}", frac << 1);
    let digits = digits.trim_end_matches('0');
    let point = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    format!("{sign}0x{lead}{point}p{e:+}")
}

pub fn parse(s: &str) -> Result<f32> {
    let bad = || Error::Parse(format!("invalid hex float `{s}`"));
    match s {
        "nan" => return Ok(f32::NAN),
        "inf" => return Ok(f32::INFINITY),
        "-inf" => return Ok(f32::NEG_INFINITY),
        _ => {}
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let body = body.strip_prefix("0x").ok_or_else(bad)?;
    let (mant, exp) = body.split_once('p').ok_or_else(bad)?;
    let exp: i32 = exp.parse().map_err(|_| bad())?;
    let (lead, digits) = mant.split_once('.').unwrap_or((mant, ""));
    if digits.len() > 6 || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let frac24 = if digits.is_empty() {
        0
    } else {
        u32::from_str_radix(&format!("{digits:0<6}"), 16).map_err(|_| bad())?
    };
    if frac24 & 1 != 0 {
        return Err(bad());
    }
    let frac = frac24 >> 1;
    let bits = match (lead, exp) {
        ("0", _) if frac == 0 => 0,
        ("0", -126) => frac,
        ("1", e) if (-126..=127).contains(&e) => (((e + 127) as u32) << 23) | frac,
        _ => return Err(bad()),
    };
    Ok(f32::from_bits(bits | if neg { 1 << 31 } else { 0 }))
}
