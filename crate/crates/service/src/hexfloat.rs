//! C99 `%a`-style hexadecimal floats, for lossless numbers in JSON.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed hex float {0:?}")]
pub struct HexFloatError(pub String);

const MANTISSA_BITS: u32 = 52;
const EXP_BIAS: i64 = 1023;

/// `1.5` → `0x1.8p+0`, `0.0` → `0x0p+0`, subnormals as `0x0.…p-1022`.
pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_field = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << MANTISSA_BITS) - 1);
    let (lead, exp) = match (exp_field, mantissa) {
        (0, 0) => (0, 0),
        (0, _) => (0, 1 - EXP_BIAS),
        _ => (1, exp_field - EXP_BIAS),
    };
    let digits = format!("{mantissa:013x}");
    let digits = digits.trim_end_matches('0');
    let frac = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    format!("{sign}0x{lead}{frac}p{exp:+}")
}

/// Inverse of [`format`]; accepts any mantissa digit count up to 13.
pub fn parse(s: &str) -> Result<f64, HexFloatError> {
    let err = || HexFloatError(s.to_owned());
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(err)?;
    let (mant, exp) = rest.split_once('p').ok_or_else(err)?;
    let exp: i64 = exp.parse().map_err(|_| err())?;
    let (lead, frac) = match mant.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mant, ""),
    };
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(err());
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).map_err(|_| err())? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "1" => {
            let field = exp + EXP_BIAS;
            if !(1..=0x7fe).contains(&field) {
                return Err(err());
            }
            ((field as u64) << MANTISSA_BITS) | frac_bits
        }
        "0" if frac_bits == 0 && exp == 0 => 0,
        "0" if exp == 1 - EXP_BIAS => frac_bits,
        _ => return Err(err()),
    };
    Ok(f64::from_bits(bits | if neg { 1 << 63 } else { 0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(0.5), "0x1p-1");
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(-0.0), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 2.0), "0x0.8p-1022");
        assert_eq!(parse("0x1.8p+1"), Ok(3.0));
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "1.0", "0x", "0x1.8", "0x2p+0", "0x1.gp+0", "0x1p+2000", "0x0.8p+3"] {
            assert!(parse(s).is_err(), "{s}");
        }
    }
}
