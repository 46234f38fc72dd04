//! JSON output with every float written to 17 significant digits.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

/// Writes `f64` as `d.dddddddddddddddde±x`, which round-trips exactly.
pub fn sig17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

struct Sig17<F>(F);

macro_rules! delegate {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.$name(w)
            }
        )*
    };
    (first: $($name:ident),*) => {
        $(
            #[inline]
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
                self.0.$name(w, first)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(sig17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    delegate!(begin_array, end_array, end_array_value, begin_object, end_object, end_object_value, begin_object_value);
    delegate!(first: begin_array_value, begin_object_key);
}

/// Single-line JSON.
pub fn to_writer<W: Write, T: Serialize + ?Sized>(w: W, value: &T) -> serde_json::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(w, Sig17(CompactFormatter));
    value.serialize(&mut ser)
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    to_writer(&mut buf, value)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Indented JSON.
pub fn to_string_pretty<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let s = to_string(&serde_json::json!({"x": [0.1, 1.0, -2.5e-300], "n": 3})).unwrap();
        assert_eq!(s, r#"{"n":3,"x":[1.0000000000000001e-1,1.0000000000000000e0,-2.5000000000000000e-300]}"#);
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"][0].as_f64(), Some(0.1));
    }

    #[test]
    fn pretty_output_keeps_layout() {
        let s = to_string_pretty(&serde_json::json!({"a": [1.5]})).unwrap();
        assert_eq!(s, "{\n  \"a\": [\n    1.5000000000000000e0\n  ]\n}");
    }

    proptest::proptest! {
        #[test]
        fn sig17_round_trips(bits in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let back: f64 = sig17(bits).parse().unwrap();
            proptest::prop_assert_eq!(back.to_bits(), bits.to_bits());
        }
    }
}
