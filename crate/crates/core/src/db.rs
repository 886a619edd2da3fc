//! Decibel helpers and the JSON encoding of infinite ratios.

/// `10 log10(num / den)`; `+inf` when `den` is zero and `num` is not.
pub fn energy_ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        if num > 0.0 {
            f64::INFINITY
        } else {
            f64::NAN
        }
    } else {
        10.0 * (num / den).log10()
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Serde adapter writing infinities as the strings `"inf"` / `"-inf"`.
pub mod inf_f64 {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected number or \"inf\", got {other:?}"))),
            },
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(with = "super")] f64);
            Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        #[serde(with = "inf_f64")]
        v: f64,
        #[serde(with = "inf_f64::option", default)]
        o: Option<f64>,
    }

    #[test]
    fn infinity_round_trips_as_string() {
        let r = Row {
            v: f64::INFINITY,
            o: Some(-3.5),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"v":"inf","o":-3.5}"#);
        assert_eq!(serde_json::from_str::<Row>(&s).unwrap(), r);
        let r: Row = serde_json::from_str(r#"{"v":2.0,"o":null}"#).unwrap();
        assert_eq!(r.o, None);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(energy_ratio_db(100.0, 1.0), 20.0);
        assert_eq!(energy_ratio_db(1.0, 0.0), f64::INFINITY);
        assert!(energy_ratio_db(0.0, 0.0).is_nan());
    }
}
