//! Flat `key=value` text, one entry per line. `#` starts a comment line.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
    }
    Ok(map)
}

pub fn render(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value {raw:?} for key {key:?}")))
}

pub fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {raw:?} for key {key:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let m = parse("# c\n a = 1\nb=x y\n\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x y");
        assert_eq!(parse(&render(&m)).unwrap(), m);
        assert!(parse("a=1\na=2").is_err());
        assert!(parse("nonsense").is_err());
        assert_eq!(value::<usize>("a", "7").unwrap(), 7);
        assert!(value::<usize>("a", "-1").is_err());
        assert!(flag("f", "maybe").is_err());
    }
}
