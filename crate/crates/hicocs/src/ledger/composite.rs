//! Composite keys: a prefix plus ordered attributes rendered into one flat
//! state key.
//!
//! Rendering joins the escaped prefix and escaped attributes with a 0x00
//! separator. Attribute bytes are stuffed so the separator can never appear
//! inside a segment: 0x01 escapes to 0x01 0x01 and 0x00 escapes to
//! 0x01 0x02. Both escape bytes are single-byte code points, so rendered
//! keys remain valid UTF-8 and order lexicographically by byte, which is
//! what makes prefix range scans group related keys together.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator between segments of a rendered key.
pub const SEPARATOR: u8 = 0x00;
/// Escape introducer inside a segment.
pub const ESCAPE: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositeKeyError {
    #[error("composite key prefix must be non-empty")]
    EmptyPrefix,
    #[error("composite key attributes must be non-empty strings (index {0})")]
    BadAttribute(usize),
    #[error("malformed composite key: {0}")]
    MalformedKey(String),
}

/// A parsed composite key alongside its canonical rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeKeyRecord {
    pub prefix: String,
    pub attributes: Vec<String>,
    pub rendered: String,
}

/// Render `prefix` and `attributes` into the canonical flat key.
pub fn create_composite_key(
    prefix: &str,
    attributes: &[impl AsRef<str>],
) -> Result<String, CompositeKeyError> {
    if prefix.is_empty() {
        return Err(CompositeKeyError::EmptyPrefix);
    }
    if attributes.is_empty() {
        return Err(CompositeKeyError::BadAttribute(0));
    }
    let mut out = Vec::with_capacity(prefix.len() + attributes.len() * 8);
    escape_into(prefix.as_bytes(), &mut out);
    for (i, attr) in attributes.iter().enumerate() {
        let attr = attr.as_ref();
        if attr.is_empty() {
            return Err(CompositeKeyError::BadAttribute(i));
        }
        out.push(SEPARATOR);
        escape_into(attr.as_bytes(), &mut out);
    }
    // Escaping only rearranges bytes < 0x80, so the result stays UTF-8.
    Ok(String::from_utf8(out).expect("escaped key is valid utf-8"))
}

/// Exact inverse of [`create_composite_key`].
pub fn split_composite_key(rendered: &str) -> Result<CompositeKeyRecord, CompositeKeyError> {
    let malformed = |why: &str| CompositeKeyError::MalformedKey(format!("{why}: {rendered:?}"));
    let mut segments = rendered.as_bytes().split(|&b| b == SEPARATOR);
    let prefix_bytes = segments.next().ok_or_else(|| malformed("empty key"))?;
    let prefix = unescape(prefix_bytes).ok_or_else(|| malformed("bad escape in prefix"))?;
    if prefix.is_empty() {
        return Err(malformed("empty prefix"));
    }
    let mut attributes = Vec::new();
    for seg in segments {
        let attr = unescape(seg).ok_or_else(|| malformed("bad escape in attribute"))?;
        if attr.is_empty() {
            return Err(malformed("empty attribute"));
        }
        attributes.push(attr);
    }
    if attributes.is_empty() {
        return Err(malformed("no attributes"));
    }
    Ok(CompositeKeyRecord {
        prefix,
        attributes,
        rendered: rendered.to_string(),
    })
}

/// Byte prefix shared by every rendered key whose prefix is `prefix` and
/// whose attributes start with `leading_attrs`. Callers scanning a range
/// must still check segment boundaries with [`extends_partial`].
pub fn render_partial(
    prefix: &str,
    leading_attrs: &[impl AsRef<str>],
) -> Result<String, CompositeKeyError> {
    if prefix.is_empty() {
        return Err(CompositeKeyError::EmptyPrefix);
    }
    let mut out = Vec::new();
    escape_into(prefix.as_bytes(), &mut out);
    for (i, attr) in leading_attrs.iter().enumerate() {
        let attr = attr.as_ref();
        if attr.is_empty() {
            return Err(CompositeKeyError::BadAttribute(i));
        }
        out.push(SEPARATOR);
        escape_into(attr.as_bytes(), &mut out);
    }
    Ok(String::from_utf8(out).expect("escaped key is valid utf-8"))
}

/// True when `candidate` extends `partial` at a segment boundary: it is
/// either the partial itself or continues with a separator. Plain byte
/// `starts_with` is not enough because attribute `g1` must not match `g10`.
pub fn extends_partial(candidate: &str, partial: &str) -> bool {
    let c = candidate.as_bytes();
    let p = partial.as_bytes();
    c.starts_with(p) && (c.len() == p.len() || c[p.len()] == SEPARATOR)
}

fn escape_into(raw: &[u8], out: &mut Vec<u8>) {
    for &b in raw {
        match b {
            ESCAPE => out.extend_from_slice(&[ESCAPE, 0x01]),
            SEPARATOR => out.extend_from_slice(&[ESCAPE, 0x02]),
            _ => out.push(b),
        }
    }
}

fn unescape(escaped: &[u8]) -> Option<String> {
    let mut out = Vec::with_capacity(escaped.len());
    let mut iter = escaped.iter();
    while let Some(&b) = iter.next() {
        if b == ESCAPE {
            match iter.next() {
                Some(0x01) => out.push(ESCAPE),
                Some(0x02) => out.push(SEPARATOR),
                _ => return None,
            }
        } else {
            out.push(b);
        }
    }
    String::from_utf8(out).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_with_nul_separators() {
        let key = create_composite_key("cstx", &["g1", "O1", "D1", "V1"]).unwrap();
        assert_eq!(key, "cstx\x00g1\x00O1\x00D1\x00V1");
        let single = create_composite_key("t", &["a"]).unwrap();
        assert_eq!(single, "t\x00a");
    }

    #[test]
    fn split_inverts_create() {
        let rec = split_composite_key("cstx\x00g1\x00O1\x00D1\x00V1").unwrap();
        assert_eq!(rec.prefix, "cstx");
        assert_eq!(rec.attributes, vec!["g1", "O1", "D1", "V1"]);
        let rec = split_composite_key("t\x00a").unwrap();
        assert_eq!((rec.prefix.as_str(), rec.attributes.len()), ("t", 1));
    }

    #[test]
    fn rejects_empty_segments() {
        assert_eq!(
            create_composite_key("", &["a"]),
            Err(CompositeKeyError::EmptyPrefix)
        );
        assert_eq!(
            create_composite_key("p", &["a", ""]),
            Err(CompositeKeyError::BadAttribute(1))
        );
        let attrs: [&str; 0] = [];
        assert_eq!(
            create_composite_key("p", &attrs),
            Err(CompositeKeyError::BadAttribute(0))
        );
    }

    #[test]
    fn split_rejects_malformed() {
        for bad in [
            "",
            "noattrs",
            "p\x00",
            "p\x00\x00a",
            "\x00a",
            "p\x00a\x01",     // dangling escape
            "p\x00a\x01\x03", // unknown escape code
        ] {
            assert!(
                matches!(
                    split_composite_key(bad),
                    Err(CompositeKeyError::MalformedKey(_))
                ),
                "{bad:?} should be malformed"
            );
        }
    }

    #[test]
    fn escaping_keeps_separator_out_of_segments() {
        let attr_with_nul = "a\x00b";
        let attr_with_escape = "c\x01d";
        let key = create_composite_key("p", &[attr_with_nul, attr_with_escape]).unwrap();
        // Exactly two separators: one per attribute.
        assert_eq!(key.bytes().filter(|&b| b == SEPARATOR).count(), 2);
        let rec = split_composite_key(&key).unwrap();
        assert_eq!(rec.attributes, vec![attr_with_nul, attr_with_escape]);
    }

    #[test]
    fn partial_boundary_matching() {
        let partial = render_partial("cstx", &["g1"]).unwrap();
        let in_scope = create_composite_key("cstx", &["g1", "O1"]).unwrap();
        let cousin = create_composite_key("cstx", &["g10", "O1"]).unwrap();
        assert!(extends_partial(&in_scope, &partial));
        assert!(!extends_partial(&cousin, &partial));
        assert!(extends_partial(&partial, &partial));
    }

    fn arb_segment() -> impl Strategy<Value = String> {
        // Exercise separator and escape bytes heavily alongside normal text.
        proptest::collection::vec(
            prop_oneof![
                Just('\x00'),
                Just('\x01'),
                Just('\x02'),
                proptest::char::range('a', 'z'),
                proptest::char::any(),
            ],
            1..8,
        )
        .prop_map(|chars| chars.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            prefix in arb_segment(),
            attrs in proptest::collection::vec(arb_segment(), 1..6),
        ) {
            let rendered = create_composite_key(&prefix, &attrs).unwrap();
            let rec = split_composite_key(&rendered).unwrap();
            prop_assert_eq!(rec.prefix, prefix);
            prop_assert_eq!(rec.attributes, attrs);
            prop_assert_eq!(rec.rendered, rendered);
        }

        #[test]
        fn partial_matching_agrees_with_split(
            prefix in arb_segment(),
            attrs in proptest::collection::vec(arb_segment(), 1..5),
            take in 0usize..5,
        ) {
            let take = take.min(attrs.len());
            let rendered = create_composite_key(&prefix, &attrs).unwrap();
            let partial = render_partial(&prefix, &attrs[..take]).unwrap();
            prop_assert!(extends_partial(&rendered, &partial));
        }
    }
}
