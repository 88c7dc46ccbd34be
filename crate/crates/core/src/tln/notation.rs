//! Bracket notation for transfer-learning networks.
//!
//! ```text
//! tln  := "[" "chi" ("^" ref)? "]" "_" ref "^" (int "+")? "psi"
//! ref  := "N" | "N-" int | int
//! ```
//!
//! `[chi]_N-5^psi` keeps every source unit and tunes from `N-5` on;
//! `[chi^N-1]_N-5^psi` drops the source classifier first;
//! `[chi]_N-5^2+psi` stacks two new layers before the classifier module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// A unit index, either absolute (1-based) or counted down from the source depth `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum UnitRef {
    Abs(usize),
    /// `N-k`; `FromTop(0)` is `N` itself.
    FromTop(usize),
}

impl UnitRef {
    pub const N: UnitRef = UnitRef::FromTop(0);

    /// Resolves against a source depth `n`; the result is always ≥ 1.
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            UnitRef::Abs(i) if i >= 1 => Ok(i),
            UnitRef::FromTop(k) if k < n => Ok(n - k),
            _ => Err(Error::contract(format!(
                "unit reference {self} does not resolve for N = {n}"
            ))),
        }
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitRef::Abs(i) => write!(f, "{i}"),
            UnitRef::FromTop(0) => f.write_str("N"),
            UnitRef::FromTop(k) => write!(f, "N-{k}"),
        }
    }
}

impl From<UnitRef> for String {
    fn from(r: UnitRef) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for UnitRef {
    type Error = ParseError;

    fn try_from(s: String) -> Result<Self, ParseError> {
        let mut p = Parser::new(&s);
        let r = p.unit_ref()?;
        p.end()?;
        Ok(r)
    }
}

impl FromStr for UnitRef {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
        UnitRef::try_from(s.to_string())
    }
}

/// The structural part of a TLN: which units are kept (κ), where
/// fine-tuning starts (ν) and how many layers are appended (τ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct TlnNotation {
    pub kappa: UnitRef,
    pub nu: UnitRef,
    pub tau: usize,
}

impl TlnNotation {
    pub fn new(kappa: UnitRef, nu: UnitRef, tau: usize) -> Self {
        TlnNotation { kappa, nu, tau }
    }

    pub fn with_nu(self, nu: UnitRef) -> Self {
        TlnNotation { nu, ..self }
    }
}

impl fmt::Display for TlnNotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[chi")?;
        if self.kappa != UnitRef::N {
            write!(f, "^{}", self.kappa)?;
        }
        write!(f, "]_{}^", self.nu)?;
        if self.tau > 0 {
            write!(f, "{}+", self.tau)?;
        }
        f.write_str("psi")
    }
}

impl From<TlnNotation> for String {
    fn from(n: TlnNotation) -> String {
        n.to_string()
    }
}

impl TryFrom<String> for TlnNotation {
    type Error = ParseError;

    fn try_from(s: String) -> Result<Self, ParseError> {
        parse_tln(&s)
    }
}

impl FromStr for TlnNotation {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse_tln(s)
    }
}

/// Failure to parse TLN notation.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("TLN parse error at byte {offset}: expected {}, found {}", expected.join(" or "), found.as_deref().map_or("end of input".to_string(), |f| format!("`{f}`")))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: Option<String>,
}

pub fn parse_tln(text: &str) -> Result<TlnNotation, ParseError> {
    let mut p = Parser::new(text);
    p.literal("[")?;
    p.literal("chi")?;
    let kappa = if p.eat("^") {
        p.unit_ref()?
    } else {
        UnitRef::N
    };
    p.expect_one_of(&["]"], &["^", "]"])?;
    p.literal("_")?;
    let nu = p.unit_ref()?;
    p.literal("^")?;
    let tau = if p.peek_digit() {
        let t = p.int()?;
        p.literal("+")?;
        t
    } else {
        0
    };
    p.expect_one_of(&["psi"], &["integer", "psi"])?;
    p.end()?;
    Ok(TlnNotation { kappa, nu, tau })
}

pub fn format_tln(notation: &TlnNotation) -> String {
    notation.to_string()
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        ParseError {
            offset: self.pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.rest().chars().next().map(String::from),
        }
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn literal(&mut self, lit: &str) -> Result<(), ParseError> {
        self.expect_one_of(&[lit], &[lit])
    }

    /// Consumes the first matching literal, reporting `expected` otherwise.
    fn expect_one_of(&mut self, lits: &[&str], expected: &[&str]) -> Result<(), ParseError> {
        if lits.iter().any(|l| self.eat(l)) {
            Ok(())
        } else {
            // Point at the first byte that diverges from every candidate.
            let rest = self.rest().as_bytes();
            let common = lits
                .iter()
                .map(|l| l.bytes().zip(rest).take_while(|(a, b)| a == *b).count())
                .max()
                .unwrap_or(0);
            let at = Parser {
                src: self.src,
                pos: self.pos + common,
            };
            let mut err = at.error(expected);
            if common > 0 {
                err.expected = lits
                    .iter()
                    .filter(|l| l.as_bytes().get(..common) == rest.get(..common))
                    .map(|l| format!("`{l}`"))
                    .collect();
            } else {
                err.expected = expected
                    .iter()
                    .map(|e| {
                        if *e == "integer" {
                            e.to_string()
                        } else {
                            format!("`{e}`")
                        }
                    })
                    .collect();
            }
            Err(err)
        }
    }

    fn peek_digit(&self) -> bool {
        self.rest()
            .bytes()
            .next()
            .is_some_and(|b| b.is_ascii_digit())
    }

    fn int(&mut self) -> Result<usize, ParseError> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.error(&["integer"]));
        }
        let text = &self.rest()[..digits];
        let value = text.parse::<usize>().map_err(|_| ParseError {
            offset: self.pos,
            expected: vec!["integer that fits in a machine word".into()],
            found: Some(text.to_string()),
        })?;
        self.pos += digits;
        Ok(value)
    }

    fn unit_ref(&mut self) -> Result<UnitRef, ParseError> {
        if self.eat("N") {
            if self.eat("-") {
                return Ok(UnitRef::FromTop(self.int()?));
            }
            return Ok(UnitRef::N);
        }
        if !self.peek_digit() {
            return Err(self.error(&["`N`", "integer"]));
        }
        let start = self.pos;
        let i = self.int()?;
        if i == 0 {
            return Err(ParseError {
                offset: start,
                expected: vec!["unit index ≥ 1".into()],
                found: Some("0".into()),
            });
        }
        Ok(UnitRef::Abs(i))
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.pos == self.src.len() {
            Ok(())
        } else {
            Err(self.error(&["end of input"]))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn proposed_fine_tuning() {
        let n = parse_tln("[chi]_N-5^psi").unwrap();
        assert_eq!(n, TlnNotation::new(UnitRef::N, UnitRef::FromTop(5), 0));
    }

    #[test]
    fn traditional_fine_tuning() {
        let n = parse_tln("[chi^N-1]_N-5^psi").unwrap();
        assert_eq!(n.kappa, UnitRef::FromTop(1));
        assert_eq!(n.nu, UnitRef::FromTop(5));
        assert_eq!(n.tau, 0);
    }

    #[test]
    fn depth_augmented() {
        let n = parse_tln("[chi]_N-5^2+psi").unwrap();
        assert_eq!(n.tau, 2);
        assert_eq!(parse_tln("[chi^8]_3^1+psi").unwrap().kappa, UnitRef::Abs(8));
    }

    #[test]
    fn formatting_is_canonical() {
        assert_eq!(
            parse_tln("[chi^N]_N^0+psi").unwrap().to_string(),
            "[chi]_N^psi"
        );
        assert_eq!(
            parse_tln("[chi]_N-0^psi").unwrap().to_string(),
            "[chi]_N^psi"
        );
    }

    #[test]
    fn errors_carry_offsets() {
        let e = parse_tln("[chi]_N-5^pso").unwrap_err();
        assert_eq!(e.offset, 12);
        let e = parse_tln("[chi]N^psi").unwrap_err();
        assert_eq!(e.offset, 5);
        assert_eq!(e.expected, vec!["`_`"]);
        let e = parse_tln("[chi]_X^psi").unwrap_err();
        assert_eq!(e.offset, 6);
        assert!(e.expected.contains(&"`N`".to_string()));
        let e = parse_tln("[chi]_N^psi ").unwrap_err();
        assert_eq!(e.offset, 11);
        let e = parse_tln("[chi]_0^psi").unwrap_err();
        assert_eq!(e.offset, 6);
        let e = parse_tln("").unwrap_err();
        assert_eq!((e.offset, e.found.clone()), (0, None));
        let e = parse_tln("[chi]_N-^psi").unwrap_err();
        assert_eq!(e.offset, 8);
        assert!(e.to_string().contains("byte 8"));
    }

    #[test]
    fn resolve_against_depth() {
        assert_eq!(UnitRef::FromTop(5).resolve(8).unwrap(), 3);
        assert_eq!(UnitRef::N.resolve(8).unwrap(), 8);
        assert_eq!(UnitRef::Abs(9).resolve(8).unwrap(), 9);
        assert!(UnitRef::FromTop(8).resolve(8).is_err());
    }

    fn unit_ref() -> impl Strategy<Value = UnitRef> {
        prop_oneof![
            (1usize..100).prop_map(UnitRef::Abs),
            (0usize..100).prop_map(UnitRef::FromTop),
        ]
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(kappa in unit_ref(), nu in unit_ref(), tau in 0usize..5) {
            let n = TlnNotation::new(kappa, nu, tau);
            prop_assert_eq!(parse_tln(&format_tln(&n)).unwrap(), n);
        }

        #[test]
        fn serde_uses_notation_strings(kappa in unit_ref(), nu in unit_ref(), tau in 0usize..5) {
            let n = TlnNotation::new(kappa, nu, tau);
            let json = serde_json::to_string(&n).unwrap();
            prop_assert_eq!(json.clone(), format!("\"{n}\""));
            prop_assert_eq!(serde_json::from_str::<TlnNotation>(&json).unwrap(), n);
        }

        #[test]
        fn truncations_are_rejected(kappa in unit_ref(), nu in unit_ref(), tau in 0usize..5, cut in 0usize..30) {
            let s = format_tln(&TlnNotation::new(kappa, nu, tau));
            let cut = cut.min(s.len() - 1);
            let e = parse_tln(&s[..cut]).unwrap_err();
            prop_assert!(e.offset <= cut);
        }
    }
}
