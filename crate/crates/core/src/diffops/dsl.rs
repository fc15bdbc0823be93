//! Text form of operator matrices.
//!
//! ```text
//! [dx1, dx2]                       1x2, divergence in 2D
//! [dx2; -dx1]                      2x1, rotated gradient
//! [dx2^2 - 0.28*dx1^2; ...]        decimal and p/q coefficients are exact
//! ```
//! A bare entry without brackets is read as a 1x1 matrix. `1` is the identity.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use super::{Coeff, DiffMonomial, OperatorMatrix, OperatorPoly};
use crate::error::{Error, Result};

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

type RawTerm = (Coeff, Vec<(usize, u32)>);

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn digits(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap()
    }

    fn number(&mut self) -> Result<Coeff> {
        self.skip_ws();
        let start = self.pos;
        self.digits();
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            self.digits();
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let mut value = match parse_decimal(text) {
            Some(v) => v,
            None => return self.err(format!("bad number {text:?}")),
        };
        if self.eat(b'/') {
            self.skip_ws();
            let denom_text = self.digits();
            let denom = match parse_decimal(denom_text) {
                Some(d) if !d.is_zero() => d,
                _ => return self.err("bad denominator"),
            };
            value /= denom;
        }
        Ok(value)
    }

    fn factor(&mut self, term: &mut RawTerm) -> Result<()> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                term.0 *= self.number()?;
                Ok(())
            }
            Some(b'd') => {
                if self.src.get(self.pos + 1) != Some(&b'x') {
                    return self.err("expected dx<k>");
                }
                self.pos += 2;
                let idx: usize = match self.digits().parse() {
                    Ok(k) if k >= 1 => k,
                    _ => return self.err("expected a 1-based variable index after dx"),
                };
                let mut power = 1;
                if self.eat(b'^') {
                    self.skip_ws();
                    power = match self.digits().parse() {
                        Ok(p) => p,
                        Err(_) => return self.err("expected integer exponent"),
                    };
                }
                term.1.push((idx - 1, power));
                Ok(())
            }
            _ => self.err("expected coefficient or dx<k>"),
        }
    }

    fn poly(&mut self) -> Result<Vec<RawTerm>> {
        let mut terms = Vec::new();
        let mut sign = Coeff::one();
        if self.eat(b'-') {
            sign = -sign;
        } else {
            self.eat(b'+');
        }
        loop {
            let mut term: RawTerm = (sign.clone(), Vec::new());
            self.factor(&mut term)?;
            while self.eat(b'*') {
                self.factor(&mut term)?;
            }
            terms.push(term);
            if self.eat(b'+') {
                sign = Coeff::one();
            } else if self.eat(b'-') {
                sign = -Coeff::one();
            } else {
                break;
            }
        }
        Ok(terms)
    }
}

/// Parse an operator matrix. `input_dim` defaults to the largest variable index used.
pub fn parse_operator(src: &str, input_dim: Option<usize>) -> Result<OperatorMatrix> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let mut rows: Vec<Vec<Vec<RawTerm>>> = Vec::new();
    if p.eat(b'[') {
        let mut row = Vec::new();
        loop {
            row.push(p.poly()?);
            if p.eat(b',') {
                continue;
            }
            if p.eat(b';') {
                rows.push(std::mem::take(&mut row));
                continue;
            }
            if p.eat(b']') {
                rows.push(row);
                break;
            }
            return p.err("expected ',', ';' or ']'");
        }
    } else {
        rows.push(vec![p.poly()?]);
    }
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("rows of different length in operator matrix"));
    }
    let used = rows
        .iter()
        .flatten()
        .flatten()
        .flat_map(|(_, fs)| fs.iter().map(|(i, _)| i + 1))
        .max()
        .unwrap_or(1);
    let dim = input_dim.unwrap_or(used);
    if used > dim {
        return Err(Error::shape(format!(
            "dx{used} used in an operator over {dim} inputs"
        )));
    }
    let n_rows = rows.len();
    let entries = rows
        .into_iter()
        .flatten()
        .map(|terms| {
            let mut poly = OperatorPoly::zero();
            for (c, factors) in terms {
                let mut idx = vec![0u32; dim];
                for (axis, pow) in factors {
                    idx[axis] += pow;
                }
                poly.add_term(DiffMonomial::new(idx), c);
            }
            poly
        })
        .collect();
    OperatorMatrix::from_entries(n_rows, cols, dim, entries)
}

/// Exact value of a plain decimal literal such as `12`, `0.28` or `.5`.
pub(crate) fn parse_decimal(text: &str) -> Option<Coeff> {
    let (neg, text) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int}{frac}");
    let numer: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().ok()?
    };
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    let v = Coeff::new(numer, denom);
    Some(if neg { -v } else { v })
}

fn format_coeff(c: &Coeff) -> String {
    if c.is_integer() {
        c.numer().to_string()
    } else {
        format!("{}/{}", c.numer(), c.denom())
    }
}

fn format_monomial(m: &DiffMonomial) -> String {
    m.multi_index()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 0)
        .map(|(i, &a)| {
            if a == 1 {
                format!("dx{}", i + 1)
            } else {
                format!("dx{}^{}", i + 1, a)
            }
        })
        .collect::<Vec<_>>()
        .join("*")
}

fn format_poly(p: &OperatorPoly) -> String {
    if p.is_zero() {
        return "0".into();
    }
    let mut out = String::new();
    for (i, (m, c)) in p.terms().enumerate() {
        let mag = c.abs();
        if i == 0 {
            if c.is_negative() {
                out.push('-');
            }
        } else {
            out.push_str(if c.is_negative() { " - " } else { " + " });
        }
        let mono = format_monomial(m);
        if mono.is_empty() {
            out.push_str(&format_coeff(&mag));
        } else if mag.is_one() {
            out.push_str(&mono);
        } else {
            out.push_str(&format_coeff(&mag));
            out.push('*');
            out.push_str(&mono);
        }
    }
    out
}

pub(crate) fn format_operator(op: &OperatorMatrix) -> String {
    let rows: Vec<String> = (0..op.rows())
        .map(|i| {
            (0..op.cols())
                .map(|j| format_poly(op.entry(i, j)))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();
    format!("[{}]", rows.join("; "))
}
