//! Small value grammar shared by the state-space text format and channel specs.
//!
//! ```text
//! value  := number | ident | '[' (value (',' value)*)? ']' | ident '{' (pair (',' pair)*)? '}'
//! pair   := ident '=' value
//! ```
//!
//! Top-level input is a sequence of pairs separated by whitespace or commas.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("syntax error at column {col}: {msg}")]
pub struct SyntaxError {
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Ident(String),
    List(Vec<Value>),
    Record { name: String, fields: Vec<(String, Value)> },
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_ident(&self) -> Option<&str> {
        match self {
            Value::Ident(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    /// Flat list of numbers.
    pub fn as_numbers(&self) -> Option<Vec<f64>> {
        self.as_list()?.iter().map(Value::as_f64).collect()
    }

    /// Row-major matrix written as a list of rows; `[]` is the empty matrix.
    pub fn as_rows(&self) -> Option<Vec<Vec<f64>>> {
        self.as_list()?.iter().map(Value::as_numbers).collect()
    }

    pub fn field(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Record { fields, .. } => fields.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Ident(s) => write!(f, "{s}"),
            Value::List(items) => {
                write!(f, "[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
            Value::Record { name, fields } => {
                write!(f, "{name} {{ ")?;
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                write!(f, " }}")
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, SyntaxError> {
        Err(SyntaxError { col: self.pos + 1, msg: msg.into() })
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

    fn expect(&mut self, c: u8) -> Result<(), SyntaxError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected '{}'", c as char))
        }
    }

    fn ident(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let ok = c.is_ascii_alphabetic()
                || c == b'_'
                || (self.pos > start && (c.is_ascii_digit() || c == b'-' || c == b'.'));
            if !ok {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected identifier");
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<f64, SyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign =
                (c == b'-' || c == b'+') && self.pos > start && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit()
                || c == b'.'
                || c == b'e'
                || c == b'E'
                || exp_sign
                || ((c == b'-' || c == b'+') && self.pos == start)
            {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos = start;
                self.err(format!("invalid number '{text}'"))
            }
        }
    }

    fn value(&mut self) -> Result<Value, SyntaxError> {
        match self.peek() {
            Some(b'[') => {
                self.pos += 1;
                let mut items = Vec::new();
                if self.peek() == Some(b']') {
                    self.pos += 1;
                    return Ok(Value::List(items));
                }
                loop {
                    items.push(self.value()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {
                            self.pos += 1;
                            return Ok(Value::List(items));
                        }
                        _ => return self.err("expected ',' or ']'"),
                    }
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'-' || c == b'+' || c == b'.' => Ok(Value::Number(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let name = self.ident()?;
                if self.peek() == Some(b'{') {
                    self.pos += 1;
                    let mut fields = Vec::new();
                    if self.peek() == Some(b'}') {
                        self.pos += 1;
                        return Ok(Value::Record { name, fields });
                    }
                    loop {
                        let key = self.ident()?;
                        self.expect(b'=')?;
                        fields.push((key, self.value()?));
                        match self.peek() {
                            Some(b',') => self.pos += 1,
                            Some(b'}') => {
                                self.pos += 1;
                                return Ok(Value::Record { name, fields });
                            }
                            _ => return self.err("expected ',' or '}'"),
                        }
                    }
                }
                Ok(Value::Ident(name))
            }
            Some(c) => self.err(format!("unexpected '{}'", c as char)),
            None => self.err("unexpected end of input"),
        }
    }
}

/// Parses a single value, rejecting trailing input.
pub fn parse_value(text: &str) -> Result<Value, SyntaxError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let v = p.value()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(v)
}

/// Parses `key=value` pairs separated by whitespace or commas.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, Value)>, SyntaxError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let mut out = Vec::new();
    loop {
        while p.peek() == Some(b',') {
            p.pos += 1;
        }
        if p.peek().is_none() {
            return Ok(out);
        }
        let key = p.ident()?;
        p.expect(b'=')?;
        out.push((key, p.value()?));
    }
}
