use super::ast::{Pos, Span};
use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Number(f64, String),
    Str(String),
    Colon,
    Semi,
    Comma,
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Pipe,
    Plus,
    Minus,
    Star,
    Slash,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Assign,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(_, t) => format!("number `{t}`"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::Colon => ":",
            Tok::Semi => ";",
            Tok::Comma => ",",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Pipe => "|",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::EqEq => "==",
            Tok::NotEq => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::Assign => "=",
            _ => "",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

struct Cursor<'a> {
    chars: Vec<char>,
    src: &'a str,
    i: usize,
    pos: Pos,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).copied()
    }

    fn peek2(&self) -> Option<char> {
        self.chars.get(self.i + 1).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.i += 1;
        self.pos.offset += c.len_utf8();
        if c == '\n' {
            self.pos.line += 1;
            self.pos.col = 1;
        } else {
            self.pos.col += 1;
        }
        Some(c)
    }
}

/// Splits program text into tokens. `#` and `//` start line comments.
pub fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut c = Cursor {
        chars: src.chars().collect(),
        src,
        i: 0,
        pos: Pos {
            line: 1,
            col: 1,
            offset: 0,
        },
    };
    let mut out = Vec::new();
    loop {
        while let Some(ch) = c.peek() {
            if ch.is_whitespace() {
                c.bump();
            } else if ch == '#' || (ch == '/' && c.peek2() == Some('/')) {
                while let Some(ch) = c.peek() {
                    if ch == '\n' {
                        break;
                    }
                    c.bump();
                }
            } else {
                break;
            }
        }
        let start = c.pos;
        let Some(ch) = c.peek() else {
            out.push(Token {
                tok: Tok::Eof,
                span: Span { start, end: start },
            });
            return Ok(out);
        };
        let tok = if ch.is_ascii_alphabetic() || ch == '_' {
            let mut s = String::new();
            while let Some(ch) = c.peek() {
                if ch.is_ascii_alphanumeric() || ch == '_' {
                    s.push(ch);
                    c.bump();
                } else {
                    break;
                }
            }
            Tok::Ident(s)
        } else if ch.is_ascii_digit() || (ch == '.' && c.peek2().is_some_and(|d| d.is_ascii_digit())) {
            lex_number(&mut c)?
        } else if ch == '"' {
            c.bump();
            let mut s = String::new();
            loop {
                match c.bump() {
                    Some('"') => break,
                    Some('\\') => match c.bump() {
                        Some(e) => s.push(e),
                        None => return Err(unterminated(start, c.pos)),
                    },
                    Some(ch) => s.push(ch),
                    None => return Err(unterminated(start, c.pos)),
                }
            }
            Tok::Str(s)
        } else {
            c.bump();
            let two = |c: &mut Cursor, next: char, yes: Tok, no: Tok| {
                if c.peek() == Some(next) {
                    c.bump();
                    yes
                } else {
                    no
                }
            };
            match ch {
                ':' => Tok::Colon,
                ';' => Tok::Semi,
                ',' => Tok::Comma,
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                '{' => Tok::LBrace,
                '}' => Tok::RBrace,
                '[' => Tok::LBracket,
                ']' => Tok::RBracket,
                '|' => Tok::Pipe,
                '+' => Tok::Plus,
                '-' => Tok::Minus,
                '*' => Tok::Star,
                '/' => Tok::Slash,
                '=' => two(&mut c, '=', Tok::EqEq, Tok::Assign),
                '<' => two(&mut c, '=', Tok::Le, Tok::Lt),
                '>' => two(&mut c, '=', Tok::Ge, Tok::Gt),
                '!' if c.peek() == Some('=') => {
                    c.bump();
                    Tok::NotEq
                }
                other => {
                    return Err(ParseError::Syntax {
                        message: format!("unexpected character `{other}`"),
                        span: Span { start, end: c.pos },
                    })
                }
            }
        };
        out.push(Token {
            tok,
            span: Span { start, end: c.pos },
        });
    }
}

fn unterminated(start: Pos, end: Pos) -> ParseError {
    ParseError::Syntax {
        message: "unterminated string literal".into(),
        span: Span { start, end },
    }
}

fn lex_number(c: &mut Cursor) -> Result<Tok, ParseError> {
    let start = c.pos;
    let from = c.pos.offset;
    while c.peek().is_some_and(|d| d.is_ascii_digit()) {
        c.bump();
    }
    if c.peek() == Some('.') {
        c.bump();
        while c.peek().is_some_and(|d| d.is_ascii_digit()) {
            c.bump();
        }
    }
    if matches!(c.peek(), Some('e' | 'E')) {
        let sign = matches!(c.peek2(), Some('+' | '-'));
        let digit_at = if sign { c.i + 2 } else { c.i + 1 };
        if c.chars.get(digit_at).is_some_and(|d| d.is_ascii_digit()) {
            c.bump();
            if sign {
                c.bump();
            }
            while c.peek().is_some_and(|d| d.is_ascii_digit()) {
                c.bump();
            }
        }
    }
    let text = &c.src[from..c.pos.offset];
    let value = text.parse::<f64>().map_err(|_| ParseError::Syntax {
        message: format!("malformed number `{text}`"),
        span: Span { start, end: c.pos },
    })?;
    Ok(Tok::Number(value, text.to_string()))
}
