use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Pipe,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Arrow,
    Dot,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Assign,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Float(f) => format!("number {f}"),
            Tok::Str(_) => "string literal".into(),
            Tok::Eof => "end of query".into(),
            other => format!("'{}'", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::Pipe => "|",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Comma => ",",
            Tok::Arrow => "->",
            Tok::Dot => ".",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Percent => "%",
            Tok::EqEq => "==",
            Tok::NotEq => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Bang => "!",
            Tok::Assign => "=",
            _ => "?",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut lx = Lexer { chars: src.chars().collect(), pos: 0, line: 1, column: 1 };
    let mut out = Vec::new();
    loop {
        lx.skip_ws();
        let (line, column) = (lx.line, lx.column);
        let tok = lx.next_tok()?;
        let done = tok == Tok::Eof;
        out.push(Token { tok, line, column });
        if done {
            return Ok(out);
        }
    }
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
}

impl Lexer {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.chars.get(self.pos + n).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError { line: self.line, column: self.column, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn next_tok(&mut self) -> Result<Tok, ParseError> {
        let Some(c) = self.peek() else { return Ok(Tok::Eof) };
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
                s.push(self.bump().unwrap());
            }
            return Ok(Tok::Ident(s));
        }
        if c.is_ascii_digit() {
            return self.number();
        }
        if c == '"' {
            return self.string();
        }
        let two = |lx: &mut Lexer, t: Tok| {
            lx.bump();
            lx.bump();
            Ok(t)
        };
        let next = self.peek_at(1);
        match (c, next) {
            ('-', Some('>')) => return two(self, Tok::Arrow),
            ('=', Some('=')) => return two(self, Tok::EqEq),
            ('!', Some('=')) => return two(self, Tok::NotEq),
            ('<', Some('=')) => return two(self, Tok::Le),
            ('>', Some('=')) => return two(self, Tok::Ge),
            ('&', Some('&')) => return two(self, Tok::AndAnd),
            ('|', Some('|')) => return two(self, Tok::OrOr),
            _ => {}
        }
        let tok = match c {
            '|' => Tok::Pipe,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            '.' => Tok::Dot,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '%' => Tok::Percent,
            '<' => Tok::Lt,
            '>' => Tok::Gt,
            '!' => Tok::Bang,
            '=' => Tok::Assign,
            other => return Err(self.err(format!("unexpected character '{other}'"))),
        };
        self.bump();
        Ok(tok)
    }

    fn digits(&mut self, s: &mut String) -> usize {
        let mut n = 0;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            s.push(self.bump().unwrap());
            n += 1;
        }
        n
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let (line, column) = (self.line, self.column);
        let at = |message: &str| ParseError { line, column, message: message.into() };
        let mut s = String::new();
        self.digits(&mut s);
        // A '.' only starts a fraction when a digit follows; `x[0].a` stays an index then a field.
        if self.peek() == Some('.') && matches!(self.peek_at(1), Some(c) if c.is_ascii_digit()) {
            s.push(self.bump().unwrap());
            self.digits(&mut s);
            if matches!(self.peek(), Some('e' | 'E')) {
                let sign = matches!(self.peek_at(1), Some('+' | '-'));
                let digit_at = if sign { 2 } else { 1 };
                if matches!(self.peek_at(digit_at), Some(c) if c.is_ascii_digit()) {
                    s.push(self.bump().unwrap());
                    if sign {
                        s.push(self.bump().unwrap());
                    }
                    self.digits(&mut s);
                }
            }
            let f: f64 = s.parse().map_err(|_| at("invalid number"))?;
            if !f.is_finite() {
                return Err(at("number literal out of range"));
            }
            return Ok(Tok::Float(f));
        }
        s.parse::<i64>().map(Tok::Int).map_err(|_| at("integer literal out of range"))
    }

    fn string(&mut self) -> Result<Tok, ParseError> {
        self.bump();
        let mut s = String::new();
        loop {
            match self.bump() {
                None => return Err(self.err("unterminated string literal")),
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    _ => return Err(self.err("unsupported escape in string literal")),
                },
                Some(c) => s.push(c),
            }
        }
    }
}
