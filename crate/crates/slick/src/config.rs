//! The `.slick` configuration language.
//!
//! A configuration declares named element instances and connects their
//! numbered ports:
//!
//! ```text
//! // declarations
//! src  :: FromTestDevice(pcap, traffic.pcap);
//! fw   :: Firewall("rules.txt");
//! sink :: ToTestDevice(out);
//!
//! /* links; ports default to 0 and chains desugar pairwise */
//! src -> fw;
//! fw [0] -> sink;
//! fw [1] -> Discard@drop;
//! ```
//!
//! The grammar is deliberately small: `name :: Class(args);` declarations,
//! `a [p] -> [q] b -> c;` link chains, line and block comments. Arguments
//! are free-form strings separated by top-level commas; quote an argument to
//! include commas, parentheses or leading whitespace.
//!
//! Parsing and printing are inverses: `parse(&print(&config))` reproduces
//! the configuration exactly. [`Config::canonical_text`] goes further and
//! produces a formatting-independent form, which is what attestation
//! measurements hash: reflowing whitespace or comments never changes what a
//! deployment attests to.

use std::fmt::Write as _;

/// A parsed configuration: declarations plus desugared point-to-point links.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Config {
    pub decls: Vec<Decl>,
    pub links: Vec<Link>,
}

/// `name :: Class(args);`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decl {
    pub name: String,
    pub class: String,
    pub args: Vec<String>,
}

/// One edge: output port `from_port` of `from` pushes into input port
/// `to_port` of `to`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Link {
    pub from: String,
    pub from_port: u32,
    pub to: String,
    pub to_port: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidateError {
    #[error("element `{0}` is declared twice")]
    DuplicateName(String),
    #[error("link references undeclared element `{0}`")]
    UndeclaredElement(String),
    #[error("output port {1} of `{0}` is connected twice")]
    OutputConnectedTwice(String, u32),
}

/// Parse a configuration text.
pub fn parse(text: &str) -> Result<Config, ParseError> {
    Parser::new(text).parse_config()
}

impl Config {
    /// Structural checks that need no knowledge of element classes:
    /// unique names, links to declared elements only, and at most one
    /// consumer per output port (an output pushes to exactly one place;
    /// fan-in to an input port is allowed).
    pub fn validate(&self) -> Result<(), ValidateError> {
        let mut names = std::collections::HashSet::new();
        for d in &self.decls {
            if !names.insert(d.name.as_str()) {
                return Err(ValidateError::DuplicateName(d.name.clone()));
            }
        }
        let mut outs = std::collections::HashSet::new();
        for l in &self.links {
            for end in [&l.from, &l.to] {
                if !names.contains(end.as_str()) {
                    return Err(ValidateError::UndeclaredElement(end.clone()));
                }
            }
            if !outs.insert((l.from.as_str(), l.from_port)) {
                return Err(ValidateError::OutputConnectedTwice(
                    l.from.clone(),
                    l.from_port,
                ));
            }
        }
        Ok(())
    }

    pub fn decl(&self, name: &str) -> Option<&Decl> {
        self.decls.iter().find(|d| d.name == name)
    }

    /// Render the configuration; `parse` of the result reproduces `self`.
    pub fn print(&self) -> String {
        let mut out = String::new();
        for d in &self.decls {
            write!(out, "{} :: {}", d.name, d.class).unwrap();
            if !d.args.is_empty() {
                let args: Vec<String> = d.args.iter().map(|a| print_arg(a)).collect();
                write!(out, "({})", args.join(", ")).unwrap();
            }
            out.push_str(";\n");
        }
        for l in &self.links {
            out.push_str(&l.from);
            if l.from_port != 0 {
                write!(out, " [{}]", l.from_port).unwrap();
            }
            out.push_str(" -> ");
            if l.to_port != 0 {
                write!(out, "[{}] ", l.to_port).unwrap();
            }
            out.push_str(&l.to);
            out.push_str(";\n");
        }
        out
    }

    /// Formatting-independent text: declarations sorted by name, links
    /// sorted, every port explicit. Attestation measurements are computed
    /// over this form.
    pub fn canonical_text(&self) -> String {
        let mut decls = self.decls.clone();
        decls.sort_by(|a, b| a.name.cmp(&b.name));
        let mut links = self.links.clone();
        links.sort();
        let mut out = String::new();
        for d in &decls {
            let args: Vec<String> = d.args.iter().map(|a| print_arg(a)).collect();
            write!(out, "{}::{}({});", d.name, d.class, args.join(",")).unwrap();
        }
        for l in &links {
            write!(out, "{}[{}]->[{}]{};", l.from, l.from_port, l.to_port, l.to).unwrap();
        }
        out
    }
}

/// Quote an argument when printing it bare would not survive a round trip.
fn print_arg(arg: &str) -> String {
    let bare_safe = !arg.is_empty()
        && !arg.starts_with(char::is_whitespace)
        && !arg.ends_with(char::is_whitespace)
        && !arg.contains(['"', ',', '(', ')', '\n', '\r', ';'])
        && !arg.contains("//")
        && !arg.contains("/*");
    if bare_safe {
        return arg.to_string();
    }
    let mut s = String::with_capacity(arg.len() + 2);
    s.push('"');
    for c in arg.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\t' => s.push_str("\\t"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s.push('"');
    s
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    col: u32,
    text_marker: std::marker::PhantomData<&'a str>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            chars: strip_comments(text),
            pos: 0,
            line: 1,
            col: 1,
            text_marker: std::marker::PhantomData,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.bump();
        }
    }

    fn eat(&mut self, want: char) -> bool {
        if self.peek() == Some(want) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        if self.eat(want) {
            Ok(())
        } else {
            self.err(format!("expected `{want}`"))
        }
    }

    fn parse_config(&mut self) -> Result<Config, ParseError> {
        let mut config = Config::default();
        loop {
            self.skip_ws();
            if self.peek().is_none() {
                return Ok(config);
            }
            self.parse_statement(&mut config)?;
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        self.skip_ws();
        let mut s = String::new();
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                s.push(c);
                self.bump();
            }
            _ => return self.err("expected an identifier"),
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '@' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Ok(s)
    }

    fn port(&mut self) -> Result<u32, ParseError> {
        self.skip_ws();
        self.expect('[')?;
        self.skip_ws();
        let mut digits = String::new();
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            digits.push(self.bump().unwrap());
        }
        if digits.is_empty() {
            return self.err("expected a port number");
        }
        let port = match digits.parse::<u32>() {
            Ok(p) => p,
            Err(_) => return self.err("port number out of range"),
        };
        self.skip_ws();
        self.expect(']')?;
        Ok(port)
    }

    fn parse_statement(&mut self, config: &mut Config) -> Result<(), ParseError> {
        let first = self.ident()?;
        self.skip_ws();
        if self.eat(':') {
            self.expect(':')?;
            let class = self.ident()?;
            self.skip_ws();
            let args = if self.peek() == Some('(') {
                self.args()?
            } else {
                Vec::new()
            };
            self.skip_ws();
            self.expect(';')?;
            config.decls.push(Decl {
                name: first,
                class,
                args,
            });
            return Ok(());
        }
        // A link chain: first [p]? (-> [q]? name [p]?)+ ;
        let mut from = first;
        let mut from_port = if self.peek() == Some('[') {
            self.port()?
        } else {
            0
        };
        let mut linked = false;
        loop {
            self.skip_ws();
            if self.eat(';') {
                if !linked {
                    return self.err("expected `::` or `->`");
                }
                return Ok(());
            }
            if !self.eat('-') || !self.eat('>') {
                return self.err("expected `->` or `;`");
            }
            self.skip_ws();
            let to_port = if self.peek() == Some('[') { self.port()? } else { 0 };
            let to = self.ident()?;
            self.skip_ws();
            config.links.push(Link {
                from,
                from_port,
                to: to.clone(),
                to_port,
            });
            linked = true;
            from = to;
            from_port = if self.peek() == Some('[') {
                self.port()?
            } else {
                0
            };
        }
    }

    /// Parse `( ... )` into arguments: split on top-level commas, honouring
    /// nesting and quoted strings.
    fn args(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect('(')?;
        let mut args = Vec::new();
        let mut cur = String::new();
        // Bytes of `cur` up to `protected` came from quoted strings and are
        // exempt from trailing-whitespace trimming.
        let mut protected = 0usize;
        let mut quoted = false;
        let mut depth: u32 = 0;
        loop {
            self.skip_leading_ws_if(cur.is_empty() && !quoted);
            let Some(c) = self.peek() else {
                return self.err("unterminated argument list");
            };
            match c {
                ')' if depth == 0 => {
                    self.bump();
                    let required = !args.is_empty();
                    push_arg(&mut args, cur, protected, quoted, required)
                        .map_err(|msg| self.err::<()>(msg).unwrap_err())?;
                    return Ok(args);
                }
                ',' if depth == 0 => {
                    self.bump();
                    push_arg(&mut args, std::mem::take(&mut cur), protected, quoted, true)
                        .map_err(|msg| self.err::<()>(msg).unwrap_err())?;
                    protected = 0;
                    quoted = false;
                }
                '"' => {
                    self.bump();
                    self.quoted_string(&mut cur)?;
                    protected = cur.len();
                    quoted = true;
                }
                '(' => {
                    depth += 1;
                    cur.push(c);
                    self.bump();
                }
                ')' => {
                    depth -= 1;
                    cur.push(c);
                    self.bump();
                }
                c => {
                    cur.push(c);
                    self.bump();
                }
            }
        }
    }

    fn skip_leading_ws_if(&mut self, at_arg_start: bool) {
        if at_arg_start {
            self.skip_ws();
        }
    }

    fn quoted_string(&mut self, out: &mut String) -> Result<(), ParseError> {
        loop {
            let Some(c) = self.bump() else {
                return self.err("unterminated string");
            };
            match c {
                '"' => return Ok(()),
                '\\' => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    _ => return self.err("unknown escape in string"),
                },
                c => out.push(c),
            }
        }
    }
}

fn push_arg(
    args: &mut Vec<String>,
    cur: String,
    protected: usize,
    quoted: bool,
    required: bool,
) -> Result<(), String> {
    let tail_len = cur[protected..].trim_end().len();
    let mut arg = cur;
    arg.truncate(protected + tail_len);
    if arg.is_empty() && !quoted {
        if required {
            return Err("empty argument".to_string());
        }
        // `Class()`: no arguments at all.
        return Ok(());
    }
    args.push(arg);
    Ok(())
}

/// Blank out comments, preserving every character position (comment bytes
/// become spaces, newlines stay) so error locations keep pointing at the
/// original text. Comment markers inside quoted strings are left alone.
fn strip_comments(text: &str) -> Vec<char> {
    let mut out: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut in_string = false;
    while i < out.len() {
        let c = out[i];
        if in_string {
            if c == '\\' {
                i += 1;
            } else if c == '"' {
                in_string = false;
            }
            i += 1;
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                i += 1;
            }
            '/' if out.get(i + 1) == Some(&'/') => {
                while i < out.len() && out[i] != '\n' {
                    out[i] = ' ';
                    i += 1;
                }
            }
            '/' if out.get(i + 1) == Some(&'*') => {
                let mut closed = false;
                while i < out.len() {
                    if out[i] == '*' && out.get(i + 1) == Some(&'/') {
                        out[i] = ' ';
                        out[i + 1] = ' ';
                        i += 2;
                        closed = true;
                        break;
                    }
                    if out[i] != '\n' {
                        out[i] = ' ';
                    }
                    i += 1;
                }
                let _ = closed;
            }
            _ => i += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(from: &str, fp: u32, to: &str, tp: u32) -> Link {
        Link {
            from: from.into(),
            from_port: fp,
            to: to.into(),
            to_port: tp,
        }
    }

    #[test]
    fn parses_a_router_like_config() {
        let text = r#"
            // ingress
            src :: FromTestDevice(pcap, "traffic.pcap");
            rt  :: RouteTable(routes.txt);   /* longest prefix match */
            out0 :: ToTestDevice(a);
            out1 :: ToTestDevice(b);

            src -> rt;
            rt [0] -> out0;
            rt [1] -> out1;
        "#;
        let c = parse(text).unwrap();
        assert_eq!(c.decls.len(), 4);
        assert_eq!(c.decl("src").unwrap().class, "FromTestDevice");
        assert_eq!(c.decl("src").unwrap().args, vec!["pcap", "traffic.pcap"]);
        assert_eq!(c.decl("rt").unwrap().args, vec!["routes.txt"]);
        assert_eq!(
            c.links,
            vec![
                link("src", 0, "rt", 0),
                link("rt", 0, "out0", 0),
                link("rt", 1, "out1", 0),
            ]
        );
        c.validate().unwrap();
    }

    #[test]
    fn chain_desugars_pairwise_with_ports() {
        let c = parse("a::W;b::W;c::W;d::W; a [1] -> b -> [2] c [3] -> d;").unwrap();
        assert_eq!(
            c.links,
            vec![
                link("a", 1, "b", 0),
                link("b", 0, "c", 2),
                link("c", 3, "d", 0),
            ]
        );
    }

    #[test]
    fn decl_without_parens_and_empty_parens_are_equal() {
        let a = parse("x :: Wire;").unwrap();
        let b = parse("x :: Wire();").unwrap();
        assert_eq!(a, b);
        assert!(a.decl("x").unwrap().args.is_empty());
    }

    #[test]
    fn quoted_args_keep_commas_and_escapes() {
        let c = parse(r#"f :: Firewall("a, b(c)", plain, "q\"\\\n");"#).unwrap();
        assert_eq!(
            c.decl("f").unwrap().args,
            vec!["a, b(c)", "plain", "q\"\\\n"]
        );
    }

    #[test]
    fn nested_parens_in_bare_args() {
        let c = parse("f :: Classifier(12/0806 20/0001(x), -);").unwrap();
        assert_eq!(c.decl("f").unwrap().args, vec!["12/0806 20/0001(x)", "-"]);
    }

    #[test]
    fn comment_markers_inside_strings_are_kept() {
        let c = parse(r#"f :: F("//not a comment", "/*also*/");"#).unwrap();
        assert_eq!(
            c.decl("f").unwrap().args,
            vec!["//not a comment", "/*also*/"]
        );
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse("a :: ;").unwrap_err();
        assert_eq!((err.line, err.col), (1, 6));
        let err = parse("x :: W;\n\ny -> ;").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(parse("a -> ").unwrap_err().msg.contains("identifier"));
        assert!(parse("a;").unwrap_err().msg.contains("::"));
        assert!(parse("f :: F(a,);").unwrap_err().msg.contains("empty"));
        assert!(parse("f :: F(\"x);").unwrap_err().msg.contains("unterminated"));
    }

    #[test]
    fn validation_errors() {
        let c = parse("a::W; a::W;").unwrap();
        assert_eq!(c.validate(), Err(ValidateError::DuplicateName("a".into())));
        let c = parse("a::W; a -> b;").unwrap();
        assert_eq!(
            c.validate(),
            Err(ValidateError::UndeclaredElement("b".into()))
        );
        let c = parse("a::W; b::W; c::W; a->b; a->c;").unwrap();
        assert_eq!(
            c.validate(),
            Err(ValidateError::OutputConnectedTwice("a".into(), 0))
        );
        // Fan-in is fine.
        let c = parse("a::W; b::W; c::W; a->c; b->c;").unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn canonical_text_ignores_formatting() {
        let a = parse("b::X(1); a::Y; a -> [0] b;").unwrap();
        let b = parse("a::Y;\n// hi\nb :: X( 1 );\na->b;").unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
        // But not argument changes.
        let c = parse("b::X(2); a::Y; a->b;").unwrap();
        assert_ne!(a.canonical_text(), c.canonical_text());
    }

    fn arb_arg() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-z0-9_./*-]{1,12}",
            "[ -~]{0,12}",
            Just(String::new()),
            Just("a, b".to_string()),
            Just("sp ace".to_string()),
        ]
    }

    fn arb_config() -> impl Strategy<Value = Config> {
        let decl = ("[a-z][a-z0-9_]{0,6}", "[A-Z][A-Za-z0-9]{0,6}",
                    proptest::collection::vec(arb_arg(), 0..4))
            .prop_map(|(name, class, args)| Decl { name, class, args });
        proptest::collection::vec(decl, 1..8).prop_flat_map(|mut decls| {
            decls.sort_by(|a, b| a.name.cmp(&b.name));
            decls.dedup_by(|a, b| a.name == b.name);
            let n = decls.len();
            let links = proptest::collection::vec(
                (0..n, 0..n, 0u32..4, 0u32..4),
                0..6,
            );
            (Just(decls), links).prop_map(|(decls, raw)| {
                let mut links: Vec<Link> = raw
                    .into_iter()
                    .map(|(f, t, fp, tp)| Link {
                        from: decls[f].name.clone(),
                        from_port: fp,
                        to: decls[t].name.clone(),
                        to_port: tp,
                    })
                    .collect();
                // Printing joins consecutive links into chains only when it
                // is unambiguous, so arbitrary duplicates are fine; just
                // keep the list as generated.
                links.dedup();
                Config { decls, links }
            })
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(config in arb_config()) {
            let printed = config.print();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(reparsed, config);
        }

        #[test]
        fn canonical_is_stable_under_reordering(config in arb_config()) {
            let mut shuffled = config.clone();
            shuffled.decls.reverse();
            shuffled.links.reverse();
            prop_assert_eq!(config.canonical_text(), shuffled.canonical_text());
        }
    }
}
