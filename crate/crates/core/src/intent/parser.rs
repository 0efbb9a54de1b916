use std::collections::BTreeMap;

use super::{
    first_overlap, AttributePredicate, Comparator, GroupSpec, PairPolicy, PolicyError,
    PolicyErrorKind, PolicySet,
};
use crate::model::{even_weights, is_ident, EidPrefix, GroupId, LabelPref};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    LBrace,
    RBrace,
    Comma,
    Semi,
    Colon,
    Arrow,
    Cmp(Comparator),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Word(w) => format!("{w:?}"),
        Tok::LBrace => "'{'".into(),
        Tok::RBrace => "'}'".into(),
        Tok::Comma => "','".into(),
        Tok::Semi => "';'".into(),
        Tok::Colon => "':'".into(),
        Tok::Arrow => "'->'".into(),
        Tok::Cmp(c) => format!("'{}'", c.symbol()),
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '/')
}

fn lex(text: &str) -> Result<Vec<Token>, PolicyError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let mut push = |tok, len: usize, i: &mut usize, col: &mut usize| {
            out.push(Token { tok, line: tl, col: tc });
            *i += len;
            *col += len;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '{' => push(Tok::LBrace, 1, &mut i, &mut col),
            '}' => push(Tok::RBrace, 1, &mut i, &mut col),
            ',' => push(Tok::Comma, 1, &mut i, &mut col),
            ';' => push(Tok::Semi, 1, &mut i, &mut col),
            ':' => push(Tok::Colon, 1, &mut i, &mut col),
            '-' if chars.get(i + 1) == Some(&'>') => push(Tok::Arrow, 2, &mut i, &mut col),
            '<' if chars.get(i + 1) == Some(&'=') => push(Tok::Cmp(Comparator::Le), 2, &mut i, &mut col),
            '>' if chars.get(i + 1) == Some(&'=') => push(Tok::Cmp(Comparator::Ge), 2, &mut i, &mut col),
            '<' => push(Tok::Cmp(Comparator::Lt), 1, &mut i, &mut col),
            '>' => push(Tok::Cmp(Comparator::Gt), 1, &mut i, &mut col),
            '=' => push(Tok::Cmp(Comparator::Eq), 1, &mut i, &mut col),
            '≤' => push(Tok::Cmp(Comparator::Le), 1, &mut i, &mut col),
            '≥' => push(Tok::Cmp(Comparator::Ge), 1, &mut i, &mut col),
            c if is_word_char(c) => {
                let start = i;
                while i < chars.len()
                    && is_word_char(chars[i])
                    && !(chars[i] == '-' && chars.get(i + 1) == Some(&'>'))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                col += i - start;
                out.push(Token {
                    tok: Tok::Word(word),
                    line: tl,
                    col: tc,
                });
            }
            other => {
                return Err(PolicyError::new(
                    PolicyErrorKind::SyntaxError,
                    line,
                    col,
                    format!("unexpected character {other:?}"),
                ))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Pos {
    line: usize,
    col: usize,
}

enum RawPref {
    Prio(u8),
    Weight(u8),
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
    eof: Pos,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.at)
    }

    fn pos(&self) -> Pos {
        self.peek().map_or(self.eof, |t| Pos {
            line: t.line,
            col: t.col,
        })
    }

    fn syntax(&self, pos: Pos, msg: impl Into<String>) -> PolicyError {
        PolicyError::new(PolicyErrorKind::SyntaxError, pos.line, pos.col, msg)
    }

    fn unexpected(&self, wanted: &str) -> PolicyError {
        let found = self.peek().map_or("end of input".to_string(), |t| describe(&t.tok));
        self.syntax(self.pos(), format!("expected {wanted}, found {found}"))
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.at).cloned();
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn at_tok(&self, tok: &Tok) -> bool {
        self.peek().is_some_and(|t| &t.tok == tok)
    }

    fn at_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Word(x), .. }) if x == w)
    }

    fn expect(&mut self, tok: Tok) -> Result<Pos, PolicyError> {
        if self.at_tok(&tok) {
            let p = self.pos();
            self.at += 1;
            Ok(p)
        } else {
            Err(self.unexpected(&describe(&tok)))
        }
    }

    fn expect_keyword(&mut self, w: &str) -> Result<(), PolicyError> {
        if self.at_word(w) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.unexpected(&format!("{w:?}")))
        }
    }

    fn word(&mut self, wanted: &str) -> Result<(String, Pos), PolicyError> {
        let pos = self.pos();
        match self.peek() {
            Some(Token { tok: Tok::Word(w), .. }) => {
                let w = w.clone();
                self.at += 1;
                Ok((w, pos))
            }
            _ => Err(self.unexpected(wanted)),
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), PolicyError> {
        let (w, pos) = self.word("identifier")?;
        if !is_ident(&w) {
            return Err(self.syntax(pos, format!("{w:?} is not a valid identifier")));
        }
        Ok((w, pos))
    }

    fn group_ref(&mut self) -> Result<(GroupId, Pos), PolicyError> {
        let (w, pos) = self.ident()?;
        Ok((GroupId::new(&w).expect("identifier is a valid group name"), pos))
    }

    fn number_u8(&mut self) -> Result<u8, PolicyError> {
        let (w, pos) = self.word("number")?;
        w.parse::<u8>()
            .map_err(|_| self.syntax(pos, format!("{w:?} is not an integer in 0..=255")))
    }

    fn prefix(&mut self) -> Result<EidPrefix, PolicyError> {
        let (w, pos) = self.word("prefix")?;
        w.parse::<EidPrefix>()
            .map_err(|e| self.syntax(pos, format!("bad prefix {w:?}: {e}")))
    }

    fn label_list(&mut self) -> Result<Vec<LabelPref>, PolicyError> {
        let start = self.pos();
        let mut raw: Vec<(String, RawPref, Pos)> = Vec::new();
        loop {
            let (label, pos) = self.word("interface label")?;
            let label_ok = label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
            if !label_ok {
                return Err(self.syntax(pos, format!("{label:?} is not a valid interface label")));
            }
            if raw.iter().any(|(l, _, _)| *l == label) {
                return Err(self.syntax(pos, format!("label {label} listed twice")));
            }
            let pref = if self.at_word("prio") {
                self.at += 1;
                let p = self.number_u8()?;
                if p == 0 {
                    return Err(self.syntax(pos, "priorities start at 1"));
                }
                RawPref::Prio(p)
            } else if self.at_word("w") {
                self.at += 1;
                let w = self.number_u8()?;
                if w > 100 {
                    return Err(self.syntax(pos, "weights are at most 100"));
                }
                RawPref::Weight(w)
            } else {
                return Err(self.unexpected("\"prio\" or \"w\""));
            };
            raw.push((label, pref, pos));
            if self.at_tok(&Tok::Comma) {
                self.at += 1;
            } else {
                break;
            }
        }
        normalize_labels(raw).map_err(|m| self.syntax(start, m))
    }

    /// Consumes a `;` separator; optional right before `}`.
    fn clause_end(&mut self) -> Result<(), PolicyError> {
        if self.at_tok(&Tok::Semi) {
            self.at += 1;
            Ok(())
        } else if self.at_tok(&Tok::RBrace) {
            Ok(())
        } else {
            Err(self.unexpected("';' or '}'"))
        }
    }
}

/// Weighted entries share priority 1 and must sum to 100; prioritized entries
/// sharing a level split the weight evenly.
fn normalize_labels(raw: Vec<(String, RawPref, Pos)>) -> Result<Vec<LabelPref>, String> {
    let weighted: u32 = raw
        .iter()
        .filter_map(|(_, p, _)| match p {
            RawPref::Weight(w) => Some(u32::from(*w)),
            RawPref::Prio(_) => None,
        })
        .sum();
    let any_weighted = raw.iter().any(|(_, p, _)| matches!(p, RawPref::Weight(_)));
    if any_weighted && weighted != 100 {
        return Err(format!("weights sum to {weighted}, expected 100"));
    }
    if any_weighted && raw.iter().any(|(_, p, _)| matches!(p, RawPref::Prio(1))) {
        return Err("weighted labels already occupy priority 1".into());
    }
    let mut out: Vec<LabelPref> = raw
        .iter()
        .map(|(label, p, _)| match p {
            RawPref::Weight(w) => LabelPref::new(label.clone(), 1, *w),
            RawPref::Prio(prio) => LabelPref::new(label.clone(), *prio, 100),
        })
        .collect();
    let mut levels: Vec<u8> = raw
        .iter()
        .filter_map(|(_, p, _)| match p {
            RawPref::Prio(x) => Some(*x),
            RawPref::Weight(_) => None,
        })
        .collect();
    levels.sort_unstable();
    levels.dedup();
    for level in levels {
        let members: Vec<usize> = (0..out.len()).filter(|&i| out[i].priority == level).collect();
        for (i, w) in members.iter().zip(even_weights(members.len())) {
            out[*i].weight = w;
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Builder {
    groups: Vec<(GroupSpec, Pos)>,
    egress: BTreeMap<GroupId, Vec<LabelPref>>,
    ingress: BTreeMap<GroupId, Vec<LabelPref>>,
    pairs: BTreeMap<(GroupId, GroupId), PairPolicy>,
    references: Vec<(GroupId, Pos)>,
}

/// Parses and validates a policy document.
pub fn parse_policy(text: &str) -> Result<PolicySet, PolicyError> {
    let toks = lex(text)?;
    let eof = Pos {
        line: text.lines().count().max(1),
        col: text.lines().last().map_or(1, |l| l.chars().count() + 1),
    };
    let mut p = Parser { toks, at: 0, eof };
    let mut b = Builder::default();
    while p.peek().is_some() {
        let pos = p.pos();
        if p.at_word("group") {
            p.at += 1;
            parse_group(&mut p, &mut b, pos)?;
        } else if p.at_word("default") {
            p.at += 1;
            parse_default(&mut p, &mut b, pos)?;
        } else if p.at_word("pair") {
            p.at += 1;
            parse_pair(&mut p, &mut b, pos)?;
        } else {
            return Err(p.unexpected("\"group\", \"default\" or \"pair\""));
        }
    }
    validate(b)
}

fn parse_group(p: &mut Parser, b: &mut Builder, _stmt: Pos) -> Result<(), PolicyError> {
    let (id, pos) = p.group_ref()?;
    if b.groups.iter().any(|(g, _)| g.id == id) {
        return Err(PolicyError::new(
            PolicyErrorKind::DuplicateDeclaration,
            pos.line,
            pos.col,
            format!("group {id} declared twice"),
        ));
    }
    p.expect(Tok::LBrace)?;
    p.expect_keyword("members")?;
    p.expect(Tok::Colon)?;
    let mut members = vec![p.prefix()?];
    while p.at_tok(&Tok::Comma) {
        p.at += 1;
        members.push(p.prefix()?);
    }
    let mut predicate = None;
    if p.at_tok(&Tok::Semi) {
        p.at += 1;
        if p.at_word("where") {
            p.at += 1;
            let (key, _) = p.ident()?;
            let cmp = match p.next() {
                Some(Token { tok: Tok::Cmp(c), .. }) => c,
                _ => {
                    p.at = p.at.saturating_sub(1);
                    return Err(p.unexpected("comparator"));
                }
            };
            let (num, npos) = p.word("number")?;
            let threshold: f64 = num
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| p.syntax(npos, format!("{num:?} is not a number")))?;
            predicate = Some(AttributePredicate { key, cmp, threshold });
            if p.at_tok(&Tok::Semi) {
                p.at += 1;
            }
        }
    }
    p.expect(Tok::RBrace)?;
    b.groups.push((
        GroupSpec {
            id,
            members,
            predicate,
        },
        pos,
    ));
    Ok(())
}

fn parse_default(p: &mut Parser, b: &mut Builder, _stmt: Pos) -> Result<(), PolicyError> {
    let egress = if p.at_word("egress") {
        true
    } else if p.at_word("ingress") {
        false
    } else {
        return Err(p.unexpected("\"egress\" or \"ingress\""));
    };
    p.at += 1;
    let (group, pos) = p.group_ref()?;
    p.expect(Tok::LBrace)?;
    let labels = p.label_list()?;
    if p.at_tok(&Tok::Semi) {
        p.at += 1;
    }
    p.expect(Tok::RBrace)?;
    let map = if egress { &mut b.egress } else { &mut b.ingress };
    if map.contains_key(&group) {
        return Err(PolicyError::new(
            PolicyErrorKind::DuplicateDeclaration,
            pos.line,
            pos.col,
            format!(
                "default {} for {group} declared twice",
                if egress { "egress" } else { "ingress" }
            ),
        ));
    }
    map.insert(group.clone(), labels);
    b.references.push((group, pos));
    Ok(())
}

fn parse_pair(p: &mut Parser, b: &mut Builder, _stmt: Pos) -> Result<(), PolicyError> {
    let (src, spos) = p.group_ref()?;
    p.expect(Tok::Arrow)?;
    let (dst, dpos) = p.group_ref()?;
    p.expect(Tok::LBrace)?;
    let mut policy = PairPolicy::default();
    if p.at_word("egress") {
        p.at += 1;
        policy.egress = p.label_list()?;
        p.clause_end()?;
    }
    if p.at_word("via") {
        p.at += 1;
        let (first, _) = p.ident()?;
        policy.via.push(first);
        while p.at_tok(&Tok::Comma) {
            p.at += 1;
            policy.via.push(p.ident()?.0);
        }
        p.clause_end()?;
    }
    if p.at_word("ingress") {
        p.at += 1;
        policy.ingress = p.label_list()?;
        p.clause_end()?;
    }
    p.expect(Tok::RBrace)?;
    let key = (src.clone(), dst.clone());
    if b.pairs.contains_key(&key) {
        return Err(PolicyError::new(
            PolicyErrorKind::DuplicateDeclaration,
            spos.line,
            spos.col,
            format!("pair {src} -> {dst} declared twice"),
        ));
    }
    b.pairs.insert(key, policy);
    b.references.push((src, spos));
    b.references.push((dst, dpos));
    Ok(())
}

fn validate(b: Builder) -> Result<PolicySet, PolicyError> {
    for (g, pos) in &b.references {
        if !b.groups.iter().any(|(s, _)| &s.id == g) {
            return Err(PolicyError::new(
                PolicyErrorKind::UndeclaredGroup,
                pos.line,
                pos.col,
                format!("group {g} is not declared"),
            ));
        }
    }
    let (specs, positions): (Vec<GroupSpec>, Vec<Pos>) = b.groups.into_iter().unzip();
    if let Some((a, later)) = first_overlap(&specs) {
        let pos = positions[later];
        return Err(PolicyError::new(
            PolicyErrorKind::OverlappingMembership,
            pos.line,
            pos.col,
            format!("members of {} overlap {}", specs[later].id, specs[a].id),
        ));
    }
    Ok(PolicySet::assemble(specs, b.egress, b.ingress, b.pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WESTCOAST: &str = include_str!("../../examples/westcoast.policy");

    fn kind(text: &str) -> (PolicyErrorKind, usize) {
        let e = parse_policy(text).unwrap_err();
        (e.kind, e.line)
    }

    #[test]
    fn golden_westcoast() {
        let p = parse_policy(WESTCOAST).unwrap();
        assert_eq!(p.groups().len(), 2);
        assert_eq!(p.pairs().count(), 1);
        let laptops = GroupId::new("EmployeesLaptops").unwrap();
        let office = GroupId::new("WestCoastOffice").unwrap();
        assert_eq!(
            p.default_egress(&laptops).unwrap(),
            &[LabelPref::new("Ethernet", 1, 100)]
        );
        assert_eq!(
            p.default_ingress(&office).unwrap(),
            &[LabelPref::new("Link-1", 1, 50), LabelPref::new("Link-2", 1, 50)]
        );
        let pair = p.pair(&laptops, &office).unwrap();
        assert_eq!(pair.egress, vec![LabelPref::new("LTE", 1, 100)]);
        assert_eq!(pair.via, vec!["Firewall".to_string()]);
        assert_eq!(pair.ingress, vec![LabelPref::new("Link-3", 1, 100)]);
    }

    #[test]
    fn canonical_text_reparses_equal() {
        let p = parse_policy(WESTCOAST).unwrap();
        let again = parse_policy(&p.to_string()).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn empty_document() {
        assert!(parse_policy("").unwrap().is_empty());
        assert!(parse_policy("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn undeclared_group_reports_its_line() {
        let text = "group A { members: 10.0.0.0/8 }\n\npair Visitors -> A { via Fw }\n";
        let e = parse_policy(text).unwrap_err();
        assert_eq!(e.kind, PolicyErrorKind::UndeclaredGroup);
        assert_eq!((e.line, e.col), (3, 6));
        assert!(e.message.contains("Visitors"));
    }

    #[test]
    fn duplicates() {
        assert_eq!(
            kind("group A { members: 10.0.0.0/8 }\ngroup A { members: 11.0.0.0/8 }"),
            (PolicyErrorKind::DuplicateDeclaration, 2)
        );
        assert_eq!(
            kind("group A { members: 10.0.0.0/8 }\ndefault ingress A { x prio 1 }\ndefault ingress A { y prio 1 }"),
            (PolicyErrorKind::DuplicateDeclaration, 3)
        );
        assert_eq!(
            kind("group A { members: 10.0.0.0/8 }\npair A -> A { via F }\npair A -> A { via G }"),
            (PolicyErrorKind::DuplicateDeclaration, 3)
        );
    }

    #[test]
    fn overlapping_plain_groups() {
        assert_eq!(
            kind("group A { members: 10.0.0.0/8 }\ngroup B { members: 12.0.0.0/8, 10.3.0.0/16 }"),
            (PolicyErrorKind::OverlappingMembership, 2)
        );
        // Attribute-qualified groups may overlap.
        assert!(parse_policy("group A { members: 10.0.0.0/8 }\ngroup B { members: 10.3.0.0/16; where battery <= 15 }").is_ok());
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(kind("group A members: 10.0.0.0/8 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group A { members: 10.0.0.1/8 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group 1A { members: 10.0.0.0/8 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("frobnicate").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group A { members: 10.0.0.0/8 }\ndefault ingress A { x w 60, y w 30 }"), (PolicyErrorKind::SyntaxError, 2));
        assert_eq!(kind("group A { members: 10.0.0.0/8 }\ndefault ingress A { x w 50, y w 50, z prio 1 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group A { members: 10.0.0.0/8 }\ndefault ingress A { x prio 1, x prio 2 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group A { members: 10.0.0.0/8 ; where b ~ 3 }").0, PolicyErrorKind::SyntaxError);
        assert_eq!(kind("group A { members: 10.0.0.0/8 }\ndefault ingress A { x prio 0 }").0, PolicyErrorKind::SyntaxError);
        let e = parse_policy("group A {").unwrap_err();
        assert!(e.message.contains("end of input"), "{e}");
    }

    #[test]
    fn shared_priority_splits_weight() {
        let p = parse_policy("group A { members: 10.0.0.0/8 }\ndefault egress A { a prio 1, b prio 1, c prio 2 }").unwrap();
        let g = GroupId::new("A").unwrap();
        assert_eq!(
            p.default_egress(&g).unwrap(),
            &[LabelPref::new("a", 1, 50), LabelPref::new("b", 1, 50), LabelPref::new("c", 2, 100)]
        );
    }

    #[test]
    fn arrow_without_spaces_and_unicode_comparators() {
        let p = parse_policy(
            "group A { members: 10.0.0.0/8 }\ngroup B { members: 11.0.0.0/8; where battery ≤ 15 }\npair A->B { egress LTE prio 1 }",
        )
        .unwrap();
        assert_eq!(p.pairs().count(), 1);
        assert_eq!(p.groups()[1].predicate.as_ref().unwrap().cmp, Comparator::Le);
    }
}
