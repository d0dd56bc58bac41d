//! Lexical Java tokenizer and structural code features used as
//! confounders in the causal analysis.
//!
//! The tokenizer is round-trip exact: concatenating token texts
//! reproduces the input byte-for-byte. Feature definitions are
//! lexer-level proxies; externally computed features can be ingested
//! instead via the features record format.

use serde::{Deserialize, Serialize};

use crate::corpus::CodeFile;

/// Lexical token kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Identifier,
    Keyword,
    Literal,
    Operator,
    Punctuation,
    Comment,
    Whitespace,
}

/// One lexical token with its half-open byte span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub span: (usize, usize),
}

/// Tokenizer output.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    /// Count of bytes that had to be emitted as single-character
    /// operator tokens.
    pub lex_errors: usize,
}

/// Structural features for one file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CodeFeatures {
    pub file_id: String,
    pub nloc: usize,
    pub token_counts: usize,
    pub ast_levels: usize,
    pub ast_nodes: usize,
    pub identifiers: usize,
    pub ast_errors: usize,
    pub complexity: usize,
}

const KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "final", "finally", "float",
    "for", "goto", "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "return", "short", "static",
    "strictfp", "super", "switch", "synchronized", "this", "throw", "throws", "transient", "try",
    "void", "volatile", "while", "var", "record", "yield", "sealed", "permits", "true", "false",
    "null",
];

// Longest first so greedy matching picks the full operator.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "&&", "||", "++", "--", "==", "!=", "<=", ">=", "+=",
    "-=", "*=", "/=", "%=", "&=", "|=", "^=", "->", "::", "<<", ">>", "+", "-", "*", "/", "%",
    "=", "<", ">", "!", "&", "|", "^", "~", "?", ":",
];

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Tokenize Java-like source. Every input byte lands in exactly one
/// token; unlexable characters become single-character operator tokens
/// and bump the error counter.
pub fn tokenize_java(content: &str) -> TokenStream {
    let bytes = content.as_bytes();
    let mut tokens = Vec::new();
    let mut lex_errors = 0usize;
    let mut pos = 0usize;

    let push = |tokens: &mut Vec<Token>, kind, start: usize, end: usize| {
        tokens.push(Token {
            kind,
            text: content[start..end].to_owned(),
            span: (start, end),
        });
    };

    while pos < bytes.len() {
        let rest = &content[pos..];
        let c = rest.chars().next().unwrap();
        let start = pos;

        if c.is_whitespace() {
            let mut end = pos;
            for ch in rest.chars() {
                if !ch.is_whitespace() {
                    break;
                }
                end += ch.len_utf8();
            }
            push(&mut tokens, TokenKind::Whitespace, start, end);
            pos = end;
            continue;
        }

        if rest.starts_with("//") {
            let end = rest.find('\n').map(|i| pos + i).unwrap_or(bytes.len());
            push(&mut tokens, TokenKind::Comment, start, end);
            pos = end;
            continue;
        }

        if rest.starts_with("/*") {
            let end = rest[2..]
                .find("*/")
                .map(|i| pos + 2 + i + 2)
                .unwrap_or(bytes.len());
            push(&mut tokens, TokenKind::Comment, start, end);
            pos = end;
            continue;
        }

        if c == '"' || c == '\'' {
            let quote = c;
            let mut end = pos + 1;
            let mut escaped = false;
            for ch in content[pos + 1..].chars() {
                end += ch.len_utf8();
                if escaped {
                    escaped = false;
                } else if ch == '\\' {
                    escaped = true;
                } else if ch == quote {
                    break;
                }
            }
            push(&mut tokens, TokenKind::Literal, start, end);
            pos = end;
            continue;
        }

        if is_ident_start(c) {
            let mut end = pos;
            for ch in rest.chars() {
                if !is_ident_continue(ch) {
                    break;
                }
                end += ch.len_utf8();
            }
            let text = &content[start..end];
            let kind = if KEYWORDS.contains(&text) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            };
            push(&mut tokens, kind, start, end);
            pos = end;
            continue;
        }

        if c.is_ascii_digit() {
            let mut end = pos;
            let mut chars = rest.chars().peekable();
            while let Some(&ch) = chars.peek() {
                if ch.is_ascii_alphanumeric() || ch == '_' || ch == '.' {
                    end += ch.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            push(&mut tokens, TokenKind::Literal, start, end);
            pos = end;
            continue;
        }

        if "(){}[];,.@".contains(c) {
            push(&mut tokens, TokenKind::Punctuation, start, pos + 1);
            pos += 1;
            continue;
        }

        if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(**op)) {
            push(&mut tokens, TokenKind::Operator, start, pos + op.len());
            pos += op.len();
            continue;
        }

        // Unlexable: emit the character as a lone operator token.
        lex_errors += 1;
        push(&mut tokens, TokenKind::Operator, start, pos + c.len_utf8());
        pos += c.len_utf8();
    }

    TokenStream { tokens, lex_errors }
}

/// Extract structural features from a file's content.
pub fn extract_features(file: &CodeFile) -> CodeFeatures {
    let stream = tokenize_java(&file.content);
    features_from_tokens(&file.file_id, &file.content, &stream)
}

fn features_from_tokens(file_id: &str, content: &str, stream: &TokenStream) -> CodeFeatures {
    let tokens = &stream.tokens;

    // nloc: lines that hold at least one non-whitespace, non-comment token
    let line_starts: Vec<usize> = std::iter::once(0)
        .chain(content.match_indices('\n').map(|(i, _)| i + 1))
        .collect();
    let line_of = |byte: usize| match line_starts.binary_search(&byte) {
        Ok(i) => i,
        Err(i) => i - 1,
    };
    let mut code_lines = std::collections::BTreeSet::new();

    let mut token_counts = 0usize;
    let mut identifiers = 0usize;
    let mut complexity = 1usize;
    let mut depth = 0usize;
    let mut max_depth = 0usize;
    let mut stack: Vec<char> = Vec::new();
    let mut pairs = 0usize;
    let mut terminators = 0usize;
    let mut unbalanced = 0usize;

    for tok in tokens {
        match tok.kind {
            TokenKind::Whitespace | TokenKind::Comment => continue,
            _ => {}
        }
        token_counts += 1;
        for line in line_of(tok.span.0)..=line_of(tok.span.1.saturating_sub(1).max(tok.span.0)) {
            code_lines.insert(line);
        }
        match tok.kind {
            TokenKind::Identifier => identifiers += 1,
            TokenKind::Keyword => {
                if matches!(tok.text.as_str(), "if" | "for" | "while" | "case" | "catch") {
                    complexity += 1;
                }
            }
            TokenKind::Operator => {
                if matches!(tok.text.as_str(), "&&" | "||" | "?") {
                    complexity += 1;
                }
            }
            TokenKind::Punctuation => {
                let c = tok.text.chars().next().unwrap();
                match c {
                    '(' | '{' | '[' => {
                        stack.push(c);
                        depth += 1;
                        max_depth = max_depth.max(depth);
                    }
                    ')' | '}' | ']' => {
                        let opener = match c {
                            ')' => '(',
                            '}' => '{',
                            _ => '[',
                        };
                        if stack.last() == Some(&opener) {
                            stack.pop();
                            depth = depth.saturating_sub(1);
                            pairs += 1;
                        } else {
                            unbalanced += 1;
                        }
                    }
                    ';' => terminators += 1,
                    _ => {}
                }
            }
            _ => {}
        }
    }
    unbalanced += stack.len();

    CodeFeatures {
        file_id: file_id.to_owned(),
        nloc: code_lines.len(),
        token_counts,
        ast_levels: max_depth,
        ast_nodes: pairs + terminators,
        identifiers,
        ast_errors: unbalanced + stream.lex_errors,
        complexity,
    }
}
