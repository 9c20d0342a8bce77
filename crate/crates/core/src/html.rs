//! Lenient tag-soup tokenizer. Never fails: malformed markup degrades to
//! text. Good enough for titles, meta tags, captions, headings and links.

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Open {
        name: String,
        attrs: Vec<(String, String)>,
        self_closing: bool,
    },
    Close {
        name: String,
    },
    Text(String),
}

impl Token {
    pub fn attr(&self, key: &str) -> Option<&str> {
        match self {
            Token::Open { attrs, .. } => attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()),
            _ => None,
        }
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.attr("class")
            .is_some_and(|c| c.split_whitespace().any(|x| x == class))
    }
}

const RAW_TEXT: &[&str] = &["script", "style", "textarea", "noscript"];

pub fn tokenize(html: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let bytes = html.as_bytes();
    let mut i = 0;
    let mut text_start = 0;

    let flush = |tokens: &mut Vec<Token>, from: usize, to: usize| {
        if to > from {
            let t = decode_entities(&html[from..to]);
            if !t.is_empty() {
                tokens.push(Token::Text(t));
            }
        }
    };

    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if html[i..].starts_with("<!--") {
            flush(&mut tokens, text_start, i);
            let end = html[i + 4..].find("-->").map_or(bytes.len(), |p| i + 4 + p + 3);
            i = end;
            text_start = i;
            continue;
        }
        let next = bytes.get(i + 1).copied().unwrap_or(b' ');
        if next == b'!' || next == b'?' {
            flush(&mut tokens, text_start, i);
            i = html[i..].find('>').map_or(bytes.len(), |p| i + p + 1);
            text_start = i;
            continue;
        }
        let closing = next == b'/';
        let name_start = if closing { i + 2 } else { i + 1 };
        if !bytes.get(name_start).is_some_and(|b| b.is_ascii_alphabetic()) {
            i += 1;
            continue;
        }
        flush(&mut tokens, text_start, i);
        let Some((token, end)) = parse_tag(html, name_start, closing) else {
            // unterminated tag: treat the remainder as text
            text_start = i;
            break;
        };
        i = end;
        text_start = i;
        if let Token::Open {
            name,
            self_closing: false,
            ..
        } = &token
        {
            if RAW_TEXT.contains(&name.as_str()) {
                let close = format!("</{name}");
                let lower = html[i..].to_ascii_lowercase();
                let body_end = lower.find(&close).map_or(bytes.len(), |p| i + p);
                let name = name.clone();
                tokens.push(token);
                if name == "noscript" || name == "textarea" {
                    flush(&mut tokens, i, body_end);
                }
                i = html[body_end..].find('>').map_or(bytes.len(), |p| body_end + p + 1);
                tokens.push(Token::Close { name });
                text_start = i;
                continue;
            }
        }
        tokens.push(token);
    }
    flush(&mut tokens, text_start.min(bytes.len()), bytes.len());
    tokens
}

fn parse_tag(html: &str, name_start: usize, closing: bool) -> Option<(Token, usize)> {
    let bytes = html.as_bytes();
    let mut i = name_start;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'-' || bytes[i] == b':') {
        i += 1;
    }
    let name = html[name_start..i].to_ascii_lowercase();
    let mut attrs = Vec::new();
    let mut self_closing = false;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            return None;
        }
        match bytes[i] {
            b'>' => {
                i += 1;
                break;
            }
            b'/' => {
                self_closing = true;
                i += 1;
                continue;
            }
            _ => {}
        }
        let key_start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && !matches!(bytes[i], b'=' | b'>' | b'/') {
            i += 1;
        }
        let key = html[key_start..i].to_ascii_lowercase();
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let mut value = String::new();
        if i < bytes.len() && bytes[i] == b'=' {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'"' || bytes[i] == b'\'') {
                let quote = bytes[i] as char;
                let start = i + 1;
                let end = html[start..].find(quote).map(|p| start + p)?;
                value = decode_entities(&html[start..end]);
                i = end + 1;
            } else {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' {
                    i += 1;
                }
                value = decode_entities(&html[start..i]);
            }
        }
        if key.is_empty() {
            i += 1;
        } else {
            attrs.push((key, value));
        }
    }
    let token = if closing {
        Token::Close { name }
    } else {
        Token::Open {
            name,
            attrs,
            self_closing,
        }
    };
    Some((token, i))
}

/// Decodes the common named entities and numeric references.
pub fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let end = rest[1..].find(';').map(|p| p + 1).filter(|&p| p <= 10);
        let decoded = end.and_then(|end| {
            let name = &rest[1..end];
            let ch = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                "mdash" => Some('—'),
                "ndash" => Some('–'),
                "middot" => Some('·'),
                _ if name.starts_with("#x") || name.starts_with("#X") => {
                    u32::from_str_radix(&name[2..], 16).ok().and_then(char::from_u32)
                }
                _ if name.starts_with('#') => name[1..].parse::<u32>().ok().and_then(char::from_u32),
                _ => None,
            };
            ch.map(|c| (c, end))
        });
        match decoded {
            Some((c, end)) => {
                out.push(c);
                rest = &rest[end + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Collapses whitespace runs.
pub fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Concatenated text inside every `<tag>` element, one entry per element.
pub fn element_texts(tokens: &[Token], tag: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for t in tokens {
        match t {
            Token::Open {
                name,
                self_closing: false,
                ..
            } if name == tag => {
                depth += 1;
            }
            Token::Close { name } if name == tag && depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    let text = squash(&current);
                    if !text.is_empty() {
                        out.push(text);
                    }
                    current.clear();
                }
            }
            Token::Text(s) if depth > 0 => {
                current.push(' ');
                current.push_str(s);
            }
            _ => {}
        }
    }
    out
}
