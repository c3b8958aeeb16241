//! A small `multipart/form-data` reader for in-memory request bodies.

use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Part {
    pub name: String,
    pub filename: Option<String>,
    pub content_type: Option<String>,
    pub data: Vec<u8>,
}

impl Part {
    pub fn text(&self) -> Result<&str, MultipartError> {
        std::str::from_utf8(&self.data).map_err(|_| MultipartError(format!("field {} is not UTF-8 text", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultipartError(pub String);

impl fmt::Display for MultipartError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MultipartError {}

fn err<T>(msg: impl Into<String>) -> Result<T, MultipartError> {
    Err(MultipartError(msg.into()))
}

/// Extracts the boundary from a `multipart/form-data` content type.
pub fn boundary(content_type: &str) -> Result<String, MultipartError> {
    let mut params = content_type.split(';');
    let mime = params.next().unwrap_or_default().trim();
    if !mime.eq_ignore_ascii_case("multipart/form-data") {
        return err(format!("expected multipart/form-data, got {mime:?}"));
    }
    for p in params {
        if let Some((k, v)) = p.split_once('=') {
            if k.trim().eq_ignore_ascii_case("boundary") {
                let v = v.trim().trim_matches('"');
                if v.is_empty() || v.len() > 200 {
                    return err("invalid multipart boundary");
                }
                return Ok(v.to_string());
            }
        }
    }
    err("multipart content type has no boundary")
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    (from..=hay.len() - needle.len()).find(|&i| &hay[i..i + needle.len()] == needle)
}

/// Value of `key` in a header such as `form-data; name="image"; filename="a.png"`.
fn header_param(value: &str, key: &str) -> Option<String> {
    let mut rest = value;
    while let Some(pos) = rest.find(';') {
        rest = rest[pos + 1..].trim_start();
        let Some((k, v)) = rest.split_once('=') else { break };
        let v = v.trim_start();
        let (val, tail) = if let Some(stripped) = v.strip_prefix('"') {
            let mut out = String::new();
            let mut chars = stripped.char_indices();
            let mut end = stripped.len();
            while let Some((i, c)) = chars.next() {
                match c {
                    '\\' => {
                        if let Some((_, n)) = chars.next() {
                            out.push(n);
                        }
                    }
                    '"' => {
                        end = i + 1;
                        break;
                    }
                    _ => out.push(c),
                }
            }
            (out, &stripped[end.min(stripped.len())..])
        } else {
            let end = v.find(';').unwrap_or(v.len());
            (v[..end].trim().to_string(), &v[end..])
        };
        if k.trim().eq_ignore_ascii_case(key) {
            return Some(val);
        }
        rest = tail;
    }
    None
}

/// Splits a body into its parts.
pub fn parse(content_type: &str, body: &[u8]) -> Result<Vec<Part>, MultipartError> {
    let b = boundary(content_type)?;
    let delim = format!("--{b}").into_bytes();
    let next_delim = format!("\r\n--{b}").into_bytes();
    let Some(first) = find(body, &delim, 0) else {
        return err("multipart body has no boundary line");
    };
    let mut pos = first + delim.len();
    let mut parts = Vec::new();
    loop {
        if body[pos..].starts_with(b"--") {
            return Ok(parts);
        }
        // skip transport padding up to the line break
        let Some(eol) = find(body, b"\r\n", pos) else {
            return err("truncated multipart body");
        };
        pos = eol + 2;
        let (head_end, data_start) = if body[pos..].starts_with(b"\r\n") {
            (pos, pos + 2)
        } else {
            match find(body, b"\r\n\r\n", pos) {
                Some(e) => (e, e + 4),
                None => return err("multipart part has no header terminator"),
            }
        };
        let head = std::str::from_utf8(&body[pos..head_end]).map_err(|_| MultipartError("part headers are not UTF-8".into()))?;
        let (mut name, mut filename, mut ctype) = (None, None, None);
        for line in head.split("\r\n").filter(|l| !l.is_empty()) {
            let Some((k, v)) = line.split_once(':') else {
                return err(format!("malformed part header {line:?}"));
            };
            let v = v.trim();
            if k.trim().eq_ignore_ascii_case("content-disposition") {
                name = header_param(v, "name");
                filename = header_param(v, "filename");
            } else if k.trim().eq_ignore_ascii_case("content-type") {
                ctype = Some(v.to_string());
            }
        }
        let Some(end) = find(body, &next_delim, data_start) else {
            return err("multipart part is not terminated");
        };
        let Some(name) = name else {
            return err("multipart part without a name");
        };
        parts.push(Part {
            name,
            filename,
            content_type: ctype,
            data: body[data_start..end].to_vec(),
        });
        pos = end + next_delim.len();
    }
}

/// Builds a body; used by tests and clients.
pub fn encode(boundary: &str, parts: &[Part]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        let mut disp = format!("Content-Disposition: form-data; name=\"{}\"", p.name);
        if let Some(f) = &p.filename {
            disp.push_str(&format!("; filename=\"{f}\""));
        }
        out.extend_from_slice(disp.as_bytes());
        out.extend_from_slice(b"\r\n");
        if let Some(ct) = &p.content_type {
            out.extend_from_slice(format!("Content-Type: {ct}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&p.data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_a_browser_style_body() {
        let body = b"--XyZ\r\nContent-Disposition: form-data; name=\"fill\"\r\n\r\nwhite\r\n\
--XyZ\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a b.png\"\r\nContent-Type: image/png\r\n\r\n\x89PNG\r\n\x00\x01\r\n--XyZ--\r\n";
        let parts = parse("multipart/form-data; boundary=XyZ", body).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].text().unwrap(), "white");
        assert_eq!(parts[1].filename.as_deref(), Some("a b.png"));
        assert_eq!(parts[1].content_type.as_deref(), Some("image/png"));
        assert_eq!(parts[1].data, b"\x89PNG\r\n\x00\x01");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(boundary("application/json").is_err());
        assert!(boundary("multipart/form-data").is_err());
        assert_eq!(boundary("multipart/form-data; boundary=\"q\"").unwrap(), "q");
        assert!(parse("multipart/form-data; boundary=b", b"nothing here").is_err());
        assert!(parse("multipart/form-data; boundary=b", b"--b\r\nContent-Disposition: form-data; name=\"x\"\r\n\r\nunterminated").is_err());
        assert!(parse("multipart/form-data; boundary=b", b"--b\r\nContent-Type: text/plain\r\n\r\nx\r\n--b--").is_err());
    }

    #[test]
    fn quoted_params_with_semicolons() {
        let v = "form-data; name=\"a;b\"; filename=\"x\\\"y.png\"";
        assert_eq!(header_param(v, "name").as_deref(), Some("a;b"));
        assert_eq!(header_param(v, "filename").as_deref(), Some("x\"y.png"));
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(
            fields in proptest::collection::vec(("[a-z_]{1,10}", proptest::collection::vec(any::<u8>(), 0..300), any::<bool>()), 0..6)
        ) {
            let parts: Vec<Part> = fields
                .into_iter()
                .map(|(name, data, file)| Part {
                    filename: file.then(|| format!("{name}.bin")),
                    content_type: file.then(|| "application/octet-stream".to_string()),
                    name,
                    data,
                })
                .collect();
            let boundary = "----boundary7MA4YWxkTrZu0gW";
            let body = encode(boundary, &parts);
            let back = parse(&format!("multipart/form-data; boundary={boundary}"), &body).unwrap();
            prop_assert_eq!(back, parts);
        }
    }
}
