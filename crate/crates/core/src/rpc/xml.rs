//! XML encoding and decoding of calls and responses.

use std::collections::HashSet;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use quick_xml::events::Event;
use quick_xml::Reader;

use super::{Fault, RpcCall, RpcError, RpcValue};

const DECL: &str = r#"<?xml version="1.0" encoding="UTF-8"?>"#;

/// Serializes a call into a `methodCall` document.
pub fn encode_call(call: &RpcCall) -> Result<Vec<u8>, RpcError> {
    if !super::valid_method_name(&call.method) {
        return Err(RpcError::InvalidMethod(call.method.clone()));
    }
    let mut out = String::with_capacity(128);
    out.push_str(DECL);
    out.push_str("<methodCall><methodName>");
    out.push_str(&call.method);
    out.push_str("</methodName>");
    write_params(&mut out, &call.params)?;
    out.push_str("</methodCall>");
    Ok(out.into_bytes())
}

/// Serializes a successful result into a `methodResponse` document.
pub fn encode_success(value: &RpcValue) -> Result<Vec<u8>, RpcError> {
    let mut out = String::with_capacity(128);
    out.push_str(DECL);
    out.push_str("<methodResponse>");
    write_params(&mut out, std::slice::from_ref(value))?;
    out.push_str("</methodResponse>");
    Ok(out.into_bytes())
}

/// Serializes a fault into a `methodResponse` document.
pub fn encode_fault(fault: &Fault) -> Vec<u8> {
    let body = RpcValue::record([
        ("faultCode", RpcValue::Int(fault.code)),
        ("faultString", RpcValue::String(sanitize(&fault.message))),
    ]);
    let mut out = String::with_capacity(160);
    out.push_str(DECL);
    out.push_str("<methodResponse><fault>");
    // The sanitized message is always encodable.
    write_value(&mut out, &body).expect("fault struct is encodable");
    out.push_str("</fault></methodResponse>");
    out.into_bytes()
}

/// Parses a `methodCall` document. The returned call carries no identity.
pub fn decode_call(bytes: &[u8]) -> Result<RpcCall, RpcError> {
    let root = parse_document(bytes)?;
    if root.name != "methodCall" {
        return Err(malformed(format!(
            "expected <methodCall>, found <{}>",
            root.name
        )));
    }
    let name_el = root
        .child("methodName")
        .ok_or_else(|| malformed("missing <methodName>"))?;
    let method = name_el.text();
    if !super::valid_method_name(&method) {
        return Err(RpcError::InvalidMethod(method));
    }
    let params = match root.child("params") {
        Some(p) => read_params(p)?,
        None => Vec::new(),
    };
    Ok(RpcCall {
        method,
        params,
        identity: None,
    })
}

/// Parses a `methodResponse` document into either a value or a fault.
pub fn decode_response(bytes: &[u8]) -> Result<Result<RpcValue, Fault>, RpcError> {
    let root = parse_document(bytes)?;
    if root.name != "methodResponse" {
        return Err(malformed(format!(
            "expected <methodResponse>, found <{}>",
            root.name
        )));
    }
    if let Some(fault) = root.child("fault") {
        let value = read_value(single_value(fault)?)?;
        let code = value
            .get("faultCode")
            .and_then(|v| v.as_i32().ok())
            .ok_or_else(|| malformed("fault without integer faultCode"))?;
        let message = value
            .get("faultString")
            .and_then(|v| v.as_str().ok())
            .unwrap_or_default()
            .to_owned();
        return Ok(Err(Fault::new(code, message)));
    }
    let params = root
        .child("params")
        .ok_or_else(|| malformed("response has neither <params> nor <fault>"))?;
    let mut values = read_params(params)?;
    if values.len() != 1 {
        return Err(malformed(format!(
            "response must carry one value, found {}",
            values.len()
        )));
    }
    Ok(Ok(values.remove(0)))
}

fn write_params(out: &mut String, params: &[RpcValue]) -> Result<(), RpcError> {
    if params.is_empty() {
        out.push_str("<params/>");
        return Ok(());
    }
    out.push_str("<params>");
    for p in params {
        out.push_str("<param>");
        write_value(out, p)?;
        out.push_str("</param>");
    }
    out.push_str("</params>");
    Ok(())
}

fn write_value(out: &mut String, value: &RpcValue) -> Result<(), RpcError> {
    out.push_str("<value>");
    match value {
        RpcValue::String(s) => {
            out.push_str("<string>");
            push_text(out, s)?;
            out.push_str("</string>");
        }
        RpcValue::Int(i) => {
            out.push_str("<int>");
            out.push_str(&i.to_string());
            out.push_str("</int>");
        }
        RpcValue::Double(d) => {
            if !d.is_finite() {
                return Err(RpcError::UnsupportedValue(format!("non-finite double {d}")));
            }
            out.push_str("<double>");
            // Display for f64 is the shortest round-tripping form and never uses exponents.
            out.push_str(&d.to_string());
            out.push_str("</double>");
        }
        RpcValue::Bool(b) => {
            out.push_str(if *b {
                "<boolean>1</boolean>"
            } else {
                "<boolean>0</boolean>"
            });
        }
        RpcValue::Base64(bytes) => {
            out.push_str("<base64>");
            out.push_str(&BASE64.encode(bytes));
            out.push_str("</base64>");
        }
        RpcValue::Array(items) => {
            out.push_str("<array><data>");
            for item in items {
                write_value(out, item)?;
            }
            out.push_str("</data></array>");
        }
        RpcValue::Struct(members) => {
            let mut seen = HashSet::with_capacity(members.len());
            out.push_str("<struct>");
            for (key, v) in members {
                if !seen.insert(key.as_str()) {
                    return Err(RpcError::UnsupportedValue(format!(
                        "duplicate struct key `{key}`"
                    )));
                }
                out.push_str("<member><name>");
                push_text(out, key)?;
                out.push_str("</name>");
                write_value(out, v)?;
                out.push_str("</member>");
            }
            out.push_str("</struct>");
        }
    }
    out.push_str("</value>");
    Ok(())
}

fn is_xml_char(c: char) -> bool {
    matches!(c, '\t' | '\n' | '\r' | '\u{20}'..='\u{D7FF}' | '\u{E000}'..='\u{FFFD}' | '\u{10000}'..)
}

fn push_text(out: &mut String, s: &str) -> Result<(), RpcError> {
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            // Raw CR would be folded into LF by any conforming parser.
            '\r' => out.push_str("&#13;"),
            c if is_xml_char(c) => out.push(c),
            c => {
                return Err(RpcError::UnsupportedValue(format!(
                    "character U+{:04X} cannot be carried in XML",
                    c as u32
                )))
            }
        }
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if is_xml_char(c) { c } else { '\u{FFFD}' })
        .collect()
}

fn malformed(msg: impl Into<String>) -> RpcError {
    RpcError::MalformedXml(msg.into())
}

#[derive(Debug)]
enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug)]
struct Element {
    name: String,
    children: Vec<Node>,
}

impl Element {
    fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    fn child(&self, name: &str) -> Option<&Element> {
        self.elements().find(|e| e.name == name)
    }

    fn text(&self) -> String {
        let mut s = String::new();
        for n in &self.children {
            if let Node::Text(t) = n {
                s.push_str(t);
            }
        }
        s
    }

    /// Rejects non-whitespace text mixed into element-only content.
    fn check_element_only(&self) -> Result<(), RpcError> {
        for n in &self.children {
            if let Node::Text(t) = n {
                if !t.trim().is_empty() {
                    return Err(malformed(format!("unexpected text inside <{}>", self.name)));
                }
            }
        }
        Ok(())
    }
}

fn parse_document(bytes: &[u8]) -> Result<Element, RpcError> {
    let text = std::str::from_utf8(bytes).map_err(|e| malformed(format!("invalid UTF-8: {e}")))?;
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(false);
    reader.config_mut().check_end_names = true;

    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;
    loop {
        let event = reader
            .read_event()
            .map_err(|e| malformed(format!("at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(start) => {
                if root.is_some() {
                    return Err(malformed("content after document element"));
                }
                let name = start.name().as_ref().to_owned();
                stack.push(Element {
                    name,
                    children: Vec::new(),
                });
            }
            Event::Empty(start) => {
                let name = start.name().as_ref().to_owned();
                let el = Element {
                    name,
                    children: Vec::new(),
                };
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None if root.is_none() => root = Some(el),
                    None => return Err(malformed("content after document element")),
                }
            }
            Event::End(_) => {
                let el = stack.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => root = Some(el),
                }
            }
            Event::Text(t) => push_text_node(&mut stack, &t.xml10_content())?,
            Event::CData(c) => push_text_node(&mut stack, &c.xml10_content())?,
            Event::GeneralRef(r) => {
                let resolved = match r
                    .resolve_char_ref()
                    .map_err(|e| malformed(format!("bad character reference: {e}")))?
                {
                    Some(c) => c.to_string(),
                    None => {
                        let name = r.xml10_content();
                        quick_xml::escape::resolve_predefined_entity(&name)
                            .ok_or_else(|| malformed(format!("unknown entity &{name};")))?
                            .to_owned()
                    }
                };
                push_text_node(&mut stack, &resolved)?;
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(malformed("DOCTYPE is not allowed")),
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(malformed("unexpected end of document"));
    }
    root.ok_or_else(|| malformed("empty document"))
}

fn push_text_node(stack: &mut [Element], text: &str) -> Result<(), RpcError> {
    match stack.last_mut() {
        Some(parent) => {
            if let Some(Node::Text(prev)) = parent.children.last_mut() {
                prev.push_str(text);
            } else {
                parent.children.push(Node::Text(text.to_owned()));
            }
            Ok(())
        }
        None if text.trim().is_empty() => Ok(()),
        None => Err(malformed("text outside the document element")),
    }
}

fn read_params(params: &Element) -> Result<Vec<RpcValue>, RpcError> {
    params.check_element_only()?;
    params
        .elements()
        .map(|p| {
            if p.name != "param" {
                return Err(malformed(format!(
                    "unexpected <{}> inside <params>",
                    p.name
                )));
            }
            read_value(single_value(p)?)
        })
        .collect()
}

fn single_value(parent: &Element) -> Result<&Element, RpcError> {
    parent.check_element_only()?;
    let mut it = parent.elements();
    match (it.next(), it.next()) {
        (Some(v), None) if v.name == "value" => Ok(v),
        _ => Err(malformed(format!(
            "<{}> must contain exactly one <value>",
            parent.name
        ))),
    }
}

fn read_value(value: &Element) -> Result<RpcValue, RpcError> {
    let mut elements = value.elements();
    let typed = match (elements.next(), elements.next()) {
        (None, _) => return Ok(RpcValue::String(value.text())),
        (Some(e), None) => e,
        (Some(_), Some(_)) => return Err(malformed("<value> holds more than one element")),
    };
    value.check_element_only()?;
    let scalar = |kind: &str| -> Result<String, RpcError> {
        if typed.elements().next().is_some() {
            return Err(malformed(format!("<{kind}> must not contain elements")));
        }
        Ok(typed.text())
    };
    match typed.name.as_str() {
        "string" => Ok(RpcValue::String(scalar("string")?)),
        "i4" | "int" => {
            let t = scalar("i4")?;
            t.trim()
                .parse::<i32>()
                .map(RpcValue::Int)
                .map_err(|_| malformed(format!("invalid integer `{t}`")))
        }
        "double" => {
            let t = scalar("double")?;
            match t.trim().parse::<f64>() {
                Ok(d) if d.is_finite() => Ok(RpcValue::Double(d)),
                _ => Err(malformed(format!("invalid double `{t}`"))),
            }
        }
        "boolean" => match scalar("boolean")?.trim() {
            "1" => Ok(RpcValue::Bool(true)),
            "0" => Ok(RpcValue::Bool(false)),
            other => Err(malformed(format!("invalid boolean `{other}`"))),
        },
        "base64" => {
            let t: String = scalar("base64")?
                .chars()
                .filter(|c| !c.is_ascii_whitespace())
                .collect();
            BASE64
                .decode(t.as_bytes())
                .map(RpcValue::Base64)
                .map_err(|e| malformed(format!("invalid base64: {e}")))
        }
        "array" => {
            typed.check_element_only()?;
            let data = typed
                .child("data")
                .ok_or_else(|| malformed("<array> without <data>"))?;
            data.check_element_only()?;
            let items = data
                .elements()
                .map(|v| {
                    if v.name != "value" {
                        return Err(malformed(format!("unexpected <{}> inside <data>", v.name)));
                    }
                    read_value(v)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RpcValue::Array(items))
        }
        "struct" => {
            typed.check_element_only()?;
            let mut members = Vec::new();
            let mut seen = HashSet::new();
            for m in typed.elements() {
                if m.name != "member" {
                    return Err(malformed(format!(
                        "unexpected <{}> inside <struct>",
                        m.name
                    )));
                }
                m.check_element_only()?;
                let name = m
                    .child("name")
                    .ok_or_else(|| malformed("<member> without <name>"))?
                    .text();
                let v = m
                    .child("value")
                    .ok_or_else(|| malformed("<member> without <value>"))?;
                if !seen.insert(name.clone()) {
                    return Err(RpcError::UnsupportedValue(format!(
                        "duplicate struct key `{name}`"
                    )));
                }
                members.push((name, read_value(v)?));
            }
            Ok(RpcValue::Struct(members))
        }
        other => Err(RpcError::UnsupportedValue(format!(
            "unsupported value type <{other}>"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalize(doc: &[u8]) -> String {
        let s = std::str::from_utf8(doc).unwrap().trim();
        let s = match s.strip_prefix("<?xml") {
            Some(rest) => &rest[rest.find("?>").unwrap() + 2..],
            None => s,
        };
        let s = regex::Regex::new(r">\s+")
            .unwrap()
            .replace_all(s.trim(), ">");
        regex::Regex::new(r"\s+<")
            .unwrap()
            .replace_all(&s, "<")
            .into_owned()
    }

    #[test]
    fn empty_params_call() {
        let call = RpcCall::new("echo.ping", vec![]);
        let doc = encode_call(&call).unwrap();
        assert_eq!(
            normalize(&doc),
            "<methodCall><methodName>echo.ping</methodName><params/></methodCall>"
        );
    }

    #[test]
    fn string_param_matches_reference_encoder() {
        // Output of Python's xmlrpc.client.dumps(("J-w1-7",), methodname="job.status").
        let reference = "<?xml version='1.0'?>\n<methodCall>\n<methodName>job.status</methodName>\n<params>\n<param>\n<value><string>J-w1-7</string></value>\n</param>\n</params>\n</methodCall>\n";
        let doc = encode_call(&RpcCall::new("job.status", vec!["J-w1-7".into()])).unwrap();
        assert_eq!(normalize(&doc), normalize(reference.as_bytes()));
    }

    #[test]
    fn escaped_text_matches_reference_encoder() {
        // Python: xmlrpc.client.dumps(("a<b&c",), methodname="file.ls")
        let reference = "<?xml version='1.0'?>\n<methodCall>\n<methodName>file.ls</methodName>\n<params>\n<param>\n<value><string>a&lt;b&amp;c</string></value>\n</param>\n</params>\n</methodCall>\n";
        let doc = encode_call(&RpcCall::new("file.ls", vec!["a<b&c".into()])).unwrap();
        assert_eq!(normalize(&doc), normalize(reference.as_bytes()));
    }

    #[test]
    fn fault_matches_reference_encoder() {
        // Python: xmlrpc.client.dumps(xmlrpc.client.Fault(3, "access denied"), methodresponse=True)
        let reference = "<?xml version='1.0'?>\n<methodResponse>\n<fault>\n<value><struct>\n<member>\n<name>faultCode</name>\n<value><int>3</int></value>\n</member>\n<member>\n<name>faultString</name>\n<value><string>access denied</string></value>\n</member>\n</struct></value>\n</fault>\n</methodResponse>\n";
        let doc = encode_fault(&Fault::new(3, "access denied"));
        assert_eq!(normalize(&doc), normalize(reference.as_bytes()));
        assert_eq!(
            decode_response(reference.as_bytes()).unwrap(),
            Err(Fault::new(3, "access denied"))
        );
    }

    #[test]
    fn decodes_reference_response() {
        // Python: dumps(({'a':1,'b':[True,2.5,Binary(b'hi')]},), methodresponse=True)
        let reference = "<?xml version='1.0'?>\n<methodResponse>\n<params>\n<param>\n<value><struct>\n<member>\n<name>a</name>\n<value><int>1</int></value>\n</member>\n<member>\n<name>b</name>\n<value><array><data>\n<value><boolean>1</boolean></value>\n<value><double>2.5</double></value>\n<value><base64>\naGk=\n</base64></value>\n</data></array></value>\n</member>\n</struct></value>\n</param>\n</params>\n</methodResponse>\n";
        let expected = RpcValue::record([
            ("a", RpcValue::Int(1)),
            (
                "b",
                RpcValue::Array(vec![
                    RpcValue::Bool(true),
                    RpcValue::Double(2.5),
                    RpcValue::Base64(b"hi".to_vec()),
                ]),
            ),
        ]);
        assert_eq!(
            decode_response(reference.as_bytes()).unwrap(),
            Ok(expected.clone())
        );
        let ours = encode_success(&expected).unwrap();
        assert_eq!(normalize(&ours), normalize(reference.as_bytes()));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let v = RpcValue::Struct(vec![("k".into(), 1.into()), ("k".into(), 2.into())]);
        let err =
            encode_call(&RpcCall::new("job.status", vec![RpcValue::Array(vec![v])])).unwrap_err();
        assert!(matches!(err, RpcError::UnsupportedValue(_)));
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(matches!(decode_call(b""), Err(RpcError::MalformedXml(_))));
        assert!(matches!(
            decode_call(b"   \n"),
            Err(RpcError::MalformedXml(_))
        ));
    }

    #[test]
    fn unknown_scalar_is_unsupported() {
        let doc = b"<methodCall><methodName>job.status</methodName><params><param><value><dateTime.iso8601>20050101T00:00:00</dateTime.iso8601></value></param></params></methodCall>";
        assert!(matches!(
            decode_call(doc),
            Err(RpcError::UnsupportedValue(_))
        ));
        let doc = b"<methodCall><methodName>job.status</methodName><params><param><value><nil/></value></param></params></methodCall>";
        assert!(matches!(
            decode_call(doc),
            Err(RpcError::UnsupportedValue(_))
        ));
    }

    #[test]
    fn untyped_value_is_string() {
        let doc = b"<methodCall><methodName>job.status</methodName><params><param><value> J-w1-1 </value></param></params></methodCall>";
        let call = decode_call(doc).unwrap();
        assert_eq!(call.params, vec![RpcValue::String(" J-w1-1 ".into())]);
    }

    #[test]
    fn carriage_returns_and_markup_survive() {
        let s = "line1\r\nline2 <tag> & \"quoted\" 'x' \t end ";
        let call = RpcCall::new("file.grep", vec![s.into()]);
        let back = decode_call(&encode_call(&call).unwrap()).unwrap();
        assert_eq!(back.params, call.params);
    }

    #[test]
    fn control_characters_are_unsupported() {
        let call = RpcCall::new("file.grep", vec!["a\u{1}b".into()]);
        assert!(matches!(
            encode_call(&call),
            Err(RpcError::UnsupportedValue(_))
        ));
    }

    #[test]
    fn non_finite_double_rejected() {
        let call = RpcCall::new("monitor.report", vec![f64::NAN.into()]);
        assert!(matches!(
            encode_call(&call),
            Err(RpcError::UnsupportedValue(_))
        ));
    }

    #[test]
    fn bad_method_names() {
        for name in ["ping", "Job.status", "job.", "job.status.x", "a.b-c"] {
            let doc = format!("<methodCall><methodName>{name}</methodName><params/></methodCall>");
            assert!(decode_call(doc.as_bytes()).is_err(), "{name}");
        }
    }

    #[test]
    fn mismatched_tags_are_malformed() {
        let doc = b"<methodCall><methodName>job.status</methodCall>";
        assert!(matches!(decode_call(doc), Err(RpcError::MalformedXml(_))));
    }
}
