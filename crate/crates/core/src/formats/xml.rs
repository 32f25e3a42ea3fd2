//! Minimal element tree over quick-xml events; enough for VOC files.

use quick_xml::events::Event;
use quick_xml::Reader;

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Element {
    pub name: String,
    pub text: String,
    pub children: Vec<Element>,
}

impl Element {
    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }

    pub fn child_text(&self, name: &str) -> Option<&str> {
        self.child(name).map(|c| c.text.trim())
    }
}

/// Parses a document and returns its root element. Errors carry the byte
/// offset of the failure.
pub(crate) fn parse(bytes: &[u8]) -> Result<Element, String> {
    let mut reader = Reader::from_reader(bytes);
    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;
    let mut buf = Vec::new();
    loop {
        let pos = reader.buffer_position();
        let event = reader.read_event_into(&mut buf).map_err(|e| format!("byte {pos}: {e}"))?;
        match event {
            Event::Start(e) => {
                let name = e.name().as_ref().to_string();
                stack.push(Element { name, ..Default::default() });
            }
            Event::Empty(e) => {
                let el = Element { name: e.name().as_ref().to_string(), ..Default::default() };
                match stack.last_mut() {
                    Some(parent) => parent.children.push(el),
                    None => root = Some(el),
                }
            }
            Event::Text(t) => {
                if let Some(top) = stack.last_mut() {
                    top.text.push_str(&t.xml10_content());
                }
            }
            Event::CData(t) => {
                if let Some(top) = stack.last_mut() {
                    top.text.push_str(&t.xml10_content());
                }
            }
            Event::GeneralRef(r) => {
                let s = match r.resolve_char_ref().map_err(|e| format!("byte {pos}: {e}"))? {
                    Some(c) => c.to_string(),
                    None => quick_xml::escape::unescape(&format!("&{};", r.xml10_content()))
                        .map_err(|e| format!("byte {pos}: {e}"))?
                        .into_owned(),
                };
                if let Some(top) = stack.last_mut() {
                    top.text.push_str(&s);
                }
            }
            Event::End(_) => {
                let el = stack.pop().ok_or_else(|| format!("byte {pos}: unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(el),
                    None => root = Some(el),
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err(format!("unclosed element <{}>", stack.last().map(|e| e.name.as_str()).unwrap_or("")));
    }
    root.ok_or_else(|| "empty document".to_string())
}

pub(crate) fn escape(s: &str) -> String {
    quick_xml::escape::escape(s).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_and_entities() {
        let root = parse(b"<a><b>x &amp; y</b><c/><b>2</b></a>").unwrap();
        assert_eq!(root.name, "a");
        assert_eq!(root.child_text("b"), Some("x & y"));
        assert_eq!(root.children_named("b").count(), 2);
        assert!(root.child("c").is_some());
        assert!(parse(b"<a><b></a>").is_err());
    }
}
