//! The grounding token language: `<|ref|>…<|/ref|>` spans followed by
//! `<|det|>[[x1, y1, x2, y2], …]<|/det|>` box lists with coordinates
//! quantized to 0..=999, plus the grounding prompt templates.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const GROUNDING: &str = "<|grounding|>";
pub const REF_OPEN: &str = "<|ref|>";
pub const REF_CLOSE: &str = "<|/ref|>";
pub const DET_OPEN: &str = "<|det|>";
pub const DET_CLOSE: &str = "<|/det|>";

const SPECIALS: [&str; 5] = [GROUNDING, REF_OPEN, REF_CLOSE, DET_OPEN, DET_CLOSE];

pub const COORD_MAX: u16 = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl BoundingBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self> {
        for v in [x1, y1, x2, y2] {
            if v > COORD_MAX {
                return Err(Error::Range { value: v as u64 });
            }
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Ordering(format!("[{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedSpan {
    pub ref_text: String,
    /// Empty for negative samples (the referenced object is absent).
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Span(GroundedSpan),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundedMessage {
    pub grounding_prefix: bool,
    pub segments: Vec<Segment>,
}

impl GroundedMessage {
    pub fn spans(&self) -> impl Iterator<Item = &GroundedSpan> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Span(sp) => Some(sp),
            Segment::Text(_) => None,
        })
    }
}

/// Half-away-from-zero quantization of `p / extent` onto `0..=999`.
fn quantize(p: f64, extent: usize) -> u16 {
    (p / extent as f64 * COORD_MAX as f64)
        .round()
        .clamp(0.0, COORD_MAX as f64) as u16
}

/// Normalizes a pixel-space box `[x1, y1, x2, y2]` against the original image size.
pub fn normalize_box(pixels: [f64; 4], img_w: usize, img_h: usize) -> Result<BoundingBox> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::contract(format!(
            "image size {img_w}x{img_h} must be positive"
        )));
    }
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("box coordinates must be finite"));
    }
    let [x1, y1, x2, y2] = pixels;
    BoundingBox::new(
        quantize(x1, img_w),
        quantize(y1, img_h),
        quantize(x2, img_w),
        quantize(y2, img_h),
    )
}

/// Pixel-space corners of a normalized box.
pub fn denormalize_box(b: &BoundingBox, img_w: usize, img_h: usize) -> [f64; 4] {
    let f = |n: u16, d: usize| n as f64 / COORD_MAX as f64 * d as f64;
    [
        f(b.x1, img_w),
        f(b.y1, img_h),
        f(b.x2, img_w),
        f(b.y2, img_h),
    ]
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Grammar {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn special_here(&self) -> Option<&'static str> {
        SPECIALS
            .iter()
            .copied()
            .find(|s| self.rest().starts_with(s))
    }

    /// Plain characters up to the next special token or end of input.
    fn plain_text(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.src.len() && self.special_here().is_none() {
            let ch = self.rest().chars().next().expect("not at end");
            self.pos += ch.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn int(&mut self) -> Result<u16> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.err("expected integer"));
        }
        let text = &self.rest()[..digits];
        let value = text.trim_start_matches('0').parse::<u64>().unwrap_or(
            if text.bytes().all(|b| b == b'0') {
                0
            } else {
                u64::MAX
            },
        );
        if value > COORD_MAX as u64 {
            return Err(Error::Range { value });
        }
        self.pos += digits;
        Ok(value as u16)
    }

    fn bbox(&mut self) -> Result<BoundingBox> {
        self.expect("[")?;
        let mut v = [0u16; 4];
        for (i, slot) in v.iter_mut().enumerate() {
            if i > 0 {
                self.expect(",")?;
                self.skip_ws();
            }
            *slot = self.int()?;
        }
        self.expect("]")?;
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }

    fn box_list(&mut self) -> Result<Vec<BoundingBox>> {
        self.expect("[")?;
        let mut boxes = Vec::new();
        if self.eat("]") {
            return Ok(boxes);
        }
        boxes.push(self.bbox()?);
        while self.eat(",") {
            self.skip_ws();
            boxes.push(self.bbox()?);
        }
        self.expect("]")?;
        Ok(boxes)
    }

    fn span(&mut self) -> Result<GroundedSpan> {
        self.expect(REF_OPEN)?;
        let ref_text = self.plain_text();
        if ref_text.is_empty() {
            return Err(self.err("empty reference text"));
        }
        self.expect(REF_CLOSE)?;
        self.skip_ws();
        if !self.rest().starts_with(DET_OPEN) {
            return Err(self.err("reference not followed by a detection block"));
        }
        self.expect(DET_OPEN)?;
        let boxes = self.box_list()?;
        self.expect(DET_CLOSE)?;
        Ok(GroundedSpan {
            ref_text: ref_text.to_string(),
            boxes,
        })
    }
}

/// Parses text in the grounding grammar into plain-text and span segments.
pub fn parse_grounded(text: &str) -> Result<GroundedMessage> {
    let mut p = Parser { src: text, pos: 0 };
    let grounding_prefix = p.eat(GROUNDING);
    let mut segments = Vec::new();
    while p.pos < text.len() {
        match p.special_here() {
            None => segments.push(Segment::Text(p.plain_text().to_string())),
            Some(REF_OPEN) => segments.push(Segment::Span(p.span()?)),
            Some(DET_OPEN) => return Err(p.err("detection block without a preceding reference")),
            Some(tok) => return Err(p.err(format!("unexpected `{tok}`"))),
        }
    }
    Ok(GroundedMessage {
        grounding_prefix,
        segments,
    })
}

fn write_box(out: &mut String, b: &BoundingBox) {
    write!(out, "[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2).expect("write to string");
}

/// Canonical text of one span, e.g. `<|ref|>car<|/ref|><|det|>[[0, 0, 999, 999]]<|/det|>`.
pub fn serialize_span(span: &GroundedSpan) -> String {
    let mut out = String::new();
    out.push_str(REF_OPEN);
    out.push_str(&span.ref_text);
    out.push_str(REF_CLOSE);
    out.push_str(DET_OPEN);
    out.push('[');
    for (i, b) in span.boxes.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_box(&mut out, b);
    }
    out.push(']');
    out.push_str(DET_CLOSE);
    out
}

pub fn serialize_grounded(msg: &GroundedMessage) -> String {
    let mut out = String::new();
    if msg.grounding_prefix {
        out.push_str(GROUNDING);
    }
    for seg in &msg.segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Span(s) => out.push_str(&serialize_span(s)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Locate,
    GroundedConversation,
    InContext,
}

/// Prompt templates for referring-expression localization, grounded
/// conversation and in-context grounding.
pub fn build_prompt(kind: PromptKind, query: &str) -> Result<String> {
    match kind {
        PromptKind::GroundedConversation => {
            Ok(format!("{GROUNDING}Can you describe the content of the image?"))
        }
        _ if query.is_empty() => Err(Error::contract("prompt query must be nonempty")),
        PromptKind::Locate => Ok(format!("Locate {REF_OPEN}{query}{REF_CLOSE} in the given image.")),
        // No space after the first sentence: the template is reproduced as published.
        PromptKind::InContext => Ok(format!(
            "{GROUNDING}The first image shows {query}.Please identify the object of the same category in the second image."
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let b = normalize_box([0.0, 0.0, 1000.0, 640.0], 1000, 640).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0, 0, 999, 999));
        let b = normalize_box([500.0, 0.0, 500.0, 0.0], 1000, 10).unwrap();
        assert_eq!(b.x1, 500);
        assert!(matches!(
            normalize_box([10.0, 0.0, 5.0, 1.0], 100, 100),
            Err(Error::Ordering(_))
        ));
        assert!(normalize_box([0.0; 4], 0, 10).is_err());
    }

    #[test]
    fn denormalize_endpoints() {
        let b = BoundingBox::new(0, 0, 999, 999).unwrap();
        assert_eq!(denormalize_box(&b, 640, 480), [0.0, 0.0, 640.0, 480.0]);
    }

    #[test]
    fn published_response_template() {
        let text = "Two <|ref|>dogs<|/ref|><|det|>[[100, 200, 300, 400]]<|/det|> are running on the grass.";
        let msg = parse_grounded(text).unwrap();
        assert!(!msg.grounding_prefix);
        assert_eq!(
            msg.segments,
            vec![
                Segment::Text("Two ".into()),
                Segment::Span(GroundedSpan {
                    ref_text: "dogs".into(),
                    boxes: vec![BoundingBox::new(100, 200, 300, 400).unwrap()],
                }),
                Segment::Text(" are running on the grass.".into()),
            ]
        );
        assert_eq!(serialize_grounded(&msg), text);
    }

    #[test]
    fn plain_text_only() {
        let msg = parse_grounded("hello world").unwrap();
        assert_eq!(msg.segments, vec![Segment::Text("hello world".into())]);
        assert_eq!(msg.spans().count(), 0);
        assert_eq!(parse_grounded("").unwrap(), GroundedMessage::default());
    }

    #[test]
    fn grammar_errors() {
        let g = |s: &str| matches!(parse_grounded(s), Err(Error::Grammar { .. }));
        assert!(g("<|det|>[[1,2,3,4]]<|/det|>"));
        assert!(g("<|ref|>a<|/ref|> trailing"));
        assert!(g("<|ref|>a<|det|>[]<|/det|>"));
        assert!(g("<|ref|><|/ref|><|det|>[]<|/det|>"));
        assert!(g("<|ref|>a<|/ref|><|det|>[[1,2,3]]<|/det|>"));
        assert!(g("<|ref|>a<|/ref|><|det|>[[1,2,3,4],]<|/det|>"));
        assert!(g("<|ref|>a<|/ref|><|det|>[[1,2,3,4]]"));
        assert!(g("x<|/det|>"));
        assert!(g("text <|grounding|> later"));
        assert!(g("<|ref|>a<|/ref|><|det|>[ [1,2,3,4]]<|/det|>"));
    }

    #[test]
    fn range_and_ordering_errors() {
        assert_eq!(
            parse_grounded("<|ref|>a<|/ref|><|det|>[[1,2,1000,4]]<|/det|>").unwrap_err(),
            Error::Range { value: 1000 }
        );
        assert!(matches!(
            parse_grounded("<|ref|>a<|/ref|><|det|>[[1,2,99999999999999999999999,4]]<|/det|>"),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            parse_grounded("<|ref|>a<|/ref|><|det|>[[5,2,3,4]]<|/det|>"),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn whitespace_is_optional_on_parse() {
        let a = parse_grounded("<|ref|>a<|/ref|> \n<|det|>[[1,2,3,4],[0,0,0,0]]<|/det|>").unwrap();
        let b =
            parse_grounded("<|ref|>a<|/ref|><|det|>[[1, 2, 3, 4], [0, 0, 0, 0]]<|/det|>").unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serialize_grounded(&a),
            "<|ref|>a<|/ref|><|det|>[[1, 2, 3, 4], [0, 0, 0, 0]]<|/det|>"
        );
        // Leading zeros are accepted.
        let c = parse_grounded("<|ref|>a<|/ref|><|det|>[[001, 02, 3, 0004]]<|/det|>").unwrap();
        assert_eq!(
            c.spans().next().unwrap().boxes[0],
            BoundingBox::new(1, 2, 3, 4).unwrap()
        );
    }

    #[test]
    fn span_serialization() {
        let car = GroundedSpan {
            ref_text: "car".into(),
            boxes: vec![BoundingBox::new(0, 0, 999, 999).unwrap()],
        };
        assert_eq!(
            serialize_span(&car),
            "<|ref|>car<|/ref|><|det|>[[0, 0, 999, 999]]<|/det|>"
        );
        let cat = GroundedSpan {
            ref_text: "cat".into(),
            boxes: vec![],
        };
        let text = serialize_span(&cat);
        assert_eq!(text, "<|ref|>cat<|/ref|><|det|>[]<|/det|>");
        assert_eq!(
            parse_grounded(&text).unwrap().segments,
            vec![Segment::Span(cat)]
        );
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            build_prompt(PromptKind::Locate, "car").unwrap(),
            "Locate <|ref|>car<|/ref|> in the given image."
        );
        assert_eq!(
            build_prompt(PromptKind::GroundedConversation, "").unwrap(),
            "<|grounding|>Can you describe the content of the image?"
        );
        assert_eq!(
            build_prompt(PromptKind::InContext, "an object within the red bounding box").unwrap(),
            "<|grounding|>The first image shows an object within the red bounding box.Please identify the object of the same category in the second image."
        );
        assert!(build_prompt(PromptKind::Locate, "").is_err());
    }

    #[test]
    fn prefix_round_trips() {
        let text = "<|grounding|>Two <|ref|>dogs<|/ref|><|det|>[]<|/det|>";
        let msg = parse_grounded(text).unwrap();
        assert!(msg.grounding_prefix);
        assert_eq!(serialize_grounded(&msg), text);
    }
}
