//! Subject-aware prompt plumbing and the synthetic caption vocabulary.
//!
//! An [`AnnotationRequest`] is a list of in-context segments: `K` example
//! images each followed by its ideal annotation, then the target image. A
//! backend answers with `{"has_focus": bool, "focal": str, "peripheral": str}`.
//! The endpoint `stub:` selects a deterministic offline backend; anything
//! else is treated as an HTTP URL receiving the request as a JSON POST body.

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::token_codec::{CAPTION_LEN, PAD_ID};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("annotation transport failed: {0}")]
    Transport(String),
    #[error("malformed annotation reply: {0}")]
    Parse(String),
    #[error("unknown scene value `{0}`")]
    UnknownSpec(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(String),
    PngBase64(String),
}

impl ImageRef {
    pub fn inline_png(bytes: &[u8]) -> Self {
        ImageRef::PngBase64(base64::engine::general_purpose::STANDARD.encode(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Image { image: ImageRef },
    Text { text: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub instruction: String,
    pub segments: Vec<Segment>,
}

impl AnnotationRequest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Image { .. })).count()
    }

    /// The final image segment.
    pub fn target(&self) -> Option<&ImageRef> {
        self.segments.iter().rev().find_map(|s| match s {
            Segment::Image { image } => Some(image),
            Segment::Text { .. } => None,
        })
    }
}

/// Placeholder instruction; the wording used upstream is not published.
pub const DEFAULT_INSTRUCTION: &str = "Describe the main subject of the last image if it has one, \
then describe the rest of the scene. Follow the style of the examples.";

/// Examples in order, each image followed by its ideal text, then the target.
pub fn build_request(target: ImageRef, examples: &[(ImageRef, String)], instruction: &str) -> AnnotationRequest {
    let mut segments = Vec::with_capacity(2 * examples.len() + 1);
    for (img, text) in examples {
        segments.push(Segment::Image { image: img.clone() });
        segments.push(Segment::Text { text: text.clone() });
    }
    segments.push(Segment::Image { image: target });
    AnnotationRequest { instruction: instruction.to_string(), segments }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubjectAwarePrompt {
    pub has_focus: bool,
    pub focal: String,
    pub peripheral: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    has_focus: bool,
    focal: Option<String>,
    peripheral: Option<String>,
}

pub fn parse_reply(body: &str) -> Result<SubjectAwarePrompt, PromptError> {
    let r: Reply = serde_json::from_str(body).map_err(|e| PromptError::Parse(e.to_string()))?;
    let peripheral = r.peripheral.ok_or_else(|| PromptError::Parse("missing `peripheral`".into()))?;
    let focal = match (r.has_focus, r.focal) {
        (true, Some(f)) if !f.is_empty() => f,
        (true, _) => return Err(PromptError::Parse("has_focus is set but `focal` is missing or empty".into())),
        (false, Some(f)) if !f.is_empty() => {
            return Err(PromptError::Parse("`focal` given although has_focus is false".into()))
        }
        (false, _) => String::new(),
    };
    if !r.has_focus && peripheral.is_empty() {
        return Err(PromptError::Parse("unfocused reply needs a peripheral description".into()));
    }
    Ok(SubjectAwarePrompt { has_focus: r.has_focus, focal, peripheral })
}

pub trait AnnotationBackend {
    /// Sends one serialized request and returns the raw reply body.
    fn send(&self, request_json: &str) -> Result<String, PromptError>;
}

/// Offline backend: the reply is a pure function of the target image ref.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubBackend;

const STUB_SUBJECTS: [&str; 4] = ["a small red object", "a bright shape", "a round figure", "a dark outline"];
const STUB_SCENES: [&str; 4] = ["a plain backdrop", "soft gradient light", "an even textured wall", "a hazy field"];

impl AnnotationBackend for StubBackend {
    fn send(&self, request_json: &str) -> Result<String, PromptError> {
        let req: AnnotationRequest =
            serde_json::from_str(request_json).map_err(|e| PromptError::Transport(format!("stub got bad request: {e}")))?;
        let target = req.target().ok_or_else(|| PromptError::Transport("request has no image".into()))?;
        let digest = Sha256::digest(serde_json::to_vec(target).expect("ref serializes"));
        let has_focus = digest[0] & 1 == 1;
        let focal = if has_focus { STUB_SUBJECTS[digest[1] as usize % 4] } else { "" };
        let reply = serde_json::json!({
            "has_focus": has_focus,
            "focal": focal,
            "peripheral": STUB_SCENES[digest[2] as usize % 4],
        });
        Ok(reply.to_string())
    }
}

/// JSON POST to `endpoint`.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub endpoint: String,
}

impl AnnotationBackend for HttpBackend {
    fn send(&self, request_json: &str) -> Result<String, PromptError> {
        let mut resp = ureq::post(&self.endpoint)
            .header("content-type", "application/json")
            .send(request_json)
            .map_err(|e| PromptError::Transport(e.to_string()))?;
        resp.body_mut().read_to_string().map_err(|e| PromptError::Transport(e.to_string()))
    }
}

pub const STUB_ENDPOINT: &str = "stub:";

pub fn backend_for(endpoint: &str) -> Box<dyn AnnotationBackend + Sync> {
    if endpoint == STUB_ENDPOINT {
        Box::new(StubBackend)
    } else {
        Box::new(HttpBackend { endpoint: endpoint.to_string() })
    }
}

/// Sends `request`, retrying once on a transport failure, and parses the reply.
pub fn annotate(backend: &dyn AnnotationBackend, request: &AnnotationRequest) -> Result<SubjectAwarePrompt, PromptError> {
    let body = request.to_json();
    let reply = match backend.send(&body) {
        Ok(r) => r,
        Err(PromptError::Transport(_)) => backend.send(&body)?,
        Err(e) => return Err(e),
    };
    parse_reply(&reply)
}

pub const DEFAULT_CONCURRENCY: usize = 4;

/// Annotates every request with at most `limit` in flight; results keep input order.
pub fn annotate_batch(
    backend: &(dyn AnnotationBackend + Sync),
    requests: &[AnnotationRequest],
    limit: usize,
) -> Vec<Result<SubjectAwarePrompt, PromptError>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(limit.max(1)) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || annotate(backend, r))).collect();
            handles.into_iter().map(|h| h.join().expect("annotation thread panicked")).collect()
        });
        out.extend(results);
    }
    out
}

macro_rules! vocab_enum {
    ($name:ident, $base:expr, [$($variant:ident => $word:literal),+ $(,)?]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn id(self) -> u32 {
                $base + Self::ALL.iter().position(|&v| v == self).unwrap() as u32
            }

            pub fn parse(s: &str) -> Result<Self, PromptError> {
                Self::ALL.iter().copied().find(|v| v.word() == s).ok_or_else(|| PromptError::UnknownSpec(s.to_string()))
            }
        }
    };
}

vocab_enum!(Shape, 2, [Circle => "circle", Square => "square", Triangle => "triangle", Ring => "ring"]);
vocab_enum!(Color, 6, [Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Cyan => "cyan", Magenta => "magenta"]);
vocab_enum!(Background, 12, [Dark => "dark", Light => "light", Warm => "warm", Cool => "cool"]);
vocab_enum!(Position, 16, [Center => "center", TopLeft => "top-left", TopRight => "top-right", BottomLeft => "bottom-left", BottomRight => "bottom-right"]);

pub const BOS_ID: u32 = 1;
pub const ON_ID: u32 = 21;
pub const AT_ID: u32 = 22;
pub const EOS_ID: u32 = 23;
/// Ids in use are `0..VOCAB_USED`.
pub const VOCAB_USED: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub background: Background,
    pub position: Position,
}

impl SceneSpec {
    pub fn from_words(shape: &str, color: &str, background: &str, position: &str) -> Result<Self, PromptError> {
        Ok(Self {
            shape: Shape::parse(shape)?,
            color: Color::parse(color)?,
            background: Background::parse(background)?,
            position: Position::parse(position)?,
        })
    }

    /// Every spec in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut v = Vec::new();
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &background in Background::ALL {
                    for &position in Position::ALL {
                        v.push(SceneSpec { shape, color, background, position });
                    }
                }
            }
        }
        v
    }

    pub fn text(&self) -> String {
        format!("{} {} on {} at {}", self.color.word(), self.shape.word(), self.background.word(), self.position.word())
    }
}

/// `[bos, color, shape, on, background, at, position, eos]`.
pub fn synthetic_caption(spec: &SceneSpec) -> Vec<u32> {
    let ids = vec![
        BOS_ID,
        spec.color.id(),
        spec.shape.id(),
        ON_ID,
        spec.background.id(),
        AT_ID,
        spec.position.id(),
        EOS_ID,
    ];
    debug_assert_eq!(ids.len(), CAPTION_LEN);
    ids
}

/// Caption dropped to padding (the unconditional caption).
pub fn empty_caption() -> Vec<u32> {
    vec![PAD_ID; CAPTION_LEN]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::collections::HashSet;

    fn img(s: &str) -> ImageRef {
        ImageRef::Path(s.into())
    }

    #[test]
    fn request_layout() {
        let r = build_request(img("t.png"), &[], "go");
        assert_eq!(r.segments.len(), 1);
        let ex: Vec<_> = (0..3).map(|i| (img(&format!("e{i}.png")), format!("text {i}"))).collect();
        let r = build_request(img("t.png"), &ex, "go");
        assert_eq!(r.image_count(), 4);
        assert_eq!(r.segments[0], Segment::Image { image: img("e0.png") });
        assert_eq!(r.segments[4], Segment::Image { image: img("e2.png") });
        assert_eq!(r.target(), Some(&img("t.png")));
        assert_eq!(r.to_json(), build_request(img("t.png"), &ex, "go").to_json());
        assert!(r.to_json().starts_with(r#"{"instruction":"go","segments":[{"type":"image","image":{"path":"e0.png"}}"#));
    }

    #[test]
    fn stub_is_deterministic_and_valid() {
        let a = annotate(&StubBackend, &build_request(img("x.png"), &[], DEFAULT_INSTRUCTION)).unwrap();
        let b = annotate(&StubBackend, &build_request(img("x.png"), &[(img("e"), "t".into())], "other")).unwrap();
        assert_eq!(a, b);
        let many: Vec<_> = (0..32)
            .map(|i| annotate(&StubBackend, &build_request(img(&format!("{i}.png")), &[], "")).unwrap())
            .collect();
        assert!(many.iter().any(|p| p.has_focus) && many.iter().any(|p| !p.has_focus));
        assert!(many.iter().all(|p| p.has_focus != p.focal.is_empty() && !p.peripheral.is_empty()));
    }

    #[test]
    fn reply_validation() {
        assert!(matches!(parse_reply(r#"{"has_focus":true,"peripheral":"x"}"#), Err(PromptError::Parse(_))));
        assert!(matches!(parse_reply(r#"{"has_focus":false,"focal":"","peripheral":""}"#), Err(PromptError::Parse(_))));
        assert!(matches!(parse_reply("not json"), Err(PromptError::Parse(_))));
        let p = parse_reply(r#"{"has_focus":false,"peripheral":"sky"}"#).unwrap();
        assert_eq!(p.focal, "");
    }

    struct Flaky {
        fails: Cell<u32>,
        calls: Cell<u32>,
    }

    impl AnnotationBackend for Flaky {
        fn send(&self, req: &str) -> Result<String, PromptError> {
            self.calls.set(self.calls.get() + 1);
            if self.fails.get() > 0 {
                self.fails.set(self.fails.get() - 1);
                return Err(PromptError::Transport("down".into()));
            }
            StubBackend.send(req)
        }
    }

    #[test]
    fn retries_once_then_surfaces() {
        let req = build_request(img("a"), &[], "");
        let one = Flaky { fails: Cell::new(1), calls: Cell::new(0) };
        assert!(annotate(&one, &req).is_ok());
        assert_eq!(one.calls.get(), 2);
        let two = Flaky { fails: Cell::new(2), calls: Cell::new(0) };
        assert!(matches!(annotate(&two, &req), Err(PromptError::Transport(_))));
        assert_eq!(two.calls.get(), 2);
    }

    #[test]
    fn unreachable_http_is_transport_error() {
        let b = backend_for("http://127.0.0.1:9/annotate");
        let r = annotate(b.as_ref(), &build_request(img("a"), &[], ""));
        assert!(matches!(r, Err(PromptError::Transport(_))));
    }

    #[test]
    fn batch_keeps_order() {
        let reqs: Vec<_> = (0..9).map(|i| build_request(img(&format!("{i}")), &[], "")).collect();
        let out = annotate_batch(&StubBackend, &reqs, DEFAULT_CONCURRENCY);
        for (r, o) in reqs.iter().zip(out) {
            assert_eq!(o.unwrap(), annotate(&StubBackend, r).unwrap());
        }
    }

    #[test]
    fn captions_are_injective_and_fixed_length() {
        let all = SceneSpec::all();
        assert_eq!(all.len(), 4 * 6 * 4 * 5);
        let mut seen = HashSet::new();
        for s in &all {
            let ids = synthetic_caption(s);
            assert_eq!(ids.len(), CAPTION_LEN);
            assert!(ids.iter().all(|&i| (i as usize) < VOCAB_USED && i != PAD_ID));
            assert_eq!(ids, synthetic_caption(s));
            assert!(seen.insert(ids));
        }
        assert!(SceneSpec::from_words("hexagon", "red", "dark", "center").is_err());
        assert_eq!(SceneSpec::from_words("ring", "cyan", "cool", "top-left").unwrap().text(), "cyan ring on cool at top-left");
    }
}
