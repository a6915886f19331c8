//! Conversation records and the box/reference token grammar.
//!
//! ```text
//! box = BOX_START "(" int "," int ")," "(" int "," int ")" BOX_END
//! ref = REF_START text REF_END box
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotatedSample, GazePoint, NormBox, Prediction, Task, MAX_BIN, NORM_BINS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tokens {
    pub im_start: String,
    pub im_end: String,
    pub vision_start: String,
    pub vision_end: String,
    pub box_start: String,
    pub box_end: String,
    pub ref_start: String,
    pub ref_end: String,
}

impl Default for Tokens {
    fn default() -> Self {
        Self {
            im_start: "<im_start>".into(),
            im_end: "<im_end>".into(),
            vision_start: "<vision_start>".into(),
            vision_end: "<vision_end>".into(),
            box_start: "<box_start>".into(),
            box_end: "<box_end>".into(),
            ref_start: "<ref_start>".into(),
            ref_end: "<ref_end>".into(),
        }
    }
}

impl Tokens {
    pub fn all(&self) -> [&str; 8] {
        [
            &self.im_start,
            &self.im_end,
            &self.vision_start,
            &self.vision_end,
            &self.box_start,
            &self.box_end,
            &self.ref_start,
            &self.ref_end,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Half-width of a gaze box, in bins.
    pub lambda_margin: u32,
    pub tokens: Tokens,
    pub out_of_frame_phrase: String,
    pub in_frame_phrase: String,
    pub system_prompt: Option<String>,
    /// `{head}` is replaced by the serialized head box.
    pub task_prompt_templates: BTreeMap<Task, String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let templates = [
            (Task::PersonDetection, "Detect every person in the image."),
            (Task::GazeTarget, "Where is the person at {head} looking?"),
            (
                Task::GazeObject,
                "Which object is the person at {head} looking at?",
            ),
            (
                Task::GazeInOut,
                "Is the person at {head} looking inside or outside the image?",
            ),
        ]
        .into_iter()
        .map(|(t, s)| (t, s.to_string()))
        .collect();
        Self {
            lambda_margin: 20,
            tokens: Tokens::default(),
            out_of_frame_phrase: "looking out of the image".into(),
            in_frame_phrase: "looking inside the image".into(),
            system_prompt: None,
            task_prompt_templates: templates,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=499).contains(&self.lambda_margin) {
            return Err(Error::Config(format!(
                "lambda_margin must be in [1, 499], got {}",
                self.lambda_margin
            )));
        }
        let toks = self.tokens.all();
        for (i, a) in toks.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Config("special tokens must be non-empty".into()));
            }
            if toks[i + 1..].contains(a) {
                return Err(Error::Config(format!("special token '{a}' is used twice")));
            }
        }
        if self.out_of_frame_phrase.is_empty() || self.in_frame_phrase.is_empty() {
            return Err(Error::Config("in/out phrases must be non-empty".into()));
        }
        for t in Task::ALL {
            if !self.task_prompt_templates.contains_key(&t) {
                return Err(Error::Config(format!(
                    "missing prompt template for task {t}"
                )));
            }
        }
        Ok(())
    }

    fn contains_token(&self, s: &str) -> bool {
        self.tokens.all().iter().any(|t| s.contains(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// One serialized conversation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeRecord {
    pub sample_id: String,
    pub task: Task,
    pub messages: Vec<Message>,
    #[serde(rename = "images", default)]
    pub image_refs: Vec<PathBuf>,
}

impl GazeRecord {
    /// Roles alternate user/assistant after an optional leading system turn.
    pub fn validate(&self, cfg: &PromptConfig) -> Result<()> {
        let mut turns = self.messages.iter().peekable();
        if turns.peek().map(|m| m.role) == Some(Role::System) {
            turns.next();
        }
        let mut expected = Role::User;
        let mut count = 0;
        for m in turns {
            if m.role != expected {
                return Err(Error::invalid(format!(
                    "record {}: expected {:?} turn, found {:?}",
                    self.sample_id, expected, m.role
                )));
            }
            if m.role == Role::User
                && !self.image_refs.is_empty()
                && count == 0
                && !(m.content.contains(&cfg.tokens.vision_start)
                    && m.content.contains(&cfg.tokens.vision_end))
            {
                return Err(Error::invalid(format!(
                    "record {}: first user turn lacks vision tokens",
                    self.sample_id
                )));
            }
            expected = if expected == Role::User {
                Role::Assistant
            } else {
                Role::User
            };
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid(format!(
                "record {} has no turns",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// ChatML rendering with the configured message markers.
    pub fn to_chatml(&self, cfg: &PromptConfig) -> String {
        let t = &cfg.tokens;
        let mut out = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            out.push_str(&format!(
                "{}{}\n{}{}\n",
                t.im_start, role, m.content, t.im_end
            ));
        }
        out
    }
}

pub fn serialize_box(b: &NormBox, cfg: &PromptConfig) -> String {
    format!(
        "{}({},{}),({},{}){}",
        cfg.tokens.box_start, b.x1, b.y1, b.x2, b.y2, cfg.tokens.box_end
    )
}

fn point_bin(v: f64) -> i64 {
    ((v * f64::from(NORM_BINS)).floor() as i64).clamp(0, i64::from(MAX_BIN))
}

/// Box of half-width lambda around a gaze point, clamped to the bin range.
pub fn gaze_point_to_box(g: &GazePoint, cfg: &PromptConfig) -> NormBox {
    let lambda = i64::from(cfg.lambda_margin);
    let (cx, cy) = (point_bin(g.x), point_bin(g.y));
    let c = |v: i64| v.clamp(0, i64::from(MAX_BIN)) as u32;
    NormBox {
        x1: c(cx - lambda),
        y1: c(cy - lambda),
        x2: c(cx + lambda),
        y2: c(cy + lambda),
    }
}

/// Center bin of a gaze box. Exact inverse of [`gaze_point_to_box`] when the
/// box was clamped against an edge: the unclamped side still sits lambda
/// away from the center. Falls back to the midpoint for any other box.
pub fn gaze_box_center(b: &NormBox, lambda: u32) -> (f64, f64) {
    let axis = |lo: u32, hi: u32| -> f64 {
        let span = 2 * lambda;
        if hi - lo < span {
            if lo == 0 && hi != MAX_BIN {
                return f64::from(hi.saturating_sub(lambda));
            }
            if hi == MAX_BIN && lo != 0 {
                return f64::from(lo + lambda);
            }
        }
        (f64::from(lo) + f64::from(hi)) / 2.0
    };
    (axis(b.x1, b.x2), axis(b.y1, b.y2))
}

pub fn serialize_object_ref(class_label: &str, b: &NormBox, cfg: &PromptConfig) -> Result<String> {
    if class_label.is_empty() {
        return Err(Error::invalid("object class label is empty"));
    }
    if cfg.contains_token(class_label) {
        return Err(Error::invalid(format!(
            "class label '{class_label}' contains a special token"
        )));
    }
    Ok(format!(
        "{}{}{}{}",
        cfg.tokens.ref_start,
        class_label,
        cfg.tokens.ref_end,
        serialize_box(b, cfg)
    ))
}

/// What a gaze statement describes.
#[derive(Debug, Clone, PartialEq)]
pub enum GazeStatement<'a> {
    OutOfFrame,
    InFrame {
        gaze_box: NormBox,
        object: Option<(&'a str, NormBox)>,
    },
}

/// Gaze box followed by the optional object reference, or the out-of-frame
/// phrase.
pub fn serialize_gaze_statement(stmt: &GazeStatement<'_>, cfg: &PromptConfig) -> Result<String> {
    match stmt {
        GazeStatement::OutOfFrame => Ok(cfg.out_of_frame_phrase.clone()),
        GazeStatement::InFrame { gaze_box, object } => {
            let mut s = serialize_box(gaze_box, cfg);
            if let Some((label, b)) = object {
                s.push_str(&serialize_object_ref(label, b, cfg)?);
            }
            Ok(s)
        }
    }
}

fn user_turn(
    sample_head: Option<&NormBox>,
    task: Task,
    images: usize,
    cfg: &PromptConfig,
) -> String {
    let t = &cfg.tokens;
    let mut content = String::new();
    for _ in 0..images {
        content.push_str(&t.vision_start);
        content.push_str(&t.vision_end);
    }
    if images > 0 {
        content.push('\n');
    }
    let template = &cfg.task_prompt_templates[&task];
    let head = sample_head
        .map(|b| serialize_box(b, cfg))
        .unwrap_or_default();
    content.push_str(&template.replace("{head}", &head));
    content
}

fn image_refs(sample: &AnnotatedSample) -> Vec<PathBuf> {
    let mut refs = vec![sample.image_path.clone()];
    if let Some(d) = &sample.depth_path {
        refs.push(hha_path_for(d));
    }
    refs
}

/// Conventional location of the encoded image for a depth file:
/// `dir/name.pfm` becomes `dir/name.hha.png`.
pub fn hha_path_for(depth: &std::path::Path) -> PathBuf {
    let stem = depth
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    depth.with_file_name(format!("{stem}.hha.png"))
}

fn wrap(
    sample_id: &str,
    task: Task,
    refs: Vec<PathBuf>,
    user: String,
    answer: String,
    cfg: &PromptConfig,
) -> GazeRecord {
    let mut messages = Vec::with_capacity(3);
    if let Some(sys) = &cfg.system_prompt {
        messages.push(Message::new(Role::System, sys.clone()));
    }
    messages.push(Message::new(Role::User, user));
    messages.push(Message::new(Role::Assistant, answer));
    GazeRecord {
        sample_id: sample_id.to_string(),
        task,
        messages,
        image_refs: refs,
    }
}

/// One record for one person and one task.
pub fn build_record(
    sample: &AnnotatedSample,
    task: Task,
    cfg: &PromptConfig,
) -> Result<GazeRecord> {
    if task == Task::PersonDetection {
        return build_person_record(&[sample], cfg);
    }
    let head = sample.head_norm_box();
    let user = user_turn(
        Some(&head),
        task,
        1 + usize::from(sample.depth_path.is_some()),
        cfg,
    );
    let answer = match task {
        Task::GazeInOut => {
            if sample.in_frame {
                cfg.in_frame_phrase.clone()
            } else {
                cfg.out_of_frame_phrase.clone()
            }
        }
        Task::GazeTarget => match sample.gaze_centroid() {
            None => cfg.out_of_frame_phrase.clone(),
            Some(g) => serialize_box(&gaze_point_to_box(&g, cfg), cfg),
        },
        Task::GazeObject => match (sample.gaze_centroid(), &sample.gazed_object) {
            (None, _) => cfg.out_of_frame_phrase.clone(),
            (Some(g), Some(obj)) => {
                let ob = NormBox::from_pixel(&obj.bbox, sample.image_size)?;
                serialize_gaze_statement(
                    &GazeStatement::InFrame {
                        gaze_box: gaze_point_to_box(&g, cfg),
                        object: Some((&obj.class_label, ob)),
                    },
                    cfg,
                )?
            }
            (Some(_), None) => {
                return Err(Error::invalid(format!(
                    "sample {}: gaze_object record needs a gazed object",
                    sample.sample_id
                )))
            }
        },
        Task::PersonDetection => unreachable!(),
    };
    Ok(wrap(
        &sample.sample_id,
        task,
        image_refs(sample),
        user,
        answer,
        cfg,
    ))
}

/// Person-detection record for every annotated person of one image. The
/// record takes the first sample's id and image.
pub fn build_person_record(samples: &[&AnnotatedSample], cfg: &PromptConfig) -> Result<GazeRecord> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("person record needs at least one sample"))?;
    if let Some(other) = samples.iter().find(|s| s.image_path != first.image_path) {
        return Err(Error::invalid(format!(
            "samples {} and {} come from different images",
            first.sample_id, other.sample_id
        )));
    }
    let user = user_turn(
        None,
        Task::PersonDetection,
        1 + usize::from(first.depth_path.is_some()),
        cfg,
    );
    let answer: String = samples
        .iter()
        .map(|s| serialize_box(&s.head_norm_box(), cfg))
        .collect();
    Ok(wrap(
        &first.sample_id,
        Task::PersonDetection,
        image_refs(first),
        user,
        answer,
        cfg,
    ))
}

/// Everything the grammar walk pulls out of a response.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    pub boxes: Vec<NormBox>,
    pub class_labels: Vec<String>,
    pub out_of_frame: bool,
    pub clamped: bool,
}

fn malformed(offset: usize, message: impl Into<String>) -> Error {
    Error::MalformedResponse {
        offset,
        message: message.into(),
    }
}

/// Parse `(int,int),(int,int)` with optional whitespace. `base` is the
/// offset of `body` within the full response.
fn parse_box_body(body: &str, base: usize) -> Result<(NormBox, bool)> {
    let mut nums = [0i64; 4];
    let mut rest = body;
    let mut idx = 0;
    let consume = |rest: &mut &str, ch: char| -> Result<()> {
        let t = rest.trim_start();
        let off = base + body.len() - t.len();
        if let Some(stripped) = t.strip_prefix(ch) {
            *rest = stripped;
            Ok(())
        } else {
            Err(malformed(off, format!("expected '{ch}' in box")))
        }
    };
    for corner in 0..2 {
        if corner == 1 {
            consume(&mut rest, ',')?;
        }
        consume(&mut rest, '(')?;
        for axis in 0..2 {
            if axis == 1 {
                consume(&mut rest, ',')?;
            }
            let t = rest.trim_start();
            let off = base + body.len() - t.len();
            let end = t
                .char_indices()
                .find(|&(i, c)| !(c.is_ascii_digit() || (i == 0 && (c == '-' || c == '+'))))
                .map(|(i, _)| i)
                .unwrap_or(t.len());
            let digits = &t[..end];
            nums[idx] = digits
                .parse::<i64>()
                .map_err(|_| malformed(off, format!("bad box coordinate '{digits}'")))?;
            idx += 1;
            rest = &t[end..];
        }
        consume(&mut rest, ')')?;
    }
    if !rest.trim().is_empty() {
        let off = base + body.len() - rest.trim_start().len();
        return Err(malformed(off, "trailing characters in box"));
    }
    let mut clamped = false;
    let mut bins = [0u32; 4];
    for (b, &n) in bins.iter_mut().zip(nums.iter()) {
        let c = n.clamp(0, i64::from(MAX_BIN));
        clamped |= c != n;
        *b = c as u32;
    }
    let nb = NormBox::new(bins[0], bins[1], bins[2], bins[3])
        .map_err(|_| malformed(base, "box corners out of order"))?;
    Ok((nb, clamped))
}

/// Walk a response and extract boxes, object references and the
/// out-of-frame phrase. Never panics; any unmatched or misplaced token is a
/// `MalformedResponse` error carrying its byte offset.
pub fn parse_tokens(text: &str, cfg: &PromptConfig) -> Result<ParsedResponse> {
    let t = &cfg.tokens;
    let mut out = ParsedResponse {
        out_of_frame: text.contains(&cfg.out_of_frame_phrase),
        ..ParsedResponse::default()
    };
    let mut pos = 0;
    loop {
        let next = [
            (&t.box_start, 0u8),
            (&t.box_end, 1),
            (&t.ref_start, 2),
            (&t.ref_end, 3),
        ]
        .into_iter()
        .filter_map(|(tok, kind)| text[pos..].find(tok.as_str()).map(|i| (pos + i, kind, tok)))
        .min_by_key(|&(i, kind, tok)| (i, std::cmp::Reverse(tok.len()), kind));
        let Some((at, kind, tok)) = next else { break };
        match kind {
            0 => {
                let (b, c, end) = parse_box_at(text, at, cfg)?;
                out.boxes.push(b);
                out.clamped |= c;
                pos = end;
            }
            2 => {
                let body_start = at + tok.len();
                let close = text[body_start..]
                    .find(t.ref_end.as_str())
                    .ok_or_else(|| malformed(at, "unterminated object reference"))?;
                let label = &text[body_start..body_start + close];
                if label.trim().is_empty() {
                    return Err(malformed(body_start, "empty object label"));
                }
                if cfg.contains_token(label) {
                    return Err(malformed(body_start, "special token inside object label"));
                }
                let after = body_start + close + t.ref_end.len();
                let box_at = after + (text[after..].len() - text[after..].trim_start().len());
                if !text[box_at..].starts_with(t.box_start.as_str()) {
                    return Err(malformed(after, "object reference not followed by a box"));
                }
                let (b, c, end) = parse_box_at(text, box_at, cfg)?;
                out.class_labels.push(label.trim().to_string());
                out.boxes.push(b);
                out.clamped |= c;
                pos = end;
            }
            _ => return Err(malformed(at, format!("unmatched '{tok}'"))),
        }
    }
    Ok(out)
}

fn parse_box_at(text: &str, at: usize, cfg: &PromptConfig) -> Result<(NormBox, bool, usize)> {
    let t = &cfg.tokens;
    let body_start = at + t.box_start.len();
    let close = text[body_start..]
        .find(t.box_end.as_str())
        .ok_or_else(|| malformed(at, "unterminated box"))?;
    let body = &text[body_start..body_start + close];
    if cfg.contains_token(body) {
        return Err(malformed(body_start, "special token inside box"));
    }
    let (b, clamped) = parse_box_body(body, body_start)?;
    Ok((b, clamped, body_start + close + t.box_end.len()))
}

/// Parse a model response into a prediction. The task is inferred from the
/// content: an object reference makes it `gaze_object`, otherwise boxes or
/// the out-of-frame phrase make it `gaze_target`, and bare in/out phrases
/// make it `gaze_inout`.
pub fn parse_response(text: &str, cfg: &PromptConfig) -> Result<Prediction> {
    let parsed = parse_tokens(text, cfg)?;
    let task = if !parsed.class_labels.is_empty() {
        Task::GazeObject
    } else if !parsed.boxes.is_empty() || parsed.out_of_frame {
        Task::GazeTarget
    } else {
        Task::GazeInOut
    };
    Ok(Prediction {
        sample_id: String::new(),
        task,
        boxes: parsed.boxes,
        class_label: parsed.class_labels.into_iter().next_back(),
        out_of_frame: parsed.out_of_frame,
        out_score: None,
        raw_text: text.to_string(),
        coords_clamped: parsed.clamped,
    })
}

/// Canonical text for a prediction, the inverse of [`parse_response`].
pub fn render_prediction(pred: &Prediction, cfg: &PromptConfig) -> Result<String> {
    if pred.out_of_frame && pred.boxes.is_empty() {
        return Ok(cfg.out_of_frame_phrase.clone());
    }
    let mut s = String::new();
    let n = pred.boxes.len();
    for (i, b) in pred.boxes.iter().enumerate() {
        match (&pred.class_label, i + 1 == n) {
            (Some(label), true) => s.push_str(&serialize_object_ref(label, b, cfg)?),
            _ => s.push_str(&serialize_box(b, cfg)),
        }
    }
    if pred.out_of_frame {
        s.push_str(&cfg.out_of_frame_phrase);
    }
    if s.is_empty() && pred.task == Task::GazeInOut {
        s = cfg.in_frame_phrase.clone();
    }
    Ok(s)
}
