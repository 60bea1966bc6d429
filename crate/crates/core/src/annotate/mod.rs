//! Stage-1 localizer and pair annotator: a deterministic oracle driven by
//! record context, and an HTTP client for any endpoint that speaks the same
//! JSON shapes.

mod mock;

pub use mock::{MockReplies, MockServer};

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{BBox2D, Image};
use crate::synth::{Direction, EditRecord, FeatureDescription, FeatureKind};

pub const PROMPT_COUNT: usize = 6;
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);
pub const MLLM_URL_ENV: &str = "BREPLER_MLLM_URL";

const ANNOTATION_PROMPT: &str = include_str!("annotation_prompt.md");

/// Annotation prompt sent with every remote annotate request.
pub fn prompt_template() -> &'static str {
    ANNOTATION_PROMPT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerResult {
    pub bbox: BBox2D,
    pub instruct_prompt: String,
}

/// Prompts for both directions; `fwd` is left to right (pre-edit to post-edit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSets {
    pub summary_fwd: String,
    pub summary_rev: String,
    pub instructs_fwd: Vec<String>,
    pub instructs_rev: Vec<String>,
    pub users_fwd: Vec<String>,
    pub users_rev: Vec<String>,
}

impl PromptSets {
    fn check(self) -> Result<Self> {
        for (name, list) in [
            ("instructs_fwd", &self.instructs_fwd),
            ("instructs_rev", &self.instructs_rev),
            ("users_fwd", &self.users_fwd),
            ("users_rev", &self.users_rev),
        ] {
            if list.len() != PROMPT_COUNT {
                return Err(Error::MalformedReply(format!("{name} has {} entries, expected {PROMPT_COUNT}", list.len())));
            }
        }
        Ok(self)
    }
}

/// Where stage-1 answers come from.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    /// Ground truth read from a record; `None` means no record is at hand.
    Oracle(Option<(&'a EditRecord, Direction)>),
    Remote(&'a RemoteClient),
}

pub fn localize(image: &Image, user_prompt: &str, backend: Backend<'_>) -> Result<LocalizerResult> {
    if user_prompt.trim().is_empty() {
        return Err(Error::Empty("user prompt"));
    }
    match backend {
        Backend::Oracle(None) => Err(Error::MissingRecordContext),
        Backend::Oracle(Some((record, direction))) => Ok(LocalizerResult {
            bbox: record.bbox,
            instruct_prompt: record.instruct(direction).to_owned(),
        }),
        Backend::Remote(client) => client.localize(image, user_prompt),
    }
}

pub fn annotate_pair(composite: &Image, backend: Backend<'_>) -> Result<PromptSets> {
    if !composite.width().is_multiple_of(2) {
        return Err(Error::Dimension(format!("composite width {} is odd", composite.width())));
    }
    match backend {
        Backend::Oracle(None) => Err(Error::MissingRecordContext),
        Backend::Oracle(Some((record, _))) => Ok(oracle_prompts(&record.feature)),
        Backend::Remote(client) => client.annotate(composite),
    }
}

fn dims(f: &FeatureDescription) -> String {
    match f.kind {
        FeatureKind::CylindricalHole => format!("{:.2}-diameter", f.size[0]),
        _ => format!("{:.2} by {:.2}", f.size[0], f.size[1]),
    }
}

fn extent(f: &FeatureDescription) -> String {
    if f.kind.is_cut() {
        format!("{:.2} deep", f.size[2])
    } else {
        format!("{:.2} tall", f.size[2])
    }
}

/// Template-bank annotation of a feature: six instruct and six user prompts
/// per direction plus one summary each.
pub fn oracle_prompts(f: &FeatureDescription) -> PromptSets {
    let (kind, loc, host) = (f.kind.noun(), f.location.phrase(), f.host.as_str());
    let (d, e) = (dims(f), extent(f));
    let cut = f.kind.is_cut();
    let on = format!("{loc} of the {host} face");
    let instructs_fwd = vec![
        format!("Remove the {d} {kind} {on}."),
        format!("Delete the {kind} {on} and restore a flat {host} face."),
        if cut {
            format!("Fill the {e} {kind} {on} flush with the surrounding surface.")
        } else {
            format!("Cut away the {e} {kind} {on} flush with the surrounding surface.")
        },
        format!("Eliminate the {kind} {on} to simplify the part."),
        format!("Take away the {d} {kind} {loc} to shorten machining time."),
        format!("Get rid of the {kind} sitting {on} so the face becomes one planar region."),
    ];
    let instructs_rev = vec![
        format!("Add a {d} {kind} {on}, {e}."),
        format!("Create a {kind} {on}."),
        if cut {
            format!("Cut a {d} {kind} {e} {on}.")
        } else {
            format!("Extrude a {d} {kind} {e} {on}.")
        },
        if cut {
            format!("Introduce a {kind} {on} to provide clearance for a mating part.")
        } else {
            format!("Introduce a {kind} {on} to serve as a mounting point.")
        },
        format!("Add a {e} {kind} {loc} as an alignment feature."),
        format!("Create a {d} {kind} {on} to implement the design revision."),
    ];
    let users_fwd = vec![
        format!("The {kind} on the {host} is not needed anymore."),
        format!("Make the {host} face plain again {loc}."),
        format!("Clean up the {host} side by dropping the {kind}."),
        format!("This {kind} {loc} only adds cost, take it off."),
        format!("I want the {host} of the block without any {kind}."),
        format!("Simplify the part around the {kind} {loc}."),
    ];
    let users_rev = vec![
        format!("I need a {kind} on the {host} face."),
        format!("Put a {kind} {loc} of the {host}."),
        if cut {
            format!("Hollow out a {kind} somewhere {loc}.")
        } else {
            format!("Raise a {kind} somewhere {loc}.")
        },
        format!("The {host} face needs a {kind} for assembly."),
        format!("Give the block a {e} {kind} on its {host}."),
        format!("Add some {kind} detail {loc} of the {host}."),
    ];
    PromptSets {
        summary_fwd: format!("Remove the {kind} {on}."),
        summary_rev: format!("Add a {d} {kind} {on}."),
        instructs_fwd,
        instructs_rev,
        users_fwd,
        users_rev,
    }
}

/// Markdown of a prompt set in the annotation reply layout, as a remote annotator would reply.
pub fn render_annotation(p: &PromptSets) -> String {
    let mut out = String::new();
    out.push_str("## Geometric Change Summary:\n### Left -> Right Change:\n");
    out.push_str(&p.summary_fwd);
    out.push_str("\n### Right -> Left Change:\n");
    out.push_str(&p.summary_rev);
    out.push_str("\n\n");
    for (title, list) in [("Left -> Right", &p.instructs_fwd), ("Right -> Left", &p.instructs_rev)] {
        out.push_str(&format!("## Instructions for Change: {title}\n"));
        for (k, s) in list.iter().enumerate() {
            out.push_str(&format!("{}. {s}\n", k + 1));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Other,
    SummaryFwd,
    SummaryRev,
    InstructFwd,
    InstructRev,
    UserFwd,
    UserRev,
}

fn heading(line: &str) -> Option<Section> {
    let t = line.trim();
    if !t.starts_with('#') {
        return None;
    }
    let body = t.trim_start_matches('#').replace('*', "").replace('→', "->").to_lowercase();
    let words: Vec<&str> = body.split_whitespace().collect();
    let norm = words.join(" ");
    let norm = norm.trim_end_matches(':').trim().replace(" -> ", "->").replace("- >", "->");
    let dir = |s: &str| {
        if s.contains("left->right") {
            Some(true)
        } else if s.contains("right->left") {
            Some(false)
        } else {
            None
        }
    };
    Some(if norm.starts_with("instructions for change") {
        match dir(&norm) {
            Some(true) => Section::InstructFwd,
            Some(false) => Section::InstructRev,
            None => Section::Other,
        }
    } else if norm.starts_with("user prompts") {
        match dir(&norm) {
            Some(true) => Section::UserFwd,
            Some(false) => Section::UserRev,
            None => Section::Other,
        }
    } else if norm.ends_with("change") {
        match dir(&norm) {
            Some(true) => Section::SummaryFwd,
            Some(false) => Section::SummaryRev,
            None => Section::Other,
        }
    } else {
        Section::Other
    })
}

fn numbered(line: &str) -> Option<(usize, String)> {
    let t = line.trim();
    let digits: String = t.chars().take_while(|c| c.is_ascii_digit()).collect();
    let rest = t[digits.len()..].strip_prefix(['.', ')'])?;
    Some((digits.parse().ok()?, rest.trim().to_owned()))
}

/// Parses a heading-anchored annotation reply.
///
/// Instruction sections are required and must number 1 to 6. User-prompt
/// sections are optional; without them the intent-focused items 4-6 lead,
/// followed by items 1-3.
pub fn parse_annotation(text: &str) -> Result<PromptSets> {
    let mut section = Section::Other;
    let mut summary = [String::new(), String::new()];
    let mut lists: [Option<Vec<(usize, String)>>; 4] = Default::default();
    for line in text.lines() {
        if let Some(s) = heading(line) {
            section = s;
            let slot = match s {
                Section::InstructFwd => Some(0),
                Section::InstructRev => Some(1),
                Section::UserFwd => Some(2),
                Section::UserRev => Some(3),
                _ => None,
            };
            if let Some(k) = slot {
                lists[k].get_or_insert_with(Vec::new);
            }
            continue;
        }
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        match section {
            Section::SummaryFwd | Section::SummaryRev => {
                let k = usize::from(section == Section::SummaryRev);
                if !summary[k].is_empty() {
                    summary[k].push(' ');
                }
                summary[k].push_str(t);
            }
            Section::InstructFwd | Section::InstructRev | Section::UserFwd | Section::UserRev => {
                let k = match section {
                    Section::InstructFwd => 0,
                    Section::InstructRev => 1,
                    Section::UserFwd => 2,
                    _ => 3,
                };
                if let Some(item) = numbered(t) {
                    lists[k].as_mut().expect("opened").push(item);
                }
            }
            Section::Other => {}
        }
    }
    let take = |k: usize, name: &str| -> Result<Option<Vec<String>>> {
        let Some(items) = &lists[k] else { return Ok(None) };
        let nums: Vec<usize> = items.iter().map(|(n, _)| *n).collect();
        if nums != (1..=PROMPT_COUNT).collect::<Vec<_>>() || items.iter().any(|(_, s)| s.is_empty()) {
            return Err(Error::MalformedReply(format!("{name} must list items 1 to {PROMPT_COUNT}, got {nums:?}")));
        }
        Ok(Some(items.iter().map(|(_, s)| s.clone()).collect()))
    };
    let instructs_fwd = take(0, "Instructions for Change: Left -> Right")?
        .ok_or_else(|| Error::MalformedReply("missing `## Instructions for Change: Left -> Right`".into()))?;
    let instructs_rev = take(1, "Instructions for Change: Right -> Left")?
        .ok_or_else(|| Error::MalformedReply("missing `## Instructions for Change: Right -> Left`".into()))?;
    let intent_first = |v: &[String]| v[3..].iter().chain(&v[..3]).cloned().collect::<Vec<_>>();
    let users_fwd = take(2, "User Prompts: Left -> Right")?.unwrap_or_else(|| intent_first(&instructs_fwd));
    let users_rev = take(3, "User Prompts: Right -> Left")?.unwrap_or_else(|| intent_first(&instructs_rev));
    let [summary_fwd, summary_rev] = summary;
    PromptSets {
        summary_fwd: if summary_fwd.is_empty() { instructs_fwd[0].clone() } else { summary_fwd },
        summary_rev: if summary_rev.is_empty() { instructs_rev[0].clone() } else { summary_rev },
        instructs_fwd,
        instructs_rev,
        users_fwd,
        users_rev,
    }
    .check()
}

#[derive(Serialize)]
struct LocalizeRequest<'a> {
    image_pgm_base64: String,
    prompt: &'a str,
}

#[derive(Serialize)]
struct AnnotateRequest<'a> {
    image_pgm_base64: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct LocalizeReply {
    bbox: Vec<f64>,
    instruct: String,
}

#[derive(Deserialize)]
struct AnnotateReply {
    text: String,
}

/// Blocking client for a remote localizer/annotator.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(base_url: &str, deadline: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(deadline)).build().into();
        Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    /// Client for the endpoint named by `BREPLER_MLLM_URL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(MLLM_URL_ENV).map_err(|_| Error::Config(format!("{MLLM_URL_ENV} is not set")))?;
        Ok(Self::new(&url, DEFAULT_DEADLINE))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post(&self, route: &str, body: &impl Serialize) -> Result<String> {
        let url = format!("{}{route}", self.base_url);
        let resp = self.agent.post(&url).send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => Error::MalformedReply(format!("{url}: HTTP {code}")),
            other => Error::Transport(format!("{url}: {other}")),
        })?;
        resp.into_body()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))
    }

    pub fn localize(&self, image: &Image, user_prompt: &str) -> Result<LocalizerResult> {
        let body = LocalizeRequest {
            image_pgm_base64: base64::engine::general_purpose::STANDARD.encode(image.to_pgm()),
            prompt: user_prompt,
        };
        parse_localize_reply(&self.post("/localize", &body)?)
    }

    pub fn annotate(&self, composite: &Image) -> Result<PromptSets> {
        let body = AnnotateRequest {
            image_pgm_base64: base64::engine::general_purpose::STANDARD.encode(composite.to_pgm()),
            prompt: prompt_template(),
        };
        let text = self.post("/annotate", &body)?;
        let reply: AnnotateReply = serde_json::from_str(&text).map_err(|e| Error::MalformedReply(format!("annotate: {e}")))?;
        parse_annotation(&reply.text)
    }
}

pub fn parse_localize_reply(text: &str) -> Result<LocalizerResult> {
    let reply: LocalizeReply = serde_json::from_str(text).map_err(|e| Error::MalformedReply(format!("localize: {e}")))?;
    let b: [f64; 4] = reply
        .bbox
        .as_slice()
        .try_into()
        .map_err(|_| Error::MalformedReply(format!("bbox has {} values", reply.bbox.len())))?;
    let bbox = BBox2D::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::MalformedReply(format!("bbox: {e}")))?;
    if !bbox.is_normalized() {
        return Err(Error::MalformedReply(format!("bbox {b:?} outside [0,1]")));
    }
    if reply.instruct.trim().is_empty() {
        return Err(Error::MalformedReply("empty instruct prompt".into()));
    }
    Ok(LocalizerResult {
        bbox,
        instruct_prompt: reply.instruct,
    })
}
