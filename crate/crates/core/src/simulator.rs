//! User simulators: produce the next relative caption from the selected
//! candidate and the target image.
//!
//! * `oracle` is an offline test double whose caption is a steering token the
//!   toy composer understands,
//! * `caption_pipeline` captions both images with a multimodal model and asks
//!   a language model for the difference,
//! * `direct_diff` sends both images to one multimodal model,
//! * `frozen` repeats the first caption (an ablation), and `human` marks
//!   feedback typed by a person through the session service.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::composer::{local_path, Caption};
use crate::error::{Error, Result};
use crate::forge::Category;
use crate::gallery::GalleryEntry;
use crate::http::{join_url, JsonClient, RetryPolicy};
use crate::templates::{self, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Oracle,
    CaptionPipeline,
    DirectDiff,
    Frozen,
    Human,
}

/// Which prompt family a dataset uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    #[default]
    CirrLike,
    Fashioniq,
    Fisd,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "profile", content = "category", rename_all = "snake_case")]
pub enum DatasetProfile {
    CirrLike,
    Fashioniq,
    Fisd(Category),
}

impl DatasetProfile {
    /// FISD profiles need the triplet's category.
    pub fn resolve(kind: ProfileKind, category: Option<&str>) -> Result<Self> {
        Ok(match kind {
            ProfileKind::CirrLike => DatasetProfile::CirrLike,
            ProfileKind::Fashioniq => DatasetProfile::Fashioniq,
            ProfileKind::Fisd => {
                let c = category.ok_or_else(|| Error::Config("fisd profile requires a triplet category".into()))?;
                DatasetProfile::Fisd(c.parse()?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedbackRequest<'a> {
    pub candidate: &'a GalleryEntry,
    pub target: &'a GalleryEntry,
    pub profile: DatasetProfile,
    /// Round the feedback is written for.
    pub round: usize,
}

impl FeedbackRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.candidate.image_id == self.target.image_id {
            return Err(Error::InvalidRequest(format!(
                "candidate and target are the same image `{}`",
                self.target.image_id
            )));
        }
        Ok(())
    }
}

/// A role-tagged message as sent to the generator endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// The exact prompts a pipeline simulator sent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RenderedPrompts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub caption: Caption,
    pub simulator_kind: SimulatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_captions: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<RenderedPrompts>,
    /// Set when the simulator failed and `caption` is the previous round's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

impl Feedback {
    pub fn new(caption: Caption, simulator_kind: SimulatorKind) -> Self {
        Self {
            caption,
            simulator_kind,
            raw_captions: None,
            prompts: None,
            failed: None,
        }
    }
}

/// The steering caption `ORACLE(target_id, alpha, round)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleToken {
    pub target_id: String,
    pub alpha: f64,
    pub round: usize,
}

impl OracleToken {
    pub fn render(&self) -> String {
        format!("ORACLE({}, {}, {})", self.target_id, self.alpha, self.round)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let inner = text.strip_prefix("ORACLE(")?.strip_suffix(')')?;
        let mut parts = inner.rsplitn(3, ", ");
        let round = parts.next()?.parse().ok()?;
        let alpha: f64 = parts.next()?.parse().ok()?;
        let target_id = parts.next()?.to_string();
        if target_id.is_empty() || !(0.0..=1.0).contains(&alpha) {
            return None;
        }
        Some(Self { target_id, alpha, round })
    }
}

/// Emits the steering token for `req`. Works offline and is deterministic.
pub fn oracle_feedback(req: &FeedbackRequest<'_>, alpha: f64) -> Result<Feedback> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("oracle alpha {alpha} outside [0, 1]")));
    }
    let token = OracleToken {
        target_id: req.target.image_id.clone(),
        alpha,
        round: req.round,
    };
    Ok(Feedback::new(Caption::new(token.render())?, SimulatorKind::Oracle))
}

pub fn frozen_feedback(session_first_caption: &Caption) -> Feedback {
    Feedback::new(session_first_caption.clone(), SimulatorKind::Frozen)
}

fn default_temperature() -> f32 {
    0.0
}

fn default_max_tokens() -> u32 {
    256
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimulatorBinding {
    Oracle {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    CaptionPipeline {
        captioner: String,
        generator: String,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default = "default_temperature")]
        temperature: f32,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default)]
        templates_dir: Option<std::path::PathBuf>,
        #[serde(default)]
        inline_images: bool,
    },
    DirectDiff {
        endpoint: String,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default)]
        templates_dir: Option<std::path::PathBuf>,
    },
}

#[derive(Debug)]
pub struct CaptionPipeline {
    client: JsonClient,
    captioner: String,
    generator: String,
    templates: TemplateSet,
    temperature: f32,
    max_tokens: u32,
    inline_images: bool,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    image_uri: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    messages: &'a [Message],
    temperature: f32,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Serialize)]
struct DiffRequest<'a> {
    image_uris: [&'a str; 2],
    prompt: &'a str,
}

impl CaptionPipeline {
    pub fn new(
        captioner: impl Into<String>,
        generator: impl Into<String>,
        retry: RetryPolicy,
        templates: TemplateSet,
    ) -> Self {
        Self {
            client: JsonClient::new(retry, 8),
            captioner: captioner.into(),
            generator: generator.into(),
            templates,
            temperature: 0.0,
            max_tokens: 256,
            inline_images: false,
        }
    }

    pub fn captioner_prompt(&self, profile: DatasetProfile) -> Result<String> {
        let id = match profile {
            DatasetProfile::Fashioniq => templates::MLLM_CAPTION_FASHIONIQ,
            _ => templates::MLLM_CAPTION_DEFAULT,
        };
        self.templates.get(id)?.render(&[])
    }

    /// System and user messages for the difference-writing model.
    pub fn generator_messages(&self, profile: DatasetProfile, candidate_caption: &str, target_caption: &str) -> Result<Vec<Message>> {
        let user = match profile {
            DatasetProfile::CirrLike => self.templates.get(templates::LLM_DIFF_CIRR)?.render(&[
                ("candidate_caption", candidate_caption),
                ("target_caption", target_caption),
            ])?,
            DatasetProfile::Fashioniq => self.templates.get(templates::LLM_DIFF_FASHIONIQ)?.render(&[
                ("candidate_caption", candidate_caption),
                ("target_caption", target_caption),
            ])?,
            DatasetProfile::Fisd(Category::Complex) => self.templates.get(templates::LLM_DIFF_FISD_COMPLEX)?.render(&[
                ("candidate_caption", candidate_caption),
                ("target_caption", target_caption),
            ])?,
            DatasetProfile::Fisd(category) => self.templates.get(templates::LLM_DIFF_FISD)?.render(&[
                ("aspect", category.as_str()),
                ("candidate_caption", candidate_caption),
                ("target_caption", target_caption),
            ])?,
        };
        let system = self.templates.get(templates::LLM_SYSTEM)?.render(&[])?;
        Ok(vec![
            Message { role: "system".into(), content: system },
            Message { role: "user".into(), content: user },
        ])
    }

    fn caption_image(&self, entry: &GalleryEntry, prompt: &str) -> Result<String> {
        if let Some(c) = &entry.caption {
            return Ok(c.clone());
        }
        let uri = entry.uri.as_deref().unwrap_or(&entry.image_id);
        let request = match local_path(uri).filter(|_| self.inline_images) {
            Some(path) => {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                CaptionRequest {
                    image_uri: None,
                    image_b64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
                    prompt,
                }
            }
            None => CaptionRequest { image_uri: Some(uri), image_b64: None, prompt },
        };
        let resp: CaptionResponse = self.client.post_json(&join_url(&self.captioner, "caption"), &request)?;
        Ok(resp.caption)
    }

    /// `LLM(MLLM(candidate), MLLM(target))`.
    pub fn feedback(&self, req: &FeedbackRequest<'_>) -> Result<Feedback> {
        req.validate()?;
        let cap_prompt = self.captioner_prompt(req.profile)?;
        let cand = self.caption_image(req.candidate, &cap_prompt)?;
        let tgt = self.caption_image(req.target, &cap_prompt)?;
        let messages = self.generator_messages(req.profile, &cand, &tgt)?;
        let url = join_url(&self.generator, "generate");
        let resp: TextResponse = self.client.post_json(
            &url,
            &GenerateRequest {
                messages: &messages,
                temperature: self.temperature,
                max_tokens: self.max_tokens,
            },
        )?;
        let caption = Caption::from_model_output(&resp.text).map_err(|_| Error::EmptyResponse(url))?;
        Ok(Feedback {
            caption,
            simulator_kind: SimulatorKind::CaptionPipeline,
            raw_captions: Some((cand, tgt)),
            prompts: Some(RenderedPrompts {
                captioner: Some(cap_prompt),
                generator: messages,
                direct: None,
            }),
            failed: None,
        })
    }
}

#[derive(Debug)]
pub struct DirectDiff {
    client: JsonClient,
    endpoint: String,
    templates: TemplateSet,
}

impl DirectDiff {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, templates: TemplateSet) -> Self {
        Self {
            client: JsonClient::new(retry, 8),
            endpoint: endpoint.into(),
            templates,
        }
    }

    pub fn feedback(&self, req: &FeedbackRequest<'_>) -> Result<Feedback> {
        req.validate()?;
        let uri = |e: &'_ GalleryEntry| -> Result<String> {
            e.uri
                .clone()
                .ok_or_else(|| Error::InvalidRequest(format!("image `{}` has no URI", e.image_id)))
        };
        let (cand, tgt) = (uri(req.candidate)?, uri(req.target)?);
        let prompt = self.templates.get(templates::MM_DIRECT_DIFF)?.render(&[])?;
        let url = join_url(&self.endpoint, "diff");
        let resp: TextResponse = self.client.post_json(
            &url,
            &DiffRequest {
                image_uris: [&cand, &tgt],
                prompt: &prompt,
            },
        )?;
        let caption = Caption::from_model_output(&resp.text).map_err(|_| Error::EmptyResponse(url))?;
        Ok(Feedback {
            caption,
            simulator_kind: SimulatorKind::DirectDiff,
            raw_captions: None,
            prompts: Some(RenderedPrompts {
                direct: Some(prompt),
                ..RenderedPrompts::default()
            }),
            failed: None,
        })
    }
}

#[derive(Debug)]
pub enum Simulator {
    Oracle { alpha: f64 },
    CaptionPipeline(CaptionPipeline),
    DirectDiff(DirectDiff),
}

fn template_set(dir: &Option<std::path::PathBuf>) -> Result<TemplateSet> {
    let mut set = TemplateSet::bundled();
    if let Some(dir) = dir {
        set.load_overrides(dir)?;
    }
    Ok(set)
}

impl Simulator {
    pub fn from_binding(binding: &SimulatorBinding) -> Result<Self> {
        Ok(match binding {
            SimulatorBinding::Oracle { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::Config(format!("oracle alpha {alpha} outside [0, 1]")));
                }
                Simulator::Oracle { alpha: *alpha }
            }
            SimulatorBinding::CaptionPipeline {
                captioner,
                generator,
                retry,
                temperature,
                max_tokens,
                templates_dir,
                inline_images,
            } => {
                let mut p = CaptionPipeline::new(captioner, generator, retry.clone(), template_set(templates_dir)?);
                p.temperature = *temperature;
                p.max_tokens = *max_tokens;
                p.inline_images = *inline_images;
                Simulator::CaptionPipeline(p)
            }
            SimulatorBinding::DirectDiff { endpoint, retry, templates_dir } => {
                Simulator::DirectDiff(DirectDiff::new(endpoint, retry.clone(), template_set(templates_dir)?))
            }
        })
    }

    pub fn kind(&self) -> SimulatorKind {
        match self {
            Simulator::Oracle { .. } => SimulatorKind::Oracle,
            Simulator::CaptionPipeline(_) => SimulatorKind::CaptionPipeline,
            Simulator::DirectDiff(_) => SimulatorKind::DirectDiff,
        }
    }

    pub fn feedback(&self, req: &FeedbackRequest<'_>) -> Result<Feedback> {
        match self {
            Simulator::Oracle { alpha } => oracle_feedback(req, *alpha),
            Simulator::CaptionPipeline(p) => p.feedback(req),
            Simulator::DirectDiff(d) => d.feedback(req),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::EmbeddingVector;

    fn entry(id: &str) -> GalleryEntry {
        GalleryEntry::new(id, EmbeddingVector::new(vec![1.0, 0.0]).unwrap()).with_uri(format!("file:///{id}.png"))
    }

    #[test]
    fn oracle_token_round_trip() {
        for alpha in [0.0, 0.25, 1.0, 0.1 + 0.2] {
            let t = OracleToken { target_id: "img, with comma".into(), alpha, round: 3 };
            assert_eq!(OracleToken::parse(&t.render()), Some(t));
        }
        assert_eq!(OracleToken::parse("make it red"), None);
        assert_eq!(OracleToken::parse("ORACLE(x, 2, 1)"), None);
    }

    #[test]
    fn oracle_is_deterministic() {
        let (c, t) = (entry("c"), entry("t"));
        let req = FeedbackRequest { candidate: &c, target: &t, profile: DatasetProfile::CirrLike, round: 2 };
        let a = oracle_feedback(&req, 0.5).unwrap();
        assert_eq!(a, oracle_feedback(&req, 0.5).unwrap());
        assert_eq!(a.simulator_kind, SimulatorKind::Oracle);
        assert_eq!(a.caption.text(), "ORACLE(t, 0.5, 2)");
    }

    #[test]
    fn frozen_repeats_caption() {
        let first = Caption::new("is red").unwrap();
        for _ in 2..=5 {
            let f = frozen_feedback(&first);
            assert_eq!(f.caption, first);
            assert_eq!(f.simulator_kind, SimulatorKind::Frozen);
        }
    }

    #[test]
    fn prompts_by_profile() {
        let p = CaptionPipeline::new("http://x", "http://y", RetryPolicy::default(), TemplateSet::bundled());
        assert_eq!(
            p.captioner_prompt(DatasetProfile::Fashioniq).unwrap(),
            "Give a short and precise English description of the clothes"
        );
        assert_eq!(
            p.captioner_prompt(DatasetProfile::Fisd(Category::Addition)).unwrap(),
            "Give me a short and precise English description of the image"
        );
        let m = p.generator_messages(DatasetProfile::Fisd(Category::Negation), "CAND TEXT", "TGT TEXT").unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[1].content.contains("CAND TEXT") && m[1].content.contains("TGT TEXT"));
        assert!(m[1].content.contains("negation"));
        let complex = p.generator_messages(DatasetProfile::Fisd(Category::Complex), "a", "b").unwrap();
        assert!(!complex[1].content.contains("complex"));
    }

    #[test]
    fn identical_images_rejected_for_pipelines() {
        let c = entry("same");
        let req = FeedbackRequest { candidate: &c, target: &c, profile: DatasetProfile::CirrLike, round: 2 };
        let d = DirectDiff::new("http://127.0.0.1:9", RetryPolicy::default(), TemplateSet::bundled());
        assert!(matches!(d.feedback(&req), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn profile_resolution() {
        assert_eq!(
            DatasetProfile::resolve(ProfileKind::Fisd, Some("background")).unwrap(),
            DatasetProfile::Fisd(Category::Background)
        );
        assert!(DatasetProfile::resolve(ProfileKind::Fisd, None).is_err());
        assert_eq!(DatasetProfile::resolve(ProfileKind::Fashioniq, Some("x")).unwrap(), DatasetProfile::Fashioniq);
    }
}
