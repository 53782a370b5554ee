//! Prompt templates and the tagged blocks embedded in them.
//!
//! Templates are plain text with `{{name}}` placeholders. The blocks that
//! fill them use a small XML-like markup (`<candidate id="0">`,
//! `<supplement>`, ...) so that both a real LLM and the rule-based oracle in
//! [`crate::backends::rules`] can find the parts of a request.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::digest::Digest;
use crate::filtering::{CandidateSet, SupplementSet};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: unresolved placeholder {{{{{name}}}}}")]
    Unresolved { template: String, name: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("cannot read prompt file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Substitutes `{{name}}` placeholders. Values are inserted verbatim and
/// never rescanned; a placeholder without a value is an error.
pub fn render(template_name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Unterminated { template: template_name.to_string() })?;
        let name = after[..end].trim();
        let value = vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).ok_or_else(|| {
            PromptError::Unresolved { template: template_name.to_string(), name: name.to_string() }
        })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

/// Every prompt the pipeline sends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub caption: String,
    pub concise: String,
    pub filter: PromptTemplate,
    pub filter_examples: String,
    pub intra: PromptTemplate,
    pub inject: PromptTemplate,
    pub pair: PromptTemplate,
    pub fuse: PromptTemplate,
    pub direct: PromptTemplate,
    pub overlap: PromptTemplate,
}

macro_rules! builtin {
    ($name:literal) => {
        include_str!(concat!("../prompts/", $name))
    };
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = |system: &str, user: &str| PromptTemplate { system: system.into(), user: user.into() };
        Self {
            caption: builtin!("caption.txt").trim_end().into(),
            concise: builtin!("concise.txt").trim_end().into(),
            filter: t(builtin!("filter.system.txt"), builtin!("filter.user.txt")),
            filter_examples: builtin!("filter.examples.txt").trim_end().into(),
            intra: t(builtin!("intra.system.txt"), builtin!("intra.user.txt")),
            inject: t(builtin!("inject.system.txt"), builtin!("inject.user.txt")),
            pair: t(builtin!("pair.system.txt"), builtin!("pair.user.txt")),
            fuse: t(builtin!("fuse.system.txt"), builtin!("fuse.user.txt")),
            direct: t(builtin!("direct.system.txt"), builtin!("direct.user.txt")),
            overlap: t(builtin!("overlap.system.txt"), builtin!("overlap.user.txt")),
        }
    }
}

// (file name, placeholders the template may use)
const USER_TEMPLATES: [(&str, &[&str]); 7] = [
    ("filter", &["candidates", "examples"]),
    ("intra", &["candidates", "supplement"]),
    ("inject", &["global", "semantic", "supplement"]),
    ("pair", &["first", "second", "supplement"]),
    ("fuse", &["patches", "global"]),
    ("direct", &["patches", "global"]),
    ("overlap", &["caption", "labels"]),
];

impl PromptSet {
    /// Loads templates from `dir`. Files that are absent keep the built-in
    /// text, so a directory may override only some prompts.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        let read = |name: &str, slot: &mut String| -> Result<(), PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    *slot = text;
                    Ok(())
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
                Err(source) => Err(PromptError::Io { path, source }),
            }
        };
        read("caption.txt", &mut set.caption)?;
        read("concise.txt", &mut set.concise)?;
        read("filter.examples.txt", &mut set.filter_examples)?;
        for (name, _) in USER_TEMPLATES {
            let slot = set.template_mut(name);
            read(&format!("{name}.system.txt"), &mut slot.system)?;
            read(&format!("{name}.user.txt"), &mut slot.user)?;
        }
        set.caption = set.caption.trim_end().to_string();
        set.concise = set.concise.trim_end().to_string();
        set.validate()?;
        Ok(set)
    }

    fn template_mut(&mut self, name: &str) -> &mut PromptTemplate {
        match name {
            "filter" => &mut self.filter,
            "intra" => &mut self.intra,
            "inject" => &mut self.inject,
            "pair" => &mut self.pair,
            "fuse" => &mut self.fuse,
            "direct" => &mut self.direct,
            "overlap" => &mut self.overlap,
            other => unreachable!("unknown template {other}"),
        }
    }

    /// Fails on placeholders a template cannot be given.
    pub fn validate(&self) -> Result<(), PromptError> {
        let mut probe = self.clone();
        for (name, allowed) in USER_TEMPLATES {
            let vars: Vec<(&str, &str)> = allowed.iter().map(|a| (*a, "")).collect();
            let t = probe.template_mut(name);
            render(&format!("{name}.system"), &t.system, &[])?;
            render(&format!("{name}.user"), &t.user, &vars)?;
        }
        render("caption", &self.caption, &[])?;
        render("concise", &self.concise, &[])?;
        Ok(())
    }

    /// Content hash, folded into the run configuration digest.
    pub fn digest(&self) -> Digest {
        let mut parts: Vec<&[u8]> = vec![
            self.caption.as_bytes(),
            self.concise.as_bytes(),
            self.filter_examples.as_bytes(),
        ];
        for t in [&self.filter, &self.intra, &self.inject, &self.pair, &self.fuse, &self.direct, &self.overlap] {
            parts.push(t.system.as_bytes());
            parts.push(t.user.as_bytes());
        }
        Digest::of_parts(parts)
    }
}

pub const NO_SUPPLEMENT: &str = "No high-confidence sentences.";
pub const FILTERING_OFF: &str = "Filtering was not applied; rely on the descriptions themselves.";

/// Candidates with every sentence tagged by its `candidate:sentence` ref,
/// wrapped in one `<candidates>` block.
pub fn sentence_blocks(cands: &CandidateSet) -> String {
    let mut out = String::from("<candidates>\n");
    for (c, sentences) in cands.sentences.iter().enumerate() {
        out.push_str(&format!("<candidate id=\"{c}\">\n"));
        for (s, sentence) in sentences.iter().enumerate() {
            out.push_str(&format!("<sentence ref=\"{c}:{s}\">{sentence}</sentence>\n"));
        }
        out.push_str("</candidate>\n");
    }
    out.push_str("</candidates>");
    out
}

pub fn candidate_blocks(texts: &[String]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("<candidate id=\"{i}\">\n{}\n</candidate>", t.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `None` means filtering was skipped for this merge.
pub fn supplement_block(supplement: Option<&SupplementSet>) -> String {
    match supplement {
        None => format!("<supplement disabled=\"true\">\n{FILTERING_OFF}\n</supplement>"),
        Some(s) if s.is_empty() => format!("<supplement>\n{NO_SUPPLEMENT}\n</supplement>"),
        Some(s) => {
            let lines: Vec<String> = s.entries.iter().map(|e| format!("- {}", e.sentence)).collect();
            format!("<supplement>\n{}\n</supplement>", lines.join("\n"))
        }
    }
}

pub fn tagged_block(tag: &str, id: Option<&str>, text: &str) -> String {
    match id {
        Some(id) => format!("<{tag} id=\"{id}\">\n{}\n</{tag}>", text.trim()),
        None => format!("<{tag}>\n{}\n</{tag}>", text.trim()),
    }
}

pub fn list_block(tag: &str, items: &[String]) -> String {
    let lines: Vec<String> = items.iter().map(|i| format!("- {i}")).collect();
    format!("<{tag}>\n{}\n</{tag}>", lines.join("\n"))
}

/// Inner text and `id` attribute of every `<tag ...>...</tag>` in `text`,
/// in document order.
pub fn find_blocks<'t>(text: &'t str, tag: &str) -> Vec<(Option<&'t str>, &'t str)> {
    let open = format!("<{tag}");
    let close = format!("</{tag}>");
    let mut found = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(&open) {
        let after_name = &rest[start + open.len()..];
        // Reject longer tag names sharing the prefix.
        if !after_name.starts_with(['>', ' ']) {
            rest = after_name;
            continue;
        }
        let Some(gt) = after_name.find('>') else { break };
        let attrs = &after_name[..gt];
        let body = &after_name[gt + 1..];
        let Some(end) = body.find(&close) else { break };
        let id = attrs.split_once("id=\"").and_then(|(_, v)| v.split_once('"')).map(|(v, _)| v);
        let id = id.or_else(|| attrs.split_once("ref=\"").and_then(|(_, v)| v.split_once('"')).map(|(v, _)| v));
        found.push((id, body[..end].trim()));
        rest = &body[end + close.len()..];
    }
    found
}

/// Whether some `<tag ...>` opening mentions `attr`.
pub fn has_attr(text: &str, tag: &str, attr: &str) -> bool {
    let open = format!("<{tag} ");
    text.split(&open).skip(1).any(|s| s.split('>').next().is_some_and(|a| a.contains(attr)))
}
