//! Prompt templates and the hashed bag-of-tokens text encoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::Label;
use crate::nn::Linear;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Placeholder replaced by the class word when a template is rendered.
pub const CLASS_PLACEHOLDER: &str = "<CLASS>";

/// Number of hash buckets in the token vocabulary.
pub const VOCAB_BUCKETS: usize = 4096;

/// The eight default prompt templates, `T-1` through `T-8`.
pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "There is a <CLASS> face in this photo.",
    "<CLASS> face is in this photo.",
    "A photo of a <CLASS> face.",
    "This is an example of a <CLASS> face.",
    "This is how a <CLASS> face looks like.",
    "This photo contains <CLASS> face.",
    "The picture is a <CLASS> face.",
    "This is an image of a <CLASS> face.",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template on line {line} must contain exactly one {CLASS_PLACEHOLDER}, found {found}")]
    Placeholder { line: usize, found: usize },
    #[error("prompt file has no templates")]
    Empty,
    #[error("reading prompt file: {0}")]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Template identifier, displayed one-based as `T-1`, `T-2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateId(pub usize);

impl TemplateId {
    pub const DEFAULT: TemplateId = TemplateId(7);
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T-{}", self.0 + 1)
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim();
        let num = t.strip_prefix("T-").or_else(|| t.strip_prefix("t-")).unwrap_or(t);
        match num.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TemplateId(k - 1)),
            _ => Err(PromptError::UnknownTemplate(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptSet {
    /// One template per non-blank line.
    pub fn parse(text: &str) -> std::result::Result<Self, PromptError> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let found = line.matches(CLASS_PLACEHOLDER).count();
            if found != 1 {
                return Err(PromptError::Placeholder { line: i + 1, found });
            }
            templates.push(line.to_string());
        }
        if templates.is_empty() {
            return Err(PromptError::Empty);
        }
        Ok(Self { templates })
    }

    pub fn from_file(path: &Path) -> std::result::Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// File contents in the on-disk format.
    pub fn to_file_string(&self) -> String {
        let mut s = self.templates.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TemplateId> {
        (0..self.templates.len()).map(TemplateId)
    }

    pub fn template(&self, id: TemplateId) -> std::result::Result<&str, PromptError> {
        self.templates
            .get(id.0)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn render(&self, id: TemplateId, class: Label) -> std::result::Result<String, PromptError> {
        Ok(self.template(id)?.replace(CLASS_PLACEHOLDER, class.word()))
    }
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn token_bucket(token: &str) -> usize {
    (fnv1a64(token.as_bytes()) % VOCAB_BUCKETS as u64) as usize
}

pub fn token_buckets(sentence: &str) -> Vec<usize> {
    tokenize(sentence).iter().map(|t| token_bucket(t)).collect()
}

/// Sum of learned bucket embeddings, projected and unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub table: ParamId,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, width: usize, embed_dim: usize, rng: &Rng) -> Self {
        let name = "text.table";
        let table = Tensor::randn(&[VOCAB_BUCKETS, width], (1.0 / width as f64).sqrt(), &mut rng.derive(name));
        Self {
            table: store.add(name, table),
            proj: Linear::new(store, "text.proj", width, embed_dim, rng),
        }
    }

    /// Embeds a sentence, `1×embed_dim`, unit norm.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, sentence: &str) -> Result<Var> {
        let buckets = token_buckets(sentence);
        if buckets.is_empty() {
            return Err(crate::tensor::TensorError::Contract(format!(
                "sentence {sentence:?} has no tokens"
            )));
        }
        let rows = tape.gather_rows(p.var(self.table), &buckets)?;
        let ones = tape.constant(Tensor::ones(&[1, buckets.len()]));
        let bag = tape.matmul(ones, rows)?;
        let z = self.proj.forward(tape, p, bag)?;
        tape.l2_normalize_rows(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn template_ids_parse_and_print() {
        let id: TemplateId = "T-8".parse().unwrap();
        assert_eq!(id, TemplateId::DEFAULT);
        assert_eq!(id.to_string(), "T-8");
        assert!("T-0".parse::<TemplateId>().is_err());
        assert!("x".parse::<TemplateId>().is_err());
    }

    #[test]
    fn default_templates_render() {
        let p = PromptSet::default();
        assert_eq!(p.len(), 8);
        assert_eq!(
            p.render(TemplateId(7), Label::Fake).unwrap(),
            "This is an image of a fake face."
        );
        assert!(p.render(TemplateId(8), Label::Live).is_err());
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let p = PromptSet::default();
        assert_eq!(PromptSet::parse(&p.to_file_string()).unwrap(), p);
        assert!(matches!(
            PromptSet::parse("no placeholder here\n"),
            Err(PromptError::Placeholder { line: 1, found: 0 })
        ));
        assert!(matches!(
            PromptSet::parse("<CLASS> and <CLASS>\n"),
            Err(PromptError::Placeholder { found: 2, .. })
        ));
        assert!(matches!(PromptSet::parse("\n\n"), Err(PromptError::Empty)));
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("This is an image of a Live face."),
            vec!["this", "is", "an", "image", "of", "a", "live", "face"]
        );
    }

    #[test]
    fn class_words_differ_in_one_bucket() {
        let p = PromptSet::default();
        for id in p.ids() {
            let live = token_buckets(&p.render(id, Label::Live).unwrap());
            let fake = token_buckets(&p.render(id, Label::Fake).unwrap());
            assert_eq!(live.len(), fake.len());
            let diff = live.iter().zip(&fake).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1, "template {id}");
        }
    }
}
