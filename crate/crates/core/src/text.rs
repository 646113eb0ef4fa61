//! Sonar tag grammar, tokenization, prompt templates, and the trainable
//! text encoder.
//!
//! Captions mix ordinary words with tags like `SH34*`: a known prefix, one
//! to five digits, and a `*` terminator. Object prefixes mark targets
//! (ships, planes, mines and the like); background prefixes mark seabed
//! types. Tags stay atomic through tokenization so a single id carries the
//! object identity end to end.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD};
use rand::Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::nn::GradStore;

pub const OBJECT_PREFIXES: [&str; 5] = ["PL", "SH", "CYM", "ASF", "TCM"];
pub const BACKGROUND_PREFIXES: [&str; 3] = ["AS", "AP", "SEF"];

/// Reserved id for the null token (unconditional prompts).
pub const NULL_ID: usize = 0;
/// Reserved id for out-of-vocabulary words.
pub const UNK_ID: usize = 1;

pub const DEFAULT_D_COND: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    Object,
    Background,
}

/// One parsed tag occurrence, e.g. `SH34*` → prefix "SH", digits "34".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tag {
    pub kind: TagKind,
    pub prefix: String,
    pub digits: String,
}

impl Tag {
    pub fn text(&self) -> String {
        format!("{}{}*", self.prefix, self.digits)
    }
}

/// Longer prefixes come first: alternation takes the first branch that
/// matches, so `ASF12*` must try `ASF` before `AS`.
fn tag_regex() -> &'static Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(CYM|ASF|TCM|SEF|PL|SH|AS|AP)([0-9]{1,5})\*").unwrap())
}

fn full_tag_regex() -> &'static Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(CYM|ASF|TCM|SEF|PL|SH|AS|AP)([0-9]{1,5})\*$").unwrap())
}

fn kind_of(prefix: &str) -> TagKind {
    if OBJECT_PREFIXES.contains(&prefix) {
        TagKind::Object
    } else {
        TagKind::Background
    }
}

/// Every grammar match in order of appearance; non-matching text is ignored.
pub fn parse_tags(caption: &str) -> Vec<Tag> {
    tag_regex()
        .captures_iter(caption)
        .map(|c| Tag {
            kind: kind_of(&c[1]),
            prefix: c[1].to_string(),
            digits: c[2].to_string(),
        })
        .collect()
}

/// Split text into word tokens. Tags stay atomic and keep their case;
/// everything else is lowercased with trailing end punctuation stripped.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let trimmed = chunk.trim_end_matches(['.', ',', ';', ':', '!', '?']);
        if trimmed.is_empty() {
            continue;
        }
        if full_tag_regex().is_match(trimmed) {
            out.push(trimmed.to_string());
        } else {
            out.push(trimmed.to_lowercase());
        }
    }
    out
}

/// Word-level vocabulary with reserved null and UNK ids. Built once from
/// the training corpus and then frozen; later phases map unseen words to
/// UNK rather than growing the table.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VocabData {
    tokens: Vec<String>,
}

impl From<VocabData> for Vocabulary {
    fn from(data: VocabData) -> Self {
        let ids = data
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens: data.tokens, ids }
    }
}

impl From<Vocabulary> for VocabData {
    fn from(v: Vocabulary) -> Self {
        VocabData { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Token ids follow first appearance order across the corpus lines.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vocabulary =
            VocabData { tokens: vec!["<null>".to_string(), "<unk>".to_string()] }.into();
        for line in corpus {
            for token in word_tokens(line) {
                if !v.ids.contains_key(&token) {
                    v.ids.insert(token.clone(), v.tokens.len());
                    v.tokens.push(token);
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }
}

/// Map text to token ids. Empty (after trimming) text is a parameter
/// error; unconditional prompts go through [`encode_prompt_ids`] instead.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(Error::Param("cannot tokenize empty text".into()));
    }
    Ok(word_tokens(text).iter().map(|t| vocab.id(t)).collect())
}

/// Prompt-to-ids convention used throughout sampling and training: an
/// empty prompt becomes the single null token.
pub fn encode_prompt_ids(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        Ok(vec![NULL_ID])
    } else {
        tokenize(text, vocab)
    }
}

/// Template with `{slot}` placeholders and literal substitution.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PromptSpec {
    pub template: String,
    pub bindings: BTreeMap<String, String>,
}

/// Substitute every `{slot}` from the bindings. Unbound slots are an
/// error naming the slot; spacing in the template is preserved as written.
pub fn render_prompt(spec: &PromptSpec) -> Result<String> {
    use std::sync::OnceLock;
    static SLOT: OnceLock<Regex> = OnceLock::new();
    let slot_re = SLOT.get_or_init(|| Regex::new(r"\{([A-Za-z0-9_]+)\}").unwrap());

    let mut out = String::new();
    let mut last = 0;
    for caps in slot_re.captures_iter(&spec.template) {
        let whole = caps.get(0).unwrap();
        let name = &caps[1];
        let value = spec
            .bindings
            .get(name)
            .ok_or_else(|| Error::Template(format!("unbound slot '{name}'")))?;
        out.push_str(&spec.template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&spec.template[last..]);
    Ok(out)
}

/// Encoded prompt plus a flag for overlength inputs that were cut to
/// `max_len` tokens.
pub struct EncodedText {
    pub embedding: Array2<f64>,
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Learned token + positional embedding table, trained jointly with the
/// denoiser. Deterministic at inference.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ArrayD<f64>,
    pub positional: ArrayD<f64>,
    pub d_cond: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(vocab_size: usize, d_cond: usize, max_len: usize, rng: &mut R) -> Self {
        Self {
            embedding: crate::nn::gaussian(&[vocab_size, d_cond], 0.02, rng),
            positional: crate::nn::gaussian(&[max_len, d_cond], 0.02, rng),
            d_cond,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    /// Row i of the result is `embedding[ids[i]] + positional[i]`.
    pub fn encode(&self, ids: &[usize]) -> Result<EncodedText> {
        if ids.is_empty() {
            return Err(Error::Param("token id sequence must be non-empty".into()));
        }
        let truncated = ids.len() > self.max_len;
        let ids: Vec<usize> = ids.iter().copied().take(self.max_len).collect();
        let emb = crate::nn::as2(&self.embedding);
        let pos = crate::nn::as2(&self.positional);
        let mut out = Array2::zeros((ids.len(), self.d_cond));
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::Param(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.vocab_size()
                )));
            }
            let row = &emb.row(id) + &pos.row(i);
            out.row_mut(i).assign(&row);
        }
        Ok(EncodedText { embedding: out, ids, truncated })
    }

    /// Scatter embedding-sequence gradients back onto the tables.
    pub fn backward(&self, ids: &[usize], dy: &Array2<f64>, grads: &mut GradStore) {
        let mut d_emb = Array2::<f64>::zeros((self.vocab_size(), self.d_cond));
        let mut d_pos = Array2::<f64>::zeros((self.max_len, self.d_cond));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = d_emb.row_mut(id);
            row += &dy.row(i);
            let mut prow = d_pos.row_mut(i);
            prow += &dy.row(i);
        }
        grads.add("text.embedding", d_emb.into_dyn());
        grads.add("text.positional", d_pos.into_dyn());
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f("text.embedding", &self.embedding);
        f("text.positional", &self.positional);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f("text.embedding", &mut self.embedding);
        f("text.positional", &mut self.positional);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tag_stays_atomic_in_tokenization() {
        let tokens = word_tokens("image of SH34* ship");
        assert_eq!(tokens, vec!["image", "of", "SH34*", "ship"]);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let vocab = Vocabulary::build(["image of SH34* ship on AP238* seabed"]);
        let a = tokenize("image of SH34* ship", &vocab).unwrap();
        let b = tokenize("image of SH34* ship", &vocab).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn out_of_vocabulary_maps_to_unk_in_place() {
        let vocab = Vocabulary::build(["image of a ship"]);
        let ids = tokenize("image of a submarine", &vocab).unwrap();
        assert_eq!(ids[3], UNK_ID);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn empty_text_is_a_parameter_error() {
        let vocab = Vocabulary::build(["word"]);
        assert!(matches!(tokenize("   ", &vocab), Err(Error::Param(_))));
    }

    #[test]
    fn parse_tags_finds_object_and_background_in_order() {
        let tags = parse_tags("image of SH34* ship on AP238* seabed");
        assert_eq!(
            tags,
            vec![
                Tag { kind: TagKind::Object, prefix: "SH".into(), digits: "34".into() },
                Tag { kind: TagKind::Background, prefix: "AP".into(), digits: "238".into() },
            ]
        );
    }

    #[test]
    fn six_digit_tag_does_not_match() {
        assert!(parse_tags("PL123456*").is_empty());
    }

    #[test]
    fn caption_without_tags_yields_empty_list() {
        assert!(parse_tags("plain seafloor with sand ripples").is_empty());
    }

    #[test]
    fn shared_prefix_tags_disambiguate() {
        let tags = parse_tags("ASF12* near AS3* and SEF99*");
        let prefixes: Vec<&str> = tags.iter().map(|t| t.prefix.as_str()).collect();
        assert_eq!(prefixes, vec!["ASF", "AS", "SEF"]);
        assert_eq!(tags[1].kind, TagKind::Background);
        assert_eq!(tags[0].kind, TagKind::Object);
    }

    #[test]
    fn render_prompt_substitutes_slots() {
        let spec = PromptSpec {
            template: "image of {obj} on the {bg}".into(),
            bindings: BTreeMap::from([
                ("obj".to_string(), "SH34*".to_string()),
                ("bg".to_string(), "AP637*".to_string()),
            ]),
        };
        assert_eq!(render_prompt(&spec).unwrap(), "image of SH34* on the AP637*");
    }

    #[test]
    fn render_prompt_without_slots_is_verbatim() {
        let spec = PromptSpec { template: "plain caption".into(), bindings: BTreeMap::new() };
        assert_eq!(render_prompt(&spec).unwrap(), "plain caption");
    }

    #[test]
    fn render_prompt_names_the_unbound_slot() {
        let spec = PromptSpec {
            template: "image of {obj} on the {bg}".into(),
            bindings: BTreeMap::from([("obj".to_string(), "SH34*".to_string())]),
        };
        match render_prompt(&spec) {
            Err(Error::Template(msg)) => assert!(msg.contains("bg"), "{msg}"),
            other => panic!("expected template error, got {other:?}"),
        }
    }

    #[test]
    fn every_rendered_tag_tokenizes_atomically() {
        for prefix in OBJECT_PREFIXES.iter().chain(BACKGROUND_PREFIXES.iter()) {
            for digits in ["1", "42", "12345"] {
                let tag = format!("{prefix}{digits}*");
                let spec = PromptSpec {
                    template: "image of {obj} here".into(),
                    bindings: BTreeMap::from([("obj".to_string(), tag.clone())]),
                };
                let rendered = render_prompt(&spec).unwrap();
                let tokens = word_tokens(&rendered);
                assert_eq!(tokens.iter().filter(|t| **t == tag).count(), 1, "tag {tag}");
                assert_eq!(parse_tags(&rendered).len(), 1);
            }
        }
    }

    #[test]
    fn vocabulary_round_trips_through_json() {
        let vocab = Vocabulary::build(["image of SH34* ship"]);
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(back.id("SH34*"), vocab.id("SH34*"));
    }

    #[test]
    fn encoder_is_deterministic_and_positional() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(10, 8, 16, &mut rng);
        let a = enc.encode(&[2, 3]).unwrap();
        let b = enc.encode(&[2, 3]).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert!(!a.truncated);

        // Swapping tokens swaps which table row appears at each position.
        let swapped = enc.encode(&[3, 2]).unwrap();
        let pos = crate::nn::as2(&enc.positional);
        let emb = crate::nn::as2(&enc.embedding);
        let expect0 = &emb.row(3) + &pos.row(0);
        assert_eq!(swapped.embedding.row(0).to_owned(), expect0);
        let expect1 = &emb.row(3) + &pos.row(1);
        assert_eq!(a.embedding.row(1).to_owned(), expect1);
    }

    #[test]
    fn empty_prompt_uses_null_embedding() {
        let vocab = Vocabulary::build(["a caption"]);
        let ids = encode_prompt_ids("", &vocab).unwrap();
        assert_eq!(ids, vec![NULL_ID]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(vocab.len(), 8, 16, &mut rng);
        let out = enc.encode(&ids).unwrap();
        let expected =
            &crate::nn::as2(&enc.embedding).row(NULL_ID) + &crate::nn::as2(&enc.positional).row(0);
        assert_eq!(out.embedding.row(0).to_owned(), expected);
    }

    #[test]
    fn overlength_input_truncates_with_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(10, 4, 3, &mut rng);
        let out = enc.encode(&[2, 3, 4, 5, 6]).unwrap();
        assert!(out.truncated);
        assert_eq!(out.embedding.nrows(), 3);
        assert_eq!(out.ids, vec![2, 3, 4]);
    }

    #[test]
    fn encoder_backward_scatters_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(6, 4, 8, &mut rng);
        let ids = [2usize, 2, 5];
        let dy = Array2::from_elem((3, 4), 1.0);
        let mut grads = GradStore::new();
        enc.backward(&ids, &dy, &mut grads);
        let d_emb = grads.get("text.embedding").unwrap();
        // Token 2 appears twice, so its row accumulates both contributions.
        assert_eq!(d_emb[[2, 0]], 2.0);
        assert_eq!(d_emb[[5, 0]], 1.0);
        assert_eq!(d_emb[[0, 0]], 0.0);
        let d_pos = grads.get("text.positional").unwrap();
        assert_eq!(d_pos[[0, 0]], 1.0);
        assert_eq!(d_pos[[3, 0]], 0.0);
    }
}
