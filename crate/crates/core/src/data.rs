//! Vocabulary, sentence-pair packing, JSONL ingestion and the synthetic
//! aspect-sentiment task.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde_json::{Map, Value};

use crate::encoder::PackedInput;
use crate::error::{contract, Error, Result};
use crate::io::write_atomic;
use crate::rng::seeded;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    /// Sentence (ABSA) or premise (NLI).
    pub text_a: String,
    /// Aspect term (ABSA) or hypothesis (NLI).
    pub text_b: String,
    pub label: usize,
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rebuilds a vocabulary from tokens in id order. The first four must be
    /// the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err(contract(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(contract(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// Tokens seen at least `min_count` times, ordered by count (descending)
/// then lexicographically, after the four reserved ids.
pub fn build_vocab<'a, I>(corpus: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any = true;
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(contract("cannot build a vocabulary from an empty corpus"));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && ![PAD, UNK, CLS, SEP].contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = [PAD, UNK, CLS, SEP]
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Vocabulary over both segments of every example.
pub fn vocab_for(examples: &[PairExample], min_count: usize) -> Result<Vocab> {
    build_vocab(
        examples
            .iter()
            .flat_map(|e| [e.text_a.as_str(), e.text_b.as_str()]),
        min_count,
    )
}

/// Packs `[CLS] a [SEP] b [SEP]`, trimming the longer segment from its end
/// until the pair fits, then pads to `max_len`.
pub fn pack_ids(a: &[usize], b: &[usize], max_len: usize) -> Result<PackedInput> {
    if max_len < 3 {
        return Err(Error::Length {
            len: 3,
            max: max_len,
        });
    }
    let budget = max_len - 3;
    let (mut na, mut nb) = (a.len(), b.len());
    while na + nb > budget {
        if na > nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(&a[..na]);
    token_ids.push(SEP_ID);
    let first_len = token_ids.len();
    token_ids.extend_from_slice(&b[..nb]);
    token_ids.push(SEP_ID);
    let used = token_ids.len();
    let mut segment_ids = vec![0; first_len];
    segment_ids.resize(used, 1);
    segment_ids.resize(max_len, 0);
    let mut mask = vec![true; used];
    mask.resize(max_len, false);
    token_ids.resize(max_len, PAD_ID);
    Ok(PackedInput {
        token_ids,
        segment_ids,
        mask,
    })
}

pub fn pack_pair(ex: &PairExample, vocab: &Vocab, max_len: usize) -> Result<PackedInput> {
    pack_ids(
        &vocab.encode(&ex.text_a),
        &vocab.encode(&ex.text_b),
        max_len,
    )
}

/// JSONL field layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    /// `{"text", "aspect", "label"}`, labels negative/neutral/positive.
    Absa,
    /// `{"premise", "hypothesis", "label"}`, labels contradiction/neutral/entailment.
    Nli,
}

impl Schema {
    pub fn fields(self) -> (&'static str, &'static str) {
        match self {
            Schema::Absa => ("text", "aspect"),
            Schema::Nli => ("premise", "hypothesis"),
        }
    }

    pub fn labels(self) -> [&'static str; 3] {
        match self {
            Schema::Absa => ["negative", "neutral", "positive"],
            Schema::Nli => ["contradiction", "neutral", "entailment"],
        }
    }

    pub fn label_id(self, name: &str) -> Option<usize> {
        let lower = name.to_lowercase();
        self.labels().iter().position(|l| *l == lower)
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Absa => "absa",
            Schema::Nli => "nli",
        })
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absa" => Ok(Schema::Absa),
            "nli" => Ok(Schema::Nli),
            other => Err(Error::Config(format!(
                "unknown schema '{other}', expected absa or nli"
            ))),
        }
    }
}

fn parse_line(line: &str, lineno: usize, schema: Schema) -> Result<PairExample> {
    let data_err = |message: String| Error::Data {
        line: lineno,
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| data_err(format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| data_err("expected a JSON object".into()))?;
    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(data_err(format!("field '{name}' must be a string"))),
            None => Err(data_err(format!("missing field '{name}'"))),
        }
    };
    let (fa, fb) = schema.fields();
    let text_a = field(fa)?;
    let text_b = field(fb)?;
    let label_name = field("label")?;
    let label = schema
        .label_id(&label_name)
        .ok_or_else(|| data_err(format!("unknown {schema} label '{label_name}'")))?;
    Ok(PairExample {
        text_a,
        text_b,
        label,
    })
}

/// Parses JSONL from a reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_jsonl<R: BufRead>(reader: R, schema: Schema) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1, schema)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, schema: Schema) -> Result<Vec<PairExample>> {
    let file = fs::File::open(path)?;
    read_jsonl(BufReader::new(file), schema)
}

pub fn to_jsonl(examples: &[PairExample], schema: Schema) -> Result<String> {
    let (fa, fb) = schema.fields();
    let names = schema.labels();
    let mut out = String::new();
    for ex in examples {
        let label = names.get(ex.label).ok_or(Error::Index {
            what: "label",
            index: ex.label,
            bound: names.len(),
        })?;
        let mut obj = Map::new();
        obj.insert(fa.into(), Value::String(ex.text_a.clone()));
        obj.insert(fb.into(), Value::String(ex.text_b.clone()));
        obj.insert("label".into(), Value::String((*label).into()));
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[PairExample], schema: Schema) -> Result<()> {
    write_atomic(path.as_ref(), to_jsonl(examples, schema)?.as_bytes())
}

/// One aspect of the synthetic task and its opinion words, indexed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthAspect {
    pub name: String,
    pub words: Vec<Vec<String>>,
}

/// Word lists of the synthetic aspect-sentiment task.
///
/// `text_a` holds opinion words for two distinct aspects, `<W1> <conj> <W2>`,
/// optionally written out as `… the <A1> was <W1> <conj> the <A2> was <W2> …`.
/// `text_b` names one of the two aspects and the label is the class of that
/// aspect's opinion word. The two words always belong to different classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub aspects: Vec<SynthAspect>,
    pub conjunctions: Vec<String>,
    pub fillers: Vec<String>,
    pub max_prefix: usize,
    pub max_suffix: usize,
    /// Writes `the <A> was <W>` around each opinion word instead of `<W>` alone.
    pub mention_aspects: bool,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

fn aspect(name: &str, words_by_class: [&[&str]; 3]) -> SynthAspect {
    SynthAspect {
        name: name.into(),
        words: words_by_class.iter().map(|ws| words(ws)).collect(),
    }
}

impl Default for SynthSpec {
    /// The desk-scale task: two aspects, opinion words only, no fillers.
    fn default() -> Self {
        Self {
            aspects: vec![
                aspect(
                    "food",
                    [
                        &["bland", "stale"],
                        &["edible", "plain"],
                        &["delicious", "tasty"],
                    ],
                ),
                aspect(
                    "service",
                    [
                        &["rude", "slow"],
                        &["adequate", "standard"],
                        &["friendly", "attentive"],
                    ],
                ),
            ],
            conjunctions: words(&["but", "and", "while"]),
            fillers: words(&["honestly", "i", "think", "overall", "really"]),
            max_prefix: 0,
            max_suffix: 0,
            mention_aspects: false,
        }
    }
}

impl SynthSpec {
    /// A longer-sentence variant: four aspects, each named in `text_a`, with
    /// filler words around the clauses.
    pub fn verbose() -> Self {
        let mut spec = Self::default();
        spec.aspects.push(aspect(
            "price",
            [
                &["overpriced", "steep"],
                &["fair", "moderate"],
                &["cheap", "bargain"],
            ],
        ));
        spec.aspects.push(aspect(
            "ambience",
            [
                &["noisy", "gloomy"],
                &["quiet", "ordinary"],
                &["cozy", "lively"],
            ],
        ));
        spec.max_prefix = 2;
        spec.max_suffix = 1;
        spec.mention_aspects = true;
        spec
    }
}

impl SynthSpec {
    fn classes(&self) -> usize {
        self.aspects
            .iter()
            .map(|a| a.words.len())
            .min()
            .unwrap_or(0)
    }
}

/// Reapplies the task's labelling rule to an example.
pub fn synth_label(ex: &PairExample, spec: &SynthSpec) -> Option<usize> {
    let b = tokenize(&ex.text_b);
    let [name] = b.as_slice() else {
        return None;
    };
    let aspect = spec.aspects.iter().find(|a| &a.name == name)?;
    tokenize(&ex.text_a)
        .iter()
        .find_map(|t| aspect.words.iter().position(|ws| ws.contains(t)))
}

/// Generates `n` examples of the synthetic task.
///
/// Labels follow a round-robin sequence, so class counts differ by at most
/// one. Examples come in twins sharing the same `text_a` and asking about
/// the other aspect, which makes `text_a` alone uninformative beyond a coin
/// flip between its two opinions.
pub fn synth_generate(
    n: usize,
    classes: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<Vec<PairExample>> {
    if classes < 2 || classes > spec.classes() {
        return Err(contract(format!(
            "synthetic task supports 2..={} classes, got {classes}",
            spec.classes()
        )));
    }
    if n < classes {
        return Err(contract(format!("need n >= classes, got n={n}")));
    }
    if spec.aspects.len() < 2 {
        return Err(contract("synthetic task needs at least two aspects"));
    }
    let mut rng = seeded(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut out = Vec::with_capacity(n);
    for pair in labels.chunks(2) {
        let first = pair[0];
        let second = match pair.get(1) {
            Some(&l) => l,
            None => {
                let others: Vec<usize> = (0..classes).filter(|&c| c != first).collect();
                *others.choose(&mut rng).expect("classes >= 2")
            }
        };
        let mut aspects: Vec<&SynthAspect> = spec.aspects.choose_multiple(&mut rng, 2).collect();
        aspects.shuffle(&mut rng);
        // the aspect asked about in the first example
        let asked = rng.random_range(0..2);
        let mut class_for = [0; 2];
        class_for[asked] = first;
        class_for[1 - asked] = second;

        let mut tokens: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(0..=spec.max_prefix) {
            tokens.push(spec.fillers.choose(&mut rng).expect("fillers").clone());
        }
        for (slot, a) in aspects.iter().enumerate() {
            if slot == 1 {
                tokens.push(
                    spec.conjunctions
                        .choose(&mut rng)
                        .expect("conjunctions")
                        .clone(),
                );
            }
            if spec.mention_aspects {
                tokens.push("the".into());
                tokens.push(a.name.clone());
                tokens.push("was".into());
            }
            let word = a.words[class_for[slot]]
                .choose(&mut rng)
                .expect("opinion words");
            tokens.push(word.clone());
        }
        for _ in 0..rng.random_range(0..=spec.max_suffix) {
            tokens.push(spec.fillers.choose(&mut rng).expect("fillers").clone());
        }
        let text_a = tokens.join(" ");
        out.push(PairExample {
            text_a: text_a.clone(),
            text_b: aspects[asked].name.clone(),
            label: first,
        });
        if pair.len() == 2 {
            out.push(PairExample {
                text_a,
                text_b: aspects[1 - asked].name.clone(),
                label: second,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(a: &str, b: &str, label: usize) -> PairExample {
        PairExample {
            text_a: a.into(),
            text_b: b.into(),
            label,
        }
    }

    #[test]
    fn vocab_min_count_and_unknowns() {
        let v = build_vocab(["a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(v.id(CLS), CLS_ID);
        assert_eq!(build_vocab(["a a b"], 2).unwrap(), v);
        assert!(build_vocab(Vec::<&str>::new(), 1).is_err());
    }

    #[test]
    fn vocab_order_and_case() {
        let v = build_vocab(["B c C a", "b"], 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["b", "c", "a"]);
    }

    #[test]
    fn pack_forced_example() {
        let p = pack_ids(&[7, 8], &[9], 8).unwrap();
        assert_eq!(p.token_ids, vec![2, 7, 8, 3, 9, 3, 0, 0]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(
            p.mask,
            vec![true, true, true, true, true, true, false, false]
        );
    }

    #[test]
    fn pack_empty_second_segment() {
        let p = pack_ids(&[5, 6], &[], 6).unwrap();
        assert_eq!(p.token_ids, vec![2, 5, 6, 3, 3, 0]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn pack_trims_longest_first() {
        let a: Vec<usize> = (10..110).collect();
        let p = pack_ids(&a, &[4, 5], 16).unwrap();
        assert_eq!(p.token_ids.len(), 16);
        assert_eq!(&p.token_ids[1..12], &a[..11]);
        assert_eq!(&p.token_ids[12..], &[3, 4, 5, 3]);
    }

    #[test]
    fn jsonl_labels_and_errors() {
        let ok = r#"{"text":"x","aspect":"y","label":"positive"}"#;
        let got = read_jsonl(ok.as_bytes(), Schema::Absa).unwrap();
        assert_eq!(got, vec![ex("x", "y", 2)]);

        let upper = r#"{"text":"x","aspect":"y","label":"POSITIVE"}"#;
        assert_eq!(
            read_jsonl(upper.as_bytes(), Schema::Absa).unwrap()[0].label,
            2
        );

        let bad = format!("{ok}\n\n{}", r#"{"text":"x","aspect":"y","label":"great"}"#);
        match read_jsonl(bad.as_bytes(), Schema::Absa) {
            Err(Error::Data { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("great"));
            }
            other => panic!("expected data error, got {other:?}"),
        }

        let missing = r#"{"premise":"x","label":"neutral"}"#;
        assert!(matches!(
            read_jsonl(missing.as_bytes(), Schema::Nli),
            Err(Error::Data { line: 1, .. })
        ));
        assert!(matches!(
            read_jsonl("{not json".as_bytes(), Schema::Nli),
            Err(Error::Data { line: 1, .. })
        ));
    }

    #[test]
    fn nli_label_table() {
        for (name, id) in [("contradiction", 0), ("neutral", 1), ("Entailment", 2)] {
            assert_eq!(Schema::Nli.label_id(name), Some(id));
        }
    }

    #[test]
    fn synth_balance_and_self_consistency() {
        let spec = SynthSpec::default();
        let data = synth_generate(300, 3, 7, &spec).unwrap();
        let mut counts = [0; 3];
        for e in &data {
            counts[e.label] += 1;
            assert_eq!(synth_label(e, &spec), Some(e.label));
        }
        assert_eq!(counts, [100, 100, 100]);
        assert_eq!(data, synth_generate(300, 3, 7, &spec).unwrap());
        assert_ne!(data, synth_generate(300, 3, 8, &spec).unwrap());
    }

    #[test]
    fn synth_odd_sizes_stay_balanced() {
        let spec = SynthSpec::default();
        for n in [3, 7, 31, 100] {
            let data = synth_generate(n, 3, n as u64, &spec).unwrap();
            assert_eq!(data.len(), n);
            let mut counts = [0usize; 3];
            data.iter().for_each(|e| counts[e.label] += 1);
            let min = *counts.iter().min().unwrap();
            let max = *counts.iter().max().unwrap();
            assert!(max - min <= 1, "{counts:?}");
        }
        assert!(synth_generate(2, 3, 0, &spec).is_err());
    }
}
