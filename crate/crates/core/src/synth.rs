//! Seeded generator of paired answer/rationale instances grounded in one
//! planted evidence object, plus the line-delimited dataset format.
//!
//! Every object has a distinct color and a distinct shape. The question asks
//! for the color of the object with a given shape; the correct rationale
//! names that object by its tag.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::NUM_CHOICES;
use crate::error::{file_error, Error, Result};
use crate::numerics::Tensor;
use crate::rng::SplitMix64;

pub type TokenId = usize;

/// Fixed vocabulary layout.
pub mod tokens {
    use super::TokenId;

    pub const PAD: TokenId = 0;
    pub const CLS: TokenId = 1;
    pub const SEP: TokenId = 2;
    pub const END: TokenId = 3;
    pub const ASK: TokenId = 4;
    pub const COLOR: TokenId = 5;
    pub const BECAUSE: TokenId = 6;
    pub const IS: TokenId = 7;
    pub const COLOR_BASE: TokenId = 8;
    pub const SHAPE_BASE: TokenId = 16;
    pub const TAG_BASE: TokenId = 24;
    pub const VOCAB_SIZE: usize = 32;

    pub fn color(c: usize) -> TokenId {
        COLOR_BASE + c
    }

    pub fn shape(s: usize) -> TokenId {
        SHAPE_BASE + s
    }

    pub fn tag(object: usize) -> TokenId {
        TAG_BASE + object
    }

    /// Object index referenced by a tag token.
    pub fn tag_object(t: TokenId) -> Option<usize> {
        (TAG_BASE..VOCAB_SIZE).contains(&t).then(|| t - TAG_BASE)
    }
}

pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 8;
/// Object feature width: color one-hot then shape one-hot.
pub const FEATURE_DIM: usize = NUM_COLORS + NUM_SHAPES;
pub const MAX_OBJECTS: usize = 8;

fn default_objects() -> usize {
    6
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    #[serde(default = "default_objects")]
    pub objects: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

impl GenConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        GenConfig { seed, count, objects: default_objects(), noise_sigma: default_noise() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        self.validate_objects()
    }

    fn validate_objects(&self) -> Result<()> {
        if self.objects > MAX_OBJECTS {
            return Err(Error::Config(format!("at most {MAX_OBJECTS} objects, got {}", self.objects)));
        }
        if self.objects < NUM_CHOICES {
            return Err(Error::Config(format!("at least {NUM_CHOICES} objects, got {}", self.objects)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: GenConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// One feature row of width [`FEATURE_DIM`] per object.
    pub objects: Vec<Vec<f64>>,
    pub question: Vec<TokenId>,
    pub answers: Vec<Vec<TokenId>>,
    pub rationales: Vec<Vec<TokenId>>,
    pub answer_label: usize,
    pub rationale_label: usize,
    /// Planted object; diagnostics only.
    pub evidence: usize,
}

impl Instance {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn object_tensor(&self) -> Tensor<f64> {
        Tensor::from_rows(&self.objects).expect("validated object rows")
    }

    pub fn gold_answer(&self) -> &[TokenId] {
        &self.answers[self.answer_label]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        let bad = |msg: String| Err(Error::Data(msg));
        if n == 0 || n > MAX_OBJECTS {
            return bad(format!("object count {n} outside 1..={MAX_OBJECTS}"));
        }
        if self.objects.iter().any(|o| o.len() != FEATURE_DIM || o.iter().any(|v| !v.is_finite())) {
            return bad(format!("object features must be {FEATURE_DIM} finite values"));
        }
        if self.answers.len() != NUM_CHOICES || self.rationales.len() != NUM_CHOICES {
            return bad(format!("expected {NUM_CHOICES} answers and rationales"));
        }
        if self.answer_label >= NUM_CHOICES || self.rationale_label >= NUM_CHOICES || self.evidence >= n {
            return bad("label or evidence index out of range".into());
        }
        let all = self.question.iter().chain(self.answers.iter().flatten()).chain(self.rationales.iter().flatten());
        for &t in all {
            if t >= tokens::VOCAB_SIZE {
                return bad(format!("token {t} outside vocabulary"));
            }
            if tokens::tag_object(t).is_some_and(|o| o >= n) {
                return bad(format!("tag token {t} references a missing object (N = {n})"));
            }
        }
        Ok(())
    }
}

/// Draws one instance from `rng`.
pub fn gen_instance(rng: &mut SplitMix64, cfg: &GenConfig) -> Result<Instance> {
    cfg.validate_objects()?;
    let n = cfg.objects;
    let colors = rng.choose_distinct(NUM_COLORS, n);
    let shapes = rng.choose_distinct(NUM_SHAPES, n);
    let noise = rng.normals(n * FEATURE_DIM);
    let objects: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..FEATURE_DIM)
                .map(|k| {
                    let hot = if k < NUM_COLORS { k == colors[i] } else { k - NUM_COLORS == shapes[i] };
                    f64::from(u8::from(hot)) + cfg.noise_sigma * noise[i * FEATURE_DIM + k]
                })
                .collect()
        })
        .collect();

    let evidence = rng.below(n);
    let others: Vec<usize> = (0..n).filter(|&o| o != evidence).collect();
    let question = vec![tokens::ASK, tokens::COLOR, tokens::shape(shapes[evidence])];

    let pick_candidates = |rng: &mut SplitMix64| -> (Vec<usize>, usize) {
        let mut chosen: Vec<usize> =
            rng.choose_distinct(others.len(), NUM_CHOICES - 1).into_iter().map(|k| others[k]).collect();
        chosen.insert(0, evidence);
        rng.shuffle(&mut chosen);
        let gold = chosen.iter().position(|&o| o == evidence).expect("evidence is a candidate");
        (chosen, gold)
    };
    let (answer_objs, answer_label) = pick_candidates(rng);
    let (rationale_objs, rationale_label) = pick_candidates(rng);

    Ok(Instance {
        objects,
        question,
        answers: answer_objs.iter().map(|&o| vec![tokens::color(colors[o])]).collect(),
        rationales: rationale_objs
            .iter()
            .map(|&o| vec![tokens::BECAUSE, tokens::tag(o), tokens::IS, tokens::color(colors[o])])
            .collect(),
        answer_label,
        rationale_label,
        evidence,
    })
}

/// `cfg.count` instances; instance `i` draws from the `i`-th child stream of `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let mut master = SplitMix64::new(cfg.seed);
    (0..cfg.count).map(|_| gen_instance(&mut master.fork(), cfg)).collect()
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(file_error(path))?);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, cfg: &GenConfig) -> Result<Vec<Instance>> {
    let instances = generate(cfg)?;
    write_instances(path, &instances)?;
    Ok(instances)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(file_error(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let inst: Instance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &v)| if v > xs[best] { i } else { best })
}

/// Brute-force solver: finds the object whose shape the question names,
/// reads its color, and picks the matching answer and the rationale that
/// tags that object. Returns `None` when no candidate matches.
pub fn oracle_predict(inst: &Instance) -> Option<(usize, usize)> {
    let asked = inst.question.iter().find(|&&t| (tokens::SHAPE_BASE..tokens::TAG_BASE).contains(&t))?;
    let shape = asked - tokens::SHAPE_BASE;
    let object = inst.objects.iter().position(|o| argmax(&o[NUM_COLORS..]) == shape)?;
    let color = argmax(&inst.objects[object][..NUM_COLORS]);
    let answer = inst.answers.iter().position(|a| a.contains(&tokens::color(color)))?;
    let rationale = inst.rationales.iter().position(|r| r.iter().any(|&t| tokens::tag_object(t) == Some(object)))?;
    Some((answer, rationale))
}
