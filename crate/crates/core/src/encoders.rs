//! Frozen patch featurizer, clause segmentation and the bag-of-tokens clause
//! encoder.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_core::{Graph, ParameterStore, Rng, Tensor, Var};
use crate::worldgen::{palette, ObjectClass, Scene, BACKGROUND};

/// Raw per-patch features: the fraction of pixels nearest each palette colour
/// (12 classes, then background) plus a 4-term code per grid axis.
pub const RAW_FEATURES: usize = COLOUR_BINS + 8;
const COLOUR_BINS: usize = ObjectClass::ALL.len() + 1;
const FEATURIZER_SEED: u64 = 0x7e11_5eed;

/// Parameter name of the clause-token embedding table.
pub const TEXT_EMBED: &str = "text.embed";

/// Fixed random map from raw patch features to C channels.
pub fn featurizer_map(c: usize) -> Tensor {
    let mut rng = Rng::new(FEATURIZER_SEED).fork(c as u64);
    rng.normal_tensor(&[RAW_FEATURES, c], 1.0 / (RAW_FEATURES as f64).sqrt())
}

fn position_code(p: usize, grid: usize) -> [f64; 4] {
    let t = p as f64 / grid as f64 * PI;
    [t.sin(), t.cos(), (2.0 * t).sin(), (2.0 * t).cos()]
}

/// Nearest palette entry; ties go to the lower index.
fn colour_bin(colours: &[[u8; 3]], px: [u8; 3]) -> usize {
    let dist = |c: &[u8; 3]| (0..3).map(|i| (c[i] as i32 - px[i] as i32).pow(2)).sum::<i32>();
    (0..colours.len()).min_by_key(|&i| dist(&colours[i])).unwrap_or(0)
}

/// Raw features of every patch, image-major then row-major: `m·P² × 11`.
pub fn raw_patch_features(scene: &Scene, p: usize) -> Result<Tensor> {
    let colours: Vec<[u8; 3]> =
        ObjectClass::ALL.iter().map(|&c| palette(c)).chain([BACKGROUND]).collect();
    let mut data = Vec::new();
    for img in &scene.images {
        if p == 0 || img.height % p != 0 || img.width % p != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into a {p}x{p} patch grid",
                img.height, img.width
            )));
        }
        let (bh, bw) = (img.height / p, img.width / p);
        for r in 0..p {
            for c in 0..p {
                let mut hist = [0.0; COLOUR_BINS];
                for y in r * bh..(r + 1) * bh {
                    for x in c * bw..(c + 1) * bw {
                        hist[colour_bin(&colours, img.pixel(y, x))] += 1.0;
                    }
                }
                let n = (bh * bw) as f64;
                data.extend(hist.iter().map(|h| h / n));
                data.extend(position_code(r, p));
                data.extend(position_code(c, p));
            }
        }
    }
    let rows = data.len() / RAW_FEATURES;
    Tensor::new(vec![rows, RAW_FEATURES], data)
}

/// Patch tokens `m·P² × C`, in global mask order.
pub fn encode_image(scene: &Scene, p: usize, c: usize) -> Result<Tensor> {
    raw_patch_features(scene, p)?.matmul(&featurizer_map(c))
}

/// Splits on sentence delimiters; index 0 is the goal.
pub fn segment_clauses(text: &str) -> Result<Vec<String>> {
    let clauses: Vec<String> = text
        .split(['.', ';', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if clauses.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "task text contains no clauses".into(),
        });
    }
    Ok(clauses)
}

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";

const TEMPLATE_WORDS: [&str; 16] = [
    "the", "put", "in", "on", "heat", "throw", "away", "clean", "if", "contains", "burnt", "food",
    "discard", "it", "first", "is",
];

/// Ordered clause-token vocabulary; index = embedding row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    tokens: Vec<String>,
}

impl TextVocab {
    pub fn builtin() -> Self {
        let mut tokens = vec![UNK.to_string(), SEP.to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        tokens.push("dirty".into());
        tokens.extend(ObjectClass::ALL.iter().map(|c| c.name().to_string()));
        TextVocab { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) || !tokens.iter().any(|t| t == SEP) {
            return Err(Error::Data(format!("vocabulary must start with {UNK} and contain {SEP}")));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || tokens[..i].contains(t) {
                return Err(Error::Data(format!("vocabulary line {}: bad token `{t}`", i + 1)));
            }
        }
        Ok(TextVocab { tokens })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(0)
    }

    pub fn sep(&self) -> usize {
        self.id(SEP)
    }

    /// Lowercase word ids; unknown words map to `<unk>`. Never empty.
    pub fn tokenize(&self, clause: &str) -> Vec<usize> {
        let ids: Vec<usize> = clause
            .to_ascii_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
            .filter(|w| !w.is_empty())
            .map(|w| self.id(w))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    /// Every clause's tokens in order, separated by `<sep>`.
    pub fn task_tokens(&self, clauses: &[String]) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, c) in clauses.iter().enumerate() {
            if i > 0 {
                out.push(self.sep());
            }
            out.extend(self.tokenize(c));
        }
        out
    }
}

/// Mean of the clause's token embedding rows (`1 × C`).
pub fn embed_clause(g: &mut Graph, store: &ParameterStore, ids: &[usize]) -> Result<Var> {
    let table = g.param(store, TEXT_EMBED)?;
    let rows = g.gather_rows(table, ids)?;
    Ok(g.mean_rows(rows))
}

/// Fixed sinusoidal code for sequence position `pos`, width `d`.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
