//! GridSum: a synthetic reasoning task with a verifiable answer.
//!
//! A question shows a `D×D` grid of digits (the "image") and asks for the
//! digit sum of one row modulo 10 (the "text"). Questions are expanded into
//! semantically consistent variants in two stages:
//!
//! * offline textual rewrites, which only swap the paraphrase template;
//! * online structural transforms (row permutations, transpose), each paired
//!   with a prompt repair that rewrites the target index and appends a tag so
//!   the answer is unchanged.

use std::fmt;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid side length used when nothing else is configured.
pub const DEFAULT_GRID_DIM: usize = 3;

/// Answers and grid cells are decimal digits.
pub const NUM_DIGITS: usize = 10;

const BUILTIN_PARAPHRASES: &str = include_str!("../resources/paraphrases.txt");

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("grid dimension must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error(
        "requested {requested} variants but the paraphrase bank has only {available} templates"
    )]
    NotEnoughTemplates { requested: usize, available: usize },
    #[error("variant count must be at least 1")]
    ZeroVariants,
    #[error("transform probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("transform registry is empty but transform probability is {0}")]
    EmptyRegistry(f64),
    #[error("transform `{name}` expects grid dimension {expected}, question has {actual}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("paraphrase bank is empty")]
    EmptyBank,
    #[error("paraphrase template on line {line} has no `{{row}}` placeholder")]
    TemplateMissingPlaceholder { line: usize },
    #[error("failed to read paraphrase bank: {0}")]
    Io(#[from] std::io::Error),
}

/// Structural transform families. Exactly one is applied per variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    RowPermutation,
    Transpose,
}

/// The prompt-repair tag appended to a question after a structural transform.
///
/// `id` is the transform's index in its registry, which is also the tag's slot
/// in the feature encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TauTag {
    pub id: usize,
    pub kind: TransformKind,
}

/// One task instance.
///
/// Under an odd number of transpose tags the target index names a column of
/// the stored grid instead of a row: that is what the transpose repair prompt
/// tells the solver.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub grid: Vec<Vec<u8>>,
    pub template_id: usize,
    pub target_row: usize,
    pub tau_tags: Vec<TauTag>,
    pub answer: u8,
}

impl Question {
    pub fn grid_dim(&self) -> usize {
        self.grid.len()
    }

    /// Whether the target index currently addresses a column.
    pub fn reads_columns(&self) -> bool {
        self.tau_tags
            .iter()
            .filter(|t| t.kind == TransformKind::Transpose)
            .count()
            % 2
            == 1
    }

    /// The digits the question asks about.
    pub fn target_line(&self) -> Vec<u8> {
        if self.reads_columns() {
            self.grid.iter().map(|row| row[self.target_row]).collect()
        } else {
            self.grid[self.target_row].clone()
        }
    }

    /// Answer recomputed from the grid and target index, ignoring `answer`.
    pub fn recompute_answer(&self) -> u8 {
        line_answer(&self.target_line())
    }

    pub fn is_consistent(&self) -> bool {
        self.recompute_answer() == self.answer
    }

    /// Renders the textual prompt for this question, including repair notes.
    pub fn render(&self, bank: &ParaphraseBank) -> String {
        let mut text = bank
            .template(self.template_id)
            .unwrap_or("{row}")
            .replace("{row}", &self.target_row.to_string());
        for tag in &self.tau_tags {
            match tag.kind {
                TransformKind::RowPermutation => text.push_str(
                    " [Note: the rows were reordered; the row index above refers to the new order.]",
                ),
                TransformKind::Transpose => text.push_str(
                    " [Note: the grid was transposed; read the index above as a column.]",
                ),
            }
        }
        text
    }
}

fn line_answer(line: &[u8]) -> u8 {
    (line.iter().map(|&d| d as u32).sum::<u32>() % NUM_DIGITS as u32) as u8
}

/// Draws a question from an explicit RNG. `generate_question` is the seeded
/// entry point; this form exists so callers can supply stub generators.
pub fn generate_question_with<R: RngCore + ?Sized>(
    rng: &mut R,
    grid_dim: usize,
) -> Result<Question, EnvError> {
    if grid_dim < 2 {
        return Err(EnvError::GridTooSmall(grid_dim));
    }
    let grid: Vec<Vec<u8>> = (0..grid_dim)
        .map(|_| {
            (0..grid_dim)
                .map(|_| rng.gen_range(0..NUM_DIGITS as u8))
                .collect()
        })
        .collect();
    let target_row = rng.gen_range(0..grid_dim);
    let answer = line_answer(&grid[target_row]);
    Ok(Question {
        grid,
        template_id: 0,
        target_row,
        tau_tags: Vec::new(),
        answer,
    })
}

pub fn generate_question(rng_seed: u64, grid_dim: usize) -> Result<Question, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    generate_question_with(&mut rng, grid_dim)
}

/// A structural transform ψ together with its repair tag τ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: String,
    pub kind: TransformKind,
    /// `permutation[r]` is the new position of row `r`.
    pub permutation: Option<Vec<usize>>,
    pub tag: TauTag,
}

impl TransformSpec {
    pub fn apply(&self, q: &Question) -> Result<Question, EnvError> {
        let dim = q.grid_dim();
        let mut out = q.clone();
        match self.kind {
            TransformKind::RowPermutation => {
                let perm = self.permutation.as_deref().unwrap_or(&[]);
                if perm.len() != dim {
                    return Err(EnvError::DimensionMismatch {
                        name: self.name.clone(),
                        expected: perm.len(),
                        actual: dim,
                    });
                }
                for (r, row) in q.grid.iter().enumerate() {
                    out.grid[perm[r]] = row.clone();
                }
                // Reordering rows moves a target row but only shuffles the
                // entries of a target column.
                if !q.reads_columns() {
                    out.target_row = perm[q.target_row];
                }
            }
            TransformKind::Transpose => {
                for (r, row) in out.grid.iter_mut().enumerate() {
                    for (c, cell) in row.iter_mut().enumerate() {
                        *cell = q.grid[c][r];
                    }
                }
            }
        }
        out.tau_tags.push(self.tag);
        Ok(out)
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.permutation {
            Some(p) => {
                let map: Vec<String> = p
                    .iter()
                    .enumerate()
                    .map(|(r, t)| format!("{r}->{t}"))
                    .collect();
                write!(f, "[{}] {} ({})", self.tag.id, self.name, map.join(", "))
            }
            None => write!(f, "[{}] {}", self.tag.id, self.name),
        }
    }
}

/// The compiled-in set of answer-preserving structural transforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRegistry {
    grid_dim: usize,
    specs: Vec<TransformSpec>,
}

impl TransformRegistry {
    /// Cyclic row shifts, row reversal (when distinct from every shift) and
    /// transpose for a `grid_dim × grid_dim` grid.
    pub fn standard(grid_dim: usize) -> Result<Self, EnvError> {
        if grid_dim < 2 {
            return Err(EnvError::GridTooSmall(grid_dim));
        }
        let mut perms: Vec<(String, Vec<usize>)> = (1..grid_dim)
            .map(|k| {
                (
                    format!("row_shift_{k}"),
                    (0..grid_dim).map(|r| (r + k) % grid_dim).collect(),
                )
            })
            .collect();
        let reversal: Vec<usize> = (0..grid_dim).rev().collect();
        if !perms.iter().any(|(_, p)| *p == reversal) {
            perms.push(("row_reverse".to_string(), reversal));
        }
        let specs = perms
            .into_iter()
            .map(|(name, perm)| (name, TransformKind::RowPermutation, Some(perm)))
            .chain(std::iter::once((
                "transpose".to_string(),
                TransformKind::Transpose,
                None,
            )))
            .enumerate()
            .map(|(id, (name, kind, permutation))| TransformSpec {
                name,
                kind,
                permutation,
                tag: TauTag { id, kind },
            })
            .collect();
        Ok(Self { grid_dim, specs })
    }

    /// A registry with no transforms; online expansion then only accepts p = 0.
    pub fn empty(grid_dim: usize) -> Self {
        Self {
            grid_dim,
            specs: Vec::new(),
        }
    }

    pub fn grid_dim(&self) -> usize {
        self.grid_dim
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    pub fn get(&self, id: usize) -> Option<&TransformSpec> {
        self.specs.get(id)
    }
}

/// Hand-written paraphrases of the GridSum prompt, one per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseBank {
    templates: Vec<String>,
}

impl ParaphraseBank {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PARAPHRASES).expect("built-in paraphrase bank is well formed")
    }

    /// Parses one template per non-blank line; each must mention `{row}`.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut templates = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !line.contains("{row}") {
                return Err(EnvError::TemplateMissingPlaceholder { line: idx + 1 });
            }
            templates.push(line.to_string());
        }
        if templates.is_empty() {
            return Err(EnvError::EmptyBank);
        }
        Ok(Self { templates })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, id: usize) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }
}

/// Which rewrites produced a variant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantProvenance {
    pub template_id: usize,
    pub transform: Option<String>,
    pub tag: Option<TauTag>,
}

/// The `m` semantically consistent variants of one seed question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSet {
    pub seed_id: u64,
    pub variants: Vec<Question>,
    pub provenance: Vec<VariantProvenance>,
}

impl VariantSet {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    /// The answer shared by every variant.
    pub fn answer(&self) -> u8 {
        self.variants[0].answer
    }
}

/// Task environment: grid size, paraphrase bank and transform registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSumEnv {
    grid_dim: usize,
    bank: ParaphraseBank,
    registry: TransformRegistry,
}

impl GridSumEnv {
    pub fn new(grid_dim: usize) -> Result<Self, EnvError> {
        Ok(Self {
            grid_dim,
            bank: ParaphraseBank::builtin(),
            registry: TransformRegistry::standard(grid_dim)?,
        })
    }

    pub fn with_parts(
        grid_dim: usize,
        bank: ParaphraseBank,
        registry: TransformRegistry,
    ) -> Result<Self, EnvError> {
        if grid_dim < 2 {
            return Err(EnvError::GridTooSmall(grid_dim));
        }
        if registry.grid_dim() != grid_dim {
            return Err(EnvError::DimensionMismatch {
                name: "registry".into(),
                expected: registry.grid_dim(),
                actual: grid_dim,
            });
        }
        Ok(Self {
            grid_dim,
            bank,
            registry,
        })
    }

    pub fn grid_dim(&self) -> usize {
        self.grid_dim
    }

    pub fn bank(&self) -> &ParaphraseBank {
        &self.bank
    }

    pub fn registry(&self) -> &TransformRegistry {
        &self.registry
    }

    pub fn generate(&self, rng_seed: u64) -> Result<Question, EnvError> {
        generate_question(rng_seed, self.grid_dim)
    }

    /// Offline textual expansion: variant `j` uses template `(seed + j) mod B`,
    /// so variant 0 keeps the seed's surface form.
    pub fn expand_offline(
        &self,
        seed_id: u64,
        q: &Question,
        m: usize,
    ) -> Result<VariantSet, EnvError> {
        if m == 0 {
            return Err(EnvError::ZeroVariants);
        }
        let bank_size = self.bank.len();
        if m > bank_size {
            return Err(EnvError::NotEnoughTemplates {
                requested: m,
                available: bank_size,
            });
        }
        let (variants, provenance) = (0..m)
            .map(|j| {
                let template_id = (q.template_id + j) % bank_size;
                let variant = Question {
                    template_id,
                    ..q.clone()
                };
                let prov = VariantProvenance {
                    template_id,
                    transform: None,
                    tag: None,
                };
                (variant, prov)
            })
            .unzip();
        Ok(VariantSet {
            seed_id,
            variants,
            provenance,
        })
    }

    /// Online structural expansion: each variant independently receives one
    /// uniformly chosen registry transform with probability `p`.
    pub fn expand_online(
        &self,
        vs: &VariantSet,
        p: f64,
        rng_seed: u64,
    ) -> Result<VariantSet, EnvError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(EnvError::InvalidProbability(p));
        }
        if p > 0.0 && self.registry.is_empty() {
            return Err(EnvError::EmptyRegistry(p));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut out = vs.clone();
        for (variant, prov) in out.variants.iter_mut().zip(out.provenance.iter_mut()) {
            if !rng.gen_bool(p) {
                continue;
            }
            let spec = &self.registry.specs[rng.gen_range(0..self.registry.len())];
            *variant = spec.apply(variant)?;
            prov.transform = Some(spec.name.clone());
            prov.tag = Some(spec.tag);
        }
        Ok(out)
    }
}
