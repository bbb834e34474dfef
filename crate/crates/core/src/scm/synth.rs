use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::types::{CausalStrength, Dialogue, ScmError, SkeletonTag, Utterance};
use crate::numerics::{unit_lower_inverse, Matrix};
use crate::rng::{derive_seed, SplitMix64};

/// Structure templates are sampled from a fixed seed so that every data
/// seed reuses the same utterance counts, emotion flags and pair labels.
const TEMPLATE_SEED: u64 = 0x7E3A_11CE_5EED_0001;

/// Distribution of dialogue structures; a declared stand-in for
/// corpus-derived structures, which are not redistributable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub emotion_prob: f64,
    /// Labeled cause pairs per emotional utterance (1..=max_pairs).
    pub max_pairs: usize,
    pub template_seed: u64,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self { min_len: 4, max_len: 12, emotion_prob: 0.35, max_pairs: 2, template_seed: TEMPLATE_SEED }
    }
}

/// Recipe for the synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub emotion_mean: f64,
    pub non_emotion_mean: f64,
    pub exo_sd: f64,
    pub cause_weight: (f64, f64),
    pub non_cause_weight: (f64, f64),
    pub obs_noise: (f64, f64),
    pub train_size: usize,
    pub eval_size: usize,
    pub test_size: usize,
    pub templates: TemplateSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 50,
            emotion_mean: 1.0,
            non_emotion_mean: -1.0,
            exo_sd: 1.0,
            cause_weight: (0.7, 1.0),
            non_cause_weight: (0.0, 0.3),
            obs_noise: (-0.25, 0.25),
            train_size: 833,
            eval_size: 47,
            test_size: 225,
            templates: TemplateSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ScmError> {
        let ordered =
            |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if self.dim == 0 {
            return Err(ScmError::BadSpec("dim must be positive".into()));
        }
        if !ordered(self.cause_weight) || !ordered(self.non_cause_weight) || !ordered(self.obs_noise)
        {
            return Err(ScmError::BadSpec("weight/noise ranges must be well ordered".into()));
        }
        if self.train_size == 0 || self.eval_size == 0 || self.test_size == 0 {
            return Err(ScmError::BadSpec("split sizes must be positive".into()));
        }
        if self.templates.min_len < 1 || self.templates.min_len > self.templates.max_len {
            return Err(ScmError::BadSpec("template length range must be well ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.templates.emotion_prob) {
            return Err(ScmError::BadSpec("emotion_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Structural skeleton of one synthetic dialogue: who speaks, which
/// utterances are emotional, and which (effect, cause) pairs are labeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureTemplate {
    pub speakers: Vec<u32>,
    pub emotion_flags: Vec<bool>,
    pub pairs: BTreeSet<(usize, usize)>,
}

impl StructureTemplate {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        for &(effect, cause) in &self.pairs {
            if cause >= effect || effect >= self.len() {
                return Err(ScmError::BadTemplatePair { effect, cause });
            }
        }
        Ok(())
    }
}

/// Draws one structure template: length uniform over the configured
/// range, each utterance emotional with `emotion_prob`, each emotional
/// utterance with at least one predecessor labeled with 1..=max_pairs
/// cause pairs among its predecessors. Speakers alternate.
pub fn sample_template(spec: &TemplateSpec, rng: &mut SplitMix64) -> StructureTemplate {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let speakers: Vec<u32> = (0..len).map(|i| 1 + (i as u32) % 2).collect();
    let emotion_flags: Vec<bool> = (0..len).map(|_| rng.next_bool(spec.emotion_prob)).collect();
    let mut pairs = BTreeSet::new();
    for (i, &emotional) in emotion_flags.iter().enumerate() {
        if !emotional || i == 0 {
            continue;
        }
        let want = (1 + rng.below(spec.max_pairs)).min(i);
        let mut candidates: Vec<usize> = (0..i).collect();
        rng.shuffle(&mut candidates);
        for &cause in candidates.iter().take(want) {
            pairs.insert((i, cause));
        }
    }
    StructureTemplate { speakers, emotion_flags, pairs }
}

/// Ancestral sampling: `H = (I - A)^{-1} E`, so that `H = A H + E` holds
/// exactly.
pub fn forward_generate(a: &CausalStrength, e: &Matrix) -> Result<Matrix, ScmError> {
    if a.n() != e.rows() {
        return Err(ScmError::ForwardShape { n: a.n(), rows: e.rows() });
    }
    let inv = unit_lower_inverse(a.weights()).expect("CausalStrength invariant");
    Ok(inv.matmul(e))
}

/// Generates one dialogue from a structure template.
///
/// Draw order (fixed for reproducibility): exogenous rows, then pair
/// weights in (effect, cause) row order, then per-utterance observation
/// noise. Labeled pairs draw weights from `cause_weight`, every other
/// preceding pair from `non_cause_weight`; the ground-truth exogenous
/// matrix is stored in the dialogue.
pub fn generate_synthetic_dialogue(
    id: String,
    template: &StructureTemplate,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Dialogue, ScmError> {
    template.validate()?;
    spec.validate()?;
    let n = template.len();
    let mut rng = SplitMix64::new(seed);

    let mut exo = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        let mean = if template.emotion_flags[i] { spec.emotion_mean } else { spec.non_emotion_mean };
        for d in 0..spec.dim {
            exo.set(i, d, rng.normal(mean, spec.exo_sd));
        }
    }

    let mut strengths = CausalStrength::zeros(n);
    for effect in 1..n {
        for cause in 0..effect {
            let range = if template.pairs.contains(&(effect, cause)) {
                spec.cause_weight
            } else {
                spec.non_cause_weight
            };
            strengths.set(effect, cause, rng.uniform(range.0, range.1))?;
        }
    }

    let mut values = forward_generate(&strengths, &exo)?;
    for i in 0..n {
        let noise = rng.uniform(spec.obs_noise.0, spec.obs_noise.1);
        for v in values.row_mut(i) {
            *v += noise;
        }
    }

    let utterances: Vec<Utterance> = (0..n)
        .map(|i| Utterance {
            speaker: template.speakers[i],
            emotion: Some(template.emotion_flags[i]),
            text: None,
        })
        .collect();

    Dialogue::new(id, utterances, values, template.pairs.clone(), Some(exo), None)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Vec<Dialogue>,
    pub eval: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl SyntheticDataset {
    pub fn all(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.eval).chain(&self.test)
    }
}

/// Generates the train/eval/test splits. Structure templates come from
/// the spec's template seed, so different data seeds vary the values but
/// not the structures.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<SyntheticDataset, ScmError> {
    spec.validate()?;
    let mut template_rng = SplitMix64::new(spec.templates.template_seed);
    let mut split = |name: &str, size: usize| -> Result<Vec<Dialogue>, ScmError> {
        (0..size)
            .map(|i| {
                let template = sample_template(&spec.templates, &mut template_rng);
                let dialogue_seed = derive_seed(seed, name, i as u64);
                generate_synthetic_dialogue(format!("{name}-{i:04}"), &template, spec, dialogue_seed)
            })
            .collect()
    };
    Ok(SyntheticDataset {
        train: split("train", spec.train_size)?,
        eval: split("eval", spec.eval_size)?,
        test: split("test", spec.test_size)?,
    })
}

/// Recipe for skeleton-tagged numeric dialogues in the simulated-data
/// shape: four utterances from two alternating speakers, cause pairs
/// equal to the skeleton edges, and an optional per-speaker shared
/// exogenous component acting as a confounder between same-speaker turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonSynthSpec {
    pub dim: usize,
    pub exo_sd: f64,
    pub cause_weight: (f64, f64),
    pub non_cause_weight: (f64, f64),
    pub obs_noise: (f64, f64),
    /// Scale of the shared per-speaker component added to the exogenous
    /// rows of that speaker's turns.
    pub speaker_confound: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub test_size: usize,
}

impl Default for SkeletonSynthSpec {
    fn default() -> Self {
        Self {
            dim: 50,
            exo_sd: 1.0,
            cause_weight: (0.7, 1.0),
            non_cause_weight: (0.0, 0.3),
            obs_noise: (-0.25, 0.25),
            speaker_confound: 0.8,
            train_size: 400,
            eval_size: 50,
            test_size: 200,
        }
    }
}

pub(crate) fn skeleton_cause_pairs(tag: SkeletonTag) -> BTreeSet<(usize, usize)> {
    let mut pairs: BTreeSet<(usize, usize)> = [(1, 0), (2, 1), (3, 2)].into();
    match tag {
        SkeletonTag::I => {}
        SkeletonTag::II => {
            pairs.insert((2, 0));
        }
        SkeletonTag::III => {
            pairs.insert((3, 1));
        }
        SkeletonTag::IV => {
            pairs.insert((3, 0));
        }
    }
    pairs
}

fn generate_skeleton_dialogue(
    id: String,
    tag: SkeletonTag,
    spec: &SkeletonSynthSpec,
    seed: u64,
) -> Result<Dialogue, ScmError> {
    let n = 4;
    let mut rng = SplitMix64::new(seed);
    let pairs = skeleton_cause_pairs(tag);

    let mut persona = [Matrix::zeros(1, spec.dim), Matrix::zeros(1, spec.dim)];
    for p in persona.iter_mut() {
        for d in 0..spec.dim {
            p.set(0, d, rng.normal(0.0, 1.0));
        }
    }
    let mut exo = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        let p = &persona[i % 2];
        for d in 0..spec.dim {
            exo.set(i, d, rng.normal(0.0, spec.exo_sd) + spec.speaker_confound * p.get(0, d));
        }
    }

    let mut strengths = CausalStrength::zeros(n);
    for effect in 1..n {
        for cause in 0..effect {
            let range = if pairs.contains(&(effect, cause)) {
                spec.cause_weight
            } else {
                spec.non_cause_weight
            };
            strengths.set(effect, cause, rng.uniform(range.0, range.1))?;
        }
    }

    let mut values = forward_generate(&strengths, &exo)?;
    for i in 0..n {
        let noise = rng.uniform(spec.obs_noise.0, spec.obs_noise.1);
        for v in values.row_mut(i) {
            *v += noise;
        }
    }

    let utterances: Vec<Utterance> = (0..n)
        .map(|i| Utterance { speaker: 1 + (i as u32) % 2, emotion: None, text: None })
        .collect();
    Dialogue::new(id, utterances, values, pairs, None, Some(tag))
}

/// Skeleton-tagged splits with tags cycling I..IV.
pub fn generate_skeleton_dataset(
    spec: &SkeletonSynthSpec,
    seed: u64,
) -> Result<SyntheticDataset, ScmError> {
    let mut counter = 0usize;
    let mut split = |name: &str, size: usize| -> Result<Vec<Dialogue>, ScmError> {
        (0..size)
            .map(|i| {
                let tag = SkeletonTag::ALL[counter % 4];
                counter += 1;
                let dialogue_seed = derive_seed(seed, "skeleton", counter as u64);
                generate_skeleton_dialogue(format!("{name}-{i:04}"), tag, spec, dialogue_seed)
            })
            .collect()
    };
    Ok(SyntheticDataset {
        train: split("train", spec.train_size)?,
        eval: split("eval", spec.eval_size)?,
        test: split("test", spec.test_size)?,
    })
}
