//! Deterministic synthetic task for the two-modality decoder.
//!
//! Each sample is an indexed-copy problem: the first question token is a
//! key that selects one of the vision tokens, and the correct answer is
//! that vision token. The reference answers, however, carry controlled
//! label noise: with probability `noise_rate` a sample is "noised" — a trap
//! token is planted in the question and the references agree with the rule
//! answer only k ∈ {0, 1, 2} times out of 10 (weights 0.6/0.2/0.2), giving
//! soft-accuracy targets of 0, 1/3, or 2/3. A model that answers the rule
//! is therefore wrong exactly on noised samples, and the trap token makes
//! that wrongness visible to feature-based confidence estimators while
//! leaving the token-probability confidence largely blind to it.
//!
//! Out-of-distribution variants shift the sampling ranges: OOD_A draws its
//! question distractors from an unseen id range (linguistic shift), OOD_B
//! additionally draws vision tokens from a half-shifted range (multimodal
//! shift). Both raise the noise rate.

use crate::error::{Error, Result};
use crate::mbq::{CalibBatch, CalibSequence, Modality};
use crate::metrics::{soft_accuracy, Source, Split};
use crate::model::{MMInput, EOS_TOKEN};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

fn default_n_vision() -> usize {
    6
}
fn default_n_question() -> usize {
    3
}

/// Generator configuration. The JSON form only requires
/// `{seed, n_samples, noise_rate, vocab_size}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub noise_rate: f64,
    pub vocab_size: usize,
    #[serde(default = "default_n_vision")]
    pub n_vision: usize,
    #[serde(default = "default_n_question")]
    pub n_question: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            n_samples: 2000,
            noise_rate: 0.12,
            vocab_size: 256,
            n_vision: default_n_vision(),
            n_question: default_n_question(),
        }
    }
}

/// Trap token planted into noised questions.
pub const TRAP_TOKEN: u32 = 1;

/// Distractor question tokens are drawn from a pool this small so pooled
/// question features form a few tight clusters; the trap token then stands
/// out as its own cluster, which is what makes feature-based confidence
/// estimation able to beat token probabilities on noised samples.
pub const DISTRACTOR_POOL: u32 = 8;

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::invalid("n_samples must be at least 10"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid("noise_rate must lie in [0, 1]"));
        }
        if self.n_vision == 0 || self.n_question < 2 {
            return Err(Error::invalid(
                "need n_vision >= 1 and n_question >= 2 (one key plus distractors)",
            ));
        }
        let chunk = (self.vocab_size as u32).saturating_sub(2 + self.n_vision as u32) / 4;
        if chunk < DISTRACTOR_POOL.max(8) {
            return Err(Error::invalid(format!(
                "vocab_size {} too small for the token layout",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Prompt length of every sample.
    pub fn prompt_len(&self) -> usize {
        self.n_vision + self.n_question
    }

    fn ranges(&self) -> TokenRanges {
        let base = (2 + self.n_vision) as u32;
        let chunk = (self.vocab_size as u32 - base) / 4;
        TokenRanges {
            key_base: 2,
            vision_id: (base, base + chunk),
            vision_ood: (base + chunk / 2, base + chunk + chunk / 2),
            distractor_id: (base + 2 * chunk, base + 3 * chunk),
            distractor_ood: (base + 3 * chunk, self.vocab_size as u32),
        }
    }
}

struct TokenRanges {
    key_base: u32,
    vision_id: (u32, u32),
    vision_ood: (u32, u32),
    distractor_id: (u32, u32),
    distractor_ood: (u32, u32),
}

/// One generated sample: the prompt, the supervision targets, and the
/// (possibly noised) reference answers used for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub vision: Vec<u32>,
    pub question: Vec<u32>,
    /// Training targets for the generated span: rule answer, then EOS.
    pub answer_tokens: Vec<u32>,
    pub refs: Vec<String>,
    pub split: Split,
    pub source: Source,
}

impl TaskSample {
    pub fn input(&self) -> MMInput {
        MMInput {
            vision_tokens: self.vision.clone(),
            question_tokens: self.question.clone(),
        }
    }
}

/// The generating rule: the first question token is a key selecting the
/// answered vision token. Errors if the key is out of range.
pub fn rule_answer(vision: &[u32], question: &[u32]) -> Result<u32> {
    let key = *question
        .first()
        .ok_or_else(|| Error::invalid("empty question"))?;
    let idx = key
        .checked_sub(2)
        .ok_or_else(|| Error::invalid(format!("question key {key} below key range")))?
        as usize;
    vision
        .get(idx)
        .copied()
        .ok_or_else(|| Error::invalid(format!("question key {key} beyond vision span")))
}

/// Token ids rendered as an answer string; EOS and anything after it is
/// dropped.
pub fn render_answer(tokens: &[u32]) -> String {
    tokens
        .iter()
        .take_while(|&&t| t != EOS_TOKEN)
        .map(|t| format!("tok{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A generated dataset with disjoint splits and the two OOD variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub config: TaskConfig,
    pub train: Vec<TaskSample>,
    pub dev: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
    pub ood_a: Vec<TaskSample>,
    pub ood_b: Vec<TaskSample>,
}

impl Task {
    pub fn split(&self, name: &str) -> Option<&[TaskSample]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            "ood_a" => Some(&self.ood_a),
            "ood_b" => Some(&self.ood_b),
            _ => None,
        }
    }

    pub const SPLIT_NAMES: [&'static str; 5] = ["train", "dev", "test", "ood_a", "ood_b"];

    /// Calibration batch built from the first `max` training samples:
    /// vision tokens tagged `v`, question and answer tokens tagged `t`.
    pub fn calibration_batch(&self, max: usize) -> Result<CalibBatch> {
        let samples = self
            .train
            .iter()
            .take(max)
            .map(|s| {
                let mut tokens = s.vision.clone();
                tokens.extend_from_slice(&s.question);
                tokens.extend_from_slice(&s.answer_tokens);
                let mut modality = vec![Modality::Vision; s.vision.len()];
                modality.extend(vec![
                    Modality::Text;
                    s.question.len() + s.answer_tokens.len()
                ]);
                CalibSequence { tokens, modality }
            })
            .collect();
        CalibBatch::new(samples)
    }
}

fn draw_in(rng: &mut Rng, range: (u32, u32)) -> u32 {
    range.0 + rng.below((range.1 - range.0) as usize) as u32
}

fn gen_sample(
    cfg: &TaskConfig,
    ranges: &TokenRanges,
    rng: &mut Rng,
    id: String,
    split: Split,
    source: Source,
) -> TaskSample {
    let (vision_range, distractor_range, noise_rate) = match source {
        Source::Id => (ranges.vision_id, ranges.distractor_id, cfg.noise_rate),
        Source::OodA => (
            ranges.vision_id,
            ranges.distractor_ood,
            (cfg.noise_rate * 1.5).min(0.9),
        ),
        Source::OodB => (
            ranges.vision_ood,
            ranges.distractor_id,
            (cfg.noise_rate * 2.0).min(0.9),
        ),
    };

    let vision: Vec<u32> = (0..cfg.n_vision)
        .map(|_| draw_in(rng, vision_range))
        .collect();
    let key = ranges.key_base + rng.below(cfg.n_vision) as u32;
    let mut question = vec![key];
    let pool = (distractor_range.0, distractor_range.0 + DISTRACTOR_POOL);
    for _ in 1..cfg.n_question {
        question.push(draw_in(rng, pool));
    }

    let answer = rule_answer(&vision, &question).expect("key in range by construction");
    let noised = rng.chance(noise_rate);
    let k = if noised {
        let u = rng.next_f64();
        if u < 0.6 {
            0
        } else if u < 0.8 {
            1
        } else {
            2
        }
    } else {
        10
    };
    if noised {
        let last = question.len() - 1;
        question[last] = TRAP_TOKEN;
    }

    // Distractor reference: a different vision token when one exists,
    // otherwise the next id in the vision range.
    let wrong = vision
        .iter()
        .copied()
        .find(|&v| v != answer)
        .unwrap_or_else(|| {
            if answer + 1 < vision_range.1 {
                answer + 1
            } else {
                vision_range.0
            }
        });
    let mut refs = Vec::with_capacity(10);
    for _ in 0..k.min(10) {
        refs.push(format!("tok{answer}"));
    }
    while refs.len() < 10 {
        refs.push(format!("tok{wrong}"));
    }

    TaskSample {
        id,
        vision,
        question,
        answer_tokens: vec![answer, EOS_TOKEN],
        refs,
        split,
        source,
    }
}

/// Generates the full task deterministically from its config.
pub fn generate_task(cfg: &TaskConfig) -> Result<Task> {
    cfg.validate()?;
    let ranges = cfg.ranges();
    let mut rng = Rng::new(cfg.seed);

    let n_train = cfg.n_samples * 2 / 5;
    let n_dev = (cfg.n_samples - n_train) / 2;
    let n_test = cfg.n_samples - n_train - n_dev;

    let mut make = |count: usize, prefix: &str, split: Split, source: Source| {
        (0..count)
            .map(|i| {
                gen_sample(
                    cfg,
                    &ranges,
                    &mut rng,
                    format!("{prefix}-{i:05}"),
                    split,
                    source,
                )
            })
            .collect::<Vec<_>>()
    };

    let train = make(n_train, "train", Split::Train, Source::Id);
    let dev = make(n_dev, "dev", Split::Dev, Source::Id);
    let test = make(n_test, "test", Split::Test, Source::Id);
    let ood_a = make(n_test, "ood-a", Split::Test, Source::OodA);
    let ood_b = make(n_test, "ood-b", Split::Test, Source::OodB);

    Ok(Task {
        config: cfg.clone(),
        train,
        dev,
        test,
        ood_a,
        ood_b,
    })
}

/// Soft accuracy of the generating rule itself against a sample's refs —
/// the oracle decode used by generator checks.
pub fn oracle_soft_accuracy(sample: &TaskSample) -> Result<f64> {
    let answer = rule_answer(&sample.vision, &sample.question)?;
    soft_accuracy(&render_answer(&[answer]), &sample.refs)
}

/// Builds one decoder training item: the full sequence (prompt plus answer
/// span) and next-token targets supervising only the answer span. The
/// references carry the label noise; supervision always follows the rule.
pub fn training_item(sample: &TaskSample) -> (Vec<u32>, Vec<Option<u32>>) {
    let mut tokens = sample.vision.clone();
    tokens.extend_from_slice(&sample.question);
    let prompt_len = tokens.len();
    tokens.extend_from_slice(&sample.answer_tokens);
    let mut targets = vec![None; tokens.len()];
    for (i, &t) in sample.answer_tokens.iter().enumerate() {
        targets[prompt_len - 1 + i] = Some(t);
    }
    (tokens, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64, n: usize, noise: f64) -> TaskConfig {
        TaskConfig {
            seed,
            n_samples: n,
            noise_rate: noise,
            vocab_size: 128,
            n_vision: 4,
            n_question: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&cfg(42, 100, 0.2)).unwrap();
        let b = generate_task(&cfg(42, 100, 0.2)).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&cfg(43, 100, 0.2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_sum_and_ids_disjoint() {
        let task = generate_task(&cfg(1, 101, 0.1)).unwrap();
        assert_eq!(
            task.train.len() + task.dev.len() + task.test.len(),
            101
        );
        let mut ids: Vec<&str> = task
            .train
            .iter()
            .chain(&task.dev)
            .chain(&task.test)
            .chain(&task.ood_a)
            .chain(&task.ood_b)
            .map(|s| s.id.as_str())
            .collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total, "duplicate sample ids");
    }

    #[test]
    fn zero_noise_gives_oracle_accuracy_one() {
        let task = generate_task(&cfg(7, 200, 0.0)).unwrap();
        for split in Task::SPLIT_NAMES {
            for s in task.split(split).unwrap() {
                assert_eq!(oracle_soft_accuracy(s).unwrap(), 1.0, "{}", s.id);
            }
        }
    }

    #[test]
    fn wrong_fraction_matches_noise_rate_within_3_sigma() {
        let noise = 0.25;
        let n = 2000;
        let task = generate_task(&cfg(11, n, noise)).unwrap();
        let all: Vec<&TaskSample> = task
            .train
            .iter()
            .chain(&task.dev)
            .chain(&task.test)
            .collect();
        let wrong = all
            .iter()
            .filter(|s| oracle_soft_accuracy(s).unwrap() < 1.0)
            .count() as f64;
        let frac = wrong / all.len() as f64;
        let sigma = (noise * (1.0 - noise) / all.len() as f64).sqrt();
        assert!(
            (frac - noise).abs() <= 3.0 * sigma,
            "wrong fraction {frac} vs noise {noise} (3σ = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn noised_samples_carry_trap_and_partial_refs() {
        let task = generate_task(&cfg(13, 400, 0.3)).unwrap();
        let mut saw_partial = false;
        for s in &task.train {
            let acc = oracle_soft_accuracy(s).unwrap();
            let has_trap = s.question.contains(&TRAP_TOKEN);
            assert_eq!(acc < 1.0, has_trap, "{}: trap/noise mismatch", s.id);
            if acc > 0.0 && acc < 1.0 {
                saw_partial = true;
            }
        }
        assert!(saw_partial, "no partial-credit targets generated");
    }

    #[test]
    fn calibration_batch_is_well_formed() {
        let task = generate_task(&cfg(17, 500, 0.1)).unwrap();
        let batch = task.calibration_batch(128).unwrap();
        assert_eq!(batch.size(), 128);
        for seq in &batch.samples {
            assert_eq!(seq.tokens.len(), seq.modality.len());
            assert_eq!(
                seq.modality.iter().filter(|m| **m == Modality::Vision).count(),
                task.config.n_vision
            );
        }
    }

    #[test]
    fn render_answer_stops_at_eos() {
        assert_eq!(render_answer(&[57, EOS_TOKEN, 3]), "tok57");
        assert_eq!(render_answer(&[EOS_TOKEN]), "");
        assert_eq!(render_answer(&[5, 7]), "tok5 tok7");
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 5, 0.1).validate().is_err());
        assert!(cfg(0, 100, 1.5).validate().is_err());
        let mut c = cfg(0, 100, 0.1);
        c.vocab_size = 10;
        assert!(c.validate().is_err());
    }
}
