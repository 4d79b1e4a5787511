//! Synthetic text-task families for meta-training.
//!
//! Eight families, each a pure function from an input string to a label,
//! with a sampler over a closed word pool. Pools overlap on purpose: the
//! same input (say "red") maps to different labels under copy, keyword
//! classification, and color-to-shape lookup, so a model can only solve an
//! episode by reading the support pairs, not by memorizing inputs.
//!
//! Two families (reversal and antonym lookup) are held out of meta-training
//! entirely and exist to probe task-level generalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("family {family} cannot produce {need} distinct inputs")]
    DistinctInputsExhausted { family: &'static str, need: usize },
}

pub const NEUTRAL_WORDS: [&str; 10] = [
    "cat", "dog", "sun", "moon", "tree", "rock", "bird", "fish", "star", "leaf",
];
pub const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPE_WORDS: [&str; 3] = ["circle", "square", "triangle"];
pub const DIGIT_WORDS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
pub const ANTONYM_PAIRS: [(&str, &str); 8] = [
    ("hot", "cold"),
    ("big", "small"),
    ("up", "down"),
    ("fast", "slow"),
    ("old", "new"),
    ("happy", "sad"),
    ("light", "dark"),
    ("left", "right"),
];
const CATEGORY_WORDS: [&str; 4] = ["color", "shape", "number", "word"];
const PARITY_WORDS: [&str; 2] = ["odd", "even"];

/// Fixed color-to-shape lookup (cycling through the three shapes).
fn color_to_shape(color: &str) -> Option<&'static str> {
    COLOR_WORDS
        .iter()
        .position(|&c| c == color)
        .map(|i| SHAPE_WORDS[i % SHAPE_WORDS.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TaskId {
    Copy,
    Reverse,
    LastWord,
    ModSum,
    Parity,
    Antonym,
    ColorShape,
    KeywordClass,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::Copy => "copy",
            TaskId::Reverse => "reverse",
            TaskId::LastWord => "lastword",
            TaskId::ModSum => "modsum",
            TaskId::Parity => "parity",
            TaskId::Antonym => "antonym",
            TaskId::ColorShape => "colorshape",
            TaskId::KeywordClass => "keywordclass",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextTaskFamily {
    pub id: TaskId,
    pub instruction: &'static str,
    pub held_out: bool,
}

impl TextTaskFamily {
    /// The label for an input, as a pure function. `None` when the input is
    /// outside the family's domain.
    pub fn apply(&self, x: &str) -> Option<String> {
        let words: Vec<&str> = x.split_whitespace().collect();
        if words.is_empty() {
            return None;
        }
        match self.id {
            TaskId::Copy => Some(x.trim().to_string()),
            TaskId::Reverse => {
                let mut rev = words.clone();
                rev.reverse();
                Some(rev.join(" "))
            }
            TaskId::LastWord => Some((*words.last().unwrap()).to_string()),
            TaskId::ModSum => {
                let mut sum = 0u32;
                for w in &words {
                    sum += w.parse::<u32>().ok().filter(|&d| d <= 9)?;
                }
                Some(DIGIT_WORDS[(sum % 5) as usize].to_string())
            }
            TaskId::Parity => Some(PARITY_WORDS[1 - words.len() % 2].to_string()),
            TaskId::Antonym => {
                if words.len() != 1 {
                    return None;
                }
                ANTONYM_PAIRS.iter().find_map(|&(a, b)| {
                    if a == words[0] {
                        Some(b.to_string())
                    } else if b == words[0] {
                        Some(a.to_string())
                    } else {
                        None
                    }
                })
            }
            TaskId::ColorShape => {
                if words.len() != 1 {
                    return None;
                }
                color_to_shape(words[0]).map(|s| s.to_string())
            }
            TaskId::KeywordClass => {
                if words.len() != 1 {
                    return None;
                }
                let w = words[0];
                if COLOR_WORDS.contains(&w) {
                    Some("color".into())
                } else if SHAPE_WORDS.contains(&w) {
                    Some("shape".into())
                } else if DIGIT_WORDS.contains(&w) {
                    Some("number".into())
                } else if NEUTRAL_WORDS.contains(&w) {
                    Some("word".into())
                } else {
                    None
                }
            }
        }
    }

    /// Draw an input from the family's pool.
    pub fn sample_input(&self, rng: &mut ChaCha8Rng) -> String {
        fn pick(rng: &mut ChaCha8Rng, pool: &[&'static str]) -> &'static str {
            pool[rng.gen_range(0..pool.len())]
        }
        match self.id {
            TaskId::Copy => {
                // Deliberately overlaps keyword class, antonym, and parity
                // inputs so copying is only identifiable from supports.
                let pool: Vec<&str> = NEUTRAL_WORDS
                    .iter()
                    .chain(COLOR_WORDS.iter())
                    .chain(DIGIT_WORDS.iter())
                    .chain(ANTONYM_PAIRS.iter().map(|(a, _)| a))
                    .copied()
                    .collect();
                pick(rng, &pool).to_string()
            }
            TaskId::Reverse => {
                let len = rng.gen_range(2..=3);
                let mut pool: Vec<&str> = NEUTRAL_WORDS.to_vec();
                let mut out = Vec::with_capacity(len);
                for _ in 0..len {
                    let i = rng.gen_range(0..pool.len());
                    out.push(pool.swap_remove(i));
                }
                out.join(" ")
            }
            TaskId::LastWord => {
                let len = rng.gen_range(2..=4);
                let pool: Vec<&str> = NEUTRAL_WORDS
                    .iter()
                    .chain(COLOR_WORDS.iter())
                    .copied()
                    .collect();
                (0..len)
                    .map(|_| pick(rng, &pool))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
            TaskId::ModSum => {
                let len = rng.gen_range(2..=3);
                (0..len)
                    .map(|_| pick(rng, &DIGIT_WORDS))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
            TaskId::Parity => {
                let w = pick(rng, &NEUTRAL_WORDS);
                let n = rng.gen_range(1..=4);
                vec![w; n].join(" ")
            }
            TaskId::Antonym => {
                let (a, b) = ANTONYM_PAIRS[rng.gen_range(0..ANTONYM_PAIRS.len())];
                if rng.gen_bool(0.5) {
                    a.to_string()
                } else {
                    b.to_string()
                }
            }
            TaskId::ColorShape => pick(rng, &COLOR_WORDS).to_string(),
            TaskId::KeywordClass => {
                let pool: Vec<&str> = COLOR_WORDS
                    .iter()
                    .chain(SHAPE_WORDS.iter())
                    .chain(DIGIT_WORDS.iter())
                    .chain(NEUTRAL_WORDS.iter())
                    .copied()
                    .collect();
                pick(rng, &pool).to_string()
            }
        }
    }

    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (String, String) {
        let x = self.sample_input(rng);
        let y = self.apply(&x).expect("sampled input is in domain");
        (x, y)
    }

    /// Every label the family can emit. Enumerable because the input pools
    /// are closed.
    pub fn answer_space(&self) -> Vec<String> {
        let mut answers: Vec<String> = match self.id {
            TaskId::Copy => {
                let pool: Vec<&str> = NEUTRAL_WORDS
                    .iter()
                    .chain(COLOR_WORDS.iter())
                    .chain(DIGIT_WORDS.iter())
                    .chain(ANTONYM_PAIRS.iter().map(|(a, _)| a))
                    .copied()
                    .collect();
                pool.iter().map(|s| s.to_string()).collect()
            }
            TaskId::Reverse => {
                // All ordered 2- and 3-word sequences of distinct neutrals.
                let n = NEUTRAL_WORDS.len();
                let mut out = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        out.push(format!("{} {}", NEUTRAL_WORDS[i], NEUTRAL_WORDS[j]));
                        for k in 0..n {
                            if k == i || k == j {
                                continue;
                            }
                            out.push(format!(
                                "{} {} {}",
                                NEUTRAL_WORDS[i], NEUTRAL_WORDS[j], NEUTRAL_WORDS[k]
                            ));
                        }
                    }
                }
                out
            }
            TaskId::LastWord => NEUTRAL_WORDS
                .iter()
                .chain(COLOR_WORDS.iter())
                .map(|s| s.to_string())
                .collect(),
            TaskId::ModSum => DIGIT_WORDS[..5].iter().map(|s| s.to_string()).collect(),
            TaskId::Parity => PARITY_WORDS.iter().map(|s| s.to_string()).collect(),
            TaskId::Antonym => ANTONYM_PAIRS
                .iter()
                .flat_map(|&(a, b)| [a.to_string(), b.to_string()])
                .collect(),
            TaskId::ColorShape => SHAPE_WORDS.iter().map(|s| s.to_string()).collect(),
            TaskId::KeywordClass => CATEGORY_WORDS.iter().map(|s| s.to_string()).collect(),
        };
        answers.sort();
        answers.dedup();
        answers
    }

    /// Upper bound on distinct inputs, for episode feasibility checks.
    fn input_space_size(&self) -> usize {
        match self.id {
            TaskId::Copy => NEUTRAL_WORDS.len() + COLOR_WORDS.len() + DIGIT_WORDS.len() + 8,
            TaskId::Reverse => 10 * 9 + 10 * 9 * 8,
            TaskId::LastWord => usize::MAX,
            TaskId::ModSum => 100 + 1000,
            TaskId::Parity => NEUTRAL_WORDS.len() * 4,
            TaskId::Antonym => ANTONYM_PAIRS.len() * 2,
            TaskId::ColorShape => COLOR_WORDS.len(),
            TaskId::KeywordClass => {
                COLOR_WORDS.len() + SHAPE_WORDS.len() + DIGIT_WORDS.len() + NEUTRAL_WORDS.len()
            }
        }
    }
}

/// The eight families: six meta-training, two held out.
pub fn builtin_task_suite() -> Vec<TextTaskFamily> {
    vec![
        TextTaskFamily {
            id: TaskId::Copy,
            instruction: "repeat the word exactly .",
            held_out: false,
        },
        TextTaskFamily {
            id: TaskId::Reverse,
            instruction: "say the words in reverse order .",
            held_out: true,
        },
        TextTaskFamily {
            id: TaskId::LastWord,
            instruction: "say the last word .",
            held_out: false,
        },
        TextTaskFamily {
            id: TaskId::ModSum,
            instruction: "add the digits modulo five .",
            held_out: false,
        },
        TextTaskFamily {
            id: TaskId::Parity,
            instruction: "say odd or even for the word count .",
            held_out: false,
        },
        TextTaskFamily {
            id: TaskId::Antonym,
            instruction: "say the opposite word .",
            held_out: true,
        },
        TextTaskFamily {
            id: TaskId::ColorShape,
            instruction: "name the shape for the color .",
            held_out: false,
        },
        TextTaskFamily {
            id: TaskId::KeywordClass,
            instruction: "name the category of the word .",
            held_out: false,
        },
    ]
}

/// k support pairs plus one query from a single family. The query input is
/// distinct from every support input.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskId,
    pub supports: Vec<(String, String)>,
    pub query: (String, String),
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }
}

pub fn sample_episode(
    family: &TextTaskFamily,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, TaskError> {
    if family.input_space_size() < k + 1 {
        return Err(TaskError::DistinctInputsExhausted {
            family: family.id.name(),
            need: k + 1,
        });
    }
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(k + 1);
    // Rejection sampling over a closed pool; the budget is generous relative
    // to every family's input space.
    let mut attempts = 0;
    while pairs.len() < k + 1 {
        attempts += 1;
        if attempts > 200 * (k + 1) {
            return Err(TaskError::DistinctInputsExhausted {
                family: family.id.name(),
                need: k + 1,
            });
        }
        let (x, y) = family.sample_pair(rng);
        if pairs.iter().any(|(px, _)| *px == x) {
            continue;
        }
        pairs.push((x, y));
    }
    let query = pairs.pop().expect("k+1 pairs");
    Ok(Episode {
        task: family.id,
        supports: pairs,
        query,
    })
}

/// Every word a task family can put in an input, label, or instruction.
pub fn vocab_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(NEUTRAL_WORDS);
    words.extend(COLOR_WORDS);
    words.extend(SHAPE_WORDS);
    words.extend(DIGIT_WORDS);
    for (a, b) in ANTONYM_PAIRS {
        words.push(a);
        words.push(b);
    }
    words.extend(CATEGORY_WORDS);
    words.extend(PARITY_WORDS);
    for family in builtin_task_suite() {
        words.extend(family.instruction.split_whitespace());
    }
    words
}
