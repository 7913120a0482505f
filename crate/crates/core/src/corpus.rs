//! Task corpora: question/options/answer records, prompt formatting,
//! tokenization and a deterministic generator of synthetic tasks.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fingerprint::fingerprint_json;

// ── Tokenizer ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Byte,
    Char,
}

/// Byte-level (vocab 256) or char-level tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    mode: TokenizerMode,
    /// Ordered symbol table; empty in byte mode.
    symbols: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Self {
            mode: TokenizerMode::Byte,
            symbols: Vec::new(),
        }
    }

    /// Char-level tokenizer over the distinct characters of `text`, sorted.
    pub fn char_level(text: &str) -> Self {
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self {
            mode: TokenizerMode::Char,
            symbols,
        }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        match self.mode {
            TokenizerMode::Byte => 256,
            TokenizerMode::Char => self.symbols.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.mode {
            TokenizerMode::Byte => Ok(text.bytes().map(u32::from).collect()),
            TokenizerMode::Char => text
                .chars()
                .map(|c| {
                    self.symbols
                        .binary_search(&c)
                        .map(|i| i as u32)
                        .map_err(|_| invalid(format!("character {c:?} not in vocabulary")))
                })
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let vocab = self.vocab_size();
        if let Some(&token) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        match self.mode {
            TokenizerMode::Byte => {
                let bytes: Vec<u8> = ids.iter().map(|&t| t as u8).collect();
                String::from_utf8(bytes).map_err(|e| invalid(format!("decoded bytes: {e}")))
            }
            TokenizerMode::Char => Ok(ids.iter().map(|&t| self.symbols[t as usize]).collect()),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }
}

// ── Records ───────────────────────────────────────────────────────────────

/// One question/options/answer record of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskRecord {
    task: String,
    question: String,
    options: Vec<String>,
    answer: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    task: String,
    question: String,
    #[serde(default)]
    options: Vec<String>,
    answer: String,
}

impl TaskRecord {
    pub fn new(
        task: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        answer: impl Into<String>,
    ) -> Result<Self> {
        let record = Self {
            task: task.into(),
            question: question.into(),
            options,
            answer: answer.into(),
        };
        record.validate()?;
        Ok(record)
    }

    fn validate(&self) -> Result<()> {
        if self.task.is_empty() {
            return Err(invalid("record has empty task id"));
        }
        if self.question.is_empty() {
            return Err(invalid(format!("record of task {:?} has empty question", self.task)));
        }
        if self.answer.is_empty() {
            return Err(invalid(format!(
                "record of task {:?} ({:?}) has empty answer",
                self.task,
                truncate(&self.question)
            )));
        }
        if !self.options.is_empty() && !self.options.contains(&self.answer) {
            return Err(invalid(format!(
                "record of task {:?} ({:?}): answer {:?} is not among its options",
                self.task,
                truncate(&self.question),
                self.answer
            )));
        }
        Ok(())
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn answer(&self) -> &str {
        &self.answer
    }

    /// Index of the answer among the options, if there are options.
    pub fn answer_index(&self) -> Option<usize> {
        self.options.iter().position(|o| *o == self.answer)
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

/// Question, options (when present) and answer joined by single spaces.
pub fn format_prompt(record: &TaskRecord) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(record.options.len() + 2);
    parts.push(&record.question);
    parts.extend(record.options.iter().map(String::as_str));
    parts.push(&record.answer);
    parts.join(" ")
}

// ── Corpora ───────────────────────────────────────────────────────────────

/// Formatted prompts of one task together with their token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCorpus {
    task_id: String,
    prompts: Vec<String>,
    token_sequences: Vec<Vec<u32>>,
}

pub type Corpora = BTreeMap<String, TaskCorpus>;

impl TaskCorpus {
    pub fn from_prompts(
        task_id: impl Into<String>,
        prompts: Vec<String>,
        tokenizer: &Tokenizer,
    ) -> Result<Self> {
        let token_sequences = prompts
            .iter()
            .map(|p| tokenizer.encode(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(task_id, prompts, token_sequences, tokenizer.vocab_size())
    }

    pub fn new(
        task_id: impl Into<String>,
        prompts: Vec<String>,
        token_sequences: Vec<Vec<u32>>,
        vocab: usize,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if task_id.is_empty() {
            return Err(invalid("corpus task id is empty"));
        }
        if prompts.is_empty() || prompts.len() != token_sequences.len() {
            return Err(invalid(format!(
                "corpus {task_id:?}: {} prompts vs {} token sequences",
                prompts.len(),
                token_sequences.len()
            )));
        }
        for seq in &token_sequences {
            if let Some(&token) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange { token, vocab });
            }
        }
        Ok(Self {
            task_id,
            prompts,
            token_sequences,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn token_sequences(&self) -> &[Vec<u32>] {
        &self.token_sequences
    }

    /// Number of prompts.
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.token_sequences.iter().map(Vec::len).sum()
    }

    /// Prompts at the given indices, as a corpus with the same task id.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid(format!("empty subset of corpus {:?}", self.task_id)));
        }
        Ok(Self {
            task_id: self.task_id.clone(),
            prompts: indices.iter().map(|&i| self.prompts[i].clone()).collect(),
            token_sequences: indices
                .iter()
                .map(|&i| self.token_sequences[i].clone())
                .collect(),
        })
    }

    /// Alternating split (even, odd prompt indices). Requires two prompts.
    pub fn halves(&self) -> Result<(Self, Self)> {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        Ok((self.subset(&even)?, self.subset(&odd)?))
    }

    /// Deterministic head/tail split with `frac` of the prompts in the head.
    pub fn split(&self, frac: f64) -> Result<(Self, Self)> {
        let n_head = ((self.len() as f64) * frac).round() as usize;
        let head: Vec<usize> = (0..n_head).collect();
        let tail: Vec<usize> = (n_head..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// All token sequences concatenated, separated by `separator`.
    pub fn token_stream(&self, separator: Option<u32>) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.token_count() + self.len());
        for (i, seq) in self.token_sequences.iter().enumerate() {
            if i > 0 {
                out.extend(separator);
            }
            out.extend_from_slice(seq);
        }
        out
    }
}

/// Groups records by task, formats and tokenizes each.
pub fn corpora_from_records(records: &[TaskRecord], tokenizer: &Tokenizer) -> Result<Corpora> {
    if records.is_empty() {
        return Err(invalid("no records"));
    }
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for record in records {
        grouped
            .entry(record.task.clone())
            .or_default()
            .push(format_prompt(record));
    }
    grouped
        .into_iter()
        .map(|(task, prompts)| {
            let corpus = TaskCorpus::from_prompts(task.clone(), prompts, tokenizer)?;
            Ok((task, corpus))
        })
        .collect()
}

/// Reads a line-delimited record file. Blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let file = fs::File::open(path.as_ref())?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let record = TaskRecord::new(raw.task, raw.question, raw.options, raw.answer).map_err(
            |e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            },
        )?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(invalid("no records"));
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[TaskRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.push(b'\n');
    }
    fs::File::create(path.as_ref())?.write_all(&out)?;
    Ok(())
}

/// Reads a record file and builds one tokenized corpus per task.
pub fn ingest(path: impl AsRef<Path>, tokenizer: &Tokenizer) -> Result<Corpora> {
    let records = read_records(path)?;
    corpora_from_records(&records, tokenizer)
}

/// A plain-text language-modeling source: every nonempty line is a prompt.
pub fn ingest_text(
    path: impl AsRef<Path>,
    task_id: &str,
    tokenizer: &Tokenizer,
) -> Result<TaskCorpus> {
    let text = fs::read_to_string(path.as_ref())?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(invalid("no records"));
    }
    TaskCorpus::from_prompts(task_id, prompts, tokenizer)
}

/// Serialized form of a set of tokenized corpora.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusFile {
    pub version: u32,
    pub tokenizer: Tokenizer,
    pub tokenizer_fingerprint: String,
    pub corpora: Corpora,
}

impl CorpusFile {
    pub const VERSION: u32 = 1;

    pub fn new(tokenizer: Tokenizer, corpora: Corpora) -> Self {
        Self {
            version: Self::VERSION,
            tokenizer_fingerprint: tokenizer.fingerprint(),
            tokenizer,
            corpora,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: Self = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        if file.version != Self::VERSION {
            return Err(Error::Format(format!("corpus file version {}", file.version)));
        }
        crate::fingerprint::check(
            "tokenizer",
            &file.tokenizer.fingerprint(),
            &file.tokenizer_fingerprint,
        )?;
        Ok(file)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(&self.corpora)
    }
}

// ── Synthetic tasks ───────────────────────────────────────────────────────

const SYMBOL_POOL: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Generator parameters of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGen {
    pub id: String,
    /// Number of private symbols; symbol sets of different tasks are disjoint.
    pub n_symbols: usize,
    pub min_words: usize,
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub tasks: Vec<TaskGen>,
    pub records_per_task: usize,
    pub n_options: usize,
    /// Probability of following a symbol's preferred successor.
    pub stickiness: f64,
}

impl SynthSpec {
    /// `n_tasks` tasks with 8 symbols each and task-dependent question lengths.
    pub fn standard(n_tasks: usize) -> Self {
        let tasks = (0..n_tasks)
            .map(|i| TaskGen {
                id: format!("task{i}"),
                n_symbols: 8,
                min_words: 4 + 2 * i,
                max_words: 7 + 3 * i,
            })
            .collect();
        Self {
            tasks,
            records_per_task: 64,
            n_options: 3,
            stickiness: 0.8,
        }
    }

    pub fn with_records(mut self, records_per_task: usize) -> Self {
        self.records_per_task = records_per_task;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.len() < 2 {
            return Err(invalid("synthetic generation needs at least two tasks"));
        }
        let needed: usize = self.tasks.iter().map(|t| t.n_symbols).sum();
        let available = SYMBOL_POOL.chars().count();
        if needed > available {
            return Err(invalid(format!(
                "vocabulary too small: tasks need {needed} disjoint symbols, {available} available"
            )));
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() {
            return Err(invalid("duplicate synthetic task ids"));
        }
        for t in &self.tasks {
            if t.n_symbols < 2 || t.min_words == 0 || t.min_words > t.max_words {
                return Err(invalid(format!("bad generator parameters for task {:?}", t.id)));
            }
        }
        if self.records_per_task == 0 || self.n_options < 2 {
            return Err(invalid("need at least one record and two options per task"));
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return Err(invalid("stickiness must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Disjoint symbol set of each task, in task order.
    pub fn symbol_sets(&self) -> Result<Vec<Vec<char>>> {
        self.validate()?;
        let pool: Vec<char> = SYMBOL_POOL.chars().collect();
        let mut offset = 0;
        Ok(self
            .tasks
            .iter()
            .map(|t| {
                let set = pool[offset..offset + t.n_symbols].to_vec();
                offset += t.n_symbols;
                set
            })
            .collect())
    }
}

struct Chain {
    symbols: Vec<char>,
    successor: Vec<usize>,
    stickiness: f64,
}

impl Chain {
    fn new(symbols: Vec<char>, stickiness: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut successor: Vec<usize> = (0..symbols.len()).collect();
        successor.shuffle(rng);
        Self {
            symbols,
            successor,
            stickiness,
        }
    }

    fn step(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        if rng.random::<f64>() < self.stickiness {
            self.successor[state]
        } else {
            rng.random_range(0..self.symbols.len())
        }
    }

    fn word(&self, state: &mut usize, len: usize, rng: &mut ChaCha8Rng) -> String {
        (0..len)
            .map(|_| {
                *state = self.step(*state, rng);
                self.symbols[*state]
            })
            .collect()
    }

    fn random_word(&self, len: usize, rng: &mut ChaCha8Rng) -> String {
        (0..len)
            .map(|_| self.symbols[rng.random_range(0..self.symbols.len())])
            .collect()
    }
}

/// Synthetic records: questions are walks of a task-private Markov chain,
/// the answer continues the walk, distractors are uniform random words.
pub fn synth_records(spec: &SynthSpec, seed: u64) -> Result<Vec<TaskRecord>> {
    let sets = spec.symbol_sets()?;
    let mut records = Vec::with_capacity(spec.tasks.len() * spec.records_per_task);
    for (idx, (task, symbols)) in spec.tasks.iter().zip(sets).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64 + 1)));
        let chain = Chain::new(symbols, spec.stickiness, &mut rng);
        for _ in 0..spec.records_per_task {
            let mut state = rng.random_range(0..chain.symbols.len());
            let n_words = rng.random_range(task.min_words..=task.max_words);
            let words: Vec<String> = (0..n_words)
                .map(|_| {
                    let len = rng.random_range(2..=5);
                    chain.word(&mut state, len, &mut rng)
                })
                .collect();
            let answer = chain.word(&mut state, 3, &mut rng);
            let mut options = vec![answer.clone()];
            while options.len() < spec.n_options {
                let candidate = chain.random_word(3, &mut rng);
                if !options.contains(&candidate) {
                    options.push(candidate);
                }
            }
            options.shuffle(&mut rng);
            records.push(TaskRecord::new(task.id.clone(), words.join(" "), options, answer)?);
        }
    }
    Ok(records)
}

/// Tokenized synthetic corpora, one per task.
pub fn synth_tasks(spec: &SynthSpec, seed: u64, tokenizer: &Tokenizer) -> Result<Corpora> {
    corpora_from_records(&synth_records(spec, seed)?, tokenizer)
}
