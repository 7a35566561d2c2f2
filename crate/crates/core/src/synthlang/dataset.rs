use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gen_seeds, parse, sample_sequence, GrammarConfig, RegexSeed, SynthError, TokenSequence};

const DATASET_VERSION: u32 = 1;

/// Knobs for [`build_dataset`]. Defaults reproduce the small synthetic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub n_seeds: usize,
    pub min_per_seed: usize,
    pub max_per_seed: usize,
    /// Validation draws from the first `val_seeds` seeds.
    pub val_seeds: usize,
    pub val_per_seed: usize,
    pub rng_seed: u64,
    pub max_seq_len: usize,
    pub grammar: GrammarConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl GenerationConfig {
    pub fn small() -> Self {
        Self {
            n_seeds: 10,
            min_per_seed: 10,
            max_per_seed: 60,
            val_seeds: 10,
            val_per_seed: 20,
            rng_seed: 1,
            max_seq_len: super::DEFAULT_MAX_SEQ_LEN,
            grammar: GrammarConfig::default(),
        }
    }

    pub fn large() -> Self {
        Self {
            n_seeds: 50,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_seeds == 0 || self.min_per_seed > self.max_per_seed || self.val_seeds > self.n_seeds {
            return Err(SynthError::Grammar(
                "need n_seeds >= 1, min_per_seed <= max_per_seed and val_seeds <= n_seeds".into(),
            ));
        }
        self.grammar.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub seeds: Vec<RegexSeed>,
    pub config: GenerationConfig,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[TokenSequence]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            _ => None,
        }
    }
}

pub fn build_dataset(config: &GenerationConfig) -> Result<DatasetSplit, SynthError> {
    config.validate()?;
    let seeds = gen_seeds(config.n_seeds, config.rng_seed, &config.grammar)?;
    // separate stream so seed construction and sentence sampling do not interact
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5EED_DA7A_5E7);
    let mut train = Vec::new();
    for seed in &seeds {
        let count = rng.gen_range(config.min_per_seed..=config.max_per_seed);
        for _ in 0..count {
            train.push(sample_sequence(seed, &mut rng, config.max_seq_len)?);
        }
    }
    let mut validation = Vec::new();
    for seed in seeds.iter().take(config.val_seeds) {
        for _ in 0..config.val_per_seed {
            validation.push(sample_sequence(seed, &mut rng, config.max_seq_len)?);
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        seeds,
        config: config.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    rng_seed: u64,
    grammar: GrammarConfig,
    seeds: Vec<String>,
    generation: GenerationConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    seed_id: u16,
    text: String,
    split: String,
}

/// Writes the split as JSON lines: one header object, then one record per sentence.
pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        version: DATASET_VERSION,
        rng_seed: split.config.rng_seed,
        grammar: split.config.grammar.clone(),
        seeds: split.seeds.iter().map(RegexSeed::display).collect(),
        generation: split.config.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for (name, seqs) in [("train", &split.train), ("validation", &split.validation)] {
        for s in seqs {
            let rec = Record {
                seed_id: s.seed_id,
                text: s.text.clone(),
                split: name.to_string(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file. With `strict`, every text is matched against its seed.
pub fn read_dataset(path: &Path, strict: bool) -> Result<DatasetSplit, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or(SynthError::Malformed {
        line: 1,
        msg: "empty file, missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| SynthError::Malformed {
        line: 1,
        msg: format!("missing or invalid header: {e}"),
    })?;
    if header.version != DATASET_VERSION {
        return Err(SynthError::Header(format!("unsupported version {}", header.version)));
    }
    if header.seeds.len() != header.generation.n_seeds {
        return Err(SynthError::Header(format!(
            "{} seed strings but config says n_seeds = {}",
            header.seeds.len(),
            header.generation.n_seeds
        )));
    }
    if header.rng_seed != header.generation.rng_seed || header.grammar != header.generation.grammar {
        return Err(SynthError::Header("top-level rng_seed/grammar disagree with the generation config".into()));
    }
    let seeds = header
        .seeds
        .iter()
        .enumerate()
        .map(|(i, s)| {
            parse(s).map(|ast| RegexSeed {
                seed_id: i as u16,
                ast,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| SynthError::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        let seed = seeds.get(rec.seed_id as usize).ok_or_else(|| SynthError::Malformed {
            line: lineno,
            msg: format!("seed_id {} out of range", rec.seed_id),
        })?;
        if strict && !seed.ast.matches(&rec.text) {
            return Err(SynthError::NotInLanguage {
                line: lineno,
                text: rec.text,
                seed: seed.display(),
            });
        }
        let seq = TokenSequence::new(rec.seed_id, rec.text).map_err(|e| SynthError::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        match rec.split.as_str() {
            "train" => train.push(seq),
            "validation" => validation.push(seq),
            other => {
                return Err(SynthError::Malformed {
                    line: lineno,
                    msg: format!("unknown split {other:?}"),
                })
            }
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        seeds,
        config: header.generation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{BOS, EOS, VOCAB_SIZE};

    #[test]
    fn small_config_sizes() {
        let d = build_dataset(&GenerationConfig::small()).unwrap();
        assert!((100..=600).contains(&d.train.len()), "{}", d.train.len());
        assert_eq!(d.validation.len(), 200);
        for s in d.train.iter().chain(&d.validation) {
            assert!(d.seeds[s.seed_id as usize].ast.matches(&s.text));
            assert_eq!(s.tokens[0], BOS);
            assert_eq!(*s.tokens.last().unwrap(), EOS);
            assert!(s.tokens.len() > 2 && s.tokens.len() <= 64);
            assert!(s.tokens[1..s.tokens.len() - 1].iter().all(|&t| t >= 2 && (t as usize) < VOCAB_SIZE));
        }
        let mut per_seed = vec![0; 10];
        for s in &d.train {
            per_seed[s.seed_id as usize] += 1;
        }
        assert!(per_seed.iter().all(|&c| (10..=60).contains(&c)), "{per_seed:?}");
    }

    #[test]
    fn forced_counts() {
        let cfg = GenerationConfig {
            min_per_seed: 1,
            max_per_seed: 1,
            ..GenerationConfig::small()
        };
        assert_eq!(build_dataset(&cfg).unwrap().train.len(), 10);
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&GenerationConfig::small()).unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_dataset(&d, &p1).unwrap();
        write_dataset(&build_dataset(&GenerationConfig::small()).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(read_dataset(&p1, true).unwrap(), d);
    }

    #[test]
    fn strict_check_rejects_foreign_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = build_dataset(&GenerationConfig::small()).unwrap();
        // "zzzzzzzzzzzzzzzzzzzzzzzzzzzzzz" is not produced by the default seeds
        let bad = "zzzzzzzzzzzzzzzzzzzzzzzzzzzzzzq".to_string();
        assert!(!d.seeds[0].ast.matches(&bad));
        d.train[0] = TokenSequence::new(0, bad).unwrap();
        let p = dir.path().join("bad.jsonl");
        write_dataset(&d, &p).unwrap();
        assert!(read_dataset(&p, false).is_ok());
        match read_dataset(&p, true) {
            Err(SynthError::NotInLanguage { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected membership failure, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"seed_id\":0,\"text\":\"ab\",\"split\":\"train\"}\n").unwrap();
        assert!(matches!(read_dataset(&p, false), Err(SynthError::Malformed { line: 1, .. })));

        let d = build_dataset(&GenerationConfig::small()).unwrap();
        write_dataset(&d, &p).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("not json\n");
        std::fs::write(&p, &text).unwrap();
        let n_lines = text.lines().count();
        match read_dataset(&p, false) {
            Err(SynthError::Malformed { line, .. }) => assert_eq!(line, n_lines),
            other => panic!("{other:?}"),
        }
    }
}
