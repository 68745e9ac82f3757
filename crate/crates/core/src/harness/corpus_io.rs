//! Plain-text corpora: one whitespace-tokenized sentence per line, with a
//! vocabulary file listing one token per line (id = line number).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::synthetic::DomainCorpus;
use crate::error::{Error, Result};
use crate::model::Pair;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("vocabulary line {} is not a single token", i + 1)));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("token `{t}` appears twice in the vocabulary")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Tokens `w0 .. w{n-1}` for synthetic content ids.
    pub fn synthetic(size: u32) -> Self {
        Vocab::new((0..size).map(|i| format!("w{i}")).collect()).expect("distinct tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::contract(format!("token id {id} outside a vocabulary of {}", self.len())))
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown token `{token}`")))
    }

    pub fn encode_line(&self, line: &str) -> Result<Vec<u32>> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_line(&self, ids: &[u32]) -> Result<String> {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect::<Result<_>>()?;
        Ok(toks.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{t}").expect("string write");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::new(text.lines().map(str::to_string).collect())
    }
}

fn split_paths(dir: &Path, domain: &str, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{domain}.{split}.src")),
        dir.join(format!("{domain}.{split}.tgt")),
    )
}

pub fn write_pairs(src: &Path, tgt: &Path, pairs: &[Pair], vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    let mut t = String::new();
    for p in pairs {
        writeln!(s, "{}", vocab.decode_line(&p.src)?).expect("string write");
        writeln!(t, "{}", vocab.decode_line(&p.tgt)?).expect("string write");
    }
    std::fs::write(src, s).map_err(|e| Error::io(src, e))?;
    std::fs::write(tgt, t).map_err(|e| Error::io(tgt, e))
}

pub fn read_pairs(src: &Path, tgt: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let s = std::fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
    let t = std::fs::read_to_string(tgt).map_err(|e| Error::io(tgt, e))?;
    let (s, t): (Vec<&str>, Vec<&str>) = (s.lines().collect(), t.lines().collect());
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    s.iter()
        .zip(&t)
        .enumerate()
        .map(|(i, (a, b))| {
            let pair = Pair::new(vocab.encode_line(a)?, vocab.encode_line(b)?);
            if pair.src.is_empty() {
                return Err(Error::Data(format!("{} line {} is empty", src.display(), i + 1)));
            }
            Ok(pair)
        })
        .collect()
}

/// Write `<dir>/<name>.{train,dev,test}.{src,tgt}`.
pub fn save_corpus(dir: &Path, corpus: &DomainCorpus, vocab: &Vocab) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, pairs) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let (s, t) = split_paths(dir, &corpus.name, split);
        write_pairs(&s, &t, pairs, vocab)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path, name: &str, vocab: &Vocab) -> Result<DomainCorpus> {
    let read = |split| {
        let (s, t) = split_paths(dir, name, split);
        read_pairs(&s, &t, vocab)
    };
    Ok(DomainCorpus {
        name: name.to_string(),
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_synthetic_domain, SyntheticDomainSpec, TaskKind};

    #[test]
    fn corpus_files_round_trip_byte_identically() {
        let spec = SyntheticDomainSpec::new("rev", TaskKind::Reverse, 10, (1, 5), (20, 5, 5));
        let corpus = gen_synthetic_domain(&spec, 3).unwrap();
        let vocab = Vocab::synthetic(10);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_corpus(a.path(), &corpus, &vocab).unwrap();
        save_corpus(b.path(), &gen_synthetic_domain(&spec, 3).unwrap(), &vocab).unwrap();
        for f in ["rev.train.src", "rev.dev.tgt", "rev.test.src"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        vocab.save(&a.path().join("vocab.txt")).unwrap();
        let v = Vocab::load(&a.path().join("vocab.txt")).unwrap();
        assert_eq!(load_corpus(a.path(), "rev", &v).unwrap(), corpus);
    }

    #[test]
    fn bad_vocabularies_and_tokens_are_rejected() {
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocab::new(vec!["a b".into()]).is_err());
        let v = Vocab::synthetic(3);
        assert!(v.encode_line("w0 w9").is_err());
        assert_eq!(v.encode_line(" w2  w0 ").unwrap(), vec![2, 0]);
    }
}
