use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::training::TrainingCorpus;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    /// Utterance path as written in the manifest; doubles as the utterance id.
    pub path: String,
}

/// Speaker-labelled utterance list. Relative paths resolve against `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    base: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self { base: base.into(), entries }
    }

    pub fn base(&self) -> &Path {
        &self.base
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        let p = Path::new(&e.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Speakers in order of first appearance, with the indices of their
    /// entries.
    pub fn by_speaker(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let s = *slot.entry(&e.speaker).or_insert_with(|| {
                order.push((e.speaker.clone(), Vec::new()));
                order.len() - 1
            });
            order[s].1.push(i);
        }
        order
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}", e.speaker, e.path);
        }
        s
    }

    /// Reads every utterance, grouped by speaker.
    pub fn load_training(&self, exec: Exec) -> Result<TrainingCorpus> {
        let groups = self.by_speaker();
        let waves = exec.try_map(self.entries.len(), |i| read_wav(self.resolve(&self.entries[i])))?;
        let mut waves: Vec<Option<_>> = waves.into_iter().map(Some).collect();
        let mut speakers = Vec::with_capacity(groups.len());
        let mut utterances = Vec::with_capacity(groups.len());
        for (spk, idx) in groups {
            speakers.push(spk);
            utterances.push(idx.iter().map(|&i| waves[i].take().expect("each entry used once")).collect());
        }
        TrainingCorpus::new(speakers, utterances)
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Manifest {
        let entries = self.entries.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, e)| e.clone()).collect();
        Manifest::new(self.base.clone(), entries)
    }
}

pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (spk, path) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: "expected `speaker_id<TAB>path`".into(),
        })?;
        if spk.is_empty() || path.is_empty() || path.contains('\t') {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("malformed entry {line:?}"),
            });
        }
        entries.push(ManifestEntry { speaker: spk.to_string(), path: path.to_string() });
    }
    Ok(Manifest::new(base, entries))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base, path)
}

/// Writes the manifest to `path`. Entries keep their paths, so `path` should
/// live in the manifest's base directory.
pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

/// Splits off the last `holdout` utterances of every speaker:
/// `(train, held_out)`.
pub fn split_holdout(m: &Manifest, holdout: usize) -> Result<(Manifest, Manifest)> {
    let mut held = vec![false; m.len()];
    for (spk, idx) in m.by_speaker() {
        if idx.len() <= holdout {
            return Err(Error::InsufficientData(format!(
                "speaker {spk} has {} utterances, cannot hold out {holdout}",
                idx.len()
            )));
        }
        idx[idx.len() - holdout..].iter().for_each(|&i| held[i] = true);
    }
    Ok((m.subset(|i| !held[i]), m.subset(|i| held[i])))
}

/// Alternates each speaker's utterances between two halves.
pub fn split_alternate(m: &Manifest) -> (Manifest, Manifest) {
    let mut first = vec![false; m.len()];
    for (_, idx) in m.by_speaker() {
        idx.iter().step_by(2).for_each(|&i| first[i] = true);
    }
    (m.subset(|i| first[i]), m.subset(|i| !first[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        let text = "a\tw/a0.wav\nb\tw/b0.wav\na\tw/a1.wav\na\tw/a2.wav\nb\tw/b1.wav\nb\tw/b2.wav\n";
        parse_manifest(text, Path::new("/data"), Path::new("m.tsv")).unwrap()
    }

    #[test]
    fn parse_and_group() {
        let m = manifest();
        assert_eq!(m.len(), 6);
        assert_eq!(m.resolve(&m.entries()[0]), PathBuf::from("/data/w/a0.wav"));
        let g = m.by_speaker();
        assert_eq!(g, vec![("a".to_string(), vec![0, 2, 3]), ("b".to_string(), vec![1, 4, 5])]);
        assert_eq!(parse_manifest(&m.to_text(), Path::new("/data"), Path::new("m")).unwrap(), m);
        assert!(parse_manifest("a w.wav\n", Path::new("."), Path::new("m")).is_err());
        assert!(parse_manifest("\tw.wav\n", Path::new("."), Path::new("m")).is_err());
    }

    #[test]
    fn splits() {
        let m = manifest();
        let (train, held) = split_holdout(&m, 1).unwrap();
        assert_eq!(held.entries().iter().map(|e| e.path.as_str()).collect::<Vec<_>>(), vec!["w/a2.wav", "w/b2.wav"]);
        assert_eq!(train.len(), 4);
        assert!(split_holdout(&m, 3).is_err());
        let (x, y) = split_alternate(&m);
        assert_eq!(x.len(), 4);
        assert_eq!(y.entries().iter().map(|e| e.path.as_str()).collect::<Vec<_>>(), vec!["w/a1.wav", "w/b1.wav"]);
    }
}
