use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ScoreSet, Trial};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `label enroll test` lines separated by single spaces; label is
/// `1` (target) or `0`. Blank lines are skipped.
pub fn parse_trials(text: &str, origin: &Path) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(err(format!("expected `label enroll test`, got {line:?}")));
        }
        let target = match parts[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 1 or 0, got {other:?}"))),
        };
        if parts[1] == parts[2] {
            return Err(err(format!("trial pairs {} with itself", parts[1])));
        }
        out.push(Trial { target, enroll: parts[1].to_string(), test: parts[2].to_string() });
    }
    Ok(out)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    parse_trials(&read_text(path)?, path)
}

pub fn trials_to_string(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    write_text(path.as_ref(), &trials_to_string(trials))
}

const STREAMS_TAG: &str = "#streams:";

/// Tab-separated scores with a `#streams:` header naming the score columns.
/// Scores are written in shortest round-trip form, so reading back is exact.
pub fn scores_to_string(set: &ScoreSet) -> String {
    let mut s = String::from(STREAMS_TAG);
    for name in &set.streams {
        s.push('\t');
        s.push_str(name);
    }
    s.push('\n');
    for i in 0..set.len() {
        let _ = write!(s, "{}\t{}", set.ids[i], u8::from(set.labels[i]));
        for col in &set.scores {
            let _ = write!(s, "\t{}", col[i]);
        }
        s.push('\n');
    }
    s
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<ScoreSet> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty scores file".into()))?;
    let rest =
        header.strip_prefix(STREAMS_TAG).ok_or_else(|| err(hline + 1, format!("expected a {STREAMS_TAG} header")))?;
    let streams: Vec<String> = rest.split('\t').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if streams.is_empty() {
        return Err(err(hline + 1, "header names no score streams".into()));
    }
    let (mut ids, mut labels) = (Vec::new(), Vec::new());
    let mut scores = vec![Vec::new(); streams.len()];
    for (i, line) in lines {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 + streams.len() {
            return Err(err(i + 1, format!("expected {} columns, got {}", 2 + streams.len(), parts.len())));
        }
        ids.push(parts[0].to_string());
        labels.push(match parts[1] {
            "1" => true,
            "0" => false,
            other => return Err(err(i + 1, format!("label must be 1 or 0, got {other:?}"))),
        });
        for (col, p) in scores.iter_mut().zip(&parts[2..]) {
            let v: f64 = p.parse().map_err(|_| err(i + 1, format!("invalid score {p:?}")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("non-finite score {p:?}")));
            }
            col.push(v);
        }
    }
    ScoreSet::new(ids, labels, streams, scores)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    parse_scores(&read_text(path)?, path)
}

pub fn write_scores(path: impl AsRef<Path>, set: &ScoreSet) -> Result<()> {
    write_text(path.as_ref(), &scores_to_string(set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trial_list_round_trip() {
        let text = "1 id10270/x6uYqmx31kE/00001.wav id10270/8jEAjG6SegY/00008.wav\n0 a.wav b.wav\n";
        let t = parse_trials(text, Path::new("t")).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].target && !t[1].target);
        assert_eq!(trials_to_string(&t), text);
    }

    #[test]
    fn trial_list_errors() {
        for bad in ["2 a b", "1 a", "1  a b", "1\ta\tb", "1 a a"] {
            assert!(matches!(parse_trials(bad, Path::new("t")), Err(Error::Parse { line: 1, .. })), "{bad}");
        }
    }

    #[test]
    fn score_file_errors() {
        let p = Path::new("s");
        assert!(parse_scores("", p).is_err());
        assert!(parse_scores("t0\t1\t0.5\n", p).is_err());
        assert!(parse_scores("#streams:\tFB\nt0\t1\n", p).is_err());
        assert!(parse_scores("#streams:\tFB\nt0\t1\tnan\n", p).is_err());
        assert!(parse_scores("#streams:\tFB\nt0\tx\t0.1\n", p).is_err());
        let s = parse_scores("#streams:\tFB\tLF\n\nt0\t1\t0.5\t-2\nt1\t0\t-1e-3\t4\n", p).unwrap();
        assert_eq!(s.streams, vec!["FB", "LF"]);
        assert_eq!(s.scores[1], vec![-2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn scores_round_trip_exactly(rows in proptest::collection::vec((any::<bool>(), -1e6f64..1e6, -1e-6f64..1e-6), 1..40)) {
            let n = rows.len();
            let set = ScoreSet::new(
                (0..n).map(|i| format!("t{i:05}")).collect(),
                rows.iter().map(|r| r.0).collect(),
                vec!["FB".into(), "HF".into()],
                vec![rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect()],
            ).unwrap();
            let back = parse_scores(&scores_to_string(&set), Path::new("s")).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
