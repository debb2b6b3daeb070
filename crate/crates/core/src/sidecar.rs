//! Tab-separated UTF-8 sidecar files: transcripts, unit streams and
//! durations. Every line is `utt_id<TAB>payload`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenproc::UnitSequence;

/// Transcripts keyed by utterance id.
pub type Transcripts = BTreeMap<String, String>;

fn split_line<'a>(line: &'a str, lineno: usize, path: &Path) -> Result<(&'a str, &'a str)> {
    line.split_once('\t').ok_or_else(|| {
        Error::format(format!("{}:{}: expected `utt_id<TAB>value`", path.display(), lineno + 1))
    })
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
}

pub fn parse_transcripts(text: &str, path: &Path) -> Result<Transcripts> {
    let mut out = Transcripts::new();
    for (n, line) in lines(text) {
        let (id, tr) = split_line(line, n, path)?;
        if out.insert(id.to_string(), tr.to_string()).is_some() {
            return Err(Error::format(format!("{}: duplicate utterance `{id}`", path.display())));
        }
    }
    Ok(out)
}

pub fn read_transcripts(path: impl AsRef<Path>) -> Result<Transcripts> {
    let path = path.as_ref();
    parse_transcripts(&fs::read_to_string(path)?, path)
}

pub fn format_transcripts(transcripts: &Transcripts) -> String {
    let mut s = String::new();
    for (id, tr) in transcripts {
        let _ = writeln!(s, "{id}\t{tr}");
    }
    s
}

pub fn write_transcripts(path: impl AsRef<Path>, transcripts: &Transcripts) -> Result<()> {
    fs::write(path, format_transcripts(transcripts))?;
    Ok(())
}

pub fn parse_units(text: &str, path: &Path) -> Result<Vec<UnitSequence>> {
    let mut out = Vec::new();
    for (n, line) in lines(text) {
        let (id, rest) = split_line(line, n, path)?;
        let units = rest
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::format(format!("{}:{}: bad unit `{tok}`", path.display(), n + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(UnitSequence::new(id, units));
    }
    Ok(out)
}

pub fn read_units(path: impl AsRef<Path>) -> Result<Vec<UnitSequence>> {
    let path = path.as_ref();
    parse_units(&fs::read_to_string(path)?, path)
}

pub fn format_units(seqs: &[UnitSequence]) -> String {
    let mut s = String::new();
    for seq in seqs {
        s.push_str(&seq.utt_id);
        s.push('\t');
        for (i, u) in seq.units.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{u}");
        }
        s.push('\n');
    }
    s
}

pub fn write_units(path: impl AsRef<Path>, seqs: &[UnitSequence]) -> Result<()> {
    fs::write(path, format_units(seqs))?;
    Ok(())
}

/// Durations in seconds keyed by utterance id.
pub fn read_durations(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in lines(&text) {
        let (id, secs) = split_line(line, n, path)?;
        let secs: f64 = secs.trim().parse().map_err(|_| {
            Error::format(format!("{}:{}: bad duration `{secs}`", path.display(), n + 1))
        })?;
        out.insert(id.to_string(), secs);
    }
    Ok(out)
}

pub fn write_durations(path: impl AsRef<Path>, durations: &BTreeMap<String, f64>) -> Result<()> {
    let mut s = String::new();
    for (id, secs) in durations {
        let _ = writeln!(s, "{id}\t{secs}");
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_text_roundtrip_keeps_empty_sequences() {
        let seqs = vec![
            UnitSequence::new("a", vec![1, 2, 3]),
            UnitSequence::new("b", vec![]),
        ];
        let text = format_units(&seqs);
        assert_eq!(text, "a\t1 2 3\nb\t\n");
        assert_eq!(parse_units(&text, Path::new("x")).unwrap(), seqs);
    }

    #[test]
    fn transcripts_keep_spaces_and_reject_duplicates() {
        let t = parse_transcripts("u1\ta b\nu2\t\n", Path::new("t")).unwrap();
        assert_eq!(t["u1"], "a b");
        assert_eq!(t["u2"], "");
        assert!(parse_transcripts("u1\ta\nu1\tb\n", Path::new("t")).is_err());
        assert!(parse_transcripts("no tab here\n", Path::new("t")).is_err());
    }
}
