use super::{DataError, RawExample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, examples: &[RawExample]) -> Result<(), DataError> {
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| DataError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Shuffles with `seed` and returns `(train, test)` with
/// `round(len * train_fraction)` training records.
pub fn split_train_test(examples: &[RawExample], train_fraction: f64, seed: u64) -> (Vec<RawExample>, Vec<RawExample>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((examples.len() as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_schema() {
        let line = r#"{"question":"is it red","answer":"yes","reviews":["it is red"],"attributes":[["color","red"]]}"#;
        let exs = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(exs[0].attributes, vec![("color".to_string(), "red".to_string())]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &exs).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), line);
    }

    #[test]
    fn parse_error_reports_line() {
        let err = read_jsonl("\n{oops}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }
}
