//! Line-delimited episode fixtures.
//!
//! One line per sequence pair:
//! `task_index <TAB> split <TAB> source ids <TAB> target ids`, where split is
//! `support` or `target` and ids are space separated tokens without padding
//! or BOS/EOS markers.

use std::fmt::Write;

use super::Episode;
use crate::error::{Error, Result};
use crate::model::{SequenceBatch, Source, PAD};

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn dump_episodes(episodes: &[Episode<SequenceBatch>]) -> Result<String> {
    let mut out = String::new();
    for ep in episodes {
        for (split, batch) in [("support", &ep.support), ("target", &ep.target)] {
            let Source::Tokens(src) = &batch.src else {
                return Err(Error::Format("only token sources can be dumped".into()));
            };
            for (b, row) in src.iter().enumerate() {
                let unpadded: Vec<usize> = row.iter().copied().filter(|&t| t != PAD).collect();
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    ep.task_id,
                    split,
                    join(&unpadded),
                    join(&batch.reference(b))
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("line {line}: bad token id {t:?}")))
        })
        .collect()
}

/// Inverse of [`dump_episodes`]. Consecutive lines with the same task index
/// form one episode; its support lines precede its target lines.
pub fn load_episodes(text: &str) -> Result<Vec<Episode<SequenceBatch>>> {
    struct Pending {
        task: u64,
        support: Vec<(Vec<usize>, Vec<usize>)>,
        target: Vec<(Vec<usize>, Vec<usize>)>,
    }
    let finish = |p: Pending| -> Result<Episode<SequenceBatch>> {
        Ok(Episode {
            support: SequenceBatch::from_pairs(&p.support)?,
            target: SequenceBatch::from_pairs(&p.target)?,
            task_id: p.task,
        })
    };
    let mut episodes = Vec::new();
    let mut cur: Option<Pending> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("line {n}: expected 4 tab-separated fields")));
        }
        let task: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {n}: bad task index")))?;
        let pair = (parse_ids(fields[2], n)?, parse_ids(fields[3], n)?);
        let starts_new = match &cur {
            None => true,
            Some(p) => p.task != task || (fields[1] == "support" && !p.target.is_empty()),
        };
        if starts_new {
            if let Some(p) = cur.take() {
                episodes.push(finish(p)?);
            }
            cur = Some(Pending {
                task,
                support: Vec::new(),
                target: Vec::new(),
            });
        }
        let p = cur.as_mut().unwrap();
        match fields[1] {
            "support" => p.support.push(pair),
            "target" => p.target.push(pair),
            other => return Err(Error::Format(format!("line {n}: unknown split {other:?}"))),
        }
    }
    if let Some(p) = cur {
        episodes.push(finish(p)?);
    }
    Ok(episodes)
}
