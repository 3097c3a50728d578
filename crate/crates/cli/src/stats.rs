//! `advcap stats`: Table-style diversity reports for caption files.
//!
//! Each caption file yields two report rows: `1 of p` uses the best-ranked
//! caption per image (corpus statistics only) and `p of p` uses every caption
//! (set diversity plus corpus statistics). Count ratios and the repeated-caption
//! table use the best-ranked captions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use advcap_core::data::{load_coco_captions, read_generated_jsonl, tokenize, GeneratedRecord, TOKENIZER_VERSION};
use advcap_core::metrics::{
    count_ratios, diversity_report, repeated_caption_table, CountRatioTable, DiversityReport, MetricRegistry,
    SetsByImage,
};
use advcap_core::{Error, Result};
use serde::Serialize;

use crate::commands::load_dataset;
use crate::settings::{record_run, resolve, write_file};
use crate::ConfigArgs;

const NGRAM_ORDERS: [usize; 3] = [1, 2, 3];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// The tokenizer recorded in the `manifest.json` beside a caption file, if any.
fn recorded_tokenizer(file: &Path) -> Result<Option<String>> {
    let Some(path) = file.parent().map(|d| d.join("manifest.json")).filter(|p| p.is_file()) else {
        return Ok(None);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(v.get("tokenizer").and_then(|t| t.as_str()).map(str::to_string))
}

/// Best caption first: explicit rank 1, else highest log probability, else file order.
fn best_index(rows: &[&GeneratedRecord]) -> usize {
    if let Some(i) = rows.iter().position(|r| r.rank == Some(1)) {
        return i;
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if let (Some(a), Some(b)) = (r.log_prob, rows[best].log_prob) {
            if a > b {
                best = i;
            }
        }
    }
    best
}

struct Grouped {
    all: SetsByImage,
    best: SetsByImage,
    best_text: Vec<String>,
    p: usize,
}

fn group(records: &[GeneratedRecord]) -> Result<Grouped> {
    if records.is_empty() {
        return Err(Error::Data("caption file has no records".into()));
    }
    let mut by_image: BTreeMap<u64, Vec<&GeneratedRecord>> = BTreeMap::new();
    for r in records {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let mut g = Grouped {
        all: SetsByImage::new(),
        best: SetsByImage::new(),
        best_text: Vec::new(),
        p: 0,
    };
    for (id, rows) in by_image {
        if rows.iter().any(|r| tokenize(&r.caption).is_empty()) {
            return Err(Error::Data(format!("image {id} has an empty caption; set diversity is undefined")));
        }
        let best = rows[best_index(&rows)];
        let toks = tokenize(&best.caption);
        g.best_text.push(toks.join(" "));
        g.best.insert(id, vec![toks]);
        g.p = g.p.max(rows.len());
        g.all.insert(id, rows.iter().map(|r| tokenize(&r.caption)).collect());
    }
    Ok(g)
}

#[derive(Debug, Serialize)]
struct RatioSeries<'a> {
    n: usize,
    mean_ratio: f64,
    bins: &'a [advcap_core::metrics::RatioBin],
    histogram: &'a advcap_core::metrics::Histogram,
}

#[derive(Debug, Serialize)]
struct PlotData<'a> {
    label: &'a str,
    /// Variant name → (k → words used at least k times).
    vocab_curve: BTreeMap<String, BTreeMap<usize, usize>>,
    count_ratios: Vec<RatioSeries<'a>>,
    repeated_captions: &'a [(String, usize)],
}

fn report_row(label: &str, variant: &str, r: &DiversityReport, images: usize) -> String {
    [
        csv_field(label),
        variant.to_string(),
        images.to_string(),
        r.corpus.num_captions.to_string(),
        opt(r.div1()),
        opt(r.div2()),
        opt(r.mbleu4()),
        r.vocab_size().to_string(),
        r.pct_novel().to_string(),
    ]
    .join(",")
        + "\n"
}

/// A file-name-safe label per input, unique within one invocation.
fn labels(files: &[std::path::PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("captions");
            let parent = f.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str());
            let base = match parent {
                Some(d) if stem == "captions" => d.to_string(),
                _ => stem.to_string(),
            };
            let base: String = base
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let mut label = base.clone();
            let mut k = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base}-{k}");
                k += 1;
            }
            label
        })
        .collect()
}

pub fn run(
    args: &ConfigArgs,
    generated: &[std::path::PathBuf],
    data: Option<&Path>,
    coco: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = resolve(args)?;
    let mut inputs = BTreeMap::new();
    let (training, corpus_tokenizer) = match (data, coco) {
        (Some(dir), _) => {
            let ds = load_dataset(dir)?;
            inputs.insert("dataset_vocab".to_string(), ds.manifest.vocab_hash.clone());
            (ds.train.reference_corpus(), ds.manifest.tokenizer.clone())
        }
        (None, Some(path)) => (load_coco_captions(path, None)?.all_captions(), TOKENIZER_VERSION.to_string()),
        (None, None) => return Err(Error::Config("stats needs --data or --coco".into())),
    };
    if training.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }

    let mut report = String::from("label,variant,images,captions,div1,div2,mbleu4,vocab_size,pct_novel\n");
    let mut outputs = vec!["report.csv".to_string()];
    for (file, label) in generated.iter().zip(labels(generated)) {
        if let Some(t) = recorded_tokenizer(file)? {
            if t != corpus_tokenizer {
                return Err(Error::Integrity(format!(
                    "{} was tokenized with `{t}` but the training corpus with `{corpus_tokenizer}`",
                    file.display()
                )));
            }
        }
        let g = group(&read_generated_jsonl(file)?)?;
        inputs.insert(label.clone(), crate::settings::file_hash(file)?);
        let one = diversity_report(&g.best, &training, &MetricRegistry::empty())?;
        let all = diversity_report(&g.all, &training, &MetricRegistry::default())?;
        report.push_str(&report_row(&label, &format!("1 of {}", g.p), &one, g.best.len()));
        report.push_str(&report_row(&label, &format!("{0} of {0}", g.p), &all, g.all.len()));

        let best: Vec<&Vec<String>> = g.best.values().flatten().collect();
        let tables: Vec<CountRatioTable> = NGRAM_ORDERS
            .iter()
            .map(|&n| count_ratios(&best, &training, n, cfg.eval.min_train_count))
            .collect::<Result<_>>()?;
        let repeated = repeated_caption_table(&g.best_text)?;

        let mut write = |name: String, bytes: &[u8]| -> Result<()> {
            write_file(&out.join(&name), bytes)?;
            outputs.push(name);
            Ok(())
        };
        write(format!("{label}_per_image.csv"), all.per_image_csv().as_bytes())?;
        for t in &tables {
            write(format!("{label}_ratios_n{}.csv", t.n), t.to_csv().as_bytes())?;
        }
        let mut rep = String::from("caption,count\n");
        for (c, n) in &repeated {
            rep.push_str(&format!("{},{n}\n", csv_field(c)));
        }
        write(format!("{label}_repeated.csv"), rep.as_bytes())?;
        let plot = PlotData {
            label: &label,
            vocab_curve: BTreeMap::from([
                (format!("1 of {}", g.p), one.corpus.vocab_curve.points()),
                (format!("{0} of {0}", g.p), all.corpus.vocab_curve.points()),
            ]),
            count_ratios: tables
                .iter()
                .map(|t| RatioSeries {
                    n: t.n,
                    mean_ratio: t.mean_ratio(),
                    bins: &t.bins,
                    histogram: &t.histogram,
                })
                .collect(),
            repeated_captions: &repeated[..repeated.len().min(20)],
        };
        let json = serde_json::to_string_pretty(&plot).map_err(|e| Error::Data(e.to_string()))? + "\n";
        write(format!("{label}_plot.json"), json.as_bytes())?;
        eprintln!(
            "{label}: div2 {} mbleu4 {} vocab {} novel {:.2}%",
            opt(all.div2()),
            opt(all.mbleu4()),
            all.vocab_size(),
            all.pct_novel()
        );
    }
    write_file(&out.join("report.csv"), report.as_bytes())?;
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    record_run(out, "stats", &cfg, &inputs, &names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, rank: Option<usize>, lp: Option<f64>, c: &str) -> GeneratedRecord {
        GeneratedRecord {
            image_id: id,
            rank,
            caption: c.into(),
            log_prob: lp,
        }
    }

    #[test]
    fn best_prefers_rank_then_log_prob_then_order() {
        let a = rec(1, Some(2), Some(-1.0), "a");
        let b = rec(1, Some(1), Some(-5.0), "b");
        assert_eq!(best_index(&[&a, &b]), 1);
        let c = rec(1, None, Some(-3.0), "c");
        let d = rec(1, None, Some(-2.0), "d");
        assert_eq!(best_index(&[&c, &d]), 1);
        let e = rec(1, None, None, "e");
        assert_eq!(best_index(&[&e, &c]), 0);
    }

    #[test]
    fn grouping_counts_sets() {
        let rs = vec![
            rec(2, Some(1), None, "A dog."),
            rec(2, Some(2), None, "a cat"),
            rec(1, Some(1), None, "x"),
        ];
        let g = group(&rs).unwrap();
        assert_eq!(g.p, 2);
        assert_eq!(g.all[&2].len(), 2);
        assert_eq!(g.best[&2], vec![vec!["a".to_string(), "dog".to_string()]]);
        assert_eq!(g.best_text, vec!["x", "a dog"]);
        assert!(matches!(group(&[rec(3, None, None, " . ")]), Err(Error::Data(_))));
    }

    #[test]
    fn labels_are_unique() {
        let files = ["a/captions.jsonl", "b/captions.jsonl", "a/captions.jsonl", "x/run 1.jsonl"]
            .map(std::path::PathBuf::from);
        assert_eq!(labels(&files), vec!["a", "b", "a-2", "run_1"]);
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        assert_eq!(csv_field("a dog"), "a dog");
        assert_eq!(csv_field("a, \"dog\""), "\"a, \"\"dog\"\"\"");
    }
}
