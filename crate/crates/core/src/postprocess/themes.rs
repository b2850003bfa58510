use std::collections::BTreeMap;

use crate::text::{is_stopword, words};

/// Keyphrase counts per question, most frequent first.
pub type ThemeTable = BTreeMap<String, Vec<(String, usize)>>;

const MAX_N: usize = 3;

fn segments(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', ',', ';', ':', '!', '?', '(', ')', '"', '\n', '\u{2014}', '/'])
}

fn phrase_counts(texts: &[String]) -> BTreeMap<Vec<String>, usize> {
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for text in texts {
        for seg in segments(text) {
            let ws = words(seg);
            for n in 1..=MAX_N {
                for gram in ws.windows(n) {
                    if is_stopword(&gram[0]) || is_stopword(&gram[n - 1]) {
                        continue;
                    }
                    *counts.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

fn contains(long: &[String], short: &[String]) -> bool {
    long.len() > short.len() && long.windows(short.len()).any(|w| w == short)
}

/// Frequent n-grams (n up to 3) per question.
///
/// N-grams never start or end on a stopword and never cross punctuation. A phrase is
/// dropped when a longer phrase containing it occurs just as often.
pub fn keyword_themes(summaries: &BTreeMap<String, Vec<String>>, top_n: usize) -> ThemeTable {
    let mut table = ThemeTable::new();
    for (question, texts) in summaries {
        let counts = phrase_counts(texts);
        let mut rows: Vec<(String, usize)> = counts
            .iter()
            .filter(|(gram, c)| !counts.iter().any(|(other, oc)| oc == *c && contains(other, gram)))
            .map(|(gram, c)| (gram.join(" "), *c))
            .collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows.truncate(top_n);
        if !rows.is_empty() {
            table.insert(question.clone(), rows);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(q: &str, texts: &[&str]) -> BTreeMap<String, Vec<String>> {
        [(q.to_string(), texts.iter().map(|s| s.to_string()).collect())].into()
    }

    #[test]
    fn repeated_word_counts_twice() {
        let t = keyword_themes(&one("q", &["token consumption, token budget"]), 10);
        assert!(t["q"].contains(&("token".into(), 2)));
    }

    #[test]
    fn stopwords_only_is_empty() {
        assert!(keyword_themes(&one("q", &["and the of it is"]), 5).is_empty());
    }

    #[test]
    fn longer_phrase_absorbs_equal_count_parts() {
        let t = keyword_themes(&one("Q1", &["Drafting emails, refine reports", "drafting emails quickly"]), 3);
        assert_eq!(t["Q1"][0], ("drafting emails".into(), 2));
        assert!(t["Q1"].iter().all(|(p, _)| p != "drafting" && p != "emails"));
        assert!(t["Q1"].contains(&("refine reports".into(), 1)));
    }
}
