//! Word embeddings from one-hot token codes: tokenization, vocabulary
//! construction, context-window co-occurrence pairs, and the spectral solve
//! reused from the core. Column `i` of the projection is word `i`'s
//! embedding.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::ArrayView1;

use crate::error::{Result, SmtError};
use crate::smt_core::{
    solve_embedding, AccumulationMode, CooccurrenceStats, SpectralEmbedding,
};
use crate::sparse::SparseCode;

/// Characters split off as standalone tokens.
const PUNCTUATION: &[char] = &['.', ',', '(', ')', '!', '?', ';', ':', '"', '\''];

/// Lowercase, separate punctuation into standalone tokens, split on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if PUNCTUATION.contains(&ch) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids dense in `[0, len)`, assigned by descending frequency with ties
/// broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub frequencies: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    fn from_sorted(pairs: Vec<(String, u64)>) -> Self {
        let mut tokens = Vec::with_capacity(pairs.len());
        let mut frequencies = Vec::with_capacity(pairs.len());
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, (tok, n)) in pairs.into_iter().enumerate() {
            index.insert(tok.clone(), i as u32);
            tokens.push(tok);
            frequencies.push(n);
        }
        Vocabulary {
            tokens,
            frequencies,
            index,
        }
    }

    /// One `token\tcount` line per id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (tok, n) in self.tokens.iter().zip(&self.frequencies) {
            writeln!(w, "{tok}\t{n}").map_err(|e| SmtError::io("<vocabulary>", e))?;
        }
        Ok(())
    }

    /// Parse the `token\tcount` format. Order in the file defines the ids.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| SmtError::io("<vocabulary>", e))?;
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line.split_once('\t').ok_or_else(|| {
                SmtError::Format(format!("vocabulary line {} lacks a tab", lineno + 1))
            })?;
            if tok.is_empty() {
                return Err(SmtError::Format(format!("empty token at line {}", lineno + 1)));
            }
            let n: u64 = count.parse().map_err(|_| {
                SmtError::Format(format!("bad count {count:?} at line {}", lineno + 1))
            })?;
            pairs.push((tok.to_string(), n));
        }
        if pairs.is_empty() {
            return Err(SmtError::Format("empty vocabulary".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (tok, _) in &pairs {
            if !seen.insert(tok.clone()) {
                return Err(SmtError::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary::from_sorted(pairs))
    }
}

/// Count token frequencies over documents and keep the `max_size` most
/// frequent.
pub fn build_vocab<'a, I>(documents: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size == 0 {
        return Err(SmtError::InvalidArgument("max_size must be positive".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in documents {
        for tok in tokenize(doc) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(SmtError::InvalidArgument("empty corpus".into()));
    }
    let mut pairs: Vec<(String, u64)> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    pairs.truncate(max_size);
    Ok(Vocabulary::from_sorted(pairs))
}

/// Ordered co-occurrence pairs within a context window of half-width
/// `window`. Out-of-vocabulary tokens neither emit pairs nor (by default)
/// consume window slots.
pub fn context_pairs(
    tokens: &[String],
    vocab: &Vocabulary,
    window: usize,
    oov_consumes_slots: bool,
) -> Vec<(u32, u32)> {
    let ids: Vec<Option<u32>> = tokens.iter().map(|t| vocab.id(t)).collect();
    let stream: Vec<u32> = if oov_consumes_slots {
        // keep positions; emit only in-vocab pairs
        let mut pairs = Vec::new();
        for (p, idp) in ids.iter().enumerate() {
            let Some(a) = idp else { continue };
            for q in p.saturating_sub(window)..(p + window + 1).min(ids.len()) {
                if q == p {
                    continue;
                }
                if let Some(b) = ids[q] {
                    pairs.push((*a, b));
                }
            }
        }
        return pairs;
    } else {
        ids.into_iter().flatten().collect()
    };
    let mut pairs = Vec::new();
    for p in 0..stream.len() {
        for q in p.saturating_sub(window)..(p + window + 1).min(stream.len()) {
            if q != p {
                pairs.push((stream[p], stream[q]));
            }
        }
    }
    pairs
}

/// Symmetric sparse co-occurrence counts under a context window.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceTable {
    counts: HashMap<(u32, u32), u64>,
    pub window: usize,
}

impl CooccurrenceTable {
    pub fn new(window: usize) -> Self {
        CooccurrenceTable {
            counts: HashMap::new(),
            window,
        }
    }

    fn bump(&mut self, a: u32, b: u32) {
        let key = if a <= b { (a, b) } else { (b, a) };
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn count(&self, a: u32, b: u32) -> u64 {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.counts.get(&key).copied().unwrap_or(0)
    }

    /// Neighbors of `id` by descending count (ties by ascending id).
    pub fn top_cooccurring(&self, id: u32, n: usize) -> Vec<(u32, u64)> {
        let mut rows: Vec<(u32, u64)> = self
            .counts
            .iter()
            .filter_map(|(&(a, b), &c)| {
                if a == id && b != id {
                    Some((b, c))
                } else if b == id && a != id {
                    Some((a, c))
                } else {
                    None
                }
            })
            .collect();
        rows.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        rows.truncate(n);
        rows
    }
}

#[derive(Debug, Clone)]
pub struct WordSmt {
    pub vocab: Vocabulary,
    pub embedding: SpectralEmbedding,
    pub table: CooccurrenceTable,
    pub window: usize,
}

/// Train a word embedding: every token is a one-hot code, neighbors are the
/// `window` previous and next in-vocabulary tokens, and windows never cross
/// document boundaries. Each document is one item of `documents`.
pub fn train_word_smt<'a, I>(
    documents: I,
    vocab: &Vocabulary,
    window: usize,
    d_emb: usize,
    v_floor_rel: f64,
) -> Result<WordSmt>
where
    I: IntoIterator<Item = &'a str>,
{
    if window == 0 {
        return Err(SmtError::InvalidArgument("window must be at least 1".into()));
    }
    let k = vocab.len();
    let mut stats = CooccurrenceStats::new(k, AccumulationMode::Pairwise);
    let mut table = CooccurrenceTable::new(window);
    let mut any = false;
    for doc in documents {
        let tokens = tokenize(doc);
        // emit each unordered pair once: only look backward
        let ids: Vec<u32> = tokens.iter().filter_map(|t| vocab.id(t)).collect();
        for p in 0..ids.len() {
            any = true;
            for q in p.saturating_sub(window)..p {
                let (a, b) = (ids[q], ids[p]);
                stats.accumulate_pair(&SparseCode::one_hot(k, a as usize), &SparseCode::one_hot(k, b as usize))?;
                table.bump(a, b);
            }
        }
    }
    if !any {
        return Err(SmtError::InvalidArgument(
            "corpus has no in-vocabulary tokens".into(),
        ));
    }
    let embedding = solve_embedding(&stats, d_emb, 0, v_floor_rel)?;
    Ok(WordSmt {
        vocab: vocab.clone(),
        embedding,
        table,
        window,
    })
}

fn column_cosine(emb: &SpectralEmbedding, a: u32, b: u32) -> f64 {
    let ca = emb.projection.column(a as usize);
    let cb = emb.projection.column(b as usize);
    let na = ca.dot(&ca).sqrt();
    let nb = cb.dot(&cb).sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    ca.dot(&cb) / (na * nb)
}

/// Top-`n` words by embedding cosine, excluding the query itself.
pub fn nearest_words(model: &WordSmt, word: &str, n: usize) -> Result<Vec<(String, f64)>> {
    let id = model
        .vocab
        .id(word)
        .ok_or_else(|| SmtError::UnknownToken(word.to_string()))?;
    let mut scored: Vec<(u32, f64)> = (0..model.vocab.len() as u32)
        .filter(|&j| j != id)
        .map(|j| (j, column_cosine(&model.embedding, id, j)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n);
    Ok(scored
        .into_iter()
        .map(|(j, c)| (model.vocab.token(j).to_string(), c))
        .collect())
}

/// One row of the cosine-vs-count diagnostic.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NeighborRow {
    pub rank_by: String,
    pub word: String,
    pub cosine: f64,
    pub cooccurrences: u64,
}

/// The top-`n` words by embedding cosine and the top-`n` by raw co-occurrence
/// count, with both quantities reported for each row.
pub fn cooccurrence_vs_similarity(
    model: &WordSmt,
    word: &str,
    n: usize,
) -> Result<Vec<NeighborRow>> {
    let id = model
        .vocab
        .id(word)
        .ok_or_else(|| SmtError::UnknownToken(word.to_string()))?;
    let mut rows = Vec::new();
    for (w, cos) in nearest_words(model, word, n)? {
        let other = model.vocab.id(&w).expect("from vocab");
        rows.push(NeighborRow {
            rank_by: "cosine".into(),
            cooccurrences: model.table.count(id, other),
            word: w,
            cosine: cos,
        });
    }
    for (other, count) in model.table.top_cooccurring(id, n) {
        rows.push(NeighborRow {
            rank_by: "cooccurrence".into(),
            word: model.vocab.token(other).to_string(),
            cosine: column_cosine(&model.embedding, id, other),
            cooccurrences: count,
        });
    }
    Ok(rows)
}

/// word2vec text export: header `|V| d_emb`, then one `token v1 .. vd` line
/// per word.
pub fn write_word2vec_text<W: Write>(model: &WordSmt, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<embedding export>", e);
    writeln!(w, "{} {}", model.vocab.len(), model.embedding.d_emb()).map_err(io_err)?;
    for (i, tok) in model.vocab.tokens.iter().enumerate() {
        write!(w, "{tok}").map_err(io_err)?;
        for v in model.embedding.projection.column(i) {
            write!(w, " {v}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    Ok(())
}

pub fn embedding_column<'a>(model: &'a WordSmt, word: &str) -> Result<ArrayView1<'a, f64>> {
    let id = model
        .vocab
        .id(word)
        .ok_or_else(|| SmtError::UnknownToken(word.to_string()))?;
    Ok(model.embedding.projection.column(id as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("The cat."), vec!["the", "cat", "."]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(
            tokenize("Hello, world! (again)"),
            vec!["hello", ",", "world", "!", "(", "again", ")"]
        );
    }

    #[test]
    fn tokenize_idempotent_on_joined_output() {
        let text = "Some text, with Punctuation! And (nested) bits; fine.";
        let once = tokenize(text);
        let joined = once.join(" ");
        let twice = tokenize(&joined);
        assert_eq!(once, twice);
    }

    #[test]
    fn vocab_frequency_order_and_cap() {
        let vocab = build_vocab(["a a b"], 1).unwrap();
        assert_eq!(vocab.tokens, vec!["a"]);
        let vocab = build_vocab(["a a b c c c"], 10).unwrap();
        assert_eq!(vocab.tokens, vec!["c", "a", "b"]);
        assert_eq!(vocab.frequencies, vec![3, 2, 1]);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let vocab = build_vocab(["zeta alpha zeta alpha mu"], 10).unwrap();
        // alpha and zeta tie at 2: alpha first
        assert_eq!(vocab.tokens, vec!["alpha", "zeta", "mu"]);
    }

    #[test]
    fn vocab_roundtrip_through_text_format() {
        let vocab = build_vocab(["the quick brown fox the the quick"], 10).unwrap();
        let mut buf = Vec::new();
        vocab.write(&mut buf).unwrap();
        let back = Vocabulary::read(buf.as_slice()).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn vocab_read_rejects_malformed() {
        assert!(Vocabulary::read(&b"token_without_tab\n"[..]).is_err());
        assert!(Vocabulary::read(&b"a\tnot_a_number\n"[..]).is_err());
        assert!(Vocabulary::read(&b"a\t3\na\t2\n"[..]).is_err());
        assert!(Vocabulary::read(&b""[..]).is_err());
    }

    #[test]
    fn context_pairs_basic() {
        let vocab = build_vocab(["a b"], 10).unwrap();
        let toks = tokenize("a b");
        let pairs = context_pairs(&toks, &vocab, 8, false);
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(pairs, vec![(a, b), (b, a)]);

        assert!(context_pairs(&tokenize("solo"), &vocab, 8, false).is_empty());
    }

    #[test]
    fn context_pairs_window_two_ordered_count() {
        // 5 tokens, window 2: positions 0..4, ordered pairs with |p-q| <= 2
        let vocab = build_vocab(["v w x y z"], 10).unwrap();
        let toks = tokenize("v w x y z");
        let pairs = context_pairs(&toks, &vocab, 2, false);
        assert_eq!(pairs.len(), 14);
    }

    #[test]
    fn oov_slot_handling() {
        let vocab = build_vocab(["a b"], 2).unwrap(); // only a, b in vocab
        let toks = tokenize("a x x x x x x x x b"); // 8 OOV tokens apart
        // dropped entirely: a and b become adjacent
        let dropped = context_pairs(&toks, &vocab, 1, false);
        assert_eq!(dropped.len(), 2);
        // consuming slots: too far apart for window 1
        let kept = context_pairs(&toks, &vocab, 1, true);
        assert!(kept.is_empty());
    }

    #[test]
    fn two_token_alternation_matches_two_node_oracle() {
        // "a b a b ...": the 2x2 system has a closed form. V is diagonal with
        // the pair participation rates; C is the two-node Laplacian.
        let doc = "a b ".repeat(50);
        let vocab = build_vocab([doc.as_str()], 2).unwrap();
        let model = train_word_smt([doc.as_str()], &vocab, 1, 1, 1e-9).unwrap();
        // adjacent tokens always differ, so the smallest generalized
        // eigenvalue direction separates them: embeddings of a and b have
        // cosine -1 (1-d embedding, opposite signs) or +1 if C had been zero
        let ca = embedding_column(&model, "a").unwrap()[0];
        let cb = embedding_column(&model, "b").unwrap()[0];
        // dense 2x2 oracle
        let n_pairs = model.table.count(0, 1) as f64;
        assert!(n_pairs > 0.0);
        // by symmetry V = diag(1/2, 1/2) after normalization; C full Laplacian
        // trailing eigenvector of Q = V^-1/2 C V^-1/2 with d_emb=1 is the
        // constant direction (eigenvalue 0): signs agree
        assert!(
            (ca.signum() == cb.signum()) && ca.abs() > 0.0,
            "expected constant leading dimension, got {ca} vs {cb}"
        );
        let cos = column_cosine(&model.embedding, 0, 1);
        approx::assert_abs_diff_eq!(cos, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_context_tokens_embed_together_without_cooccurring() {
        // u and v never co-occur but share identical context distributions
        let mut docs = Vec::new();
        for i in 0..120 {
            let ctx = format!("c{} c{}", i % 6, (i + 1) % 6);
            if i % 2 == 0 {
                docs.push(format!("{ctx} u {ctx}"));
            } else {
                docs.push(format!("{ctx} v {ctx}"));
            }
        }
        let refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let vocab = build_vocab(refs.iter().copied(), 100).unwrap();
        let model = train_word_smt(refs.iter().copied(), &vocab, 8, 3, 1e-9).unwrap();
        let (u, v) = (vocab.id("u").unwrap(), vocab.id("v").unwrap());
        assert_eq!(model.table.count(u, v), 0);
        let cos = column_cosine(&model.embedding, u, v);
        assert!(cos > 0.99, "cosine {cos}");
    }

    #[test]
    fn nearest_words_excludes_query_and_tops_ranking() {
        let doc = "red green red blue red green blue yellow red green";
        let vocab = build_vocab([doc], 10).unwrap();
        let model = train_word_smt([doc], &vocab, 2, 2, 1e-9).unwrap();
        let ranked = nearest_words(&model, "red", vocab.len() - 1).unwrap();
        assert_eq!(ranked.len(), vocab.len() - 1);
        assert!(ranked.iter().all(|(w, _)| w != "red"));
        for pair in ranked.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
        for (_, c) in &ranked {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(c));
        }
        assert!(matches!(
            nearest_words(&model, "absent", 3),
            Err(SmtError::UnknownToken(_))
        ));
    }

    #[test]
    fn cooccurrence_report_counts_match_table() {
        let doc = "a b c a b a c c b a";
        let vocab = build_vocab([doc], 10).unwrap();
        let model = train_word_smt([doc], &vocab, 2, 2, 1e-9).unwrap();
        let rows = cooccurrence_vs_similarity(&model, "a", 2).unwrap();
        assert!(rows.len() <= 4);
        let id = vocab.id("a").unwrap();
        for row in &rows {
            let other = vocab.id(&row.word).unwrap();
            assert_eq!(row.cooccurrences, model.table.count(id, other));
        }
        // a word co-occurring with exactly one other appears in both lists
        let doc2 = "x y";
        let vocab2 = build_vocab([doc2], 10).unwrap();
        let model2 = train_word_smt([doc2], &vocab2, 1, 1, 1e-9).unwrap();
        let rows2 = cooccurrence_vs_similarity(&model2, "x", 3).unwrap();
        assert!(rows2.iter().filter(|r| r.word == "y").count() == 2);
    }

    #[test]
    fn sentence_shuffle_leaves_cosines_unchanged() {
        let sentences = [
            "the cat sat on the mat",
            "a dog chased the cat",
            "birds fly over the mat",
            "the dog and the cat nap",
        ];
        let vocab = build_vocab(sentences.iter().copied(), 50).unwrap();
        let fwd = train_word_smt(sentences.iter().copied(), &vocab, 3, 3, 1e-9).unwrap();
        let shuffled = [sentences[2], sentences[0], sentences[3], sentences[1]];
        let rev = train_word_smt(shuffled.iter().copied(), &vocab, 3, 3, 1e-9).unwrap();
        for a in 0..vocab.len() as u32 {
            for b in 0..vocab.len() as u32 {
                let ca = column_cosine(&fwd.embedding, a, b);
                let cb = column_cosine(&rev.embedding, a, b);
                approx::assert_abs_diff_eq!(ca, cb, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn word2vec_export_format() {
        let doc = "one two three one two one";
        let vocab = build_vocab([doc], 10).unwrap();
        let model = train_word_smt([doc], &vocab, 2, 2, 1e-9).unwrap();
        let mut buf = Vec::new();
        write_word2vec_text(&model, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("{} 2", vocab.len()));
        let first: Vec<&str> = lines.next().unwrap().split(' ').collect();
        assert_eq!(first[0], "one");
        assert_eq!(first.len(), 3);
        assert!(first[1].parse::<f64>().is_ok());
    }
}
