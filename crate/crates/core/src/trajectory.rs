// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-turn agent trajectories.
//!
//! A trajectory is a list of turns, each a list of role-tagged segments
//! (user, thought, action, observation, assistant). The model sees turn `r`
//! as the cumulative transcript of turns `1..=r`; [`TokenizedTrajectory`]
//! keeps the cumulative lengths so per-turn prefixes can be cut directly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First id of the role-marker tokens; byte payloads use ids `0..=255`.
pub const MARKER_BASE: u32 = 256;
/// Smallest vocabulary that holds every byte plus the five markers.
pub const MIN_VOCAB: usize = 261;

/// Task family a trajectory is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    DeepResearch,
    CodeGeneration,
    TabularProcessing,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::DeepResearch, Domain::CodeGeneration, Domain::TabularProcessing];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::DeepResearch => "deep_research",
            Domain::CodeGeneration => "code_generation",
            Domain::TabularProcessing => "tabular_processing",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown domain `{s}`")))
    }
}

/// Role of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    User,
    Thought,
    Action,
    Observation,
    Assistant,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::User,
        SegmentKind::Thought,
        SegmentKind::Action,
        SegmentKind::Observation,
        SegmentKind::Assistant,
    ];

    /// Token id of this role's marker.
    pub fn marker(self) -> u32 {
        MARKER_BASE + self as u32
    }

    pub fn from_marker(token: u32) -> Option<Self> {
        token
            .checked_sub(MARKER_BASE)
            .and_then(|i| Self::ALL.get(i as usize).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    /// 1-based turn number.
    pub index: usize,
    pub segments: Vec<Segment>,
}

/// A complete user-agent transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub domain: Domain,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    /// Checks that there is at least one turn, indices run 1..=R and every
    /// turn has a segment.
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Schema {
                path: "turns".into(),
                message: "a trajectory needs at least one turn".into(),
            });
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i + 1 {
                return Err(Error::Schema {
                    path: format!("turns[{i}].index"),
                    message: format!("expected turn index {}, found {}", i + 1, turn.index),
                });
            }
            if turn.segments.is_empty() {
                return Err(Error::Schema {
                    path: format!("turns[{i}].segments"),
                    message: "a turn needs at least one segment".into(),
                });
            }
        }
        Ok(())
    }

    pub fn n_turns(&self) -> usize {
        self.turns.len()
    }

    /// Parses and validates trajectory JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let traj: Trajectory = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        traj.validate()?;
        Ok(traj)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads one trajectory file.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Trajectory::from_json(&text)
}

/// Writes one trajectory file (pretty JSON, UTF-8).
pub fn save_trajectory(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    trajectory.validate()?;
    let mut text = trajectory.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A token range covering one segment (marker included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

/// Token stream with turn and segment bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTrajectory {
    pub tokens: Vec<u32>,
    /// `n_r`: cumulative token count at the end of turn `r` (index `r - 1`).
    pub turn_offsets: Vec<usize>,
    pub segment_spans: Vec<SegmentSpan>,
}

impl TokenizedTrajectory {
    pub fn n_turns(&self) -> usize {
        self.turn_offsets.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check_turn(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.n_turns() {
            return Err(Error::Param(format!("turn {r} outside 1..={}", self.n_turns())));
        }
        Ok(())
    }

    /// `n_r`.
    pub fn turn_len(&self, r: usize) -> Result<usize> {
        self.check_turn(r)?;
        Ok(self.turn_offsets[r - 1])
    }

    /// The first `n_r` tokens: the model input at turn `r`.
    pub fn prefix_for_turn(&self, r: usize) -> Result<&[u32]> {
        Ok(&self.tokens[..self.turn_len(r)?])
    }

    /// Last token position of turn `r`.
    pub fn boundary(&self, r: usize) -> Result<usize> {
        Ok(self.turn_len(r)? - 1)
    }

    /// Boundary positions of turns `1..=r`.
    pub fn boundaries_through(&self, r: usize) -> Result<Vec<usize>> {
        self.check_turn(r)?;
        Ok(self.turn_offsets[..r].iter().map(|&n| n - 1).collect())
    }

    /// Rebuilds the trajectory; inverse of [`tokenize`] on payloads.
    pub fn detokenize(&self, domain: Domain) -> Result<Trajectory> {
        let mut turns: Vec<Turn> = Vec::with_capacity(self.n_turns());
        let mut spans = self.segment_spans.iter().peekable();
        for (i, &end) in self.turn_offsets.iter().enumerate() {
            let mut segments = Vec::new();
            while let Some(span) = spans.next_if(|s| s.end <= end) {
                let payload: Vec<u8> = self.tokens[span.start + 1..span.end]
                    .iter()
                    .map(|&t| u8::try_from(t).map_err(|_| Error::Input(format!("token {t} inside a payload"))))
                    .collect::<Result<_>>()?;
                let text =
                    String::from_utf8(payload).map_err(|e| Error::Input(format!("payload is not UTF-8: {e}")))?;
                segments.push(Segment::new(span.kind, text));
            }
            turns.push(Turn { index: i + 1, segments });
        }
        let traj = Trajectory {
            domain,
            metadata: BTreeMap::new(),
            turns,
        };
        traj.validate()?;
        Ok(traj)
    }
}

/// Splits a raw token stream into `(kind, payload bytes)` segments.
pub fn split_segments(tokens: &[u32]) -> Result<Vec<(SegmentKind, Vec<u8>)>> {
    let mut out: Vec<(SegmentKind, Vec<u8>)> = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if let Some(kind) = SegmentKind::from_marker(t) {
            out.push((kind, Vec::new()));
        } else {
            let byte =
                u8::try_from(t).map_err(|_| Error::Input(format!("token {t} is neither a byte nor a marker")))?;
            out.last_mut()
                .ok_or_else(|| Error::Input(format!("payload byte at position {i} precedes any marker")))?
                .1
                .push(byte);
        }
    }
    Ok(out)
}

/// Byte-level encoding: each segment is its role marker followed by the
/// UTF-8 bytes of its text.
pub fn tokenize(trajectory: &Trajectory, vocab_size: usize) -> Result<TokenizedTrajectory> {
    if vocab_size < MIN_VOCAB {
        return Err(Error::Param(format!(
            "vocabulary of {vocab_size} cannot hold 256 bytes and 5 role markers"
        )));
    }
    trajectory.validate()?;
    let mut tokens = Vec::new();
    let mut turn_offsets = Vec::with_capacity(trajectory.n_turns());
    let mut segment_spans = Vec::new();
    for turn in &trajectory.turns {
        for seg in &turn.segments {
            let start = tokens.len();
            tokens.push(seg.kind.marker());
            tokens.extend(seg.text.bytes().map(u32::from));
            segment_spans.push(SegmentSpan {
                kind: seg.kind,
                start,
                end: tokens.len(),
            });
        }
        turn_offsets.push(tokens.len());
    }
    Ok(TokenizedTrajectory {
        tokens,
        turn_offsets,
        segment_spans,
    })
}

struct Vocabulary {
    artifact_stem: &'static [&'static str],
    extension: &'static str,
    topics: &'static [&'static str],
    verbs: &'static [&'static str],
    tools: &'static [&'static str],
}

fn vocabulary(domain: Domain) -> Vocabulary {
    match domain {
        Domain::DeepResearch => Vocabulary {
            artifact_stem: &["brief", "survey", "memo", "digest"],
            extension: "md",
            topics: &[
                "grid-scale battery storage",
                "open-source LLM licensing",
                "semiconductor export controls",
                "urban heat islands",
                "carbon capture pricing",
            ],
            verbs: &["compare", "summarize", "rank", "cross-check"],
            tools: &["web_search", "fetch_page", "extract_quotes"],
        },
        Domain::CodeGeneration => Vocabulary {
            artifact_stem: &["parser", "scheduler", "cache", "router"],
            extension: "py",
            topics: &[
                "rate limiting",
                "retry with backoff",
                "config validation",
                "pagination",
                "log rotation",
            ],
            verbs: &["refactor", "extend", "harden", "profile"],
            tools: &["write_file", "run_tests", "grep_repo"],
        },
        Domain::TabularProcessing => Vocabulary {
            artifact_stem: &["sales", "inventory", "survey", "ledger"],
            extension: "csv",
            topics: &[
                "quarterly revenue by region",
                "churn by signup cohort",
                "stock-outs per warehouse",
                "late invoices per vendor",
                "median basket size",
            ],
            verbs: &["aggregate", "pivot", "filter", "join"],
            tools: &["read_table", "run_sql", "plot_column"],
        },
    }
}

fn mint(rng: &mut ChaCha8Rng, v: &Vocabulary) -> String {
    let stem = v.artifact_stem.choose(rng).expect("nonempty");
    format!("{stem}_{:04x}.{}", rng.random_range(0..0x10000u32), v.extension)
}

fn first_turn(domain: Domain, rng: &mut ChaCha8Rng, v: &Vocabulary, artifact: &str) -> Vec<Segment> {
    let topic = v.topics.choose(rng).expect("nonempty");
    let verb = v.verbs.choose(rng).expect("nonempty");
    let tool = v.tools.choose(rng).expect("nonempty");
    let k = rng.random_range(3..9);
    let (user, action, observation) = match domain {
        Domain::DeepResearch => (
            format!("Research {topic} and {verb} the {k} strongest sources. Save findings to {artifact}."),
            format!("{tool}(query=\"{topic} {verb}\", top_k={k}, save_to=\"{artifact}\")"),
            format!("{k} results stored in {artifact}; 2 paywalled, {} cite the same dataset.", k - 2),
        ),
        Domain::CodeGeneration => (
            format!("Write a module {artifact} that implements {topic}. Expose one entry point and keep it under {k}0 lines."),
            format!("{tool}(path=\"{artifact}\", content=\"def apply(items, limit={k}):\\n    return items[:limit]\")"),
            format!("Wrote {artifact} ({k}1 bytes). Lint: 0 errors, {} warnings.", k % 3),
        ),
        Domain::TabularProcessing => (
            format!("Load the raw export and {verb} it into {artifact} showing {topic}. Drop rows with null keys."),
            format!("{tool}(source=\"export.xlsx\", sql=\"SELECT region, SUM(amount) FROM t GROUP BY region\", out=\"{artifact}\")"),
            format!("{artifact}: {k} columns, {}00 rows, {} nulls removed.", k + 1, k * 7),
        ),
    };
    vec![
        Segment::new(SegmentKind::User, user),
        Segment::new(
            SegmentKind::Thought,
            format!("The task is to {verb} {topic}. I will use {tool} first and keep the result in {artifact} for later turns."),
        ),
        Segment::new(SegmentKind::Action, action),
        Segment::new(SegmentKind::Observation, observation),
        Segment::new(
            SegmentKind::Assistant,
            format!("Done: {artifact} now holds the first pass on {topic}. Ask for follow-ups that build on it."),
        ),
    ]
}

fn later_turn(
    domain: Domain,
    r: usize,
    rng: &mut ChaCha8Rng,
    v: &Vocabulary,
    root: &str,
    prev: &str,
    fresh: &str,
) -> Vec<Segment> {
    let verb = v.verbs.choose(rng).expect("nonempty");
    let tool = v.tools.choose(rng).expect("nonempty");
    let topic = v.topics.choose(rng).expect("nonempty");
    let n = rng.random_range(2..7);
    let (user, action, observation) = match domain {
        Domain::DeepResearch => (
            format!("Turn {r}: {verb} what {root} says against {prev} and add evidence on {topic}. Write the merge to {fresh}."),
            format!("{tool}(inputs=[\"{root}\", \"{prev}\"], focus=\"{topic}\", out=\"{fresh}\")"),
            format!("{fresh} drafted; {n} claims in {root} conflict with {prev}, {} confirmed.", n + 3),
        ),
        Domain::CodeGeneration => (
            format!("Turn {r}: {verb} {root} to support {topic}, reuse the helpers from {prev}, and add tests in {fresh}."),
            format!("{tool}(target=\"{fresh}\", imports=[\"{root}\", \"{prev}\"])"),
            format!("{} passed, {n} failed in {fresh}; traceback points at {root} line {}.", n * 4, 10 + n),
        ),
        Domain::TabularProcessing => (
            format!("Turn {r}: {verb} {root} with {prev} on the shared key and report {topic}. Save as {fresh}."),
            format!("{tool}(left=\"{root}\", right=\"{prev}\", on=\"id\", out=\"{fresh}\")"),
            format!("{fresh}: {n}0 rows matched, {n} unmatched keys from {prev}; totals agree with {root}."),
        ),
    };
    vec![
        Segment::new(SegmentKind::User, user),
        Segment::new(
            SegmentKind::Thought,
            format!("{root} from turn 1 and {prev} are both needed. The {n} mismatches must be fixed before {fresh} is trusted."),
        ),
        Segment::new(SegmentKind::Action, action),
        Segment::new(SegmentKind::Observation, observation),
        Segment::new(
            SegmentKind::Assistant,
            format!("Updated {fresh}, building on {root} and {prev}. Remaining issues: {n}."),
        ),
    ]
}

/// Deterministic template trajectory. Turn 1 mints an artifact name that
/// every later turn refers back to, together with the previous turn's
/// artifact.
pub fn synthesize(domain: Domain, n_turns: usize, seed: u64) -> Result<Trajectory> {
    if n_turns == 0 {
        return Err(Error::Param("n_turns must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((domain as u64 + 1) << 56));
    let v = vocabulary(domain);
    let root = mint(&mut rng, &v);
    let mut turns = vec![Turn {
        index: 1,
        segments: first_turn(domain, &mut rng, &v, &root),
    }];
    let mut prev = root.clone();
    for r in 2..=n_turns {
        let fresh = mint(&mut rng, &v);
        turns.push(Turn {
            index: r,
            segments: later_turn(domain, r, &mut rng, &v, &root, &prev, &fresh),
        });
        prev = fresh;
    }
    let metadata = BTreeMap::from([
        ("generator".to_string(), "template".to_string()),
        ("root_artifact".to_string(), root),
        ("seed".to_string(), seed.to_string()),
    ]);
    Ok(Trajectory {
        domain,
        metadata,
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_segment_turns(payloads: &[&str]) -> Trajectory {
        Trajectory {
            domain: Domain::CodeGeneration,
            metadata: BTreeMap::new(),
            turns: payloads
                .iter()
                .enumerate()
                .map(|(i, p)| Turn {
                    index: i + 1,
                    segments: vec![Segment::new(SegmentKind::User, *p)],
                })
                .collect(),
        }
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize(&one_segment_turns(&[""]), 512).unwrap();
        assert_eq!(t.tokens, vec![SegmentKind::User.marker()]);
        assert_eq!(t.turn_offsets, vec![1]);

        let t = tokenize(&one_segment_turns(&["abc", "defg"]), 512).unwrap();
        assert_eq!(t.turn_offsets, vec![4, 9]);
        assert!(matches!(
            tokenize(&one_segment_turns(&["x"]), 260),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn spans_tile_the_stream() {
        let traj = synthesize(Domain::TabularProcessing, 3, 1).unwrap();
        let t = tokenize(&traj, 512).unwrap();
        let mut cursor = 0;
        for s in &t.segment_spans {
            assert_eq!(s.start, cursor);
            assert!(s.end > s.start);
            cursor = s.end;
        }
        assert_eq!(cursor, t.len());
        assert_eq!(*t.turn_offsets.last().unwrap(), t.len());
    }

    #[test]
    fn prefixes_grow_strictly() {
        let traj = synthesize(Domain::DeepResearch, 4, 9).unwrap();
        let t = tokenize(&traj, 512).unwrap();
        assert_eq!(t.prefix_for_turn(4).unwrap(), t.tokens.as_slice());
        assert_eq!(t.prefix_for_turn(1).unwrap().len(), t.turn_offsets[0]);
        for r in 1..4 {
            assert!(t.prefix_for_turn(r).unwrap().len() < t.prefix_for_turn(r + 1).unwrap().len());
        }
        assert!(t.prefix_for_turn(0).is_err());
        assert!(t.prefix_for_turn(5).is_err());
        assert_eq!(
            t.boundaries_through(2).unwrap(),
            vec![t.turn_offsets[0] - 1, t.turn_offsets[1] - 1]
        );
    }

    #[test]
    fn synthesize_is_deterministic_and_reuses_artifacts() {
        let a = synthesize(Domain::CodeGeneration, 4, 7).unwrap();
        let b = synthesize(Domain::CodeGeneration, 4, 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let root = &a.metadata["root_artifact"];
        assert!(a.turns[0].segments[0].text.contains(root.as_str()));
        for turn in &a.turns[1..] {
            assert!(turn.segments.iter().any(|s| s.text.contains(root.as_str())));
        }
        assert_ne!(a, synthesize(Domain::CodeGeneration, 4, 8).unwrap());
    }

    #[test]
    fn single_turn_has_one_full_cycle() {
        let t = synthesize(Domain::DeepResearch, 1, 3).unwrap();
        assert_eq!(t.turns.len(), 1);
        let kinds: Vec<SegmentKind> = t.turns[0].segments.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, SegmentKind::ALL.to_vec());
        assert!(synthesize(Domain::DeepResearch, 0, 3).is_err());
        assert!("web_browsing".parse::<Domain>().is_err());
    }

    #[test]
    fn json_round_trip_and_schema_errors() {
        let t = synthesize(Domain::TabularProcessing, 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        save_trajectory(&t, &path).unwrap();
        assert_eq!(load_trajectory(&path).unwrap(), t);

        let err = Trajectory::from_json(r#"{"domain": "code_generation", "metadata": {}}"#).unwrap_err();
        assert!(err.to_string().contains("turns"), "{err}");

        let bad = r#"{"domain": "code_generation", "turns": [{"index": 1, "segments": [{"kind": "reflection", "text": "x"}]}]}"#;
        let err = Trajectory::from_json(bad).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("reflection") && msg.contains("turns[0].segments[0].kind"),
            "{msg}"
        );

        let gap =
            r#"{"domain": "code_generation", "turns": [{"index": 2, "segments": [{"kind": "user", "text": "x"}]}]}"#;
        assert!(matches!(Trajectory::from_json(gap), Err(Error::Schema { .. })));
    }

    #[test]
    fn detokenize_inverts_tokenize() {
        let t = synthesize(Domain::CodeGeneration, 3, 2).unwrap();
        let tok = tokenize(&t, 512).unwrap();
        let back = tok.detokenize(t.domain).unwrap();
        assert_eq!(back.turns, t.turns);
        assert_eq!(tokenize(&back, 512).unwrap(), tok);
    }

    proptest! {
        #[test]
        fn tokenization_is_injective_on_payloads(
            segs in prop::collection::vec((0usize..5, "[ -~é]{0,12}"), 1..8)
        ) {
            let traj = Trajectory {
                domain: Domain::DeepResearch,
                metadata: BTreeMap::new(),
                turns: vec![Turn {
                    index: 1,
                    segments: segs.iter().map(|(k, s)| Segment::new(SegmentKind::ALL[*k], s.clone())).collect(),
                }],
            };
            let tok = tokenize(&traj, 300).unwrap();
            let split = split_segments(&tok.tokens).unwrap();
            prop_assert_eq!(split.len(), segs.len());
            for ((kind, bytes), (k, s)) in split.iter().zip(&segs) {
                prop_assert_eq!(*kind, SegmentKind::ALL[*k]);
                prop_assert_eq!(bytes.as_slice(), s.as_bytes());
            }
        }
    }
}
