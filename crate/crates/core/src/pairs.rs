//! Quality-sensitivity classification and preference pair construction.
//!
//! Every pair is conditioned on the undegraded (HQ) context only: the
//! degraded view exists solely to produce the rejected response.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, QaInstance, ResponseRecord};
use crate::jsonl;

#[derive(Debug, thiserror::Error)]
pub enum PairsError {
    #[error("record {0} is not graded")]
    Ungraded(String),
    #[error("cannot classify records of different instances ({hq} vs {lq})")]
    InstanceMismatch { hq: String, lq: String },
    #[error("instance `{instance_id}` has no `{view}` record")]
    MissingCounterpart { instance_id: String, view: String },
    #[error("instance `{0}` is not in the instance manifest")]
    UnknownInstance(String),
    #[error("instance `{instance_id}` has {got} HQ sample(s); at least 2 are required")]
    TooFewSamples { instance_id: String, got: usize },
    #[error("preferred and dispreferred record sets share no instance")]
    EmptyJoin,
    #[error("preferred and dispreferred records must be all graded or all ungraded")]
    InconsistentGrading,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Correctness pattern of an instance across the HQ and LQ views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AlwaysCorrect,
    QualitySensitive,
    AlwaysWrong,
    ParadoxicallyRobust,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::AlwaysCorrect,
        Category::QualitySensitive,
        Category::AlwaysWrong,
        Category::ParadoxicallyRobust,
    ];

    pub fn from_flags(hq_correct: bool, lq_correct: bool) -> Self {
        match (hq_correct, lq_correct) {
            (true, true) => Category::AlwaysCorrect,
            (true, false) => Category::QualitySensitive,
            (false, false) => Category::AlwaysWrong,
            (false, true) => Category::ParadoxicallyRobust,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::AlwaysCorrect => "always_correct",
            Category::QualitySensitive => "quality_sensitive",
            Category::AlwaysWrong => "always_wrong",
            Category::ParadoxicallyRobust => "paradoxically_robust",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairMode {
    #[serde(rename = "VD_LF")]
    VdLf,
    #[serde(rename = "VD_LB")]
    VdLb,
    #[serde(rename = "HQ_VS_HQ")]
    HqVsHq,
    #[serde(rename = "CROSS_POLICY")]
    CrossPolicy,
}

impl PairMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairMode::VdLf => "VD_LF",
            PairMode::VdLb => "VD_LB",
            PairMode::HqVsHq => "HQ_VS_HQ",
            PairMode::CrossPolicy => "CROSS_POLICY",
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vd-lf" => Ok(PairMode::VdLf),
            "vd-lb" => Ok(PairMode::VdLb),
            "hq-vs-hq" => Ok(PairMode::HqVsHq),
            "cross" | "cross-policy" => Ok(PairMode::CrossPolicy),
            other => Err(format!("unknown pair mode `{other}`")),
        }
    }
}

/// One DPO training example in prompt/chosen/rejected layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub instance_id: String,
    pub prompt: String,
    /// Always the undegraded image.
    pub hq_image_path: String,
    pub chosen: String,
    pub rejected: String,
    pub mode: PairMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Drop pairs whose chosen and rejected texts are equal after trimming.
    pub dedup: bool,
    /// HQ-vs-HQ only: emit every correct × incorrect combination.
    pub all_combinations: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            dedup: true,
            all_combinations: false,
        }
    }
}

impl BuildOptions {
    fn keeps(&self, chosen: &str, rejected: &str) -> bool {
        !self.dedup || chosen.trim() != rejected.trim()
    }
}

/// Prompt and HQ image path per instance id.
#[derive(Debug, Clone, Default)]
pub struct InstanceTable {
    entries: HashMap<String, (String, String)>,
}

impl InstanceTable {
    pub fn new(instances: &[QaInstance]) -> Self {
        Self::with_image_paths(instances, |i| i.image_path.clone())
    }

    /// Like [`InstanceTable::new`] with rewritten image paths (for example,
    /// rebased onto the directory of the exported file).
    pub fn with_image_paths(
        instances: &[QaInstance],
        path: impl Fn(&QaInstance) -> String,
    ) -> Self {
        let entries = instances
            .iter()
            .map(|i| (i.id.clone(), (i.question.clone(), path(i))))
            .collect();
        Self { entries }
    }

    fn get(&self, id: &str) -> Result<(&str, &str), PairsError> {
        self.entries
            .get(id)
            .map(|(q, p)| (q.as_str(), p.as_str()))
            .ok_or_else(|| PairsError::UnknownInstance(id.to_string()))
    }
}

fn correctness(rec: &ResponseRecord) -> Result<bool, PairsError> {
    rec.correct
        .ok_or_else(|| PairsError::Ungraded(rec.key().to_string()))
}

/// Category of a graded (HQ, LQ) record pair.
pub fn classify(hq: &ResponseRecord, lq: &ResponseRecord) -> Result<Category, PairsError> {
    if hq.instance_id != lq.instance_id {
        return Err(PairsError::InstanceMismatch {
            hq: hq.instance_id.clone(),
            lq: lq.instance_id.clone(),
        });
    }
    Ok(Category::from_flags(correctness(hq)?, correctness(lq)?))
}

/// HQ and LQ responses of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecords {
    pub hq: ResponseRecord,
    pub lq: ResponseRecord,
}

impl PairedRecords {
    pub fn category(&self) -> Result<Category, PairsError> {
        classify(&self.hq, &self.lq)
    }

    fn category_if_graded(&self) -> Option<Category> {
        self.category().ok()
    }
}

/// Matches each instance's `hq_label` record with its `lq_label` record.
///
/// Instances are visited in first-appearance order; with several samples per
/// view the first one in file order is used. Instances with neither view are
/// ignored.
pub fn pair_views(
    records: &[ResponseRecord],
    hq_label: &str,
    lq_label: &str,
) -> Result<Vec<PairedRecords>, PairsError> {
    let mut order: Vec<&str> = Vec::new();
    let mut hq: HashMap<&str, &ResponseRecord> = HashMap::new();
    let mut lq: HashMap<&str, &ResponseRecord> = HashMap::new();
    for rec in records {
        let is_hq = rec.view_label == hq_label;
        if !is_hq && rec.view_label != lq_label {
            continue;
        }
        let id = rec.instance_id.as_str();
        if !hq.contains_key(id) && !lq.contains_key(id) {
            order.push(id);
        }
        let slot = if is_hq { &mut hq } else { &mut lq };
        slot.entry(id).or_insert(rec);
    }
    order
        .into_iter()
        .map(|id| match (hq.get(id), lq.get(id)) {
            (Some(h), Some(l)) => Ok(PairedRecords {
                hq: (*h).clone(),
                lq: (*l).clone(),
            }),
            (None, _) => Err(PairsError::MissingCounterpart {
                instance_id: id.to_string(),
                view: hq_label.to_string(),
            }),
            (_, None) => Err(PairsError::MissingCounterpart {
                instance_id: id.to_string(),
                view: lq_label.to_string(),
            }),
        })
        .collect()
}

fn make_pair(
    table: &InstanceTable,
    instance_id: &str,
    id_suffix: Option<String>,
    chosen: &str,
    rejected: &str,
    mode: PairMode,
    category: Option<Category>,
) -> Result<PreferencePair, PairsError> {
    let (prompt, image) = table.get(instance_id)?;
    let mut pair_id = format!("{instance_id}#{mode}");
    if let Some(s) = id_suffix {
        pair_id.push('#');
        pair_id.push_str(&s);
    }
    Ok(PreferencePair {
        pair_id,
        instance_id: instance_id.to_string(),
        prompt: prompt.to_string(),
        hq_image_path: image.to_string(),
        chosen: chosen.to_string(),
        rejected: rejected.to_string(),
        mode,
        category,
    })
}

/// Label-free pairs: HQ response preferred over LQ response for every instance.
pub fn build_vd_lf(
    paired: &[PairedRecords],
    table: &InstanceTable,
    opts: &BuildOptions,
) -> Result<Vec<PreferencePair>, PairsError> {
    paired
        .iter()
        .filter(|p| opts.keeps(&p.hq.text, &p.lq.text))
        .map(|p| {
            make_pair(
                table,
                &p.hq.instance_id,
                None,
                &p.hq.text,
                &p.lq.text,
                PairMode::VdLf,
                p.category_if_graded(),
            )
        })
        .collect()
}

/// Label-based pairs: only instances correct at HQ and wrong at LQ.
pub fn build_vd_lb(
    paired: &[PairedRecords],
    table: &InstanceTable,
    opts: &BuildOptions,
) -> Result<Vec<PreferencePair>, PairsError> {
    let mut out = Vec::new();
    for p in paired {
        if p.category()? != Category::QualitySensitive || !opts.keeps(&p.hq.text, &p.lq.text) {
            continue;
        }
        out.push(make_pair(
            table,
            &p.hq.instance_id,
            None,
            &p.hq.text,
            &p.lq.text,
            PairMode::VdLb,
            Some(Category::QualitySensitive),
        )?);
    }
    Ok(out)
}

/// Correct-vs-incorrect pairs among several graded HQ samples per instance.
///
/// Samples are indexed by their order in `samples`. By default the first
/// correct sample is chosen and the first incorrect one rejected.
pub fn build_hq_vs_hq(
    samples: &[ResponseRecord],
    table: &InstanceTable,
    opts: &BuildOptions,
) -> Result<Vec<PreferencePair>, PairsError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ResponseRecord>> = HashMap::new();
    for rec in samples {
        let id = rec.instance_id.as_str();
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(rec);
    }
    let mut out = Vec::new();
    for id in order {
        let group = &groups[id];
        if group.len() < 2 {
            return Err(PairsError::TooFewSamples {
                instance_id: id.to_string(),
                got: group.len(),
            });
        }
        let mut correct = Vec::new();
        let mut wrong = Vec::new();
        for (i, rec) in group.iter().enumerate() {
            if correctness(rec)? {
                correct.push(i);
            } else {
                wrong.push(i);
            }
        }
        let combos: Vec<(usize, usize)> = if opts.all_combinations {
            correct
                .iter()
                .flat_map(|&c| wrong.iter().map(move |&w| (c, w)))
                .collect()
        } else {
            correct
                .first()
                .zip(wrong.first())
                .map(|(&c, &w)| (c, w))
                .into_iter()
                .collect()
        };
        for (c, w) in combos {
            let (chosen, rejected) = (&group[c].text, &group[w].text);
            if !opts.keeps(chosen, rejected) {
                continue;
            }
            let suffix = opts.all_combinations.then(|| format!("{c}-{w}"));
            out.push(make_pair(
                table,
                id,
                suffix,
                chosen,
                rejected,
                PairMode::HqVsHq,
                None,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossPolicyJoin {
    pub pairs: Vec<PreferencePair>,
    /// Instances present in only one of the two record sets.
    pub skipped: usize,
}

/// Joins two policies' responses on instance id: `preferred` supplies the
/// chosen text, `dispreferred` the rejected one.
pub fn build_cross_policy(
    preferred: &[ResponseRecord],
    dispreferred: &[ResponseRecord],
    table: &InstanceTable,
    opts: &BuildOptions,
) -> Result<CrossPolicyJoin, PairsError> {
    let graded = preferred
        .iter()
        .chain(dispreferred)
        .filter(|r| r.correct.is_some())
        .count();
    let graded_all = graded == preferred.len() + dispreferred.len();
    if graded != 0 && !graded_all {
        return Err(PairsError::InconsistentGrading);
    }
    let mut b_index: HashMap<&str, &ResponseRecord> = HashMap::new();
    for r in dispreferred {
        b_index.entry(r.instance_id.as_str()).or_insert(r);
    }
    let mut seen_a: HashSet<&str> = HashSet::new();
    let mut pairs = Vec::new();
    let mut matched = 0usize;
    for a in preferred {
        if !seen_a.insert(a.instance_id.as_str()) {
            continue;
        }
        let Some(b) = b_index.get(a.instance_id.as_str()) else {
            continue;
        };
        matched += 1;
        if !opts.keeps(&a.text, &b.text) {
            continue;
        }
        let category = if graded_all {
            Some(classify(a, b)?)
        } else {
            None
        };
        pairs.push(make_pair(
            table,
            &a.instance_id,
            None,
            &a.text,
            &b.text,
            PairMode::CrossPolicy,
            category,
        )?);
    }
    if matched == 0 {
        return Err(PairsError::EmptyJoin);
    }
    let skipped = (seen_a.len() - matched) + (b_index.len() - matched);
    log::info!("cross-policy join: {matched} matched, {skipped} unmatched instance(s) skipped");
    Ok(CrossPolicyJoin { pairs, skipped })
}

/// Writes pairs sorted by `pair_id`, one JSON object per line.
pub fn export_dpo_jsonl(pairs: &[PreferencePair], path: &Path) -> Result<usize, PairsError> {
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut buf = String::new();
    for p in sorted {
        let line = jsonl::to_line(p).map_err(|e| CorpusError::InvalidRecord(e.to_string()))?;
        buf.push_str(&line);
        buf.push('\n');
    }
    corpus::replace_file(path, buf.as_bytes())?;
    Ok(pairs.len())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, PairsError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| PairsError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DecodeParams;

    fn rec(id: &str, view: &str, text: &str, correct: Option<bool>) -> ResponseRecord {
        ResponseRecord {
            instance_id: id.into(),
            view_label: view.into(),
            policy_id: "p".into(),
            decode: DecodeParams::default(),
            text: text.into(),
            token_count: 1,
            extracted_answer: None,
            correct,
        }
    }

    fn table(ids: &[&str]) -> InstanceTable {
        let instances: Vec<QaInstance> = ids
            .iter()
            .map(|id| QaInstance {
                id: id.to_string(),
                image_path: format!("images/{id}.png"),
                question: format!("q {id}"),
                gold_answer: Some("1".into()),
                source: None,
            })
            .collect();
        InstanceTable::new(&instances)
    }

    #[test]
    fn classification_table() {
        let c = |h, l| {
            classify(
                &rec("a", "hq", "x", Some(h)),
                &rec("a", "res:0.1", "y", Some(l)),
            )
            .unwrap()
        };
        assert_eq!(c(true, false), Category::QualitySensitive);
        assert_eq!(c(true, true), Category::AlwaysCorrect);
        assert_eq!(c(false, true), Category::ParadoxicallyRobust);
        assert_eq!(c(false, false), Category::AlwaysWrong);
        assert!(matches!(
            classify(
                &rec("a", "hq", "x", None),
                &rec("a", "res:0.1", "y", Some(true))
            ),
            Err(PairsError::Ungraded(_))
        ));
        assert!(matches!(
            classify(
                &rec("a", "hq", "x", Some(true)),
                &rec("b", "res:0.1", "y", Some(true))
            ),
            Err(PairsError::InstanceMismatch { .. })
        ));
    }

    #[test]
    fn pairing_requires_counterparts() {
        let recs = vec![
            rec("a", "hq", "1", None),
            rec("b", "res:0.1", "2", None),
            rec("a", "res:0.1", "3", None),
            rec("b", "hq", "4", None),
            rec("c", "blur:15:0", "5", None),
        ];
        let paired = pair_views(&recs, "hq", "res:0.1").unwrap();
        assert_eq!(paired.len(), 2);
        assert_eq!(
            (paired[0].hq.text.as_str(), paired[0].lq.text.as_str()),
            ("1", "3")
        );
        assert_eq!(
            (paired[1].hq.text.as_str(), paired[1].lq.text.as_str()),
            ("4", "2")
        );
        let err = pair_views(&recs[..2], "hq", "res:0.1").unwrap_err();
        assert!(
            matches!(err, PairsError::MissingCounterpart { ref view, .. } if view == "res:0.1")
        );
    }

    #[test]
    fn vd_lf_takes_every_instance() {
        let recs = vec![
            rec("a", "hq", "good a", None),
            rec("a", "lq", "bad a", None),
            rec("b", "hq", "same", None),
            rec("b", "lq", " same ", None),
        ];
        let paired = pair_views(&recs, "hq", "lq").unwrap();
        let t = table(&["a", "b"]);
        let no_dedup = BuildOptions {
            dedup: false,
            ..Default::default()
        };
        let all = build_vd_lf(&paired, &t, &no_dedup).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].chosen, "good a");
        assert_eq!(all[0].pair_id, "a#VD_LF");
        assert_eq!(all[0].hq_image_path, "images/a.png");
        assert_eq!(all[0].category, None);
        let deduped = build_vd_lf(&paired, &t, &BuildOptions::default()).unwrap();
        assert_eq!(deduped.len(), 1);
    }

    #[test]
    fn vd_lb_filters_and_requires_grades() {
        let recs = vec![
            rec("a", "hq", "a+", Some(true)),
            rec("a", "lq", "a-", Some(false)),
            rec("b", "hq", "b+", Some(true)),
            rec("b", "lq", "b+2", Some(true)),
            rec("c", "hq", "c-", Some(false)),
            rec("c", "lq", "c+", Some(true)),
        ];
        let paired = pair_views(&recs, "hq", "lq").unwrap();
        let t = table(&["a", "b", "c"]);
        let lb = build_vd_lb(&paired, &t, &BuildOptions::default()).unwrap();
        assert_eq!(lb.len(), 1);
        assert_eq!(
            (lb[0].chosen.as_str(), lb[0].rejected.as_str()),
            ("a+", "a-")
        );
        assert_eq!(lb[0].category, Some(Category::QualitySensitive));

        let mut ungraded = recs.clone();
        ungraded[3].correct = None;
        let paired = pair_views(&ungraded, "hq", "lq").unwrap();
        let err = build_vd_lb(&paired, &t, &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, PairsError::Ungraded(ref k) if k.contains("(b, lq")));
    }

    #[test]
    fn hq_vs_hq_selection() {
        let recs = vec![
            rec("a", "hq", "w1", Some(false)),
            rec("a", "hq", "c2", Some(true)),
            rec("a", "hq", "w3", Some(false)),
            rec("b", "hq", "c1", Some(true)),
            rec("b", "hq", "c2", Some(true)),
        ];
        let t = table(&["a", "b"]);
        let pairs = build_hq_vs_hq(&recs, &t, &BuildOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            (pairs[0].chosen.as_str(), pairs[0].rejected.as_str()),
            ("c2", "w1")
        );
        assert_eq!(pairs[0].mode, PairMode::HqVsHq);

        let all = BuildOptions {
            all_combinations: true,
            ..Default::default()
        };
        let pairs = build_hq_vs_hq(&recs, &t, &all).unwrap();
        let ids: Vec<_> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["a#HQ_VS_HQ#1-0", "a#HQ_VS_HQ#1-2"]);

        assert!(matches!(
            build_hq_vs_hq(&recs[3..4], &t, &BuildOptions::default()),
            Err(PairsError::TooFewSamples { got: 1, .. })
        ));
    }

    #[test]
    fn cross_policy_join() {
        let mut a: Vec<_> = ["1", "2", "3"]
            .iter()
            .map(|i| rec(i, "hq", &format!("A{i}"), None))
            .collect();
        let mut b: Vec<_> = ["2", "3", "4"]
            .iter()
            .map(|i| rec(i, "hq", &format!("B{i}"), None))
            .collect();
        a.iter_mut().for_each(|r| r.policy_id = "big".into());
        b.iter_mut().for_each(|r| r.policy_id = "small".into());
        let t = table(&["1", "2", "3", "4"]);
        let join = build_cross_policy(&a, &b, &t, &BuildOptions::default()).unwrap();
        assert_eq!(join.pairs.len(), 2);
        assert_eq!(join.skipped, 2);
        assert!(join
            .pairs
            .iter()
            .all(|p| p.chosen.starts_with('A') && p.rejected.starts_with('B')));

        assert!(matches!(
            build_cross_policy(&a[..1], &b, &t, &BuildOptions::default()),
            Err(PairsError::EmptyJoin)
        ));
        a[0].correct = Some(true);
        assert!(matches!(
            build_cross_policy(&a, &b, &t, &BuildOptions::default()),
            Err(PairsError::InconsistentGrading)
        ));
    }

    #[test]
    fn unknown_instance_is_reported() {
        let recs = vec![rec("z", "hq", "x", None), rec("z", "lq", "y", None)];
        let paired = pair_views(&recs, "hq", "lq").unwrap();
        assert!(matches!(
            build_vd_lf(&paired, &table(&["a"]), &BuildOptions::default()),
            Err(PairsError::UnknownInstance(_))
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("vd-lf".parse::<PairMode>().unwrap(), PairMode::VdLf);
        assert_eq!("VD_LB".parse::<PairMode>().unwrap(), PairMode::VdLb);
        assert_eq!("hq-vs-hq".parse::<PairMode>().unwrap(), PairMode::HqVsHq);
        assert_eq!("cross".parse::<PairMode>().unwrap(), PairMode::CrossPolicy);
        assert!("dpo".parse::<PairMode>().is_err());
    }
}
