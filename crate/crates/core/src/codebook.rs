//! Branching codebook: questions, options and the rules that reveal
//! follow-up questions, plus validation of annotation records against it.
//!
//! A codebook is a small directed graph. Questions are nodes; a
//! [`BranchRule`] is an edge from a question to a follow-up that is asked
//! only when one of the listed options was selected. Every question that is
//! not the target of a rule is asked unconditionally. The first question in
//! document order is the root of the flow.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The codebook shipped with the crate (nine feature groups, 35 labels).
pub const CANONICAL_CODEBOOK_JSON: &str = include_str!("../assets/codebook.json");

/// Number of annotation labels in the canonical codebook.
pub const CANONICAL_LABEL_COUNT: usize = 35;

/// Per-question selections: question id to the set of chosen option ids.
pub type Selections = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodebookError {
    #[error("malformed codebook document: {0}")]
    MalformedDocument(String),
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("cyclic branching: {0}")]
    CyclicBranching(String),
    #[error("expected {expected} option labels, found {found}")]
    WrongOptionCount { expected: usize, found: usize },
    #[error("unknown question id `{0}`")]
    UnknownQuestionId(String),
    #[error("unknown option `{option}` for question `{question}`")]
    UnknownOptionId { question: String, option: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    /// Exactly one option must be chosen.
    Exclusive,
    /// One or more options may be chosen.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub id: String,
    pub label: String,
    pub feature_key: String,
    /// A "none of the above" style option: within a multi question it may
    /// not be combined with any sibling.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub kind: QuestionKind,
    pub feature_group: String,
    pub options: Vec<AnswerOption>,
}

impl Question {
    pub fn option(&self, id: &str) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.id == id)
    }

    pub fn option_index(&self, id: &str) -> Option<usize> {
        self.options.iter().position(|o| o.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchRule {
    pub when_question: String,
    pub when_option_any_of: BTreeSet<String>,
    pub then_ask: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub id: String,
    pub name: String,
    /// Where the group's values come from when they are not annotated
    /// (e.g. `"ocr"` for word counts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// One annotator's label selections for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator_id: String,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub selections: Selections,
}

#[derive(Debug, Deserialize)]
struct CodebookDocument {
    version: String,
    #[serde(default)]
    feature_groups: Vec<FeatureGroup>,
    questions: Vec<Question>,
    #[serde(default)]
    rules: Vec<BranchRule>,
}

/// A validated, immutable codebook.
#[derive(Debug, Clone, Serialize)]
pub struct Codebook {
    version: String,
    feature_groups: Vec<FeatureGroup>,
    questions: Vec<Question>,
    rules: Vec<BranchRule>,
    #[serde(skip)]
    question_index: HashMap<String, usize>,
    #[serde(skip)]
    conditional: HashSet<String>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.feature_groups == other.feature_groups
            && self.questions == other.questions
            && self.rules == other.rules
    }
}

/// Parses and validates a codebook document.
pub fn load_codebook(document: &str) -> Result<Codebook, CodebookError> {
    let doc: CodebookDocument = serde_json::from_str(document)
        .map_err(|e| CodebookError::MalformedDocument(e.to_string()))?;
    Codebook::from_document(doc)
}

/// Like [`load_codebook`], additionally requiring the canonical label count.
pub fn load_canonical_codebook(document: &str) -> Result<Codebook, CodebookError> {
    let cb = load_codebook(document)?;
    let found = cb.option_count();
    if found != CANONICAL_LABEL_COUNT {
        return Err(CodebookError::WrongOptionCount {
            expected: CANONICAL_LABEL_COUNT,
            found,
        });
    }
    Ok(cb)
}

impl Codebook {
    /// The codebook bundled with the crate.
    pub fn canonical() -> Codebook {
        load_canonical_codebook(CANONICAL_CODEBOOK_JSON).expect("bundled codebook is valid")
    }

    fn from_document(doc: CodebookDocument) -> Result<Codebook, CodebookError> {
        if doc.questions.is_empty() {
            return Err(CodebookError::MalformedDocument("no questions".into()));
        }

        let mut question_index = HashMap::new();
        let mut feature_keys = HashSet::new();
        for (i, q) in doc.questions.iter().enumerate() {
            if q.id.is_empty() {
                return Err(CodebookError::MalformedDocument(format!(
                    "question #{} has an empty id",
                    i + 1
                )));
            }
            if question_index.insert(q.id.clone(), i).is_some() {
                return Err(CodebookError::DuplicateId {
                    kind: "question",
                    id: q.id.clone(),
                });
            }
            if q.options.is_empty() {
                return Err(CodebookError::MalformedDocument(format!(
                    "question `{}` has no options",
                    q.id
                )));
            }
            let mut option_ids = HashSet::new();
            for o in &q.options {
                if o.id.is_empty() || o.feature_key.is_empty() {
                    return Err(CodebookError::MalformedDocument(format!(
                        "question `{}` has an option with an empty id or feature key",
                        q.id
                    )));
                }
                if !option_ids.insert(o.id.as_str()) {
                    return Err(CodebookError::DuplicateId {
                        kind: "option",
                        id: format!("{}.{}", q.id, o.id),
                    });
                }
                if !feature_keys.insert(o.feature_key.as_str()) {
                    return Err(CodebookError::DuplicateId {
                        kind: "feature key",
                        id: o.feature_key.clone(),
                    });
                }
            }
        }

        let feature_groups = if doc.feature_groups.is_empty() {
            let mut seen = Vec::<String>::new();
            for q in &doc.questions {
                if !seen.contains(&q.feature_group) {
                    seen.push(q.feature_group.clone());
                }
            }
            seen.into_iter()
                .map(|id| FeatureGroup {
                    name: id.clone(),
                    id,
                    source: None,
                })
                .collect()
        } else {
            let mut ids = HashSet::new();
            for g in &doc.feature_groups {
                if !ids.insert(g.id.as_str()) {
                    return Err(CodebookError::DuplicateId {
                        kind: "feature group",
                        id: g.id.clone(),
                    });
                }
            }
            if let Some(q) = doc
                .questions
                .iter()
                .find(|q| !ids.contains(q.feature_group.as_str()))
            {
                return Err(CodebookError::MalformedDocument(format!(
                    "question `{}` names undeclared feature group `{}`",
                    q.id, q.feature_group
                )));
            }
            doc.feature_groups
        };

        let root = &doc.questions[0].id;
        let mut conditional = HashSet::new();
        for rule in &doc.rules {
            let Some(&wi) = question_index.get(&rule.when_question) else {
                return Err(CodebookError::MalformedDocument(format!(
                    "rule references unknown question `{}`",
                    rule.when_question
                )));
            };
            if !question_index.contains_key(&rule.then_ask) {
                return Err(CodebookError::MalformedDocument(format!(
                    "rule asks unknown question `{}`",
                    rule.then_ask
                )));
            }
            if rule.when_option_any_of.is_empty() {
                return Err(CodebookError::MalformedDocument(format!(
                    "rule on `{}` lists no options",
                    rule.when_question
                )));
            }
            let when = &doc.questions[wi];
            if let Some(bad) = rule
                .when_option_any_of
                .iter()
                .find(|o| when.option(o).is_none())
            {
                return Err(CodebookError::MalformedDocument(format!(
                    "rule references unknown option `{bad}` of `{}`",
                    when.id
                )));
            }
            if &rule.then_ask == root {
                return Err(CodebookError::CyclicBranching(format!(
                    "rule on `{}` leads back to root question `{root}`",
                    rule.when_question
                )));
            }
            conditional.insert(rule.then_ask.clone());
        }

        detect_cycle(&doc.questions, &doc.rules, &question_index)?;

        Ok(Codebook {
            version: doc.version,
            feature_groups,
            questions: doc.questions,
            rules: doc.rules,
            question_index,
            conditional,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn rules(&self) -> &[BranchRule] {
        &self.rules
    }

    pub fn feature_groups(&self) -> &[FeatureGroup] {
        &self.feature_groups
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_index.get(id).map(|&i| &self.questions[i])
    }

    pub fn root(&self) -> &Question {
        &self.questions[0]
    }

    /// True when the question is only asked through a branch rule.
    pub fn is_conditional(&self, question_id: &str) -> bool {
        self.conditional.contains(question_id)
    }

    pub fn option_count(&self) -> usize {
        self.questions.iter().map(|q| q.options.len()).sum()
    }

    /// All feature keys in codebook order.
    pub fn feature_keys(&self) -> impl Iterator<Item = &str> {
        self.questions
            .iter()
            .flat_map(|q| q.options.iter().map(|o| o.feature_key.as_str()))
    }

    /// Looks up the question and option carrying a feature key.
    pub fn feature(&self, feature_key: &str) -> Option<(&Question, &AnswerOption)> {
        self.questions.iter().find_map(|q| {
            q.options
                .iter()
                .find(|o| o.feature_key == feature_key)
                .map(|o| (q, o))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    fn reachable_set(&self, selections: &Selections) -> HashSet<&str> {
        let mut reachable: HashSet<&str> = self
            .questions
            .iter()
            .filter(|q| !self.conditional.contains(&q.id))
            .map(|q| q.id.as_str())
            .collect();
        loop {
            let mut grew = false;
            for rule in &self.rules {
                if reachable.contains(rule.then_ask.as_str())
                    || !reachable.contains(rule.when_question.as_str())
                {
                    continue;
                }
                let fired = selections
                    .get(&rule.when_question)
                    .is_some_and(|chosen| !chosen.is_disjoint(&rule.when_option_any_of));
                if fired {
                    reachable.insert(rule.then_ask.as_str());
                    grew = true;
                }
            }
            if !grew {
                return reachable;
            }
        }
    }

    /// Questions that must be answered under `partial`, in codebook order.
    ///
    /// Selections on questions that are themselves unreachable do not fire
    /// rules.
    pub fn reachable_questions(&self, partial: &Selections) -> Result<Vec<&Question>, CodebookError> {
        for (qid, chosen) in partial {
            let q = self
                .question(qid)
                .ok_or_else(|| CodebookError::UnknownQuestionId(qid.clone()))?;
            if let Some(bad) = chosen.iter().find(|o| q.option(o).is_none()) {
                return Err(CodebookError::UnknownOptionId {
                    question: qid.clone(),
                    option: bad.clone(),
                });
            }
        }
        let reachable = self.reachable_set(partial);
        Ok(self
            .questions
            .iter()
            .filter(|q| reachable.contains(q.id.as_str()))
            .collect())
    }

    /// Reachable questions that have no selection yet.
    pub fn pending_questions(&self, partial: &Selections) -> Result<Vec<&Question>, CodebookError> {
        Ok(self
            .reachable_questions(partial)?
            .into_iter()
            .filter(|q| partial.get(&q.id).is_none_or(|s| s.is_empty()))
            .collect())
    }

    /// Checks a record against the codebook. An empty list means valid.
    pub fn validate_record(&self, rec: &AnnotationRecord) -> Vec<Violation> {
        let mut out = Vec::new();
        if rec.image_id.trim().is_empty() {
            out.push(Violation::new(None, ViolationKind::MissingField, "image_id is empty"));
        }
        if rec.annotator_id.trim().is_empty() {
            out.push(Violation::new(None, ViolationKind::MissingField, "annotator_id is empty"));
        }

        let mut known = Selections::new();
        for (qid, chosen) in &rec.selections {
            let Some(q) = self.question(qid) else {
                out.push(Violation::new(
                    Some(qid),
                    ViolationKind::UnknownQuestion,
                    format!("unknown question `{qid}`"),
                ));
                continue;
            };
            let mut ok = BTreeSet::new();
            for o in chosen {
                if q.option(o).is_some() {
                    ok.insert(o.clone());
                } else {
                    out.push(Violation::new(
                        Some(qid),
                        ViolationKind::UnknownOption,
                        format!("unknown option `{o}`"),
                    ));
                }
            }
            known.insert(qid.clone(), ok);
        }

        let reachable = self.reachable_set(&known);
        for q in &self.questions {
            let chosen = known.get(&q.id);
            let answered = chosen.is_some_and(|c| !c.is_empty());
            if !reachable.contains(q.id.as_str()) {
                if answered {
                    out.push(Violation::new(
                        Some(&q.id),
                        ViolationKind::UnreachableAnswer,
                        format!("unreachable answer: `{}` is not asked under these selections", q.id),
                    ));
                }
                continue;
            }
            let Some(chosen) = chosen.filter(|c| !c.is_empty()) else {
                out.push(Violation::new(
                    Some(&q.id),
                    ViolationKind::MissingAnswer,
                    format!("missing required question `{}`", q.id),
                ));
                continue;
            };
            match q.kind {
                QuestionKind::Exclusive if chosen.len() != 1 => out.push(Violation::new(
                    Some(&q.id),
                    ViolationKind::Multiplicity,
                    format!("`{}` takes exactly one option, got {}", q.id, chosen.len()),
                )),
                QuestionKind::Multi if chosen.len() > 1 => {
                    if let Some(sole) = q
                        .options
                        .iter()
                        .find(|o| o.exclusive && chosen.contains(&o.id))
                    {
                        out.push(Violation::new(
                            Some(&q.id),
                            ViolationKind::Multiplicity,
                            format!("`{}` cannot be combined with other options", sole.id),
                        ));
                    }
                }
                _ => {}
            }
        }
        out
    }
}

fn detect_cycle(
    questions: &[Question],
    rules: &[BranchRule],
    index: &HashMap<String, usize>,
) -> Result<(), CodebookError> {
    let mut adj = vec![Vec::new(); questions.len()];
    for r in rules {
        adj[index[&r.when_question]].push(index[&r.then_ask]);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; questions.len()];
    for start in 0..questions.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some((node, next)) = stack.pop() {
            if next < adj[node].len() {
                stack.push((node, next + 1));
                let child = adj[node][next];
                match state[child] {
                    0 => {
                        state[child] = 1;
                        stack.push((child, 0));
                    }
                    1 => {
                        return Err(CodebookError::CyclicBranching(format!(
                            "`{}` is reachable from itself",
                            questions[child].id
                        )))
                    }
                    _ => {}
                }
            } else {
                state[node] = 2;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingField,
    MissingAnswer,
    UnreachableAnswer,
    Multiplicity,
    UnknownQuestion,
    UnknownOption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(question: Option<&String>, kind: ViolationKind, message: impl Into<String>) -> Self {
        Violation {
            question: question.cloned(),
            kind,
            message: message.into(),
        }
    }
}

/// Builds a selections map from `(question, [options])` pairs.
pub fn selections<'a, I, O>(pairs: I) -> Selections
where
    I: IntoIterator<Item = (&'a str, O)>,
    O: IntoIterator<Item = &'a str>,
{
    pairs
        .into_iter()
        .map(|(q, opts)| (q.to_string(), opts.into_iter().map(str::to_string).collect()))
        .collect()
}
